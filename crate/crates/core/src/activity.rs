//! Activity analysis: which variables need derivatives.
//!
//! A variable is *varied* if it depends on a differentiated parameter and
//! *useful* if a returned value depends on it; it is *active* if both hold.
//! The analysis is flow-insensitive over a normalized body, which makes it
//! a sound over-approximation. Values passed through the tape are linked
//! from each push to the pop with the same label, so generated derivatives
//! can be analyzed (and differentiated) again.

use std::collections::{BTreeMap, BTreeSet};

use crate::anf::{classify, Rhs};
use crate::ast::*;
use crate::template::NONDIFFERENTIABLE;

#[derive(Debug, Clone, Default)]
pub struct Activity {
    pub varied: BTreeSet<String>,
    pub useful: BTreeSet<String>,
    pub active: BTreeSet<String>,
    /// Tape label → name of the variable pushed under it.
    pub pushed: BTreeMap<String, String>,
}

impl Activity {
    pub fn is_active(&self, v: &str) -> bool {
        self.active.contains(v)
    }

    /// Whether an operand expression is an active variable.
    pub fn is_active_expr(&self, e: &Expr) -> bool {
        e.as_name().is_some_and(|n| self.is_active(n))
    }
}

/// Label of a `push(stack, v, 'label')` or `pop(stack, 'label')` call.
pub fn tape_label(e: &Expr) -> Option<&str> {
    match e {
        Expr::Call { func, args } if func == "push" || func == "pop" => match args.last() {
            Some(Expr::Str(l)) => Some(l),
            _ => None,
        },
        _ => None,
    }
}

/// Variables whose derivative flows into the value of an assignment's
/// right-hand side.
pub fn dependencies(value: &Expr, pushed: &BTreeMap<String, String>, is_user_fn: &dyn Fn(&str) -> bool) -> Vec<String> {
    let names = |args: &[Expr]| args.iter().filter_map(|a| a.as_name().map(str::to_string)).collect();
    match classify(value, is_user_fn) {
        Rhs::Constant => vec![],
        Rhs::Identity(x) => vec![x.as_name().unwrap().to_string()],
        Rhs::UserCall(_, args) => names(args),
        Rhs::Primitive("pop", _) => tape_label(value)
            .and_then(|l| pushed.get(l))
            .into_iter()
            .cloned()
            .collect(),
        Rhs::Primitive("index", args) => names(&args[..1]),
        Rhs::Primitive(p, _) if NONDIFFERENTIABLE.contains(&p) => vec![],
        Rhs::Primitive(_, args) => names(&args),
    }
}

/// Analyze a normalized body. `inputs` are the differentiated parameters,
/// `outputs` the returned variables.
pub fn analyze(body: &[Stmt], inputs: &[String], outputs: &[String], is_user_fn: &dyn Fn(&str) -> bool) -> Activity {
    let mut pushed = BTreeMap::new();
    walk_stmts(body, &mut |s| {
        if let StmtKind::ExprStmt(e @ Expr::Call { func, args }) = &s.kind {
            if func == "push" {
                if let (Some(l), Some(v)) = (tape_label(e), args.get(1).and_then(|a| a.as_name())) {
                    pushed.insert(l.to_string(), v.to_string());
                }
            }
        }
    });
    // Dependency edges: target <- sources.
    let mut edges: Vec<(String, Vec<String>)> = Vec::new();
    let mut skip_insert = |body: &[Stmt]| {
        fn visit(body: &[Stmt], f: &mut dyn FnMut(&Stmt)) {
            for s in body {
                f(s);
                match &s.kind {
                    StmtKind::InsertGradOf { .. } => {}
                    _ => {
                        for c in s.children() {
                            visit(c, f);
                        }
                    }
                }
            }
        }
        visit(body, &mut |s| {
            if let StmtKind::Assign { target, value } = &s.kind {
                edges.push((target.clone(), dependencies(value, &pushed, is_user_fn)));
            }
        });
    };
    skip_insert(body);

    let mut varied: BTreeSet<String> = inputs.iter().cloned().collect();
    loop {
        let before = varied.len();
        for (t, deps) in &edges {
            if !varied.contains(t) && deps.iter().any(|d| varied.contains(d)) {
                varied.insert(t.clone());
            }
        }
        if varied.len() == before {
            break;
        }
    }
    let mut useful: BTreeSet<String> = outputs.iter().cloned().collect();
    loop {
        let before = useful.len();
        for (t, deps) in &edges {
            if useful.contains(t) {
                for d in deps {
                    if !useful.contains(d) {
                        useful.insert(d.clone());
                    }
                }
            }
        }
        if useful.len() == before {
            break;
        }
    }
    let active = varied.intersection(&useful).cloned().collect();
    Activity {
        varied,
        useful,
        active,
        pushed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anf::normalize_body;
    use crate::names::NameGen;
    use crate::parser::parse;

    fn active(src: &str, wrt: &[&str]) -> BTreeSet<String> {
        let p = parse(src).unwrap();
        let mut gen = NameGen::for_program(&p);
        let body = normalize_body(&p.functions[0].body, &mut gen).unwrap();
        let ret = match &body.last().unwrap().kind {
            StmtKind::Return(v) => v.iter().map(|e| e.as_name().unwrap().to_string()).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        let wrt: Vec<String> = wrt.iter().map(|s| s.to_string()).collect();
        analyze(&body, &wrt, &ret, &|n| p.has_function(n)).active
    }

    #[test]
    fn square_is_active() {
        assert!(active("def f(x):\n    return x * x\n", &["x"]).contains("x"));
    }

    #[test]
    fn values_not_reaching_the_output_are_inactive() {
        let a = active("def f(x, c):\n    y = c + 1.0\n    return x * x\n", &["x"]);
        assert!(!a.contains("y"));
        assert!(!a.contains("c"));
    }

    #[test]
    fn lattice_program_activity() {
        let src = "def f(x, n, m, d):\n    r = zeros(d)\n    for i in range(n):\n        x = append(x, r)\n        for j in range(m):\n            y = add(x[-1], 1.0)\n            x = setitem(x, -1, y)\n    return mean(x)\n";
        let a = active(src, &["x"]);
        assert!(a.contains("x") && a.contains("y"));
        assert!(!a.contains("i") && !a.contains("j") && !a.contains("r"));
    }

    #[test]
    fn tape_links_carry_activity() {
        let src = "def f(x):\n    _stack = stack()\n    push(_stack, x, '_a')\n    y = pop(_stack, '_a')\n    return y\n";
        let a = active(src, &["x"]);
        assert!(a.contains("y") && a.contains("x"));
    }
}
