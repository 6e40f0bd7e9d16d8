//! Constant propagation, copy propagation, algebraic simplification and
//! push/pop elision.

use std::collections::BTreeSet;

use super::cfg::{for_each_mut, remove_nodes, Cfg, NodeKind};
use super::dataflow::{available_copies, const_of, constants, Const, ConstState, Lat};
use super::OptimizeOptions;
use crate::ast::*;

/// Primitives whose first argument is updated in place when the result is
/// assigned back to the same variable; that argument must keep its name.
const SELF_UPDATING: &[&str] = &["setitem", "add_at", "restore_row", "drop_last", "append"];

struct Facts<'a> {
    consts: &'a ConstState,
    copies: &'a BTreeSet<(String, String)>,
}

impl Facts<'_> {
    fn substitute(&self, e: &mut Expr) {
        e.walk_mut(&mut |x| {
            if let Expr::Name(n) = x {
                if let Some(Lat::Const(c)) = self.consts.get(n.as_str()) {
                    if let Some(lit) = c.to_expr() {
                        *x = lit;
                        return;
                    }
                }
                if let Some((_, src)) = self.copies.iter().find(|(a, _)| a == n) {
                    *n = src.clone();
                }
            }
        });
    }

    fn is_zero_grad(&self, e: &Expr) -> bool {
        matches!(const_of(e, self.consts), Some(Const::Zero))
    }
}

fn is_lit(e: &Expr, v: f64) -> bool {
    match e {
        Expr::Float(x) => *x == v && x.is_sign_positive(),
        Expr::Int(x) => *x as f64 == v,
        _ => false,
    }
}

/// Bottom-up algebraic simplification of an expression.
fn simplify_expr(e: &mut Expr, facts: &Facts, opts: &OptimizeOptions) {
    match e {
        Expr::BinOp { lhs, rhs, .. } => {
            simplify_expr(lhs, facts, opts);
            simplify_expr(rhs, facts, opts);
        }
        Expr::Call { args, .. } => args.iter_mut().for_each(|a| simplify_expr(a, facts, opts)),
        Expr::Index { base, index } => {
            simplify_expr(base, facts, opts);
            simplify_expr(index, facts, opts);
        }
        Expr::Neg(inner) => simplify_expr(inner, facts, opts),
        _ => {}
    }
    let replacement = match e {
        Expr::BinOp { op, lhs, rhs } => {
            let empty = ConstState::new();
            if lhs.is_literal() && rhs.is_literal() {
                const_of(e, &empty).and_then(Const::to_expr)
            } else {
                match op {
                    BinOp::Add if is_lit(rhs, 0.0) => Some((**lhs).clone()),
                    BinOp::Add if is_lit(lhs, 0.0) => Some((**rhs).clone()),
                    BinOp::Sub if is_lit(rhs, 0.0) => Some((**lhs).clone()),
                    BinOp::Mul if is_lit(rhs, 1.0) => Some((**lhs).clone()),
                    BinOp::Mul if is_lit(lhs, 1.0) => Some((**rhs).clone()),
                    BinOp::Div if is_lit(rhs, 1.0) => Some((**lhs).clone()),
                    BinOp::Mul if opts.unsafe_algebra && is_lit(rhs, 0.0) => Some((**rhs).clone()),
                    BinOp::Mul if opts.unsafe_algebra && is_lit(lhs, 0.0) => Some((**lhs).clone()),
                    _ => None,
                }
            }
        }
        Expr::Call { func, args } if func == "add_grad" && args.len() == 2 => {
            if facts.is_zero_grad(&args[0]) {
                Some(args[1].clone())
            } else if facts.is_zero_grad(&args[1]) {
                Some(args[0].clone())
            } else {
                None
            }
        }
        _ => None,
    };
    if let Some(r) = replacement {
        *e = r;
    }
}

/// Rewrite the expressions of one statement.
fn rewrite_stmt(s: &mut Stmt, facts: &Facts, opts: &OptimizeOptions) {
    if s.pinned {
        return;
    }
    match &mut s.kind {
        StmtKind::Assign { target, value } => {
            // Keep a self-updated first argument as a plain name.
            let keep_first = matches!(value, Expr::Call { func, args }
                if SELF_UPDATING.contains(&func.as_str()) && args.first().and_then(Expr::as_name) == Some(target.as_str()));
            if keep_first {
                if let Expr::Call { args, .. } = value {
                    for a in args.iter_mut().skip(1) {
                        facts.substitute(a);
                        simplify_expr(a, facts, opts);
                    }
                }
            } else {
                facts.substitute(value);
                simplify_expr(value, facts, opts);
            }
        }
        StmtKind::IndexAssign { index, value, .. } => {
            for e in [index, value] {
                facts.substitute(e);
                simplify_expr(e, facts, opts);
            }
        }
        StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => {
            facts.substitute(cond);
            simplify_expr(cond, facts, opts);
        }
        StmtKind::ForRange { count, .. } => {
            facts.substitute(count);
            simplify_expr(count, facts, opts);
        }
        StmtKind::Return(vs) => {
            for v in vs {
                facts.substitute(v);
                simplify_expr(v, facts, opts);
            }
        }
        StmtKind::ExprStmt(e) => {
            facts.substitute(e);
            simplify_expr(e, facts, opts);
        }
        StmtKind::InsertGradOf { .. } | StmtKind::Comment(_) | StmtKind::Unsupported { .. } => {}
    }
}

/// Propagate constants and copies and simplify expressions. Returns the
/// rewritten body.
pub fn propagate(f: &FunctionDef, opts: &OptimizeOptions) -> Vec<Stmt> {
    let cfg = Cfg::build(&f.body);
    let params: Vec<String> = f.param_names().iter().map(|s| s.to_string()).collect();
    let consts = constants(&cfg, &params);
    let copies = available_copies(&cfg);
    let mut body = f.body.clone();
    for_each_mut(&mut body, &mut |id, s| {
        let facts = Facts {
            consts: &consts[id],
            copies: &copies[id],
        };
        rewrite_stmt(s, &facts, opts);
    });
    structural(body)
}

/// Remove self-assignments and resolve branches on literal conditions.
fn structural(body: Vec<Stmt>) -> Vec<Stmt> {
    let mut out = Vec::with_capacity(body.len());
    for mut s in body {
        match &mut s.kind {
            StmtKind::Assign { target, value: Expr::Name(src) } if target == src && !s.pinned => continue,
            StmtKind::If { cond: Expr::Bool(c), then_body, else_body } => {
                let taken = if *c { std::mem::take(then_body) } else { std::mem::take(else_body) };
                out.extend(structural(taken));
                continue;
            }
            StmtKind::While { cond: Expr::Bool(false), .. } => continue,
            _ => {}
        }
        for child in s.children_mut() {
            *child = structural(std::mem::take(child));
        }
        out.push(s);
    }
    out
}

/// Replace `t = pop(S, L)` by `t = v` when the matching `push(S, v, L)`
/// runs earlier in the same loop iteration and `v` is not reassigned in
/// between; the push is removed.
pub fn elide_pops(body: &[Stmt]) -> Option<Vec<Stmt>> {
    let cfg = Cfg::build(body);
    let mut replace: Vec<(usize, String)> = Vec::new();
    let mut drop = BTreeSet::new();
    for label in cfg.tape.keys() {
        let Some((push, pop)) = cfg.paired(label) else { continue };
        let (pn, qn) = (&cfg.nodes[push], &cfg.nodes[pop]);
        let NodeKind::Expr(Expr::Call { func, args }) = &pn.kind else { continue };
        let Some(v) = args.get(1).and_then(Expr::as_name) else { continue };
        if func != "push" || args.len() != 3 {
            continue;
        }
        let NodeKind::Assign { value: Expr::Call { func: pf, args: pargs }, .. } = &qn.kind else { continue };
        if pf != "pop" || pargs.len() != 2 || pargs[0] != args[0] {
            continue;
        }
        if pn.pinned || qn.pinned || push > pop || pn.loop_parent != qn.loop_parent {
            continue;
        }
        if (push + 1..pop).any(|k| cfg.nodes[k].defs.contains(v)) {
            continue;
        }
        replace.push((pop, v.to_string()));
        drop.insert(push);
    }
    if replace.is_empty() {
        return None;
    }
    let mut body = body.to_vec();
    for_each_mut(&mut body, &mut |id, s| {
        if let Some((_, v)) = replace.iter().find(|(k, _)| *k == id) {
            if let StmtKind::Assign { value, .. } = &mut s.kind {
                *value = Expr::name(v.clone());
            }
        }
    });
    remove_nodes(&mut body, &drop);
    Some(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;
    use crate::printer::emit_function;

    fn run(src: &str, opts: &OptimizeOptions) -> String {
        let p = parse(src).unwrap();
        let mut f = p.functions[0].clone();
        f.body = propagate(&f, opts);
        emit_function(&f)
    }

    #[test]
    fn multiplicative_identity() {
        let out = run("def f(x):\n    z = x * 1.0\n    return z\n", &OptimizeOptions::default());
        assert!(out.contains("    z = x\n"), "{out}");
    }

    #[test]
    fn folds_constants() {
        let out = run("def f(x):\n    c = 2.0\n    d = c * 3.0\n    return d\n", &OptimizeOptions::default());
        assert!(out.contains("    d = 6.0\n"), "{out}");
        assert!(out.contains("    return 6.0\n"), "{out}");
    }

    #[test]
    fn multiplication_by_zero_respects_the_flag() {
        let src = "def f(x):\n    z = x * 0.0\n    return z\n";
        assert!(run(src, &OptimizeOptions::default()).contains("    z = 0.0\n"));
        let safe = OptimizeOptions { unsafe_algebra: false };
        assert!(run(src, &safe).contains("    z = x * 0.0\n"));
    }

    #[test]
    fn add_grad_with_a_zero_gradient() {
        let out = run(
            "def f(x, g):\n    bx = init_grad(x)\n    bx = add_grad(bx, g)\n    return bx\n",
            &OptimizeOptions::default(),
        );
        assert!(out.contains("    bx = g\n"), "{out}");
    }

    #[test]
    fn copies_propagate_but_not_into_in_place_updates() {
        let out = run(
            "def f(x, i):\n    a = x\n    a = setitem(a, i, 0.0)\n    b = a\n    return b\n",
            &OptimizeOptions::default(),
        );
        assert!(out.contains("    a = setitem(a, i, 0.0)\n"), "{out}");
        assert!(out.contains("    return a\n"), "{out}");
    }

    #[test]
    fn literal_branches_are_resolved() {
        let out = run(
            "def f(x):\n    c = 1.0\n    if c > 0.0:\n        y = x\n    else:\n        y = -x\n    return y\n",
            &OptimizeOptions::default(),
        );
        assert!(!out.contains("if"), "{out}");
        assert!(!out.contains("-x"), "{out}");
    }

    #[test]
    fn pops_of_unmodified_values_are_elided() {
        let src = "def f(x):\n    _stack = stack()\n    y = x * 2.0\n    push(_stack, y, '_a')\n    z = pop(_stack, '_a')\n    return z\n";
        let p = parse(src).unwrap();
        let body = elide_pops(&p.functions[0].body).unwrap();
        let text = emit_function(&FunctionDef::new("f", vec![Param::new("x")], body));
        assert!(text.contains("    z = y\n") && !text.contains("push"), "{text}");

        let blocked = "def f(x):\n    _stack = stack()\n    y = x * 2.0\n    push(_stack, y, '_a')\n    y = x\n    z = pop(_stack, '_a')\n    return z\n";
        assert!(elide_pops(&parse(blocked).unwrap().functions[0].body).is_none());
    }
}
