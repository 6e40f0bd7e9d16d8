//! Dead-code elimination that follows values through the tape.
//!
//! A push and a pop sharing a label inside one function form a pair: the
//! pop reads what the push wrote, so the push is needed exactly when the
//! pop is. Tape operations whose partner lives in another function are
//! treated as side effects.

use std::collections::BTreeSet;

use super::cfg::{remove_nodes, tape_ops, Cfg, NodeKind};
use super::dataflow::reaching_definitions;
use crate::ast::*;

/// Ids of the nodes that can be removed.
///
/// Mark and sweep: roots are returns, pinned statements, inserted-code
/// blocks and statements with side effects (prints, user-function calls,
/// tape operations shared with other functions). A definition is needed
/// when it reaches a use in a needed statement; a compound statement is
/// needed when anything inside it is, and a pop is needed together with
/// its push.
pub fn dead_nodes(cfg: &Cfg, is_user_fn: &dyn Fn(&str) -> bool) -> BTreeSet<usize> {
    let n = cfg.nodes.len();
    let internal = |label: &str| cfg.paired(label).is_some();
    let has_effect = |e: &Expr| {
        e.calls().iter().any(|c| is_user_fn(c) || c == "print") || tape_ops(e).iter().any(|(l, _)| !internal(l))
    };
    let mut partner = vec![None; n];
    for link in cfg.tape.values() {
        if let (&[push], &[pop]) = (link.pushes.as_slice(), link.pops.as_slice()) {
            partner[pop] = Some(push);
        }
    }
    let mut parent = vec![None; n];
    for (id, node) in cfg.nodes.iter().enumerate() {
        for &c in &node.inner {
            // Innermost enclosing statement wins: later (deeper) ids
            // overwrite earlier ones.
            parent[c] = Some(id);
        }
    }

    let mut needed = vec![false; n];
    let mut work = Vec::new();
    for (id, node) in cfg.nodes.iter().enumerate() {
        let root = node.pinned
            || match &node.kind {
                NodeKind::Return(_) | NodeKind::Opaque => true,
                NodeKind::Assign { value, .. } => has_effect(value),
                NodeKind::Expr(e) => {
                    has_effect(e) || !matches!(e, Expr::Call { func, .. } if func == "push")
                }
                _ => false,
            };
        if root {
            needed[id] = true;
            work.push(id);
        }
    }
    let reaching = reaching_definitions(cfg);
    while let Some(id) = work.pop() {
        let mut deps: Vec<usize> = Vec::new();
        for (v, d) in &reaching[id] {
            if cfg.nodes[id].uses.contains(v) {
                deps.push(*d);
            }
        }
        deps.extend(partner[id]);
        deps.extend(parent[id]);
        for d in deps {
            if !needed[d] {
                needed[d] = true;
                work.push(d);
            }
        }
    }
    (0..n)
        .filter(|&id| !needed[id] && !matches!(cfg.nodes[id].kind, NodeKind::Comment))
        .chain((0..n).filter(|&id| {
            // Comments go with their enclosing statement.
            matches!(cfg.nodes[id].kind, NodeKind::Comment) && parent[id].is_some_and(|p| !needed[p])
        }))
        .collect()
}

/// Remove dead statements. Returns `None` when nothing is dead.
pub fn eliminate(body: &[Stmt], is_user_fn: &dyn Fn(&str) -> bool) -> Option<Vec<Stmt>> {
    let cfg = Cfg::build(body);
    let dead = dead_nodes(&cfg, is_user_fn);
    if dead.is_empty() {
        return None;
    }
    let mut body = body.to_vec();
    remove_nodes(&mut body, &dead);
    Some(body)
}

/// Drop comments that no longer annotate anything: those followed by
/// another comment, a `return`, or the end of their block.
pub fn drop_stale_comments(body: &[Stmt]) -> Option<Vec<Stmt>> {
    fn go(body: &mut Vec<Stmt>) -> bool {
        let mut changed = false;
        for s in body.iter_mut() {
            for c in s.children_mut() {
                changed |= go(c);
            }
        }
        let old = std::mem::take(body);
        let len = old.len();
        let keep: Vec<bool> = (0..len)
            .map(|i| !old[i].is_comment() || old[i].pinned || old.get(i + 1).is_some_and(|n| !n.is_comment() && !matches!(n.kind, StmtKind::Return(_))))
            .collect();
        changed |= keep.iter().any(|k| !k);
        body.extend(old.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s));
        changed
    }
    let mut body = body.to_vec();
    go(&mut body).then_some(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;
    use crate::printer::emit_function;

    fn dce(src: &str) -> String {
        let p = parse(src).unwrap();
        let f = &p.functions[0];
        let body = eliminate(&f.body, &|n| p.has_function(n)).unwrap_or_else(|| f.body.clone());
        emit_function(&FunctionDef::new(f.name.clone(), f.params.clone(), body))
    }

    #[test]
    fn unused_temporaries_are_removed() {
        let out = dce("def f(x):\n    t = x + 1.0\n    return x\n");
        assert_eq!(out, "def f(x):\n    return x\n");
    }

    #[test]
    fn pairs_feeding_the_result_are_kept() {
        let src = "def f(x):\n    _stack = stack()\n    push(_stack, x, '_a')\n    y = pop(_stack, '_a')\n    return y\n";
        assert_eq!(dce(src), src);
    }

    #[test]
    fn dead_pops_take_their_push_along() {
        let src = "def f(x):\n    _stack = stack()\n    push(_stack, x, '_a')\n    y = pop(_stack, '_a')\n    return x\n";
        assert_eq!(dce(src), "def f(x):\n    return x\n");
    }

    #[test]
    fn side_effects_are_roots() {
        let src = "def g(a):\n    print(a)\n    return a\n\ndef f(x, s):\n    t = g(x)\n    print(x)\n    push(s, x, '_ext')\n    return x\n";
        let p = parse(src).unwrap();
        let f = &p.functions[1];
        assert!(eliminate(&f.body, &|n| p.has_function(n)).is_none());
    }

    #[test]
    fn empty_loops_and_branches_disappear() {
        let out = dce("def f(x):\n    s = 0.0\n    for i in range(3):\n        s = s + x\n    if x > 0.0:\n        t = x\n    return x\n");
        assert_eq!(out, "def f(x):\n    return x\n");
    }

    #[test]
    fn stale_comments_are_dropped() {
        let p = parse("def f(x):\n    # a\n    # b\n    y = x\n    # c\n    return y\n").unwrap();
        let body = drop_stale_comments(&p.functions[0].body).unwrap();
        let text = emit_function(&FunctionDef::new("f", vec![Param::new("x")], body));
        assert_eq!(text, "def f(x):\n    # b\n    y = x\n    return y\n");
    }
}
