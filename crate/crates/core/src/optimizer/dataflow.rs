//! Dataflow facts over a [`Cfg`]: live variables, known constants,
//! available copies and reaching definitions.
//!
//! Forward analyses visit nodes in id order. Because nodes are numbered
//! in pre-order, every predecessor with a smaller id has been visited
//! already; the only predecessors with larger ids are loop back-edges,
//! and those are accounted for by killing every fact about a variable
//! the loop body assigns.

use std::collections::{BTreeMap, BTreeSet};

use super::cfg::{Cfg, NodeKind};
use crate::ast::Expr;
use crate::kernels;
use crate::value::Value;

/// A compile-time constant. `Zero` is the lazy zero gradient produced by
/// `init_grad`.
#[derive(Debug, Clone, Copy)]
pub enum Const {
    Float(f64),
    Int(i64),
    Bool(bool),
    Zero,
}

impl PartialEq for Const {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Const::Float(a), Const::Float(b)) => a.to_bits() == b.to_bits(),
            (Const::Int(a), Const::Int(b)) => a == b,
            (Const::Bool(a), Const::Bool(b)) => a == b,
            (Const::Zero, Const::Zero) => true,
            _ => false,
        }
    }
}

impl Const {
    pub fn to_value(self) -> Value {
        match self {
            Const::Float(x) => Value::Float(x),
            Const::Int(x) => Value::Int(x),
            Const::Bool(x) => Value::Bool(x),
            Const::Zero => Value::Zero,
        }
    }

    pub fn from_value(v: &Value) -> Option<Const> {
        match v {
            Value::Float(x) if x.is_finite() => Some(Const::Float(*x)),
            Value::Int(x) => Some(Const::Int(*x)),
            Value::Bool(x) => Some(Const::Bool(*x)),
            Value::Zero => Some(Const::Zero),
            _ => None,
        }
    }

    /// Source expression for the constant; `None` for the lazy zero, which
    /// has no literal form.
    pub fn to_expr(self) -> Option<Expr> {
        let lit = |e: Expr, neg: bool| if neg { Expr::neg(e) } else { e };
        match self {
            Const::Float(x) => Some(lit(Expr::Float(x.abs()), x.is_sign_negative())),
            Const::Int(x) if x == i64::MIN => None,
            Const::Int(x) => Some(lit(Expr::Int(x.abs()), x < 0)),
            Const::Bool(x) => Some(Expr::Bool(x)),
            Const::Zero => None,
        }
    }
}

/// Lattice element of a variable that has a definition on every path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lat {
    Const(Const),
    /// Not a constant.
    Nac,
}

pub type ConstState = BTreeMap<String, Lat>;

/// Constant value of `e` under `state`, if known.
pub fn const_of(e: &Expr, state: &ConstState) -> Option<Const> {
    match e {
        Expr::Float(x) => Const::from_value(&Value::Float(*x)),
        Expr::Int(x) => Some(Const::Int(*x)),
        Expr::Bool(x) => Some(Const::Bool(*x)),
        Expr::Name(n) => match state.get(n) {
            Some(Lat::Const(c)) => Some(*c),
            _ => None,
        },
        Expr::Neg(inner) => {
            let c = const_of(inner, state)?;
            Const::from_value(&kernels::negative(&c.to_value()).ok()?)
        }
        Expr::Call { func, .. } if func == "init_grad" => Some(Const::Zero),
        Expr::BinOp { op, lhs, rhs } => {
            let (a, b) = (const_of(lhs, state)?, const_of(rhs, state)?);
            Const::from_value(&kernels::binop(*op, &a.to_value(), &b.to_value()).ok()?)
        }
        _ => None,
    }
}

fn meet_consts(states: &[&ConstState]) -> ConstState {
    let Some((first, rest)) = states.split_first() else {
        return ConstState::new();
    };
    let mut out = (*first).clone();
    for s in rest {
        for (k, v) in out.iter_mut() {
            if s.get(k) != Some(v) {
                *v = Lat::Nac;
            }
        }
        for k in s.keys() {
            out.entry(k.clone()).or_insert(Lat::Nac);
        }
    }
    out
}

/// Predecessors reached by forward edges only.
fn forward_preds(cfg: &Cfg, n: usize) -> impl Iterator<Item = usize> + '_ {
    cfg.pred[n].iter().copied().filter(move |&p| p < n)
}

fn is_loop(kind: &NodeKind) -> bool {
    matches!(kind, NodeKind::While(_) | NodeKind::ForRange { .. })
}

/// Known constants on entry to each node.
pub fn constants(cfg: &Cfg, params: &[String]) -> Vec<ConstState> {
    let n = cfg.nodes.len();
    let mut ins: Vec<ConstState> = Vec::with_capacity(n);
    let mut outs: Vec<ConstState> = Vec::with_capacity(n);
    for id in 0..n {
        let mut state = if id == cfg.entry {
            params.iter().map(|p| (p.clone(), Lat::Nac)).collect()
        } else {
            let preds: Vec<&ConstState> = forward_preds(cfg, id).map(|p| &outs[p]).collect();
            meet_consts(&preds)
        };
        let node = &cfg.nodes[id];
        if is_loop(&node.kind) {
            for v in &node.loop_defs {
                state.insert(v.clone(), Lat::Nac);
            }
        }
        ins.push(state.clone());
        match &node.kind {
            NodeKind::Assign { target, value } => {
                let lat = const_of(value, &state).map_or(Lat::Nac, Lat::Const);
                state.insert(target.clone(), lat);
            }
            _ => {
                for d in &node.defs {
                    state.insert(d.clone(), Lat::Nac);
                }
            }
        }
        outs.push(state);
    }
    ins
}

/// Copies `a = b` (as `(a, b)`) that hold on entry to each node.
pub fn available_copies(cfg: &Cfg) -> Vec<BTreeSet<(String, String)>> {
    let n = cfg.nodes.len();
    let mut ins = Vec::with_capacity(n);
    let mut outs: Vec<BTreeSet<(String, String)>> = Vec::with_capacity(n);
    for id in 0..n {
        let mut preds = forward_preds(cfg, id);
        let mut state = match preds.next() {
            Some(p) => {
                let mut s = outs[p].clone();
                for q in preds {
                    s = s.intersection(&outs[q]).cloned().collect();
                }
                s
            }
            None => BTreeSet::new(),
        };
        let node = &cfg.nodes[id];
        let kill = |state: &mut BTreeSet<(String, String)>, vars: &BTreeSet<String>| {
            state.retain(|(a, b)| !vars.contains(a) && !vars.contains(b));
        };
        if is_loop(&node.kind) {
            kill(&mut state, &node.loop_defs);
        }
        ins.push(state.clone());
        kill(&mut state, &node.defs);
        if let NodeKind::Assign { target, value: Expr::Name(src) } = &node.kind {
            if target != src {
                state.insert((target.clone(), src.clone()));
            }
        }
        outs.push(state);
    }
    ins
}

/// Variables that are killed (certainly overwritten) by a node.
fn kills(kind: &NodeKind, defs: &BTreeSet<String>) -> BTreeSet<String> {
    match kind {
        NodeKind::Assign { .. } => defs.clone(),
        _ => BTreeSet::new(),
    }
}

/// Variables live on exit from each node. Nodes in `ignore` are treated as
/// already removed: they neither use nor define anything.
pub fn live_out(cfg: &Cfg, ignore: &BTreeSet<usize>) -> Vec<BTreeSet<String>> {
    let n = cfg.nodes.len();
    let mut live_in: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n + 1];
    let mut out: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    loop {
        let mut changed = false;
        for id in (0..n).rev() {
            let mut o = BTreeSet::new();
            for &s in &cfg.succ[id] {
                o.extend(live_in[s].iter().cloned());
            }
            let node = &cfg.nodes[id];
            let li = if ignore.contains(&id) {
                o.clone()
            } else {
                let k = kills(&node.kind, &node.defs);
                let mut li: BTreeSet<String> = o.difference(&k).cloned().collect();
                li.extend(node.uses.iter().cloned());
                li
            };
            if li != live_in[id] {
                live_in[id] = li;
                changed = true;
            }
            out[id] = o;
        }
        if !changed {
            return out;
        }
    }
}

/// Definitions `(variable, node)` reaching the entry of each node.
pub fn reaching_definitions(cfg: &Cfg) -> Vec<BTreeSet<(String, usize)>> {
    let n = cfg.nodes.len();
    let mut ins: Vec<BTreeSet<(String, usize)>> = vec![BTreeSet::new(); n];
    let mut outs: Vec<BTreeSet<(String, usize)>> = vec![BTreeSet::new(); n];
    loop {
        let mut changed = false;
        for id in 0..n {
            let mut i = BTreeSet::new();
            for &p in &cfg.pred[id] {
                i.extend(outs[p].iter().cloned());
            }
            let node = &cfg.nodes[id];
            let k = kills(&node.kind, &node.defs);
            let mut o: BTreeSet<(String, usize)> = i.iter().filter(|(v, _)| !k.contains(v)).cloned().collect();
            for d in &node.defs {
                o.insert((d.clone(), id));
            }
            if o != outs[id] {
                outs[id] = o;
                changed = true;
            }
            ins[id] = i;
        }
        if !changed {
            return ins;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;

    fn cfg_of(src: &str) -> (Cfg, Vec<String>) {
        let p = parse(src).unwrap();
        let f = &p.functions[0];
        (Cfg::build(&f.body), f.param_names().iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn constants_fold_through_assignments() {
        let (cfg, params) = cfg_of("def f(x):\n    c = 2.0\n    d = c * 3.0\n    g = init_grad(x)\n    return d + x\n");
        let facts = constants(&cfg, &params);
        assert_eq!(facts[2]["d"], Lat::Const(Const::Float(6.0)));
        assert_eq!(facts[3]["g"], Lat::Const(Const::Zero));
        assert_eq!(facts[3]["x"], Lat::Nac);
    }

    #[test]
    fn constants_are_killed_at_loop_heads_and_merged_at_joins() {
        let src = "def f(x):\n    a = 1.0\n    b = 1.0\n    if x > 0.0:\n        b = 2.0\n    while a < x:\n        a = a + 1.0\n    return a + b\n";
        let (cfg, params) = cfg_of(src);
        let facts = constants(&cfg, &params);
        // Nodes: a=, b=, if, b=2.0, while, a=a+1, return.
        assert_eq!(facts[4]["b"], Lat::Nac);
        assert_eq!(facts[5]["a"], Lat::Nac);
        let (cfg, params) = cfg_of("def f(x):\n    b = 1.0\n    if x > 0.0:\n        y = x\n    return b\n");
        assert_eq!(constants(&cfg, &params)[3]["b"], Lat::Const(Const::Float(1.0)));
    }

    #[test]
    fn copies_are_killed_by_redefinition() {
        let (cfg, _) = cfg_of("def f(x):\n    a = x\n    b = a\n    x = x * 2.0\n    return b\n");
        let facts = available_copies(&cfg);
        assert!(facts[2].contains(&("b".into(), "a".into())));
        assert!(facts[2].contains(&("a".into(), "x".into())));
        assert!(!facts[3].contains(&("a".into(), "x".into())));
        assert!(facts[3].contains(&("b".into(), "a".into())));
    }

    #[test]
    fn liveness_follows_loops() {
        let (cfg, _) = cfg_of("def f(x):\n    s = 0.0\n    t = 5.0\n    for i in range(3):\n        s = s + x\n    return s\n");
        let live = live_out(&cfg, &BTreeSet::new());
        assert!(!live[1].contains("t"));
        assert!(live[0].contains("s"));
        assert!(live[3].contains("s") && live[3].contains("x"));
    }

    #[test]
    fn reaching_definitions_merge_branches() {
        let (cfg, _) = cfg_of("def f(x):\n    y = 1.0\n    if x > 0.0:\n        y = 2.0\n    return y\n");
        let facts = reaching_definitions(&cfg);
        let ys: Vec<usize> = facts[3].iter().filter(|(v, _)| v == "y").map(|(_, n)| *n).collect();
        assert_eq!(ys, vec![0, 2]);
    }
}
