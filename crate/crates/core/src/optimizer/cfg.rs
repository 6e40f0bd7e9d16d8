//! Control-flow graph of a function body.
//!
//! Nodes are statements numbered in pre-order: a compound statement gets
//! its number before the statements it contains (then-branch before
//! else-branch). The node of an `if` or loop stands for evaluating its
//! condition or advancing its counter. `insert_grad_of` blocks are opaque
//! single nodes. Basic blocks are maximal straight-line runs of nodes.

use std::collections::{BTreeMap, BTreeSet};

use crate::ast::*;

/// What a node does, as far as the analyses are concerned.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Assign { target: String, value: Expr },
    Expr(Expr),
    Return(Vec<Expr>),
    If(Expr),
    While(Expr),
    ForRange { var: String, count: Expr },
    /// `insert_grad_of` block, treated as one opaque statement.
    Opaque,
    Comment,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub defs: BTreeSet<String>,
    pub uses: BTreeSet<String>,
    pub pinned: bool,
    /// Innermost enclosing loop node.
    pub loop_parent: Option<usize>,
    /// For compound statements: node ids of the contained statements.
    pub inner: Vec<usize>,
    /// For loops: variables assigned anywhere in the body (and the loop
    /// variable).
    pub loop_defs: BTreeSet<String>,
    /// For `if` nodes: first node id of the else-branch.
    pub inner_split: usize,
}

/// Tape operations of one label within a function.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapeLink {
    pub pushes: Vec<usize>,
    pub pops: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Cfg {
    pub nodes: Vec<Node>,
    /// Successors per node; `exit` is a virtual node past the end.
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
    pub entry: usize,
    pub exit: usize,
    /// Basic blocks as lists of node ids.
    pub blocks: Vec<Vec<usize>>,
    /// Edges between basic blocks (indices into `blocks`).
    pub edges: Vec<(usize, usize)>,
    pub tape: BTreeMap<String, TapeLink>,
}

/// Tape label of a `push`/`pop` call anywhere in `e`, with whether it is a
/// push.
pub fn tape_ops(e: &Expr) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    e.walk(&mut |x| {
        if let Expr::Call { func, args } = x {
            if func == "push" || func == "pop" {
                if let Some(Expr::Str(l)) = args.last() {
                    out.push((l.clone(), func == "push"));
                }
            }
        }
    });
    out
}

impl Cfg {
    pub fn build(body: &[Stmt]) -> Cfg {
        let mut b = Builder { nodes: Vec::new() };
        let top = b.number(body, None);
        let n = b.nodes.len();
        let exit = n;
        let mut cfg = Cfg {
            nodes: b.nodes,
            succ: vec![Vec::new(); n + 1],
            pred: vec![Vec::new(); n + 1],
            entry: top.first().copied().unwrap_or(exit),
            exit,
            blocks: Vec::new(),
            edges: Vec::new(),
            tape: BTreeMap::new(),
        };
        cfg.wire(&top, exit);
        for i in 0..n {
            for &s in &cfg.succ[i].clone() {
                cfg.pred[s].push(i);
            }
        }
        cfg.form_blocks();
        for (id, node) in cfg.nodes.iter().enumerate() {
            let exprs: Vec<&Expr> = match &node.kind {
                NodeKind::Assign { value, .. } => vec![value],
                NodeKind::Expr(e) => vec![e],
                _ => vec![],
            };
            for e in exprs {
                for (label, is_push) in tape_ops(e) {
                    let link = cfg.tape.entry(label).or_default();
                    if is_push {
                        link.pushes.push(id);
                    } else {
                        link.pops.push(id);
                    }
                }
            }
        }
        cfg
    }

    fn wire(&mut self, seq: &[usize], follow: usize) {
        for (k, &id) in seq.iter().enumerate() {
            let next = seq.get(k + 1).copied().unwrap_or(follow);
            let inner = self.nodes[id].inner.clone();
            match &self.nodes[id].kind {
                NodeKind::Return(_) => self.succ[id] = vec![self.exit],
                NodeKind::If(_) => {
                    let (then_ids, else_ids) = self.split_if(id);
                    self.succ[id] = vec![
                        then_ids.first().copied().unwrap_or(next),
                        else_ids.first().copied().unwrap_or(next),
                    ];
                    self.succ[id].dedup();
                    self.wire(&then_ids, next);
                    self.wire(&else_ids, next);
                }
                NodeKind::While(_) | NodeKind::ForRange { .. } => {
                    let body = self.top_level_of(&inner);
                    self.succ[id] = vec![body.first().copied().unwrap_or(id), next];
                    self.wire(&body, id);
                }
                _ => self.succ[id] = vec![next],
            }
        }
    }

    /// Statement-level children of an `if` node, split per branch.
    fn split_if(&self, id: usize) -> (Vec<usize>, Vec<usize>) {
        let n = &self.nodes[id];
        let all = self.top_level_of(&n.inner);
        let split = n.inner_split;
        let (t, e): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&c| c < split);
        (t, e)
    }

    /// The ids in `inner` that are direct children (not nested deeper).
    fn top_level_of(&self, inner: &[usize]) -> Vec<usize> {
        let mut nested: BTreeSet<usize> = BTreeSet::new();
        for &c in inner {
            nested.extend(self.nodes[c].inner.iter().copied());
        }
        inner.iter().copied().filter(|c| !nested.contains(c)).collect()
    }

    fn form_blocks(&mut self) {
        let n = self.nodes.len();
        if n == 0 {
            return;
        }
        let mut leader = vec![false; n];
        leader[self.entry.min(n - 1)] = true;
        for i in 0..n {
            let real: Vec<usize> = self.succ[i].iter().copied().filter(|&s| s < n).collect();
            if self.succ[i].len() > 1 {
                for &s in &real {
                    leader[s] = true;
                }
            }
            for &s in &real {
                if s != i + 1 || self.pred[s].len() > 1 {
                    leader[s] = true;
                }
            }
            if self.pred[i].len() > 1 {
                leader[i] = true;
            }
            if self.succ[i] != [i + 1] && i + 1 < n {
                leader[i + 1] = true;
            }
        }
        let mut block_of = vec![0; n];
        for i in 0..n {
            if leader[i] || self.blocks.is_empty() {
                self.blocks.push(Vec::new());
            }
            let b = self.blocks.len() - 1;
            self.blocks[b].push(i);
            block_of[i] = b;
        }
        let mut edges = BTreeSet::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let last = *block.last().unwrap();
            for &s in &self.succ[last] {
                if s < n {
                    edges.insert((b, block_of[s]));
                }
            }
        }
        self.edges = edges.into_iter().collect();
    }

    /// Labels pushed and popped exactly once in this function.
    pub fn paired(&self, label: &str) -> Option<(usize, usize)> {
        match self.tape.get(label) {
            Some(TapeLink { pushes, pops }) if pushes.len() == 1 && pops.len() == 1 => Some((pushes[0], pops[0])),
            _ => None,
        }
    }
}

struct Builder {
    nodes: Vec<Node>,
}

impl Node {
    fn new(kind: NodeKind, pinned: bool, loop_parent: Option<usize>) -> Node {
        Node {
            kind,
            defs: BTreeSet::new(),
            uses: BTreeSet::new(),
            pinned,
            loop_parent,
            inner: Vec::new(),
            loop_defs: BTreeSet::new(),
            inner_split: 0,
        }
    }
}

impl Builder {
    /// Number the statements of `body` and return the ids of its direct
    /// statements.
    fn number(&mut self, body: &[Stmt], loop_parent: Option<usize>) -> Vec<usize> {
        let mut ids = Vec::new();
        for s in body {
            let id = self.nodes.len();
            ids.push(id);
            let (kind, defs, uses) = match &s.kind {
                StmtKind::Assign { target, value } => (
                    NodeKind::Assign { target: target.clone(), value: value.clone() },
                    BTreeSet::from([target.clone()]),
                    value.vars(),
                ),
                StmtKind::IndexAssign { target, index, value } => {
                    let mut uses = index.vars();
                    uses.extend(value.vars());
                    uses.insert(target.clone());
                    let v = Expr::call("setitem", vec![Expr::name(target.clone()), index.clone(), value.clone()]);
                    (NodeKind::Assign { target: target.clone(), value: v }, BTreeSet::from([target.clone()]), uses)
                }
                StmtKind::ExprStmt(e) => (NodeKind::Expr(e.clone()), BTreeSet::new(), e.vars()),
                StmtKind::Return(vs) => {
                    let mut uses = BTreeSet::new();
                    for v in vs {
                        v.collect_vars(&mut uses);
                    }
                    (NodeKind::Return(vs.clone()), BTreeSet::new(), uses)
                }
                StmtKind::If { cond, .. } => (NodeKind::If(cond.clone()), BTreeSet::new(), cond.vars()),
                StmtKind::While { cond, .. } => (NodeKind::While(cond.clone()), BTreeSet::new(), cond.vars()),
                StmtKind::ForRange { var, count, .. } => (
                    NodeKind::ForRange { var: var.clone(), count: count.clone() },
                    BTreeSet::from([var.clone()]),
                    count.vars(),
                ),
                StmtKind::InsertGradOf { var, alias, body } => {
                    // Conservatively reads and writes everything it mentions.
                    let f = FunctionDef::new("", vec![], body.clone());
                    let mut names = function_names(&f);
                    names.remove(alias);
                    names.insert(var.clone());
                    (NodeKind::Opaque, names.clone(), names)
                }
                StmtKind::Comment(_) | StmtKind::Unsupported { .. } => (NodeKind::Comment, BTreeSet::new(), BTreeSet::new()),
            };
            let mut node = Node::new(kind, s.pinned, loop_parent);
            node.defs = defs;
            node.uses = uses;
            self.nodes.push(node);
            let inner_parent = match &s.kind {
                StmtKind::While { .. } | StmtKind::ForRange { .. } => Some(id),
                _ => loop_parent,
            };
            match &s.kind {
                StmtKind::If { then_body, else_body, .. } => {
                    self.number(then_body, inner_parent);
                    self.nodes[id].inner_split = self.nodes.len();
                    self.number(else_body, inner_parent);
                }
                StmtKind::While { body, .. } | StmtKind::ForRange { body, .. } => {
                    self.number(body, inner_parent);
                }
                _ => {}
            }
            let inner: Vec<usize> = (id + 1..self.nodes.len()).collect();
            if let StmtKind::While { body, .. } | StmtKind::ForRange { body, .. } = &s.kind {
                let mut defs: BTreeSet<String> = assigned_vars(body).into_iter().collect();
                if let StmtKind::ForRange { var, .. } = &s.kind {
                    defs.insert(var.clone());
                }
                self.nodes[id].loop_defs = defs;
            }
            self.nodes[id].inner = inner;
        }
        ids
    }
}

/// Call `f` on every statement with its node id, in the numbering used by
/// [`Cfg::build`].
pub fn for_each_mut(body: &mut [Stmt], f: &mut dyn FnMut(usize, &mut Stmt)) {
    fn go(body: &mut [Stmt], next: &mut usize, f: &mut dyn FnMut(usize, &mut Stmt)) {
        for s in body {
            let id = *next;
            *next += 1;
            f(id, s);
            match &mut s.kind {
                StmtKind::If { then_body, else_body, .. } => {
                    go(then_body, next, f);
                    go(else_body, next, f);
                }
                StmtKind::While { body, .. } | StmtKind::ForRange { body, .. } => go(body, next, f),
                _ => {}
            }
        }
    }
    let mut next = 0;
    go(body, &mut next, f);
}

/// Remove the statements whose node id is in `drop`, keeping the numbering
/// of the remaining ones consistent with the original body.
pub fn remove_nodes(body: &mut Vec<Stmt>, drop: &BTreeSet<usize>) {
    fn go(body: &mut Vec<Stmt>, next: &mut usize, drop: &BTreeSet<usize>) {
        let old = std::mem::take(body);
        for mut s in old {
            let id = *next;
            *next += 1;
            match &mut s.kind {
                StmtKind::If { then_body, else_body, .. } => {
                    go(then_body, next, drop);
                    go(else_body, next, drop);
                }
                StmtKind::While { body: inner, .. } | StmtKind::ForRange { body: inner, .. } => go(inner, next, drop),
                _ => {}
            }
            if !drop.contains(&id) {
                body.push(s);
            }
        }
    }
    let mut next = 0;
    go(body, &mut next, drop);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;

    fn cfg_of(src: &str) -> Cfg {
        Cfg::build(&parse(src).unwrap().functions[0].body)
    }

    #[test]
    fn straight_line_is_one_block() {
        let c = cfg_of("def f(x):\n    a = x\n    b = a\n    c = b\n    return c\n");
        assert_eq!(c.blocks.len(), 1);
        assert!(c.edges.is_empty());
    }

    #[test]
    fn if_else_makes_four_blocks() {
        let c = cfg_of("def f(x):\n    if x > 0.0:\n        y = x\n    else:\n        y = -x\n    return y\n");
        assert_eq!(c.blocks, vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(c.edges, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn loops_have_back_edges() {
        let c = cfg_of("def f(x):\n    s = 0.0\n    while s < x:\n        s = s + 1.0\n        s = s * 1.5\n    return s\n");
        // s = 0.0 | while | body | return
        assert_eq!(c.succ[1], vec![2, 4]);
        assert_eq!(c.succ[3], vec![1]);
        assert!(c.edges.contains(&(2, 1)));
        assert_eq!(c.nodes[2].loop_parent, Some(1));
        assert_eq!(c.nodes[1].loop_defs, BTreeSet::from(["s".to_string()]));
    }

    #[test]
    fn tape_links_pair_push_and_pop() {
        let c = cfg_of("def f(x):\n    _stack = stack()\n    push(_stack, x, '_19429e9f')\n    y = pop(_stack, '_19429e9f')\n    return y\n");
        assert_eq!(c.paired("_19429e9f"), Some((1, 2)));
    }

    #[test]
    fn removal_keeps_numbering() {
        let mut body = parse("def f(x):\n    if x > 0.0:\n        a = x\n        b = x\n    c = x\n    return c\n").unwrap().functions[0].body.clone();
        remove_nodes(&mut body, &BTreeSet::from([1]));
        let text = crate::printer::emit_function(&FunctionDef::new("f", vec![Param::new("x")], body));
        assert_eq!(text, "def f(x):\n    if x > 0.0:\n        b = x\n    c = x\n    return c\n");
    }
}
