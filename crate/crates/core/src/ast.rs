//! Syntax tree for `.tg` programs.
//!
//! The same tree is produced by the parser, rewritten by the differentiating
//! transforms and the optimizer, and printed back to source. Statement line
//! numbers are carried for diagnostics but are ignored by equality, so a
//! printed-then-reparsed program compares equal to the original.

use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub functions: Vec<FunctionDef>,
}

impl Program {
    pub fn new(functions: Vec<FunctionDef>) -> Self {
        Program { functions }
    }

    pub fn function(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut FunctionDef> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn has_function(&self, name: &str) -> bool {
        self.function(name).is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub name: String,
    pub params: Vec<Param>,
    pub body: Vec<Stmt>,
}

impl FunctionDef {
    pub fn new(name: impl Into<String>, params: Vec<Param>, body: Vec<Stmt>) -> Self {
        FunctionDef {
            name: name.into(),
            params,
            body,
        }
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// The expressions of the final `return`, if the body ends with one.
    pub fn final_return(&self) -> Option<&[Expr]> {
        match self.body.iter().rev().find(|s| !s.is_comment()) {
            Some(Stmt {
                kind: StmtKind::Return(values),
                ..
            }) => Some(values),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub default: Option<Expr>,
}

impl Param {
    pub fn new(name: impl Into<String>) -> Self {
        Param {
            name: name.into(),
            default: None,
        }
    }

    pub fn with_default(name: impl Into<String>, default: Expr) -> Self {
        Param {
            name: name.into(),
            default: Some(default),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stmt {
    /// 1-based source line, 0 for generated statements.
    pub line: u32,
    /// Set on statements spliced in from an `insert_grad_of` block; the
    /// optimizer treats them as having side effects and never removes them.
    pub pinned: bool,
    pub kind: StmtKind,
}

impl PartialEq for Stmt {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Assign {
        target: String,
        value: Expr,
    },
    IndexAssign {
        target: String,
        index: Expr,
        value: Expr,
    },
    If {
        cond: Expr,
        then_body: Vec<Stmt>,
        else_body: Vec<Stmt>,
    },
    While {
        cond: Expr,
        body: Vec<Stmt>,
    },
    ForRange {
        var: String,
        count: Expr,
        body: Vec<Stmt>,
    },
    Return(Vec<Expr>),
    ExprStmt(Expr),
    /// `with insert_grad_of(var) as alias:` block.
    InsertGradOf {
        var: String,
        alias: String,
        body: Vec<Stmt>,
    },
    Comment(String),
    /// Recognised source construct that the language does not support
    /// (`break`, `try`, keyword arguments, ...). Kept so validation can
    /// report it; `text` holds the raw, dedented source lines.
    Unsupported {
        construct: String,
        text: Vec<String>,
    },
}

impl Stmt {
    pub fn new(kind: StmtKind) -> Self {
        Stmt {
            line: 0,
            pinned: false,
            kind,
        }
    }

    pub fn at(line: u32, kind: StmtKind) -> Self {
        Stmt {
            line,
            pinned: false,
            kind,
        }
    }

    pub fn assign(target: impl Into<String>, value: Expr) -> Self {
        Stmt::new(StmtKind::Assign {
            target: target.into(),
            value,
        })
    }

    pub fn index_assign(target: impl Into<String>, index: Expr, value: Expr) -> Self {
        Stmt::new(StmtKind::IndexAssign {
            target: target.into(),
            index,
            value,
        })
    }

    pub fn ret(values: Vec<Expr>) -> Self {
        Stmt::new(StmtKind::Return(values))
    }

    pub fn expr(e: Expr) -> Self {
        Stmt::new(StmtKind::ExprStmt(e))
    }

    pub fn comment(text: impl Into<String>) -> Self {
        let text: String = text.into();
        Stmt::new(StmtKind::Comment(text.replace('\n', " ")))
    }

    pub fn if_(cond: Expr, then_body: Vec<Stmt>, else_body: Vec<Stmt>) -> Self {
        Stmt::new(StmtKind::If {
            cond,
            then_body,
            else_body,
        })
    }

    pub fn while_(cond: Expr, body: Vec<Stmt>) -> Self {
        Stmt::new(StmtKind::While { cond, body })
    }

    pub fn for_range(var: impl Into<String>, count: Expr, body: Vec<Stmt>) -> Self {
        Stmt::new(StmtKind::ForRange {
            var: var.into(),
            count,
            body,
        })
    }

    pub fn is_comment(&self) -> bool {
        matches!(self.kind, StmtKind::Comment(_))
    }

    /// Nested statement lists, in source order.
    pub fn children(&self) -> Vec<&Vec<Stmt>> {
        match &self.kind {
            StmtKind::If {
                then_body,
                else_body,
                ..
            } => vec![then_body, else_body],
            StmtKind::While { body, .. }
            | StmtKind::ForRange { body, .. }
            | StmtKind::InsertGradOf { body, .. } => vec![body],
            _ => vec![],
        }
    }

    pub fn children_mut(&mut self) -> Vec<&mut Vec<Stmt>> {
        match &mut self.kind {
            StmtKind::If {
                then_body,
                else_body,
                ..
            } => vec![then_body, else_body],
            StmtKind::While { body, .. }
            | StmtKind::ForRange { body, .. }
            | StmtKind::InsertGradOf { body, .. } => vec![body],
            _ => vec![],
        }
    }

    /// Expressions evaluated directly by this statement (not by nested ones).
    pub fn exprs(&self) -> Vec<&Expr> {
        match &self.kind {
            StmtKind::Assign { value, .. } => vec![value],
            StmtKind::IndexAssign { index, value, .. } => vec![index, value],
            StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => vec![cond],
            StmtKind::ForRange { count, .. } => vec![count],
            StmtKind::Return(values) => values.iter().collect(),
            StmtKind::ExprStmt(e) => vec![e],
            _ => vec![],
        }
    }

    pub fn exprs_mut(&mut self) -> Vec<&mut Expr> {
        match &mut self.kind {
            StmtKind::Assign { value, .. } => vec![value],
            StmtKind::IndexAssign { index, value, .. } => vec![index, value],
            StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => vec![cond],
            StmtKind::ForRange { count, .. } => vec![count],
            StmtKind::Return(values) => values.iter_mut().collect(),
            StmtKind::ExprStmt(e) => vec![e],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Gt => ">",
            BinOp::Le => "<=",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
        }
    }

    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Lt | BinOp::Gt | BinOp::Le | BinOp::Ge | BinOp::Eq => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div => 3,
        }
    }

    pub fn is_comparison(self) -> bool {
        self.precedence() == 1
    }

    /// Name of the primitive whose templates differentiate this operator.
    pub fn primitive(self) -> Option<&'static str> {
        match self {
            BinOp::Add => Some("add"),
            BinOp::Sub => Some("subtract"),
            BinOp::Mul => Some("multiply"),
            BinOp::Div => Some("divide"),
            _ => None,
        }
    }
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Name(String),
    Float(f64),
    Int(i64),
    Bool(bool),
    None,
    /// String literal; only meaningful as a tape label or a `print` argument.
    Str(String),
    BinOp {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        func: String,
        args: Vec<Expr>,
    },
    Index {
        base: Box<Expr>,
        index: Box<Expr>,
    },
    Neg(Box<Expr>),
}

impl Expr {
    pub fn name(n: impl Into<String>) -> Expr {
        Expr::Name(n.into())
    }

    pub fn call(func: impl Into<String>, args: Vec<Expr>) -> Expr {
        Expr::Call {
            func: func.into(),
            args,
        }
    }

    pub fn binop(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::BinOp {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn index(base: Expr, index: Expr) -> Expr {
        Expr::Index {
            base: Box::new(base),
            index: Box::new(index),
        }
    }

    pub fn neg(e: Expr) -> Expr {
        Expr::Neg(Box::new(e))
    }

    pub fn str(s: impl Into<String>) -> Expr {
        Expr::Str(s.into())
    }

    pub fn as_name(&self) -> Option<&str> {
        match self {
            Expr::Name(n) => Some(n),
            _ => None,
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(
            self,
            Expr::Float(_) | Expr::Int(_) | Expr::Bool(_) | Expr::None | Expr::Str(_)
        )
    }

    /// Names or literals: the operands allowed after normalization.
    pub fn is_atom(&self) -> bool {
        matches!(self, Expr::Name(_)) || self.is_literal()
    }

    pub fn is_call_to(&self, name: &str) -> bool {
        matches!(self, Expr::Call { func, .. } if func == name)
    }

    /// Every variable name read by this expression. Callee names are not
    /// variables and are excluded.
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    pub fn collect_vars(&self, out: &mut BTreeSet<String>) {
        self.walk(&mut |e| {
            if let Expr::Name(n) = e {
                out.insert(n.clone());
            }
        });
    }

    pub fn mentions(&self, name: &str) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if matches!(e, Expr::Name(n) if n == name) {
                found = true;
            }
        });
        found
    }

    /// Pre-order visit of this expression and all subexpressions.
    pub fn walk(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::BinOp { lhs, rhs, .. } => {
                lhs.walk(f);
                rhs.walk(f);
            }
            Expr::Call { args, .. } => args.iter().for_each(|a| a.walk(f)),
            Expr::Index { base, index } => {
                base.walk(f);
                index.walk(f);
            }
            Expr::Neg(e) => e.walk(f),
            _ => {}
        }
    }

    /// Post-order mutable visit.
    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Expr)) {
        match self {
            Expr::BinOp { lhs, rhs, .. } => {
                lhs.walk_mut(f);
                rhs.walk_mut(f);
            }
            Expr::Call { args, .. } => args.iter_mut().for_each(|a| a.walk_mut(f)),
            Expr::Index { base, index } => {
                base.walk_mut(f);
                index.walk_mut(f);
            }
            Expr::Neg(e) => e.walk_mut(f),
            _ => {}
        }
        f(self);
    }

    pub fn calls(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let Expr::Call { func, .. } = e {
                out.push(func.clone());
            }
        });
        out
    }

    /// Replace every occurrence of variable `from` with `to`.
    pub fn rename(&mut self, from: &str, to: &str) {
        self.walk_mut(&mut |e| {
            if let Expr::Name(n) = e {
                if n == from {
                    *n = to.to_string();
                }
            }
        });
    }
}

/// Pre-order walk over every statement in a body, including nested ones.
pub fn walk_stmts<'a>(body: &'a [Stmt], f: &mut dyn FnMut(&'a Stmt)) {
    for s in body {
        f(s);
        for child in s.children() {
            walk_stmts(child, f);
        }
    }
}

pub fn walk_stmts_mut(body: &mut [Stmt], f: &mut dyn FnMut(&mut Stmt)) {
    for s in body.iter_mut() {
        f(s);
        for child in s.children_mut() {
            walk_stmts_mut(child, f);
        }
    }
}

/// Every variable name appearing anywhere in a function, parameters included.
pub fn function_names(f: &FunctionDef) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = f.params.iter().map(|p| p.name.clone()).collect();
    walk_stmts(&f.body, &mut |s| {
        for e in s.exprs() {
            e.collect_vars(&mut out);
        }
        match &s.kind {
            StmtKind::Assign { target, .. } | StmtKind::IndexAssign { target, .. } => {
                out.insert(target.clone());
            }
            StmtKind::ForRange { var, .. } => {
                out.insert(var.clone());
            }
            StmtKind::InsertGradOf { var, alias, .. } => {
                out.insert(var.clone());
                out.insert(alias.clone());
            }
            _ => {}
        }
    });
    out
}

/// Variables assigned anywhere in `body` (assignment and loop targets), in
/// first-assignment order.
pub fn assigned_vars(body: &[Stmt]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    walk_stmts(body, &mut |s| {
        let target = match &s.kind {
            StmtKind::Assign { target, .. } | StmtKind::IndexAssign { target, .. } => {
                Some(target)
            }
            StmtKind::ForRange { var, .. } => Some(var),
            _ => None,
        };
        if let Some(t) = target {
            if seen.insert(t.clone()) {
                out.push(t.clone());
            }
        }
    });
    out
}
