//! Normalization to one primitive per statement.
//!
//! Before differentiation every assignment is rewritten so that its
//! right-hand side applies a single primitive to atoms (names or literals).
//! Nested subexpressions are hoisted into temporaries named after their
//! primitive (`_dot`, `_add`, `_dot2`, ...), index assignments become
//! `setitem` calls, and a return of anything but plain names goes through
//! `_return`.

use crate::ast::*;
use crate::error::{Error, Result};
use crate::names::NameGen;

/// Primitive applied by a normalized right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub enum Rhs<'a> {
    /// A literal or an expression without derivative (comparison).
    Constant,
    /// `z = x`
    Identity(&'a Expr),
    /// Builtin kernel or gradient helper, by template name.
    Primitive(&'a str, Vec<Expr>),
    /// Call of a user-defined function.
    UserCall(&'a str, &'a [Expr]),
}

/// Classify a normalized right-hand side.
pub fn classify<'a>(e: &'a Expr, is_user_fn: &dyn Fn(&str) -> bool) -> Rhs<'a> {
    match e {
        Expr::Name(_) => Rhs::Identity(e),
        Expr::BinOp { op, lhs, rhs } => match op.primitive() {
            Some(p) => Rhs::Primitive(p, vec![(**lhs).clone(), (**rhs).clone()]),
            None => Rhs::Constant,
        },
        Expr::Neg(_) if is_negated_literal(e) => Rhs::Constant,
        Expr::Neg(inner) => Rhs::Primitive("negative", vec![(**inner).clone()]),
        Expr::Index { base, index } => Rhs::Primitive("index", vec![(**base).clone(), (**index).clone()]),
        Expr::Call { func, args } if is_user_fn(func) => Rhs::UserCall(func, args),
        Expr::Call { func, args } => Rhs::Primitive(func, args.clone()),
        _ => Rhs::Constant,
    }
}

fn is_negated_literal(e: &Expr) -> bool {
    matches!(e, Expr::Neg(inner) if matches!(**inner, Expr::Float(_) | Expr::Int(_)))
}

/// Operands that need no temporary.
pub fn is_simple(e: &Expr) -> bool {
    e.is_atom() || is_negated_literal(e)
}

fn temp_base(e: &Expr) -> String {
    match e {
        Expr::BinOp { op, .. } => format!("_{}", op.primitive().unwrap_or("compare")),
        Expr::Neg(_) => "_negative".into(),
        Expr::Index { .. } => "_index".into(),
        Expr::Call { func, .. } => format!("_{func}"),
        _ => "_tmp".into(),
    }
}

struct Normalizer<'g> {
    gen: &'g mut NameGen,
}

impl Normalizer<'_> {
    /// Reduce `e` to an atom, emitting temporaries into `out`.
    fn atom(&mut self, e: &Expr, out: &mut Vec<Stmt>, line: u32) -> Expr {
        if is_simple(e) {
            return e.clone();
        }
        let value = self.shallow(e, out, line);
        let name = self.gen.fresh(&temp_base(e));
        out.push(Stmt::at(line, StmtKind::Assign { target: name.clone(), value }));
        Expr::name(name)
    }

    /// Keep the top-level operation of `e` and reduce its operands to atoms.
    fn shallow(&mut self, e: &Expr, out: &mut Vec<Stmt>, line: u32) -> Expr {
        match e {
            Expr::BinOp { op, lhs, rhs } => {
                let l = self.atom(lhs, out, line);
                let r = self.atom(rhs, out, line);
                Expr::binop(*op, l, r)
            }
            Expr::Neg(inner) if !is_negated_literal(e) => Expr::neg(self.atom(inner, out, line)),
            Expr::Index { base, index } => {
                let b = self.atom(base, out, line);
                let i = self.atom(index, out, line);
                Expr::index(b, i)
            }
            Expr::Call { func, args } => Expr::Call {
                func: func.clone(),
                args: args.iter().map(|a| self.atom(a, out, line)).collect(),
            },
            other => other.clone(),
        }
    }

    fn block(&mut self, body: &[Stmt]) -> Result<Vec<Stmt>> {
        let mut out = Vec::new();
        for s in body {
            self.stmt(s, &mut out)?;
        }
        Ok(out)
    }

    fn stmt(&mut self, s: &Stmt, out: &mut Vec<Stmt>) -> Result<()> {
        let line = s.line;
        match &s.kind {
            StmtKind::Assign { target, value } => {
                let v = self.shallow(value, out, line);
                out.push(Stmt::at(line, StmtKind::Assign { target: target.clone(), value: v }));
            }
            StmtKind::IndexAssign { target, index, value } => {
                let i = self.atom(index, out, line);
                let v = self.atom(value, out, line);
                out.push(Stmt::at(
                    line,
                    StmtKind::Assign {
                        target: target.clone(),
                        value: Expr::call("setitem", vec![Expr::name(target.clone()), i, v]),
                    },
                ));
            }
            StmtKind::ExprStmt(e) => {
                // `print` is never differentiated; keep its arguments as
                // written so its output reads naturally.
                let v = if e.is_call_to("print") { e.clone() } else { self.shallow(e, out, line) };
                out.push(Stmt::at(line, StmtKind::ExprStmt(v)));
            }
            StmtKind::Return(values) => {
                let mut vs = Vec::with_capacity(values.len());
                for v in values {
                    if v.as_name().is_some() {
                        vs.push(v.clone());
                    } else {
                        let value = self.shallow(v, out, line);
                        let name = self.gen.fresh("_return");
                        out.push(Stmt::at(line, StmtKind::Assign { target: name.clone(), value }));
                        vs.push(Expr::name(name));
                    }
                }
                out.push(Stmt::at(line, StmtKind::Return(vs)));
            }
            StmtKind::If { cond, then_body, else_body } => {
                let t = self.block(then_body)?;
                let e = self.block(else_body)?;
                out.push(Stmt {
                    line,
                    pinned: s.pinned,
                    kind: StmtKind::If { cond: cond.clone(), then_body: t, else_body: e },
                });
            }
            StmtKind::While { cond, body } => {
                let b = self.block(body)?;
                out.push(Stmt { line, pinned: s.pinned, kind: StmtKind::While { cond: cond.clone(), body: b } });
            }
            StmtKind::ForRange { var, count, body } => {
                let b = self.block(body)?;
                out.push(Stmt {
                    line,
                    pinned: s.pinned,
                    kind: StmtKind::ForRange { var: var.clone(), count: count.clone(), body: b },
                });
            }
            StmtKind::InsertGradOf { .. } | StmtKind::Comment(_) => out.push(s.clone()),
            StmtKind::Unsupported { construct, .. } => {
                return Err(Error::transform(format!("line {line}: unsupported construct '{construct}'")))
            }
        }
        Ok(())
    }
}

/// Normalize a function body.
pub fn normalize_body(body: &[Stmt], gen: &mut NameGen) -> Result<Vec<Stmt>> {
    Normalizer { gen }.block(body)
}
