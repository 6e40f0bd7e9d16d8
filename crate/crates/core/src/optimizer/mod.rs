//! Static optimization of generated derivative code.
//!
//! Each function is rewritten until nothing changes by a pipeline of
//! constant and copy propagation with algebraic simplification, push/pop
//! elision, dead-code elimination and removal of stale comments. Set
//! `GRADC_OPT_LOG=1` to log every pass that changed a function to stderr.

pub mod cfg;
pub mod dataflow;
pub mod dce;
pub mod simplify;

use std::collections::BTreeMap;

use crate::ast::*;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizeOptions {
    /// Rewrite `x * 0` to `0`, which is not exact for infinite or NaN `x`
    /// or for array-valued `x`.
    pub unsafe_algebra: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions { unsafe_algebra: true }
    }
}

fn log_enabled() -> bool {
    std::env::var("GRADC_OPT_LOG").is_ok_and(|v| v == "1")
}

fn count_stmts(body: &[Stmt]) -> usize {
    let mut n = 0;
    walk_stmts(body, &mut |_| n += 1);
    n
}

/// Check that every tape label is both pushed and popped somewhere in the
/// program.
pub fn check_tape_labels(p: &Program) -> Result<()> {
    let mut seen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for f in &p.functions {
        walk_stmts(&f.body, &mut |s| {
            for e in s.exprs() {
                for (label, is_push) in cfg::tape_ops(e) {
                    let entry = seen.entry(label).or_default();
                    if is_push {
                        entry.0 += 1;
                    } else {
                        entry.1 += 1;
                    }
                }
            }
        });
    }
    for (label, (pushes, pops)) in seen {
        if pushes == 0 || pops == 0 {
            let what = if pushes == 0 { "popped but never pushed" } else { "pushed but never popped" };
            return Err(Error::Optimizer(format!("tape label '{label}' is {what}")));
        }
    }
    Ok(())
}

/// Optimize every function of a program.
pub fn optimize(p: &Program, opts: &OptimizeOptions) -> Result<Program> {
    check_tape_labels(p)?;
    let is_user_fn = |n: &str| p.has_function(n);
    let mut out = p.clone();
    for f in &mut out.functions {
        optimize_function(f, opts, &is_user_fn)?;
    }
    Ok(out)
}

/// Optimize one function to a fixpoint.
pub fn optimize_function(f: &mut FunctionDef, opts: &OptimizeOptions, is_user_fn: &dyn Fn(&str) -> bool) -> Result<()> {
    let log = log_enabled();
    let bound = count_stmts(&f.body) + 10;
    for round in 0..bound {
        let mut changed = false;
        let mut note = |pass: &str, f: &FunctionDef, before: usize| {
            changed = true;
            if log {
                eprintln!(
                    "[opt] {}: round {round}: {pass} ({before} -> {} statements)",
                    f.name,
                    count_stmts(&f.body)
                );
            }
        };

        let before = count_stmts(&f.body);
        let body = simplify::propagate(f, opts);
        if body != f.body {
            f.body = body;
            note("propagate-and-simplify", f, before);
        }
        let before = count_stmts(&f.body);
        if let Some(body) = simplify::elide_pops(&f.body) {
            f.body = body;
            note("pop-elision", f, before);
        }
        let before = count_stmts(&f.body);
        if let Some(body) = dce::eliminate(&f.body, is_user_fn) {
            f.body = body;
            note("dead-code", f, before);
        }
        let before = count_stmts(&f.body);
        if let Some(body) = dce::drop_stale_comments(&f.body) {
            f.body = body;
            note("comments", f, before);
        }
        if !changed {
            return Ok(());
        }
    }
    Err(Error::Optimizer(format!(
        "no fixpoint for '{}' after {bound} rounds",
        f.name
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;
    use crate::printer::emit_source;
    use crate::reverse::transform_reverse;
    use crate::template::Registry;

    fn grad_source(src: &str) -> String {
        let p = parse(src).unwrap();
        let reg = Registry::builtin();
        let d = transform_reverse(&p, "f", &[0], &reg).unwrap();
        emit_source(&optimize(&d, &OptimizeOptions::default()).unwrap())
    }

    #[test]
    fn identity_derivative_has_no_tape() {
        let out = grad_source("def f(x):\n    y = x\n    return y\n");
        assert_eq!(out, "def dfdx(x, by=1.0):\n    # Grad of: y = x\n    _bx = copy(by)\n    return _bx\n");
    }

    #[test]
    fn square_derivative() {
        let out = grad_source("def f(x):\n    return x * x\n");
        assert_eq!(
            out,
            "def dfdx(x, b_return=1.0):\n    # Grad of: _return = x * x\n    _bx = unbroadcast(b_return * x, x)\n    _bx2 = unbroadcast(b_return * x, x)\n    bx = add_grad(_bx, _bx2)\n    return bx\n"
        );
    }

    #[test]
    fn optimization_is_a_fixpoint() {
        let src = "def f(x, n):\n    s = 0.0\n    for i in range(n):\n        if x > 1.0:\n            s = s + x * x\n        else:\n            s = s - x\n    return s\n";
        let p = parse(src).unwrap();
        let d = transform_reverse(&p, "f", &[0], &Registry::builtin()).unwrap();
        let once = optimize(&d, &OptimizeOptions::default()).unwrap();
        let twice = optimize(&once, &OptimizeOptions::default()).unwrap();
        assert_eq!(emit_source(&once), emit_source(&twice));
    }

    #[test]
    fn unmatched_labels_are_rejected() {
        let p = parse("def f(x):\n    s = stack()\n    push(s, x, '_a')\n    return x\n").unwrap();
        assert!(matches!(optimize(&p, &OptimizeOptions::default()), Err(Error::Optimizer(_))));
    }
}
