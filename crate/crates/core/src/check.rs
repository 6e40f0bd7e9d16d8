//! Gradient checking against central finite differences.
//!
//! The oracle only ever evaluates the original program, so it shares no
//! code path with the transformation it is checking.

use std::time::{Duration, Instant};

use crate::api::{grad, GradOptions};
use crate::ast::Program;
use crate::eval::{run_with, EvalOptions};
use crate::value::{DenseArray, Value};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eps: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

impl Tolerances {
    /// An element passes when it is within `atol` absolutely or within
    /// `rtol` relative to the larger magnitude of the two.
    pub fn close(&self, got: f64, want: f64) -> bool {
        let diff = (got - want).abs();
        diff <= self.atol || diff <= self.rtol * got.abs().max(want.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub index: usize,
    pub name: String,
    pub components: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub params: Vec<ParamReport>,
    pub elapsed: Duration,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{} {} ({} components): max abs err {:.3e}, max rel err {:.3e}",
                if p.passed { "PASS" } else { "FAIL" },
                p.name,
                p.components,
                p.max_abs_err,
                p.max_rel_err
            )?;
        }
        write!(
            f,
            "{} in {:.3}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64()
        )
    }
}

/// Evaluate without letting `print` reach stdout.
fn run(p: &Program, entry: &str, args: Vec<Value>) -> Result<Value> {
    let opts = EvalOptions {
        capture_print: true,
        ..EvalOptions::default()
    };
    Ok(run_with(p, entry, args, opts)?.value)
}

fn scalar_output(p: &Program, entry: &str, args: Vec<Value>) -> Result<f64> {
    let v = run(p, entry, args)?;
    let x = v
        .as_f64()
        .map_err(|_| Error::runtime(format!("'{entry}' must return a scalar, got {}", v.type_name())))?;
    if !x.is_finite() {
        return Err(Error::runtime(format!("'{entry}' returned a non-finite value")));
    }
    Ok(x)
}

/// Flatten a numeric value; `like` gives the shape for a lazy zero.
pub fn flatten(v: &Value, like: &Value) -> Result<Vec<f64>> {
    match v {
        Value::Zero => Ok(vec![0.0; like.to_dense().map(|d| d.len()).unwrap_or(1)]),
        Value::Float(x) => Ok(vec![*x]),
        Value::Int(x) => Ok(vec![*x as f64]),
        other => Ok(other.to_dense()?.data().to_vec()),
    }
}

fn with_component(v: &Value, k: usize, x: f64) -> Result<Value> {
    match v {
        Value::Float(_) => Ok(Value::Float(x)),
        Value::Dense(_) | Value::PArray(_) => {
            let d = v.to_dense()?;
            let mut data = d.data().to_vec();
            data[k] = x;
            Ok(Value::dense(DenseArray::new(d.shape().to_vec(), data)?))
        }
        other => Err(Error::runtime(format!(
            "cannot differentiate with respect to a {} argument",
            other.type_name()
        ))),
    }
}

/// Central-difference gradient of the scalar function `entry` with respect
/// to argument `index`, flattened.
pub fn finite_difference(p: &Program, entry: &str, args: &[Value], index: usize, eps: f64) -> Result<Vec<f64>> {
    let base = &args[index];
    let x0 = flatten(base, base)?;
    let mut out = Vec::with_capacity(x0.len());
    for (k, &x) in x0.iter().enumerate() {
        let mut plus = args.to_vec();
        plus[index] = with_component(base, k, x + eps)?;
        let mut minus = args.to_vec();
        minus[index] = with_component(base, k, x - eps)?;
        let fp = scalar_output(p, entry, plus)?;
        let fm = scalar_output(p, entry, minus)?;
        out.push((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Split a derivative's result into one value per differentiated
/// parameter.
pub fn split_gradients(v: Value, n: usize) -> Result<Vec<Value>> {
    if n == 1 {
        return Ok(vec![v]);
    }
    match v {
        Value::Tuple(items) if items.len() == n => Ok(items.to_vec()),
        other => Err(Error::runtime(format!(
            "expected {n} gradients, got {}",
            other.type_name()
        ))),
    }
}

/// Compare the generated reverse-mode gradient against finite differences.
pub fn check_gradient(
    p: &Program,
    entry: &str,
    wrt: &[usize],
    args: &[Value],
    tol: &Tolerances,
    opts: &GradOptions,
) -> Result<CheckReport> {
    let start = Instant::now();
    // Integers are not differentiable; treat `3` as `3.0` where it matters.
    let mut args = args.to_vec();
    for &i in wrt {
        if let Some(Value::Int(k)) = args.get(i) {
            args[i] = Value::Float(*k as f64);
        }
    }
    let args = args.as_slice();
    scalar_output(p, entry, args.to_vec())?;
    let d = grad(p, entry, wrt, 1, opts)?;
    let grads = split_gradients(run(&d.program, &d.entry, args.to_vec())?, wrt.len())?;
    let f = p.function(entry).expect("grad checked the entry exists");
    let mut params = Vec::new();
    for (g, &i) in grads.iter().zip(wrt) {
        let got = flatten(g, &args[i])?;
        let want = finite_difference(p, entry, args, i, tol.eps)?;
        if got.len() != want.len() {
            return Err(Error::runtime(format!(
                "gradient of '{}' has {} components, expected {}",
                f.params[i].name,
                got.len(),
                want.len()
            )));
        }
        let mut report = ParamReport {
            index: i,
            name: f.params[i].name.clone(),
            components: got.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            passed: true,
        };
        for (&a, &b) in got.iter().zip(&want) {
            if !a.is_finite() {
                return Err(Error::runtime(format!("non-finite gradient for '{}'", report.name)));
            }
            let diff = (a - b).abs();
            report.max_abs_err = report.max_abs_err.max(diff);
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                report.max_rel_err = report.max_rel_err.max(diff / scale);
            }
            report.passed &= tol.close(a, b);
        }
        params.push(report);
    }
    Ok(CheckReport {
        params,
        elapsed: start.elapsed(),
    })
}
