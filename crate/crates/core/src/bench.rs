//! The lattice benchmark: a growing array that is appended to in an outer
//! loop and whose last row is rewritten in an inner loop. Its gradient
//! costs O(n²·m·d) with copying arrays and O(n·m·d) with persistent ones.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::api::{grad, Derivative, GradOptions};
use crate::eval::{run_with, EvalOptions};
use crate::parray::PArray;
use crate::parser::parse;
use crate::value::{stats, DenseArray, Value};
use crate::{Error, Result};

pub const LATTICE_SOURCE: &str = "\
def lattice(x, n, m, d):
    r = zeros(d)
    for i in range(n):
        x = append(x, r)
        for j in range(m):
            y = add(x[-1], 1.0)
            x = setitem(x, -1, y)
    return mean(x)
";

pub const CSV_HEADER: &str = "mode,n,m,d,seconds,bytes_allocated";

/// How the array argument is represented while the gradient runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayMode {
    /// Every update copies the whole array.
    Immutable,
    /// Dense arrays updated in place where the buffer is not shared;
    /// appends still copy.
    Subarray,
    /// Persistent arrays: updates and appends record O(row) deltas.
    Persistent,
}

impl ArrayMode {
    pub const ALL: [ArrayMode; 3] = [ArrayMode::Immutable, ArrayMode::Subarray, ArrayMode::Persistent];
}

impl fmt::Display for ArrayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArrayMode::Immutable => "immutable",
            ArrayMode::Subarray => "subarray",
            ArrayMode::Persistent => "persistent",
        })
    }
}

impl FromStr for ArrayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "immutable" => Ok(ArrayMode::Immutable),
            "subarray" | "subarray-copy" => Ok(ArrayMode::Subarray),
            "persistent" => Ok(ArrayMode::Persistent),
            other => Err(Error::runtime(format!(
                "unknown array mode '{other}' (expected immutable, subarray or persistent)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub mode: ArrayMode,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: ArrayMode,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// Median wall time of one gradient evaluation.
    pub seconds: f64,
    pub bytes_allocated: u64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{}",
            self.mode, self.n, self.m, self.d, self.seconds, self.bytes_allocated
        )
    }
}

/// The optimized gradient of the lattice program with respect to `x`.
pub fn lattice_gradient() -> Result<Derivative> {
    let p = parse(LATTICE_SOURCE)?;
    grad(&p, "lattice", &[0], 1, &GradOptions::default())
}

fn initial_x(d: usize, mode: ArrayMode) -> Result<Value> {
    let a = DenseArray::new(vec![1, d], vec![1.0; d])?;
    Ok(match mode {
        ArrayMode::Persistent => Value::PArray(PArray::new(&a)?),
        _ => Value::dense(a),
    })
}

/// Evaluate the lattice gradient once, returning the gradient.
pub fn run_lattice(g: &Derivative, n: usize, m: usize, d: usize, mode: ArrayMode) -> Result<Value> {
    let args = vec![
        initial_x(d, mode)?,
        Value::Int(n as i64),
        Value::Int(m as i64),
        Value::Int(d as i64),
    ];
    let opts = EvalOptions {
        inplace: mode != ArrayMode::Immutable,
        trace: false,
        capture_print: true,
    };
    Ok(run_with(&g.program, &g.entry, args, opts)?.value)
}

/// Time the lattice gradient; `seconds` is the median of `repeats` runs
/// after one discarded warm-up.
pub fn bench_lattice(cfg: &BenchConfig) -> Result<BenchRow> {
    if cfg.n == 0 || cfg.m == 0 || cfg.d == 0 || cfg.repeats == 0 {
        return Err(Error::runtime("n, m, d and repeats must all be at least 1"));
    }
    let g = lattice_gradient()?;
    // Warm-up run, discarded.
    run_lattice(&g, cfg.n, cfg.m, cfg.d, cfg.mode)?;
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut bytes = 0;
    for _ in 0..cfg.repeats {
        stats::reset();
        let start = Instant::now();
        run_lattice(&g, cfg.n, cfg.m, cfg.d, cfg.mode)?;
        times.push(start.elapsed().as_secs_f64());
        bytes = stats::snapshot().bytes_allocated;
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        mode: cfg.mode,
        n: cfg.n,
        m: cfg.m,
        d: cfg.d,
        seconds: times[times.len() / 2],
        bytes_allocated: bytes,
    })
}

/// Least-squares slope of log(seconds) against log(n).
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| t.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_is_the_same_in_every_mode() {
        let g = lattice_gradient().unwrap();
        let (n, m, d) = (4, 3, 5);
        // Row 0 of the initial x survives unchanged into the mean over
        // (n + 1) * d elements.
        let want = 1.0 / ((n + 1) * d) as f64;
        for mode in ArrayMode::ALL {
            let v = run_lattice(&g, n, m, d, mode).unwrap();
            let flat = v.to_dense().unwrap().data().to_vec();
            assert_eq!(flat.len(), d);
            for x in flat {
                assert!((x - want).abs() < 1e-15, "{mode}: {x}");
            }
        }
    }

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(usize, f64)> = [10, 20, 40].iter().map(|&n| (n, 3.0 * (n as f64).powi(2))).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn modes_round_trip_through_their_names() {
        for mode in ArrayMode::ALL {
            assert_eq!(mode.to_string().parse::<ArrayMode>().unwrap(), mode);
        }
    }
}
