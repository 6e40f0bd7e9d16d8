//! Runtime values.
//!
//! Dense arrays are reference counted and copy-on-write: cloning a value is
//! O(1), and an update only copies the buffer when it is shared. Every
//! dense buffer is accounted in the thread-local [`stats`] counters so that
//! tests and the benchmark harness can observe allocation behaviour.

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::parray::PArray;
use crate::printer::format_float;

pub mod stats {
    //! Thread-local allocation and work counters. One evaluation runs on
    //! one thread, so counters are per-thread and never contend.

    use std::cell::Cell;

    #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
    pub struct Stats {
        /// Number of dense buffers created (including copies).
        pub dense_allocs: u64,
        /// Cumulative bytes of dense buffers created.
        pub bytes_allocated: u64,
        /// Bytes of dense buffers currently alive.
        pub live_bytes: u64,
        /// High-water mark of `live_bytes` since the last reset.
        pub peak_live_bytes: u64,
        /// Dense buffers created filled with zeros (by `zeros` or by
        /// densifying a lazy zero gradient).
        pub zero_allocs: u64,
        /// Copy-on-write copies forced by a shared buffer.
        pub cow_copies: u64,
        /// Elements stored in persistent-array deltas, cumulative.
        pub delta_elements: u64,
        /// Persistent-array deltas applied while rerooting.
        pub deltas_applied: u64,
    }

    thread_local! {
        static STATS: Cell<Stats> = Cell::new(Stats::default());
    }

    pub fn snapshot() -> Stats {
        STATS.with(|s| s.get())
    }

    /// Zero all counters except `live_bytes`, and restart the high-water
    /// mark from the current live size.
    pub fn reset() {
        STATS.with(|s| {
            let live = s.get().live_bytes;
            s.set(Stats {
                live_bytes: live,
                peak_live_bytes: live,
                ..Stats::default()
            })
        });
    }

    fn update(f: impl FnOnce(&mut Stats)) {
        STATS.with(|s| {
            let mut v = s.get();
            f(&mut v);
            s.set(v);
        });
    }

    pub(crate) fn on_alloc(bytes: u64, zero: bool) {
        update(|s| {
            s.dense_allocs += 1;
            s.bytes_allocated += bytes;
            s.live_bytes += bytes;
            s.peak_live_bytes = s.peak_live_bytes.max(s.live_bytes);
            if zero {
                s.zero_allocs += 1;
            }
        });
    }

    pub(crate) fn on_free(bytes: u64) {
        update(|s| s.live_bytes = s.live_bytes.saturating_sub(bytes));
    }

    pub(crate) fn on_resize(old: u64, new: u64) {
        update(|s| {
            s.live_bytes = s.live_bytes.saturating_sub(old) + new;
            if new > old {
                s.bytes_allocated += new - old;
            }
            s.peak_live_bytes = s.peak_live_bytes.max(s.live_bytes);
        });
    }

    pub(crate) fn on_cow_copy() {
        update(|s| s.cow_copies += 1);
    }

    pub(crate) fn on_delta(elements: u64) {
        update(|s| s.delta_elements += elements);
    }

    pub(crate) fn on_delta_applied() {
        update(|s| s.deltas_applied += 1);
    }
}

/// Row-major n-dimensional array of `f64`.
#[derive(Debug)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    accounted: u64,
}

impl DenseArray {
    fn account(shape: Vec<usize>, data: Vec<f64>, zero: bool) -> Self {
        let accounted = (data.len() * std::mem::size_of::<f64>()) as u64;
        stats::on_alloc(accounted, zero);
        DenseArray {
            shape,
            data,
            accounted,
        }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::runtime(format!(
                "array of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::account(shape, data, false))
    }

    /// Construct without checking; callers guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::account(shape, data, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self::account(shape, vec![0.0; n], true)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of elements in one leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn into_data(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }


    /// Remove the last leading-axis row in place.
    pub(crate) fn truncate_rows(&mut self, rows: usize) {
        let row = self.row_len();
        self.data.truncate(rows * row);
        self.shape[0] = rows;
        let new = (self.data.len() * std::mem::size_of::<f64>()) as u64;
        stats::on_resize(self.accounted, new);
        self.accounted = new;
    }
}

impl Clone for DenseArray {
    fn clone(&self) -> Self {
        Self::account(self.shape.clone(), self.data.clone(), false)
    }
}

impl Drop for DenseArray {
    fn drop(&mut self) {
        stats::on_free(self.accounted);
    }
}

impl PartialEq for DenseArray {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Dynamically typed runtime value.
#[derive(Clone)]
pub enum Value {
    Float(f64),
    Int(i64),
    Bool(bool),
    Dense(Rc<DenseArray>),
    /// Lazy zero gradient: shape-polymorphic identity of gradient addition.
    Zero,
    PArray(PArray),
    None,
    Tuple(Rc<Vec<Value>>),
    /// Handle to one of the evaluation's tapes (see `stack()`).
    Tape(usize),
}

impl Value {
    pub fn dense(a: DenseArray) -> Value {
        Value::Dense(Rc::new(a))
    }

    pub fn array(shape: &[usize], data: &[f64]) -> Result<Value> {
        Ok(Value::dense(DenseArray::new(shape.to_vec(), data.to_vec())?))
    }

    pub fn vector(data: &[f64]) -> Value {
        Value::dense(DenseArray::vector(data.to_vec()))
    }

    pub fn tuple(items: Vec<Value>) -> Value {
        Value::Tuple(Rc::new(items))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Float(_) => "float",
            Value::Int(_) => "int",
            Value::Bool(_) => "bool",
            Value::Dense(_) => "array",
            Value::Zero => "ZeroGrad",
            Value::PArray(_) => "parray",
            Value::None => "None",
            Value::Tuple(_) => "tuple",
            Value::Tape(_) => "tape",
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Value::Zero)
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, Value::Float(_) | Value::Int(_))
    }

    pub fn as_f64(&self) -> Result<f64> {
        match self {
            Value::Float(v) => Ok(*v),
            Value::Int(v) => Ok(*v as f64),
            Value::Zero => Ok(0.0),
            other => Err(Error::runtime(format!("expected a number, got {}", other.type_name()))),
        }
    }

    pub fn as_int(&self) -> Result<i64> {
        match self {
            Value::Int(v) => Ok(*v),
            Value::Float(v) if v.fract() == 0.0 && v.is_finite() => Ok(*v as i64),
            other => Err(Error::runtime(format!("expected an integer, got {}", other.type_name()))),
        }
    }

    pub fn as_bool(&self) -> Result<bool> {
        match self {
            Value::Bool(b) => Ok(*b),
            Value::Dense(_) | Value::PArray(_) => Err(Error::runtime(
                "the truth value of an array is ambiguous; conditions must be scalar comparisons",
            )),
            other => Err(Error::runtime(format!("condition must be a bool, got {}", other.type_name()))),
        }
    }

    /// Shape of an array-like value; scalars have shape `[]`.
    pub fn shape(&self) -> Result<Vec<usize>> {
        match self {
            Value::Float(_) | Value::Int(_) | Value::Bool(_) => Ok(vec![]),
            Value::Dense(a) => Ok(a.shape().to_vec()),
            Value::PArray(h) => Ok(h.shape()),
            other => Err(Error::runtime(format!("{} has no shape", other.type_name()))),
        }
    }

    /// Dense view of numeric data (persistent arrays are checked out).
    pub fn to_dense(&self) -> Result<Rc<DenseArray>> {
        match self {
            Value::Dense(a) => Ok(a.clone()),
            Value::PArray(h) => Ok(Rc::new(h.checkout()?)),
            Value::Float(v) => Ok(Rc::new(DenseArray::from_parts(vec![], vec![*v]))),
            Value::Int(v) => Ok(Rc::new(DenseArray::from_parts(vec![], vec![*v as f64]))),
            other => Err(Error::runtime(format!("expected an array, got {}", other.type_name()))),
        }
    }

    /// Flattened numeric contents, `None` for values without numbers.
    /// A lazy zero flattens to an empty vector.
    pub fn flat(&self) -> Option<Vec<f64>> {
        match self {
            Value::Float(v) => Some(vec![*v]),
            Value::Int(v) => Some(vec![*v as f64]),
            Value::Dense(a) => Some(a.data().to_vec()),
            Value::PArray(h) => h.checkout().ok().map(|a| a.data().to_vec()),
            Value::Zero => Some(vec![]),
            _ => None,
        }
    }

    /// Structural equality comparing floats by bit pattern.
    pub fn bitwise_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Zero, Value::Zero) | (Value::None, Value::None) => true,
            (Value::Dense(a), Value::Dense(b)) => {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Value::PArray(a), Value::PArray(b)) => match (a.checkout(), b.checkout()) {
                (Ok(x), Ok(y)) => Value::dense(x).bitwise_eq(&Value::dense(y)),
                _ => false,
            },
            (Value::Tuple(a), Value::Tuple(b)) => {
                a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.bitwise_eq(y))
            }
            _ => false,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<DenseArray> for Value {
    fn from(a: DenseArray) -> Self {
        Value::dense(a)
    }
}

fn fmt_nested(f: &mut fmt::Formatter<'_>, shape: &[usize], data: &[f64]) -> fmt::Result {
    if shape.is_empty() {
        return write!(f, "{}", format_float(data[0]));
    }
    write!(f, "[")?;
    let step: usize = shape[1..].iter().product();
    for i in 0..shape[0] {
        if i > 0 {
            write!(f, ", ")?;
        }
        fmt_nested(f, &shape[1..], &data[i * step..(i + 1) * step])?;
    }
    write!(f, "]")
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(v) => write!(f, "{}", format_float(*v)),
            Value::Int(v) => write!(f, "{v}"),
            Value::Bool(true) => write!(f, "True"),
            Value::Bool(false) => write!(f, "False"),
            Value::Dense(a) => fmt_nested(f, a.shape(), a.data()),
            Value::Zero => write!(f, "ZeroGrad"),
            Value::PArray(h) => match h.checkout() {
                Ok(a) => {
                    write!(f, "parray(")?;
                    fmt_nested(f, a.shape(), a.data())?;
                    write!(f, ")")
                }
                Err(_) => write!(f, "parray(<released>)"),
            },
            Value::None => write!(f, "None"),
            Value::Tuple(items) => {
                write!(f, "(")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                if items.len() == 1 {
                    write!(f, ",")?;
                }
                write!(f, ")")
            }
            Value::Tape(id) => write!(f, "<tape {id}>"),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Dense(a) => write!(f, "Dense({:?}, {self})", a.shape()),
            _ => write!(f, "{self}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_is_python_like() {
        assert_eq!(Value::Float(6.0).to_string(), "6.0");
        assert_eq!(Value::array(&[2, 2], &[1., 2., 3., 4.]).unwrap().to_string(), "[[1.0, 2.0], [3.0, 4.0]]");
        assert_eq!(Value::tuple(vec![Value::Int(1), Value::Zero]).to_string(), "(1, ZeroGrad)");
    }

    #[test]
    fn dense_shape_must_match_data() {
        assert!(DenseArray::new(vec![2, 2], vec![1.0]).is_err());
        assert!(DenseArray::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn live_bytes_track_allocation_and_drop() {
        stats::reset();
        let before = stats::snapshot().live_bytes;
        let a = DenseArray::zeros(vec![100]);
        assert_eq!(stats::snapshot().live_bytes, before + 800);
        assert_eq!(stats::snapshot().zero_allocs, 1);
        drop(a);
        assert_eq!(stats::snapshot().live_bytes, before);
        assert!(stats::snapshot().peak_live_bytes >= before + 800);
    }
}
