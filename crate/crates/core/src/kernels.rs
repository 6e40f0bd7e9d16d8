//! Array kernels and gradient helpers.
//!
//! Arithmetic follows numpy broadcasting. The lazy zero gradient
//! ([`Value::Zero`]) is handled here: linear operations propagate it without
//! allocating, additions treat it as the identity, and nonlinear kernels
//! refuse it (a zero gradient should never reach one).

use std::rc::Rc;

use crate::ast::BinOp;
use crate::error::{Error, Result};
use crate::parray::PArray;
use crate::value::{stats, DenseArray, Value};

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::runtime(msg))
}

/// Borrowed numeric operand: shape plus row-major data.
struct View<'a> {
    shape: &'a [usize],
    data: &'a [f64],
}

/// Numeric operand holding its storage, so scalars and checked-out
/// persistent arrays can be viewed uniformly.
enum Num {
    Scalar(f64),
    Array(Rc<DenseArray>),
}

impl Num {
    fn of(v: &Value, what: &str) -> Result<Num> {
        match v {
            Value::Float(x) => Ok(Num::Scalar(*x)),
            Value::Int(x) => Ok(Num::Scalar(*x as f64)),
            Value::Zero => Ok(Num::Scalar(0.0)),
            Value::Dense(a) => Ok(Num::Array(a.clone())),
            Value::PArray(h) => Ok(Num::Array(Rc::new(h.checkout()?))),
            other => err(format!("{what}: expected a number or array, got {}", other.type_name())),
        }
    }

    fn view(&self) -> View<'_> {
        match self {
            Num::Scalar(x) => View {
                shape: &[],
                data: std::slice::from_ref(x),
            },
            Num::Array(a) => View {
                shape: a.shape(),
                data: a.data(),
            },
        }
    }
}

/// Wrap a result: rank-0 arrays become plain floats.
fn wrap(shape: Vec<usize>, data: Vec<f64>) -> Value {
    if shape.is_empty() {
        Value::Float(data[0])
    } else {
        Value::dense(DenseArray::from_parts(shape, data))
    }
}

fn normalize_index(i: i64, n: usize) -> Result<usize> {
    let j = if i < 0 { n as i64 + i } else { i };
    if j < 0 || j >= n as i64 {
        return err(format!("index {i} out of bounds for axis of length {n}"));
    }
    Ok(j as usize)
}

fn normalize_axis(axis: i64, ndim: usize) -> Result<usize> {
    let a = if axis < 0 { ndim as i64 + axis } else { axis };
    if a < 0 || a >= ndim as i64 {
        return err(format!("axis {axis} out of range for an array of rank {ndim}"));
    }
    Ok(a as usize)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k + a.len() >= n { a[k + a.len() - n] } else { 1 };
        let db = if k + b.len() >= n { b[k + b.len() - n] } else { 1 };
        out[k] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return err(format!("shapes {a:?} and {b:?} cannot be broadcast together"));
        };
    }
    Ok(out)
}

/// Strides for reading an array of `shape` as if it had shape `target`
/// (zero stride on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = target.len() - shape.len();
    (0..target.len())
        .map(|k| {
            if k < off || shape[k - off] == 1 {
                0
            } else {
                own[k - off]
            }
        })
        .collect()
}

/// Expand `v` to `target` (which must be a broadcast of its shape).
fn expand(v: &View, target: &[usize]) -> Vec<f64> {
    if v.shape == target {
        return v.data.to_vec();
    }
    let n: usize = target.iter().product();
    if v.data.len() == 1 {
        return vec![v.data[0]; n];
    }
    let st = broadcast_strides(v.shape, target);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        out.push(v.data[off]);
        for k in (0..target.len()).rev() {
            idx[k] += 1;
            if idx[k] < target[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

fn zip_broadcast(a: &View, b: &View, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data).map(|(x, y)| f(*x, *y)).collect();
        return Ok((a.shape.to_vec(), data));
    }
    let shape = broadcast_shapes(a.shape, b.shape)?;
    if b.data.len() == 1 && b.shape.len() <= a.shape.len() {
        let y = b.data[0];
        return Ok((shape, a.data.iter().map(|x| f(*x, y)).collect()));
    }
    if a.data.len() == 1 && a.shape.len() <= b.shape.len() {
        let x = a.data[0];
        return Ok((shape, b.data.iter().map(|y| f(x, *y)).collect()));
    }
    let ea = expand(a, &shape);
    let eb = expand(b, &shape);
    let data = ea.iter().zip(&eb).map(|(x, y)| f(*x, *y)).collect();
    Ok((shape, data))
}

/// Scalar semantics of the arithmetic operators. Comparisons return 1.0
/// for true and 0.0 for false.
pub fn scalar_op(op: BinOp, x: f64, y: f64) -> f64 {
    match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
        BinOp::Lt => (x < y) as u8 as f64,
        BinOp::Gt => (x > y) as u8 as f64,
        BinOp::Le => (x <= y) as u8 as f64,
        BinOp::Ge => (x >= y) as u8 as f64,
        BinOp::Eq => (x == y) as u8 as f64,
    }
}

fn int_op(op: BinOp, x: i64, y: i64) -> Result<Value> {
    let checked = |r: Option<i64>| r.map(Value::Int).ok_or_else(|| Error::runtime("integer overflow"));
    Ok(match op {
        BinOp::Add => checked(x.checked_add(y))?,
        BinOp::Sub => checked(x.checked_sub(y))?,
        BinOp::Mul => checked(x.checked_mul(y))?,
        BinOp::Div => Value::Float(x as f64 / y as f64),
        BinOp::Lt => Value::Bool(x < y),
        BinOp::Gt => Value::Bool(x > y),
        BinOp::Le => Value::Bool(x <= y),
        BinOp::Ge => Value::Bool(x >= y),
        BinOp::Eq => Value::Bool(x == y),
    })
}

/// Evaluate a binary operator.
pub fn binop(op: BinOp, a: &Value, b: &Value) -> Result<Value> {
    if op.is_comparison() {
        return compare(op, a, b);
    }
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => return int_op(op, *x, *y),
        (Value::Float(x), Value::Float(y)) => return Ok(Value::Float(scalar_op(op, *x, *y))),
        _ => {}
    }
    // Lazy zero rules: no allocation, shape taken from the other operand.
    match (op, a, b) {
        (BinOp::Add, Value::Zero, other) | (BinOp::Add, other, Value::Zero) => {
            return if other.is_zero() { Ok(Value::Zero) } else { numeric_identity(other) };
        }
        (BinOp::Sub, other, Value::Zero) => return numeric_identity(other),
        (BinOp::Sub, Value::Zero, other) => return negative(other),
        (BinOp::Mul, Value::Zero, other) | (BinOp::Mul, other, Value::Zero) => {
            Num::of(other, "multiply")?;
            return Ok(Value::Zero);
        }
        (BinOp::Div, Value::Zero, other) => {
            Num::of(other, "divide")?;
            return Ok(Value::Zero);
        }
        _ => {}
    }
    let na = Num::of(a, op.symbol())?;
    let nb = Num::of(b, op.symbol())?;
    let (shape, data) = zip_broadcast(&na.view(), &nb.view(), |x, y| scalar_op(op, x, y))?;
    Ok(wrap(shape, data))
}

fn numeric_identity(v: &Value) -> Result<Value> {
    match v {
        Value::Float(_) | Value::Int(_) | Value::Dense(_) | Value::Zero => Ok(v.clone()),
        Value::PArray(h) => Ok(Value::dense(h.checkout()?)),
        other => err(format!("expected a number or array, got {}", other.type_name())),
    }
}

fn compare(op: BinOp, a: &Value, b: &Value) -> Result<Value> {
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        return int_op(op, *x, *y);
    }
    if op == BinOp::Eq {
        match (a, b) {
            (Value::Bool(x), Value::Bool(y)) => return Ok(Value::Bool(x == y)),
            (Value::None, Value::None) => return Ok(Value::Bool(true)),
            (Value::None, _) | (_, Value::None) => return Ok(Value::Bool(false)),
            _ => {}
        }
    }
    let scalar = |v: &Value| match v {
        Value::Float(_) | Value::Int(_) | Value::Zero => v.as_f64(),
        other => err(format!(
            "comparison '{}' needs scalar operands, got {}",
            op.symbol(),
            other.type_name()
        )),
    };
    let (x, y) = (scalar(a)?, scalar(b)?);
    Ok(Value::Bool(scalar_op(op, x, y) != 0.0))
}

fn map_unary(v: &Value, what: &str, f: impl Fn(f64) -> f64) -> Result<Value> {
    match v {
        Value::Float(x) => Ok(Value::Float(f(*x))),
        Value::Int(x) => Ok(Value::Float(f(*x as f64))),
        Value::Zero => err(format!(
            "{what} received a lazy zero gradient; nonlinear kernels need a concrete value"
        )),
        _ => {
            let n = Num::of(v, what)?;
            let view = n.view();
            Ok(wrap(view.shape.to_vec(), view.data.iter().map(|x| f(*x)).collect()))
        }
    }
}

pub fn negative(v: &Value) -> Result<Value> {
    match v {
        Value::Zero => Ok(Value::Zero),
        Value::Int(x) => Ok(Value::Int(-x)),
        Value::Float(x) => Ok(Value::Float(-x)),
        _ => {
            let n = Num::of(v, "negative")?;
            let view = n.view();
            Ok(wrap(view.shape.to_vec(), view.data.iter().map(|x| -x).collect()))
        }
    }
}

pub fn tanh(v: &Value) -> Result<Value> {
    map_unary(v, "tanh", f64::tanh)
}

pub fn exp(v: &Value) -> Result<Value> {
    map_unary(v, "exp", f64::exp)
}

pub fn log(v: &Value) -> Result<Value> {
    map_unary(v, "log", f64::ln)
}

/// Plain matrix product of row-major (m×k) and (k×n) buffers.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `dot(a, b)`: contracts the last axis of `a` with the first axis of `b`.
/// A scalar operand makes it a plain product.
pub fn dot(a: &Value, b: &Value) -> Result<Value> {
    if a.is_zero() || b.is_zero() {
        Num::of(a, "dot")?;
        Num::of(b, "dot")?;
        return Ok(Value::Zero);
    }
    let na = Num::of(a, "dot")?;
    let nb = Num::of(b, "dot")?;
    let (va, vb) = (na.view(), nb.view());
    if va.shape.is_empty() || vb.shape.is_empty() {
        return binop(BinOp::Mul, a, b);
    }
    let k = *va.shape.last().unwrap();
    if vb.shape[0] != k {
        return err(format!(
            "dot: shapes {:?} and {:?} are not aligned",
            va.shape, vb.shape
        ));
    }
    let m = va.data.len() / k.max(1);
    let n = vb.data.len() / k.max(1);
    let m = if k == 0 { va.shape[..va.shape.len() - 1].iter().product() } else { m };
    let n = if k == 0 { vb.shape[1..].iter().product() } else { n };
    let data = matmul(va.data, vb.data, m, k, n);
    let mut shape = va.shape[..va.shape.len() - 1].to_vec();
    shape.extend_from_slice(&vb.shape[1..]);
    Ok(wrap(shape, data))
}

/// Gradient of `dot(a, b)` with respect to `a`, given the output gradient.
pub fn grad_dot_lhs(g: &Value, a: &Value, b: &Value) -> Result<Value> {
    if g.is_zero() {
        return Ok(Value::Zero);
    }
    let na = Num::of(a, "grad_dot_lhs")?;
    let nb = Num::of(b, "grad_dot_lhs")?;
    let (va, vb) = (na.view(), nb.view());
    if va.shape.is_empty() || vb.shape.is_empty() {
        let prod = binop(BinOp::Mul, g, b)?;
        return unbroadcast(&prod, a);
    }
    let ng = Num::of(g, "grad_dot_lhs")?;
    let vg = ng.view();
    let k = vb.shape[0];
    let m: usize = va.shape[..va.shape.len() - 1].iter().product();
    let n: usize = vb.shape[1..].iter().product();
    if vg.data.len() != m * n {
        return err("grad_dot_lhs: gradient shape does not match dot output");
    }
    // da (m×k) = g (m×n) · bᵀ (n×k)
    let bt = transpose(vb.data, k, n);
    Ok(wrap(va.shape.to_vec(), matmul(vg.data, &bt, m, n, k)))
}

/// Gradient of `dot(a, b)` with respect to `b`, given the output gradient.
pub fn grad_dot_rhs(g: &Value, a: &Value, b: &Value) -> Result<Value> {
    if g.is_zero() {
        return Ok(Value::Zero);
    }
    let na = Num::of(a, "grad_dot_rhs")?;
    let nb = Num::of(b, "grad_dot_rhs")?;
    let (va, vb) = (na.view(), nb.view());
    if va.shape.is_empty() || vb.shape.is_empty() {
        let prod = binop(BinOp::Mul, g, a)?;
        return unbroadcast(&prod, b);
    }
    let ng = Num::of(g, "grad_dot_rhs")?;
    let vg = ng.view();
    let k = vb.shape[0];
    let m: usize = va.shape[..va.shape.len() - 1].iter().product();
    let n: usize = vb.shape[1..].iter().product();
    if vg.data.len() != m * n {
        return err("grad_dot_rhs: gradient shape does not match dot output");
    }
    // db (k×n) = aᵀ (k×m) · g (m×n)
    let at = transpose(va.data, m, k);
    Ok(wrap(vb.shape.to_vec(), matmul(&at, vg.data, k, m, n)))
}

/// Sum over one axis.
fn reduce_axis(v: &View, axis: usize) -> (Vec<usize>, Vec<f64>) {
    let outer: usize = v.shape[..axis].iter().product();
    let len = v.shape[axis];
    let inner: usize = v.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &v.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = v.shape.to_vec();
    shape.remove(axis);
    (shape, out)
}

fn reduce_args(args: &[Value], what: &str) -> Result<(Option<i64>, bool)> {
    let axis = match args.get(1) {
        None | Some(Value::None) => None,
        Some(v) => Some(v.as_int().map_err(|_| Error::runtime(format!("{what}: axis must be an integer")))?),
    };
    let keepdims = match args.get(2) {
        None => false,
        Some(v) => v.as_bool()?,
    };
    Ok((axis, keepdims))
}

fn reduce(args: &[Value], what: &str, mean: bool) -> Result<Value> {
    let x = &args[0];
    let (axis, keepdims) = reduce_args(args, what)?;
    if x.is_zero() {
        return Ok(Value::Zero);
    }
    let n = Num::of(x, what)?;
    let v = n.view();
    match axis {
        None => {
            let s: f64 = v.data.iter().sum();
            let r = if mean { s / v.data.len() as f64 } else { s };
            if keepdims {
                Ok(wrap(vec![1; v.shape.len()], vec![r]))
            } else {
                Ok(Value::Float(r))
            }
        }
        Some(ax) => {
            let ax = normalize_axis(ax, v.shape.len())?;
            let (mut shape, mut data) = reduce_axis(&v, ax);
            if mean {
                let c = v.shape[ax] as f64;
                data.iter_mut().for_each(|d| *d /= c);
            }
            if keepdims {
                shape.insert(ax, 1);
            }
            Ok(wrap(shape, data))
        }
    }
}

/// `sum(x[, axis[, keepdims]])`
pub fn sum(args: &[Value]) -> Result<Value> {
    reduce(args, "sum", false)
}

/// `mean(x[, axis[, keepdims]])`
pub fn mean(args: &[Value]) -> Result<Value> {
    reduce(args, "mean", true)
}

fn reduce_grad(args: &[Value], what: &str, mean: bool) -> Result<Value> {
    let (g, like) = (&args[0], &args[1]);
    let (axis, keepdims) = reduce_args(&args[1..], what)?;
    if g.is_zero() {
        return Ok(Value::Zero);
    }
    let shape = like.shape()?;
    let ng = Num::of(g, what)?;
    let vg = ng.view();
    let (mut gshape, count) = match axis {
        None => (vec![1; shape.len()], shape.iter().product::<usize>()),
        Some(ax) => {
            let ax = normalize_axis(ax, shape.len())?;
            let mut s = shape.clone();
            s[ax] = 1;
            (s, shape[ax])
        }
    };
    if vg.data.len() != gshape.iter().product::<usize>() {
        return err(format!("{what}: gradient of shape {:?} does not match the reduction", vg.shape));
    }
    if axis.is_none() && !keepdims {
        gshape = vec![];
    }
    let view = View {
        shape: if axis.is_none() && !keepdims { &[] } else { &gshape },
        data: vg.data,
    };
    let mut data = expand(&view, &shape);
    if mean {
        let c = count as f64;
        data.iter_mut().for_each(|d| *d /= c);
    }
    Ok(wrap(shape, data))
}

/// `sum_grad(g, like[, axis[, keepdims]])`: adjoint of `sum`.
pub fn sum_grad(args: &[Value]) -> Result<Value> {
    reduce_grad(args, "sum_grad", false)
}

/// `mean_grad(g, like[, axis[, keepdims]])`: adjoint of `mean`.
pub fn mean_grad(args: &[Value]) -> Result<Value> {
    reduce_grad(args, "mean_grad", true)
}

/// Sum `g` over broadcast axes so it has the shape of `like`.
pub fn unbroadcast(g: &Value, like: &Value) -> Result<Value> {
    if g.is_zero() {
        return Ok(Value::Zero);
    }
    let target = like.shape()?;
    let ng = Num::of(g, "unbroadcast")?;
    let vg = ng.view();
    if vg.shape == target.as_slice() {
        return numeric_identity(g);
    }
    if target.len() > vg.shape.len() {
        return err(format!("unbroadcast: cannot reduce {:?} to {:?}", vg.shape, target));
    }
    if target.is_empty() {
        return Ok(Value::Float(vg.data.iter().sum()));
    }
    let mut shape = vg.shape.to_vec();
    let mut data = vg.data.to_vec();
    // Leading axes that do not exist in the target.
    while shape.len() > target.len() {
        let (s, d) = reduce_axis(&View { shape: &shape, data: &data }, 0);
        shape = s;
        data = d;
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && shape[ax] != 1 {
            let (mut s, d) = reduce_axis(&View { shape: &shape, data: &data }, ax);
            s.insert(ax, 1);
            shape = s;
            data = d;
        } else if target[ax] != shape[ax] {
            return err(format!("unbroadcast: cannot reduce {:?} to {:?}", vg.shape, target));
        }
    }
    Ok(wrap(shape, data))
}

/// Expand `g` to the shape of `like`.
pub fn broadcast_like(g: &Value, like: &Value) -> Result<Value> {
    if g.is_zero() {
        return Ok(Value::Zero);
    }
    let target = like.shape()?;
    let ng = Num::of(g, "broadcast_like")?;
    let vg = ng.view();
    let shape = broadcast_shapes(vg.shape, &target)?;
    if shape != target {
        return err(format!("broadcast_like: cannot expand {:?} to {:?}", vg.shape, target));
    }
    Ok(wrap(target.clone(), expand(&vg, &target)))
}

/// Gradient accumulation with the lazy zero as identity.
pub fn add_grad(a: &Value, b: &Value) -> Result<Value> {
    match (a, b) {
        (Value::Zero, other) | (other, Value::Zero) => Ok(other.clone()),
        _ => binop(BinOp::Add, a, b),
    }
}

/// `zeros(n, ...)` or `zeros(shape_tuple)`.
pub fn zeros(args: &[Value]) -> Result<Value> {
    let dims: Vec<Value> = match args {
        [Value::Tuple(t)] => t.iter().cloned().collect(),
        _ => args.to_vec(),
    };
    let mut shape = Vec::with_capacity(dims.len());
    for d in &dims {
        let n = d.as_int()?;
        if n < 0 {
            return err("zeros: negative dimension");
        }
        shape.push(n as usize);
    }
    if shape.is_empty() {
        return Ok(Value::Float(0.0));
    }
    Ok(Value::dense(DenseArray::zeros(shape)))
}

pub fn shape_of(x: &Value) -> Result<Value> {
    let shape = x.shape()?;
    Ok(Value::tuple(shape.into_iter().map(|d| Value::Int(d as i64)).collect()))
}

/// Row `v` of an array as a flat buffer of `row_len` elements; scalars are
/// broadcast to fill the row.
fn row_data(v: &Value, row_shape: &[usize], what: &str) -> Result<Vec<f64>> {
    let n = Num::of(v, what)?;
    let view = n.view();
    let shape = broadcast_shapes(view.shape, row_shape)?;
    if shape != row_shape {
        return err(format!(
            "{what}: value of shape {:?} does not fit a row of shape {:?}",
            view.shape, row_shape
        ));
    }
    Ok(expand(&view, row_shape))
}

/// `x[i]` along the leading axis.
pub fn index(x: &Value, i: &Value) -> Result<Value> {
    let i = i.as_int()?;
    match x {
        Value::Zero => Ok(Value::Zero),
        Value::Tuple(items) => Ok(items[normalize_index(i, items.len())?].clone()),
        Value::Dense(a) => {
            if a.ndim() == 0 {
                return err("cannot index a scalar");
            }
            let r = normalize_index(i, a.rows())?;
            let len = a.row_len();
            Ok(wrap(a.shape()[1..].to_vec(), a.data()[r * len..(r + 1) * len].to_vec()))
        }
        Value::PArray(h) => Ok(wrap(h.row_shape(), h.row(i)?)),
        other => err(format!("cannot index a value of type {}", other.type_name())),
    }
}

fn dense_mut<'a>(x: &'a mut Rc<DenseArray>) -> &'a mut DenseArray {
    if Rc::strong_count(x) > 1 {
        stats::on_cow_copy();
    }
    Rc::make_mut(x)
}

fn is_all_zero(v: &Value) -> bool {
    match v {
        Value::Zero => true,
        Value::Float(x) => *x == 0.0,
        Value::Int(x) => *x == 0,
        _ => false,
    }
}

/// Pure `setitem`: copy of `x` with row `i` replaced by `v`.
pub fn setitem(x: &Value, i: &Value, v: &Value) -> Result<Value> {
    let mut out = x.clone();
    setitem_in_place(&mut out, i, v)?;
    Ok(out)
}

/// `x[i] = v`, mutating `x` when its buffer is not shared.
pub fn setitem_in_place(x: &mut Value, i: &Value, v: &Value) -> Result<()> {
    let idx = i.as_int()?;
    match x {
        Value::Zero if is_all_zero(v) => Ok(()),
        Value::Zero => err("setitem: cannot write a nonzero row into a lazy zero gradient"),
        Value::PArray(h) => {
            let row = row_data(v, &h.row_shape(), "setitem")?;
            *x = Value::PArray(h.setitem(idx, &row)?);
            Ok(())
        }
        Value::Dense(a) => {
            if a.ndim() == 0 {
                return err("setitem on a scalar");
            }
            let r = normalize_index(idx, a.rows())?;
            let row = row_data(v, &a.shape()[1..], "setitem")?;
            let len = row.len();
            dense_mut(a).data_mut()[r * len..(r + 1) * len].copy_from_slice(&row);
            Ok(())
        }
        other => err(format!("setitem on a value of type {}", other.type_name())),
    }
}

/// `x` with `row` appended along the leading axis. Dense arrays are always
/// copied.
pub fn append(x: &Value, row: &Value) -> Result<Value> {
    match x {
        Value::Zero if is_all_zero(row) => Ok(Value::Zero),
        Value::PArray(h) => {
            let r = row_data(row, &h.row_shape(), "append")?;
            Ok(Value::PArray(h.append(&r)?))
        }
        Value::Dense(a) => {
            if a.ndim() == 0 {
                return err("append to a scalar");
            }
            let r = row_data(row, &a.shape()[1..], "append")?;
            let mut data = Vec::with_capacity(a.len() + r.len());
            data.extend_from_slice(a.data());
            data.extend_from_slice(&r);
            let mut shape = a.shape().to_vec();
            shape[0] += 1;
            Ok(wrap(shape, data))
        }
        other => err(format!("append to a value of type {}", other.type_name())),
    }
}

pub fn drop_last(x: &Value) -> Result<Value> {
    let mut out = x.clone();
    drop_last_in_place(&mut out)?;
    Ok(out)
}

pub fn drop_last_in_place(x: &mut Value) -> Result<()> {
    match x {
        Value::Zero => Ok(()),
        Value::PArray(h) => {
            *x = Value::PArray(h.drop_last()?);
            Ok(())
        }
        Value::Dense(a) => {
            if a.ndim() == 0 || a.rows() == 0 {
                return err("drop_last on an array with no rows");
            }
            if Rc::strong_count(a) > 1 {
                let mut shape = a.shape().to_vec();
                shape[0] -= 1;
                let data = a.data()[..shape.iter().product::<usize>()].to_vec();
                *x = wrap(shape, data);
            } else {
                let rows = a.rows() - 1;
                Rc::get_mut(a).expect("unique").truncate_rows(rows);
            }
            Ok(())
        }
        other => err(format!("drop_last on a value of type {}", other.type_name())),
    }
}

/// Pure `add_at`: `acc` with `g` added to row `i`. A lazy zero `acc` is
/// densified to the shape of `like`.
pub fn add_at(acc: &Value, like: &Value, i: &Value, g: &Value) -> Result<Value> {
    let mut out = acc.clone();
    add_at_in_place(&mut out, like, i, g)?;
    Ok(out)
}

pub fn add_at_in_place(acc: &mut Value, like: &Value, i: &Value, g: &Value) -> Result<()> {
    if g.is_zero() {
        return Ok(());
    }
    let idx = i.as_int()?;
    if acc.is_zero() {
        let shape = like.shape()?;
        if shape.is_empty() {
            return err("add_at: cannot index a scalar");
        }
        *acc = Value::dense(DenseArray::zeros(shape));
    }
    match acc {
        Value::Dense(a) => {
            if a.ndim() == 0 {
                return err("add_at on a scalar");
            }
            let r = normalize_index(idx, a.rows())?;
            let row = row_data(g, &a.shape()[1..], "add_at")?;
            let len = row.len();
            let dst = &mut dense_mut(a).data_mut()[r * len..(r + 1) * len];
            for (d, s) in dst.iter_mut().zip(&row) {
                *d += s;
            }
            Ok(())
        }
        other => err(format!("add_at on a value of type {}", other.type_name())),
    }
}

/// What must be saved to undo `setitem(x, i, _)`: the old row for dense
/// arrays, the version handle itself for persistent arrays.
pub fn save_row(x: &Value, i: &Value) -> Result<Value> {
    match x {
        Value::PArray(_) => Ok(x.clone()),
        _ => index(x, i),
    }
}

pub fn restore_row(x: &Value, i: &Value, saved: &Value) -> Result<Value> {
    let mut out = x.clone();
    restore_row_in_place(&mut out, i, saved)?;
    Ok(out)
}

pub fn restore_row_in_place(x: &mut Value, i: &Value, saved: &Value) -> Result<()> {
    match saved {
        Value::PArray(_) => {
            *x = saved.clone();
            Ok(())
        }
        _ => setitem_in_place(x, i, saved),
    }
}

pub fn to_parray(x: &Value) -> Result<Value> {
    match x {
        Value::PArray(_) => Ok(x.clone()),
        _ => Ok(Value::PArray(PArray::new(&*x.to_dense()?)?)),
    }
}

pub fn to_dense(x: &Value) -> Result<Value> {
    match x {
        Value::PArray(h) => Ok(Value::dense(h.checkout()?)),
        _ => Ok(x.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Value {
        Value::array(shape, data).unwrap()
    }

    fn data(v: &Value) -> Vec<f64> {
        v.flat().unwrap()
    }

    #[test]
    fn broadcasting_rows_and_columns() {
        let a = arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let r = arr(&[3], &[10., 20., 30.]);
        let c = arr(&[2, 1], &[100., 200.]);
        assert_eq!(data(&binop(BinOp::Add, &a, &r).unwrap()), vec![11., 22., 33., 14., 25., 36.]);
        assert_eq!(data(&binop(BinOp::Add, &a, &c).unwrap()), vec![101., 102., 103., 204., 205., 206.]);
        assert_eq!(binop(BinOp::Add, &c, &r).unwrap().shape().unwrap(), vec![2, 3]);
        assert!(binop(BinOp::Add, &a, &arr(&[2], &[1., 2.])).is_err());
    }

    #[test]
    fn unbroadcast_inverts_broadcast() {
        let g = arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(data(&unbroadcast(&g, &arr(&[3], &[0.; 3])).unwrap()), vec![5., 7., 9.]);
        assert_eq!(data(&unbroadcast(&g, &arr(&[2, 1], &[0.; 2])).unwrap()), vec![6., 15.]);
        assert_eq!(data(&unbroadcast(&g, &Value::Float(0.0)).unwrap()), vec![21.]);
        assert!(unbroadcast(&Value::Zero, &g).unwrap().is_zero());
    }

    #[test]
    fn zero_arithmetic_does_not_allocate() {
        let a = arr(&[3], &[1., 2., 3.]);
        stats::reset();
        assert!(binop(BinOp::Mul, &Value::Zero, &a).unwrap().is_zero());
        assert!(binop(BinOp::Add, &Value::Zero, &a).unwrap().bitwise_eq(&a));
        assert!(add_grad(&a, &Value::Zero).unwrap().bitwise_eq(&a));
        assert_eq!(stats::snapshot().dense_allocs, 0);
        assert!(tanh(&Value::Zero).is_err());
    }

    #[test]
    fn int_arithmetic_stays_integral() {
        let v = binop(BinOp::Sub, &Value::Int(5), &Value::Int(1)).unwrap();
        assert!(matches!(v, Value::Int(4)));
        let d = binop(BinOp::Div, &Value::Int(1), &Value::Int(2)).unwrap();
        assert!(matches!(d, Value::Float(x) if x == 0.5));
        assert!(matches!(compare(BinOp::Lt, &Value::Int(1), &Value::Float(1.5)).unwrap(), Value::Bool(true)));
    }

    #[test]
    fn dot_and_its_gradients_match_matmul() {
        let a = arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = arr(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let z = dot(&a, &b).unwrap();
        assert_eq!(data(&z), vec![4., 5., 10., 11.]);
        let g = arr(&[2, 2], &[1., 0., 0., 1.]);
        // dz/da with identity g = bᵀ rows
        assert_eq!(data(&grad_dot_lhs(&g, &a, &b).unwrap()), vec![1., 0., 1., 0., 1., 1.]);
        assert_eq!(data(&grad_dot_rhs(&g, &a, &b).unwrap()), vec![1., 4., 2., 5., 3., 6.]);
        let v = arr(&[3], &[1., 1., 1.]);
        assert_eq!(data(&dot(&v, &v).unwrap()), vec![3.]);
        assert_eq!(data(&dot(&a, &v).unwrap()), vec![6., 15.]);
    }

    #[test]
    fn reductions_and_their_adjoints() {
        let a = arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(data(&sum(&[a.clone()]).unwrap()), vec![21.]);
        assert_eq!(data(&sum(&[a.clone(), Value::Int(0)]).unwrap()), vec![5., 7., 9.]);
        assert_eq!(data(&mean(&[a.clone(), Value::Int(-1)]).unwrap()), vec![2., 5.]);
        let k = sum(&[a.clone(), Value::Int(1), Value::Bool(true)]).unwrap();
        assert_eq!(k.shape().unwrap(), vec![2, 1]);
        let g = sum_grad(&[Value::Float(2.0), a.clone()]).unwrap();
        assert_eq!(data(&g), vec![2.; 6]);
        let g = mean_grad(&[arr(&[2], &[3., 6.]), a.clone(), Value::Int(1)]).unwrap();
        assert_eq!(data(&g), vec![1., 1., 1., 2., 2., 2.]);
        let g = sum_grad(&[arr(&[3], &[1., 2., 3.]), a, Value::Int(0)]).unwrap();
        assert_eq!(data(&g), vec![1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn row_operations() {
        let a = arr(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(data(&index(&a, &Value::Int(-1)).unwrap()), vec![3., 4.]);
        let b = setitem(&a, &Value::Int(0), &Value::Float(0.0)).unwrap();
        assert_eq!(data(&b), vec![0., 0., 3., 4.]);
        assert_eq!(data(&a), vec![1., 2., 3., 4.]);
        let c = append(&a, &arr(&[2], &[5., 6.])).unwrap();
        assert_eq!(c.shape().unwrap(), vec![3, 2]);
        assert!(drop_last(&c).unwrap().bitwise_eq(&a));
        let acc = add_at(&Value::Zero, &a, &Value::Int(1), &arr(&[2], &[1., 1.])).unwrap();
        assert_eq!(data(&acc), vec![0., 0., 1., 1.]);
        let saved = save_row(&a, &Value::Int(1)).unwrap();
        let r = restore_row(&setitem(&a, &Value::Int(1), &Value::Float(9.)).unwrap(), &Value::Int(1), &saved).unwrap();
        assert!(r.bitwise_eq(&a));
    }

    #[test]
    fn in_place_update_copies_shared_buffers() {
        let a = arr(&[2], &[1., 2.]);
        let mut b = a.clone();
        setitem_in_place(&mut b, &Value::Int(0), &Value::Float(5.)).unwrap();
        assert_eq!(data(&a), vec![1., 2.]);
        assert_eq!(data(&b), vec![5., 2.]);
    }

    #[test]
    fn persistent_rows() {
        let p = to_parray(&arr(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let q = setitem(&p, &Value::Int(-1), &arr(&[2], &[7., 8.])).unwrap();
        let saved = save_row(&p, &Value::Int(-1)).unwrap();
        assert_eq!(data(&index(&q, &Value::Int(1)).unwrap()), vec![7., 8.]);
        let back = restore_row(&q, &Value::Int(-1), &saved).unwrap();
        assert_eq!(data(&back), vec![1., 2., 3., 4.]);
    }
}
