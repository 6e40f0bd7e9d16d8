//! Literal argument syntax for `run` and `check`: a comma-separated list
//! of numbers, booleans and nested `[...]` lists. Integers without a
//! decimal point stay integers; list elements are always floats.

use anyhow::{anyhow, bail, Result};
use gradc::value::{DenseArray, Value};
use serde_json::Value as Json;

pub fn parse_args(text: &str) -> Result<Vec<Value>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let json: Json = serde_json::from_str(&format!("[{}]", text.replace("True", "true").replace("False", "false")))
        .map_err(|e| anyhow!("cannot parse arguments '{text}': {e}"))?;
    let Json::Array(items) = json else { unreachable!() };
    items.iter().map(to_value).collect()
}

fn to_value(j: &Json) -> Result<Value> {
    match j {
        Json::Number(n) => Ok(match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Float(n.as_f64().ok_or_else(|| anyhow!("bad number {n}"))?),
        }),
        Json::Bool(b) => Ok(Value::Bool(*b)),
        Json::Array(_) => {
            let mut shape = Vec::new();
            let mut probe = j;
            while let Json::Array(items) = probe {
                shape.push(items.len());
                match items.first() {
                    Some(first) => probe = first,
                    None => break,
                }
            }
            let mut data = Vec::new();
            flatten(j, &shape, &mut data)?;
            Ok(Value::dense(DenseArray::new(shape, data)?))
        }
        other => bail!("unsupported argument literal {other}"),
    }
}

fn flatten(j: &Json, shape: &[usize], data: &mut Vec<f64>) -> Result<()> {
    match (j, shape.split_first()) {
        (Json::Array(items), Some((&len, rest))) if items.len() == len => {
            items.iter().try_for_each(|item| flatten(item, rest, data))
        }
        (Json::Number(n), None) => {
            data.push(n.as_f64().ok_or_else(|| anyhow!("bad number {n}"))?);
            Ok(())
        }
        (Json::Array(_) | Json::Number(_), _) => bail!("ragged array literal"),
        (other, _) => bail!("array elements must be numbers, got {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalars_and_arrays() {
        let v = parse_args("3, 2.5, [[1, 2], [3, 4]], True").unwrap();
        assert!(matches!(v[0], Value::Int(3)));
        assert!(matches!(v[1], Value::Float(x) if x == 2.5));
        let a = v[2].to_dense().unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(v[3], Value::Bool(true)));
    }

    #[test]
    fn ragged_lists_are_rejected() {
        assert!(parse_args("[[1, 2], [3]]").is_err());
        assert!(parse_args("[1, [2]]").is_err());
    }
}
