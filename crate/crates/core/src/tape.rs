//! The LIFO tape shared by the forward and backward pass of a derivative.

use crate::error::{Error, Result};
use crate::value::Value;

/// Stack of labelled values.
///
/// Pushing a value stores a snapshot: dense buffers are reference counted
/// and copy-on-write, so an in-place update of the original after the push
/// copies the buffer instead of corrupting the tape entry. Persistent
/// arrays push only their version handle.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<(String, Value)>,
    pushes: u64,
    high_water: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn push(&mut self, label: &str, v: Value) {
        self.entries.push((label.to_string(), v));
        self.pushes += 1;
        self.high_water = self.high_water.max(self.entries.len());
    }

    /// Pop the most recent entry, which must carry `label`.
    pub fn pop(&mut self, label: &str) -> Result<Value> {
        match self.entries.last() {
            None => Err(Error::TapeEmpty(label.to_string())),
            Some((found, _)) if found != label => Err(Error::TapeMismatch {
                expected: label.to_string(),
                found: found.clone(),
            }),
            Some(_) => Ok(self.entries.pop().expect("non-empty").1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of pushes since creation.
    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    /// Largest number of simultaneous entries seen.
    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifo_with_labels() {
        let mut t = Tape::new();
        t.push("a", Value::Float(1.0));
        t.push("b", Value::Float(2.0));
        assert!(matches!(t.pop("a"), Err(Error::TapeMismatch { .. })));
        assert!(t.pop("b").unwrap().bitwise_eq(&Value::Float(2.0)));
        assert!(t.pop("a").unwrap().bitwise_eq(&Value::Float(1.0)));
        assert!(matches!(t.pop("a"), Err(Error::TapeEmpty(_))));
        assert_eq!(t.high_water(), 2);
    }

    #[test]
    fn pushed_arrays_survive_in_place_updates() {
        let mut t = Tape::new();
        let mut x = Value::vector(&[1.0, 2.0]);
        t.push("x", x.clone());
        crate::kernels::setitem_in_place(&mut x, &Value::Int(0), &Value::Float(9.0)).unwrap();
        assert_eq!(t.pop("x").unwrap().flat().unwrap(), vec![1.0, 2.0]);
        assert_eq!(x.flat().unwrap(), vec![9.0, 2.0]);
    }
}
