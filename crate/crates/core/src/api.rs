//! One-call entry points: validate, transform and optimize.

use crate::ast::Program;
use crate::forward::{make_hvp, transform_forward};
use crate::optimizer::{optimize, OptimizeOptions};
use crate::reverse::transform_reverse;
use crate::template::Registry;
use crate::validate::ensure_valid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradOptions {
    /// Run the optimizer on the generated code.
    pub optimize: bool,
    pub opt: OptimizeOptions,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions {
            optimize: true,
            opt: OptimizeOptions::default(),
        }
    }
}

impl GradOptions {
    fn finish(&self, p: Program) -> Result<Program> {
        if self.optimize {
            optimize(&p, &self.opt)
        } else {
            Ok(p)
        }
    }
}

/// A generated program together with the name of the function to call.
#[derive(Debug, Clone)]
pub struct Derivative {
    pub program: Program,
    pub entry: String,
}

/// Reverse-mode derivative of `entry` with respect to the parameters at
/// `wrt`. Orders above one differentiate the previous derivative again
/// with respect to the same parameters.
pub fn grad(p: &Program, entry: &str, wrt: &[usize], order: usize, opts: &GradOptions) -> Result<Derivative> {
    grad_with(p, entry, wrt, order, opts, &Registry::builtin())
}

/// [`grad`] with a custom template registry.
pub fn grad_with(
    p: &Program,
    entry: &str,
    wrt: &[usize],
    order: usize,
    opts: &GradOptions,
    reg: &Registry,
) -> Result<Derivative> {
    if order == 0 {
        return Err(Error::transform("derivative order must be at least 1"));
    }
    let mut program = p.clone();
    let mut name = entry.to_string();
    for _ in 0..order {
        ensure_valid(&program, &name, wrt)?;
        program = opts.finish(transform_reverse(&program, &name, wrt, reg)?)?;
        name = program.functions[0].name.clone();
    }
    Ok(Derivative { program, entry: name })
}

/// Forward-mode derivative: the generated function takes a tangent per
/// `wrt` parameter and returns the outputs followed by their tangents.
pub fn grad_forward(p: &Program, entry: &str, wrt: &[usize], opts: &GradOptions) -> Result<Derivative> {
    ensure_valid(p, entry, wrt)?;
    let program = opts.finish(transform_forward(p, entry, wrt, &Registry::builtin())?)?;
    let entry = program.functions[0].name.clone();
    Ok(Derivative { program, entry })
}

/// Hessian-vector product by forward-over-reverse.
pub fn hvp(p: &Program, entry: &str, wrt: &[usize], opts: &GradOptions) -> Result<Derivative> {
    ensure_valid(p, entry, wrt)?;
    let program = make_hvp(p, entry, wrt, &Registry::builtin(), &|q| opts.finish(q))?;
    let program = opts.finish(program)?;
    let entry = program.functions[0].name.clone();
    Ok(Derivative { program, entry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::run;
    use crate::parser::parse;
    use crate::value::Value;

    #[test]
    fn second_derivative_of_square_is_two() {
        let p = parse("def f(x):\n    return x * x\n").unwrap();
        let d = grad(&p, "f", &[0], 2, &GradOptions::default()).unwrap();
        for x in [-3.5, 0.25, 7.0] {
            let v = run(&d.program, &d.entry, vec![Value::Float(x)]).unwrap();
            assert_eq!(v.as_f64().unwrap(), 2.0);
        }
    }

    #[test]
    fn second_derivative_of_cube() {
        let p = parse("def f(x):\n    return x * x * x\n").unwrap();
        for optimize in [true, false] {
            let opts = GradOptions { optimize, ..GradOptions::default() };
            let d = grad(&p, "f", &[0], 2, &opts).unwrap();
            let v = run(&d.program, &d.entry, vec![Value::Float(2.0)]).unwrap();
            assert_eq!(v.as_f64().unwrap(), 12.0);
        }
    }

    #[test]
    fn order_zero_is_rejected() {
        let p = parse("def f(x):\n    return x\n").unwrap();
        assert!(grad(&p, "f", &[0], 0, &GradOptions::default()).is_err());
    }
}
