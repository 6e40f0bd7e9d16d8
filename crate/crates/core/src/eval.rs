//! Tree-walking evaluator for programs, both user-written and generated.

use std::collections::HashMap;

use crate::ast::*;
use crate::builtins;
use crate::error::{Error, Result};
use crate::kernels as k;
use crate::printer::{emit_expr, emit_stmt_string};
use crate::tape::Tape;
use crate::value::Value;

/// Knobs for one evaluation.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Update arrays in place for `v = f(v, ...)` when `f` is one of the
    /// row-updating builtins and the buffer is not shared. Turning this off
    /// gives purely functional (copying) semantics.
    pub inplace: bool,
    /// Print every executed statement to stderr. Defaults to the
    /// `GRADC_TRACE` environment variable.
    pub trace: bool,
    /// Collect `print` output instead of writing it to stdout.
    pub capture_print: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            inplace: true,
            trace: trace_from_env(),
            capture_print: false,
        }
    }
}

fn trace_from_env() -> bool {
    matches!(std::env::var("GRADC_TRACE").as_deref(), Ok(v) if !v.is_empty() && v != "0")
}

/// Evaluate `entry` on `args` and hand back every tape created by
/// `stack()` during the evaluation, without checking that they are empty.
pub fn eval_program(p: &Program, entry: &str, args: Vec<Value>) -> Result<(Value, Vec<Tape>)> {
    let mut it = Interpreter::new(p, EvalOptions::default());
    let v = it.call(entry, args)?;
    Ok((v, it.tapes))
}

/// Evaluate `entry` on a fresh tape and require the tape to be empty
/// afterwards.
pub fn run(p: &Program, entry: &str, args: Vec<Value>) -> Result<Value> {
    run_with(p, entry, args, EvalOptions::default()).map(|o| o.value)
}

/// Result of [`run_with`].
#[derive(Debug)]
pub struct Outcome {
    pub value: Value,
    /// Lines printed by `print`, when capturing.
    pub printed: Vec<String>,
    /// Pushes over all tapes.
    pub tape_pushes: u64,
    /// Sum of the per-tape high-water marks (an upper bound on the
    /// number of simultaneously stored entries).
    pub tape_high_water: usize,
}

pub fn run_with(p: &Program, entry: &str, args: Vec<Value>, opts: EvalOptions) -> Result<Outcome> {
    let mut it = Interpreter::new(p, opts);
    let value = it.call(entry, args)?;
    let left: usize = it.tapes.iter().map(Tape::len).sum();
    if left > 0 {
        return Err(Error::runtime(format!(
            "tape not empty after evaluation: {left} entries left"
        )));
    }
    Ok(Outcome {
        value,
        printed: it.printed,
        tape_pushes: it.tapes.iter().map(Tape::pushes).sum(),
        tape_high_water: it.tapes.iter().map(Tape::high_water).sum(),
    })
}

enum Flow {
    Normal,
    Return(Value),
}

type Env = HashMap<String, Value>;

pub struct Interpreter<'p> {
    functions: HashMap<&'p str, &'p FunctionDef>,
    /// Tapes created by `stack()`, indexed by handle.
    pub tapes: Vec<Tape>,
    opts: EvalOptions,
    printed: Vec<String>,
    depth: usize,
}

const MAX_DEPTH: usize = 200;

impl<'p> Interpreter<'p> {
    pub fn new(p: &'p Program, opts: EvalOptions) -> Self {
        Interpreter {
            functions: p.functions.iter().map(|f| (f.name.as_str(), f)).collect(),
            tapes: Vec::new(),
            opts,
            printed: Vec::new(),
            depth: 0,
        }
    }

    /// Call a user function by name.
    pub fn call(&mut self, name: &str, args: Vec<Value>) -> Result<Value> {
        let f = *self
            .functions
            .get(name)
            .ok_or_else(|| Error::UnknownFunction(name.to_string()))?;
        if args.len() > f.params.len() {
            return Err(Error::runtime(format!(
                "{name}() takes {} arguments but {} were given",
                f.params.len(),
                args.len()
            )));
        }
        let mut env = Env::new();
        let given = args.len();
        for (p, v) in f.params.iter().zip(args) {
            env.insert(p.name.clone(), v);
        }
        for p in &f.params[given..] {
            match &p.default {
                Some(d) => {
                    let v = self.eval_expr(d, &Env::new(), &f.name)?;
                    env.insert(p.name.clone(), v);
                }
                None => {
                    return Err(Error::runtime(format!(
                        "{name}() missing required argument '{}'",
                        p.name
                    )))
                }
            }
        }
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            self.depth -= 1;
            return Err(Error::runtime("maximum call depth exceeded"));
        }
        if self.opts.trace {
            eprintln!("[trace] call {name}");
        }
        let r = self.exec_block(&f.body, &mut env, &f.name);
        self.depth -= 1;
        match r? {
            Flow::Return(v) => Ok(v),
            Flow::Normal => Ok(Value::None),
        }
    }

    fn exec_block(&mut self, body: &[Stmt], env: &mut Env, func: &str) -> Result<Flow> {
        for s in body {
            if let Flow::Return(v) = self.exec(s, env, func)? {
                return Ok(Flow::Return(v));
            }
        }
        Ok(Flow::Normal)
    }

    fn trace(&self, s: &Stmt, func: &str, env: &Env) {
        if !self.opts.trace {
            return;
        }
        let text = emit_stmt_string(s);
        let text = text.lines().next().unwrap_or("");
        let mut line = format!("[trace] {func}:{}: {text}", s.line);
        if let StmtKind::Assign { target, .. } | StmtKind::IndexAssign { target, .. } = &s.kind {
            if let Some(v) = env.get(target) {
                let mut shown = v.to_string();
                if shown.len() > 120 {
                    shown.truncate(117);
                    shown.push_str("...");
                }
                line.push_str(&format!("  ->  {target} = {shown}"));
            }
        }
        eprintln!("{line}");
    }

    fn exec(&mut self, s: &Stmt, env: &mut Env, func: &str) -> Result<Flow> {
        let flow = match &s.kind {
            StmtKind::Comment(_) => return Ok(Flow::Normal),
            StmtKind::Assign { target, value } => {
                self.assign(target, value, env, func)?;
                Flow::Normal
            }
            StmtKind::IndexAssign {
                target,
                index,
                value,
            } => {
                let i = self.eval_expr(index, env, func)?;
                let v = self.eval_expr(value, env, func)?;
                let mut x = env
                    .remove(target)
                    .ok_or_else(|| Error::runtime(format!("name '{target}' is not defined")))?;
                let r = if self.opts.inplace {
                    k::setitem_in_place(&mut x, &i, &v)
                } else {
                    k::setitem(&x, &i, &v).map(|nx| x = nx)
                };
                env.insert(target.clone(), x);
                r?;
                Flow::Normal
            }
            StmtKind::ExprStmt(e) => {
                self.eval_expr(e, env, func)?;
                Flow::Normal
            }
            StmtKind::Return(values) => {
                let mut vs = Vec::with_capacity(values.len());
                for e in values {
                    vs.push(self.eval_expr(e, env, func)?);
                }
                self.trace(s, func, env);
                return Ok(Flow::Return(if vs.len() == 1 {
                    vs.pop().unwrap()
                } else {
                    Value::tuple(vs)
                }));
            }
            StmtKind::If {
                cond,
                then_body,
                else_body,
            } => {
                let c = self.eval_expr(cond, env, func)?.as_bool()?;
                self.trace(s, func, env);
                return self.exec_block(if c { then_body } else { else_body }, env, func);
            }
            StmtKind::While { cond, body } => {
                self.trace(s, func, env);
                while self.eval_expr(cond, env, func)?.as_bool()? {
                    if let Flow::Return(v) = self.exec_block(body, env, func)? {
                        return Ok(Flow::Return(v));
                    }
                }
                return Ok(Flow::Normal);
            }
            StmtKind::ForRange { var, count, body } => {
                let n = self.eval_expr(count, env, func)?.as_int()?;
                self.trace(s, func, env);
                for i in 0..n.max(0) {
                    env.insert(var.clone(), Value::Int(i));
                    if let Flow::Return(v) = self.exec_block(body, env, func)? {
                        return Ok(Flow::Return(v));
                    }
                }
                return Ok(Flow::Normal);
            }
            // Inserted gradient code only runs inside derivatives.
            StmtKind::InsertGradOf { .. } => Flow::Normal,
            StmtKind::Unsupported { construct, .. } => {
                return Err(Error::runtime(format!(
                    "line {}: unsupported construct '{construct}'",
                    s.line
                )))
            }
        };
        self.trace(s, func, env);
        Ok(flow)
    }

    fn assign(&mut self, target: &str, value: &Expr, env: &mut Env, func: &str) -> Result<()> {
        if self.opts.inplace {
            if let Expr::Call { func: callee, args } = value {
                let self_update = builtins::updates_first_arg(callee)
                    && !self.functions.contains_key(callee.as_str())
                    && args.first().and_then(|a| a.as_name()) == Some(target)
                    && env.contains_key(target);
                if self_update {
                    let rest = args[1..]
                        .iter()
                        .map(|a| self.eval_expr(a, env, func))
                        .collect::<Result<Vec<_>>>()?;
                    check_arity(callee, args.len())?;
                    let mut x = env.remove(target).expect("checked above");
                    let r = match callee.as_str() {
                        "setitem" => k::setitem_in_place(&mut x, &rest[0], &rest[1]),
                        "add_at" => k::add_at_in_place(&mut x, &rest[0], &rest[1], &rest[2]),
                        "restore_row" => k::restore_row_in_place(&mut x, &rest[0], &rest[1]),
                        "drop_last" => k::drop_last_in_place(&mut x),
                        other => unreachable!("{other} does not update in place"),
                    };
                    env.insert(target.to_string(), x);
                    return r;
                }
            }
        }
        let v = self.eval_expr(value, env, func)?;
        env.insert(target.to_string(), v);
        Ok(())
    }

    pub fn eval_expr(&mut self, e: &Expr, env: &Env, func: &str) -> Result<Value> {
        match e {
            Expr::Name(n) => match env.get(n) {
                Some(v) => Ok(v.clone()),
                None if self.functions.contains_key(n.as_str()) => Err(Error::runtime(format!(
                    "function '{n}' used as a value"
                ))),
                None => Err(Error::runtime(format!("in {func}: name '{n}' is not defined"))),
            },
            Expr::Float(v) => Ok(Value::Float(*v)),
            Expr::Int(v) => Ok(Value::Int(*v)),
            Expr::Bool(b) => Ok(Value::Bool(*b)),
            Expr::None => Ok(Value::None),
            Expr::Str(_) => Err(Error::runtime(
                "string literals are only allowed as arguments of print, push and pop",
            )),
            Expr::BinOp { op, lhs, rhs } => {
                let a = self.eval_expr(lhs, env, func)?;
                let b = self.eval_expr(rhs, env, func)?;
                k::binop(*op, &a, &b)
            }
            Expr::Neg(inner) => {
                let v = self.eval_expr(inner, env, func)?;
                k::negative(&v)
            }
            Expr::Index { base, index } => {
                let b = self.eval_expr(base, env, func)?;
                let i = self.eval_expr(index, env, func)?;
                k::index(&b, &i)
            }
            Expr::Call { func: callee, args } => self.eval_call(callee, args, env, func),
        }
    }

    fn label(&self, e: &Expr) -> Result<String> {
        match e {
            Expr::Str(s) => Ok(s.clone()),
            other => Err(Error::runtime(format!(
                "tape label must be a string literal, got '{}'",
                emit_expr(other)
            ))),
        }
    }

    fn expect_tape(&mut self, e: &Expr, env: &Env, func: &str) -> Result<usize> {
        match self.eval_expr(e, env, func)? {
            Value::Tape(id) if id < self.tapes.len() => Ok(id),
            other => Err(Error::runtime(format!(
                "expected the tape handle, got {}",
                other.type_name()
            ))),
        }
    }

    fn eval_call(&mut self, callee: &str, args: &[Expr], env: &Env, func: &str) -> Result<Value> {
        if self.functions.contains_key(callee) {
            let vs = args
                .iter()
                .map(|a| self.eval_expr(a, env, func))
                .collect::<Result<Vec<_>>>()?;
            return self.call(callee, vs);
        }
        check_arity(callee, args.len())?;
        match callee {
            "push" => {
                let t = self.expect_tape(&args[0], env, func)?;
                let v = self.eval_expr(&args[1], env, func)?;
                let label = self.label(&args[2])?;
                let tape = &mut self.tapes[t];
                if self.opts.trace {
                    eprintln!("[trace] push '{label}' (tape {t}, depth {})", tape.len() + 1);
                }
                tape.push(&label, v);
                return Ok(Value::None);
            }
            "pop" => {
                let t = self.expect_tape(&args[0], env, func)?;
                let label = self.label(&args[1])?;
                let tape = &mut self.tapes[t];
                if self.opts.trace {
                    eprintln!("[trace] pop '{label}' (tape {t}, depth {})", tape.len());
                }
                return tape.pop(&label);
            }
            "stack" => {
                self.tapes.push(Tape::new());
                return Ok(Value::Tape(self.tapes.len() - 1));
            }
            "print" => {
                let mut parts = Vec::with_capacity(args.len());
                for a in args {
                    match a {
                        Expr::Str(s) => parts.push(s.clone()),
                        _ => parts.push(self.eval_expr(a, env, func)?.to_string()),
                    }
                }
                let line = parts.join(" ");
                if self.opts.capture_print {
                    self.printed.push(line);
                } else {
                    println!("{line}");
                }
                return Ok(Value::None);
            }
            _ => {}
        }
        let vs = args
            .iter()
            .map(|a| self.eval_expr(a, env, func))
            .collect::<Result<Vec<_>>>()?;
        call_builtin(callee, &vs)
    }
}

fn check_arity(name: &str, n: usize) -> Result<()> {
    let b = builtins::lookup(name).ok_or_else(|| Error::UnknownFunction(name.to_string()))?;
    if n < b.min_args || b.max_args.is_some_and(|m| n > m) {
        let expected = match b.max_args {
            Some(m) if m == b.min_args => format!("{m}"),
            Some(m) => format!("{} to {m}", b.min_args),
            None => format!("at least {}", b.min_args),
        };
        return Err(Error::runtime(format!(
            "{name}() takes {expected} arguments but {n} were given"
        )));
    }
    Ok(())
}

/// Evaluate a builtin on already evaluated arguments. Tape operations and
/// `print` need the interpreter and are not available here.
pub fn call_builtin(name: &str, a: &[Value]) -> Result<Value> {
    check_arity(name, a.len())?;
    use crate::ast::BinOp::*;
    match name {
        "add" => k::binop(Add, &a[0], &a[1]),
        "subtract" => k::binop(Sub, &a[0], &a[1]),
        "multiply" => k::binop(Mul, &a[0], &a[1]),
        "divide" => k::binop(Div, &a[0], &a[1]),
        "negative" => k::negative(&a[0]),
        "dot" => k::dot(&a[0], &a[1]),
        "tanh" => k::tanh(&a[0]),
        "exp" => k::exp(&a[0]),
        "log" => k::log(&a[0]),
        "sum" => k::sum(a),
        "mean" => k::mean(a),
        "zeros" => k::zeros(a),
        "append" => k::append(&a[0], &a[1]),
        "setitem" => k::setitem(&a[0], &a[1], &a[2]),
        "shape_of" => k::shape_of(&a[0]),
        "copy" => Ok(a[0].clone()),
        "drop_last" => k::drop_last(&a[0]),
        "parray" => k::to_parray(&a[0]),
        "dense" => k::to_dense(&a[0]),
        "tuple" => Ok(Value::tuple(a.to_vec())),
        "init_grad" => Ok(Value::Zero),
        "add_grad" => k::add_grad(&a[0], &a[1]),
        "unbroadcast" => k::unbroadcast(&a[0], &a[1]),
        "broadcast_like" => k::broadcast_like(&a[0], &a[1]),
        "sum_grad" => k::sum_grad(a),
        "mean_grad" => k::mean_grad(a),
        "grad_dot_lhs" => k::grad_dot_lhs(&a[0], &a[1], &a[2]),
        "grad_dot_rhs" => k::grad_dot_rhs(&a[0], &a[1], &a[2]),
        "add_at" => k::add_at(&a[0], &a[1], &a[2], &a[3]),
        "save_row" => k::save_row(&a[0], &a[1]),
        "restore_row" => k::restore_row(&a[0], &a[1], &a[2]),
        "stack" | "push" | "pop" | "print" => Err(Error::runtime(format!(
            "{name}() needs the interpreter"
        ))),
        other => Err(Error::UnknownFunction(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;

    fn run_src(src: &str, entry: &str, args: Vec<Value>) -> Result<Value> {
        run(&parse(src).unwrap(), entry, args)
    }

    #[test]
    fn arithmetic_and_calls() {
        let src = "def g(a):\n    return a * a\n\ndef f(x, y=2.0):\n    return g(x) + y\n";
        let v = run_src(src, "f", vec![Value::Float(3.0)]).unwrap();
        assert!(v.bitwise_eq(&Value::Float(11.0)));
    }

    #[test]
    fn loops_and_branches() {
        let src = "def f(x):\n    s = 0.0\n    for i in range(4):\n        s = s + x\n    while s > 1.0:\n        s = s / 2.0\n    if s < 0.5:\n        s = -s\n    return s\n";
        let v = run_src(src, "f", vec![Value::Float(1.0)]).unwrap();
        assert!(v.bitwise_eq(&Value::Float(1.0)));
        let v = run_src(src, "f", vec![Value::Float(0.0625)]).unwrap();
        assert!(v.bitwise_eq(&Value::Float(-0.25)));
    }

    #[test]
    fn tape_round_trip_and_label_check() {
        let ok = "def f(x):\n    _stack = stack()\n    push(_stack, x, 'a1')\n    y = pop(_stack, 'a1')\n    return y\n";
        assert!(run_src(ok, "f", vec![Value::Float(1.0)]).is_ok());
        let bad = "def f(x):\n    _stack = stack()\n    push(_stack, x, 'a1')\n    y = pop(_stack, 'b2')\n    return y\n";
        assert!(matches!(
            run_src(bad, "f", vec![Value::Float(1.0)]),
            Err(Error::TapeMismatch { .. })
        ));
        let left = "def f(x):\n    _stack = stack()\n    push(_stack, x, 'a1')\n    return x\n";
        assert!(run_src(left, "f", vec![Value::Float(1.0)]).is_err());
    }

    #[test]
    fn each_stack_call_makes_an_independent_tape() {
        let src = "def f(x):\n    s1 = stack()\n    s2 = stack()\n    push(s1, x, 'a')\n    push(s2, x, 'b')\n    y = pop(s1, 'a')\n    z = pop(s2, 'b')\n    return y + z\n";
        let v = run_src(src, "f", vec![Value::Float(1.5)]).unwrap();
        assert!(v.bitwise_eq(&Value::Float(3.0)));
        let (_, tapes) = eval_program(&parse(src).unwrap(), "f", vec![Value::Float(1.0)]).unwrap();
        assert_eq!(tapes.len(), 2);
        assert!(tapes.iter().all(|t| t.is_empty() && t.pushes() == 1));
    }

    #[test]
    fn index_assignment_is_in_place_without_aliasing() {
        let src = "def f(x):\n    y = x\n    y[0] = 5.0\n    return x\n";
        let x = Value::vector(&[1.0, 2.0]);
        let v = run_src(src, "f", vec![x]).unwrap();
        assert_eq!(v.flat().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn print_is_captured() {
        let p = parse("def f(x):\n    print('value', x)\n    return x\n").unwrap();
        let opts = EvalOptions {
            capture_print: true,
            ..EvalOptions::default()
        };
        let out = run_with(&p, "f", vec![Value::Float(2.0)], opts).unwrap();
        assert_eq!(out.printed, vec!["value 2.0".to_string()]);
    }

    #[test]
    fn multiple_returns_make_a_tuple() {
        let v = run_src("def f(x):\n    return x, x\n", "f", vec![Value::Int(1)]).unwrap();
        assert_eq!(v.to_string(), "(1, 1)");
    }
}
