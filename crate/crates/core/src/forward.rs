//! Forward-mode source transformation and Hessian-vector products.
//!
//! Every active assignment `z = f(x, y)` gains a tangent statement
//! `tz = ...` computed from the tangent templates, placed before the primal
//! statement (templates read the inputs, which the primal statement may
//! overwrite). Control flow is kept as is. The transformed function takes
//! one tangent per differentiated parameter after the original parameters
//! and returns the primal output followed by its tangent.
//!
//! Tape operations in the input (a reverse-mode derivative) carry their
//! tangents along on the same tape, which is what makes forward-over-reverse
//! Hessian-vector products work.

use std::collections::{BTreeMap, BTreeSet};

use crate::activity::{analyze, tape_label, Activity};
use crate::anf::{classify, normalize_body, Rhs};
use crate::ast::*;
use crate::error::{Error, Result};
use crate::names::NameGen;
use crate::reverse::transform_reverse;
use crate::template::{expand_tangent, Registry, NONDIFFERENTIABLE};

/// Name of the forward derivative of `entry`.
pub fn forward_name(entry: &str) -> String {
    format!("d{entry}_fwd")
}

/// Forward-mode derivative of `entry` with respect to the parameters at
/// positions `wrt`. Parameter defaults are dropped: every argument must be
/// passed, followed by one tangent per `wrt` parameter.
pub fn transform_forward(p: &Program, entry: &str, wrt: &[usize], reg: &Registry) -> Result<Program> {
    let f = p
        .function(entry)
        .ok_or_else(|| Error::UnknownFunction(entry.to_string()))?;
    if wrt.is_empty() {
        return Err(Error::transform("no parameter to differentiate with respect to"));
    }
    let mut wrt_names: Vec<String> = Vec::new();
    for &i in wrt {
        let param = f
            .params
            .get(i)
            .ok_or_else(|| Error::transform(format!("'{entry}' has no parameter at position {i}")))?;
        if wrt_names.contains(&param.name) {
            return Err(Error::transform(format!("parameter '{}' listed twice", param.name)));
        }
        wrt_names.push(param.name.clone());
    }
    let mut t = Forward::new(p, reg);
    let name = t.names[entry].clone();
    t.started.insert(entry.to_string());
    let d = t.function(f, &name, &wrt_names)?;
    let mut functions = vec![d];
    functions.extend(t.generated);
    functions.extend(reachable_originals(p, t.plain_calls));
    Ok(Program::new(functions))
}

/// Original functions in `roots`, plus everything they call, in program
/// order.
fn reachable_originals(p: &Program, roots: BTreeSet<String>) -> Vec<FunctionDef> {
    let mut needed: Vec<String> = roots.into_iter().collect();
    let mut seen = BTreeSet::new();
    while let Some(g) = needed.pop() {
        if !seen.insert(g.clone()) {
            continue;
        }
        if let Some(gf) = p.function(&g) {
            walk_stmts(&gf.body, &mut |s| {
                for e in s.exprs() {
                    needed.extend(e.calls().into_iter().filter(|c| p.has_function(c)));
                }
            });
        }
    }
    p.functions.iter().filter(|f| seen.contains(&f.name)).cloned().collect()
}

/// Hessian-vector product of `entry` by forward-over-reverse.
///
/// The returned program contains `hvp_<entry>(params..., v)` (one direction
/// `v_<p>` per parameter when several are differentiated), computing
/// `H v` where `H` is the Hessian of `entry` with respect to `wrt`, along
/// with the derivatives it is built from. `optimize` is applied to the
/// reverse-mode gradient before it is differentiated again.
pub fn make_hvp(
    p: &Program,
    entry: &str,
    wrt: &[usize],
    reg: &Registry,
    optimize: &dyn Fn(Program) -> Result<Program>,
) -> Result<Program> {
    let f = p
        .function(entry)
        .ok_or_else(|| Error::UnknownFunction(entry.to_string()))?;
    let grad = optimize(transform_reverse(p, entry, wrt, reg)?)?;
    let gname = grad.functions[0].name.clone();
    let fwd = transform_forward(&grad, &gname, wrt, reg)?;
    let fname = fwd.functions[0].name.clone();

    let mut gen = NameGen::for_program(&grad);
    for g in &fwd.functions {
        gen.reserve(&g.name);
    }
    let hvp_name = gen.fresh(&format!("hvp_{entry}"));
    let mut params: Vec<Param> = f.params.clone();
    let dirs: Vec<String> = if wrt.len() == 1 {
        vec![gen.fresh("v")]
    } else {
        wrt.iter().map(|&i| gen.fresh(&format!("v_{}", f.params[i].name))).collect()
    };
    params.extend(dirs.iter().map(|d| Param::new(d.clone())));
    let out = gen.fresh("_out");
    let mut args: Vec<Expr> = f.params.iter().map(|p| Expr::name(p.name.clone())).collect();
    args.push(Expr::Float(1.0));
    args.extend(dirs.iter().map(|d| Expr::name(d.clone())));
    let k = wrt.len();
    let result = if k == 1 {
        vec![Expr::index(Expr::name(out.clone()), Expr::Int(1))]
    } else {
        (k..2 * k).map(|i| Expr::index(Expr::name(out.clone()), Expr::Int(i as i64))).collect()
    };
    let body = vec![Stmt::assign(out, Expr::call(fname, args)), Stmt::ret(result)];

    let mut functions = vec![FunctionDef::new(hvp_name, params, body)];
    let mut seen = BTreeSet::new();
    for g in fwd.functions.into_iter().chain(grad.functions) {
        if seen.insert(g.name.clone()) {
            functions.push(g);
        }
    }
    Ok(Program::new(functions))
}

struct Forward<'a> {
    src: &'a Program,
    reg: &'a Registry,
    base: NameGen,
    /// Forward-derivative name of every function of the source.
    names: BTreeMap<String, String>,
    started: BTreeSet<String>,
    generated: Vec<FunctionDef>,
    plain_calls: BTreeSet<String>,
}

struct Ctx {
    names: NameGen,
    act: Activity,
    tangents: BTreeMap<String, String>,
    /// Labels pushed in this function.
    pushes: BTreeSet<String>,
    /// Labels popped in this function.
    pops: BTreeSet<String>,
}

impl Ctx {
    fn tangent(&mut self, v: &str) -> String {
        if let Some(t) = self.tangents.get(v) {
            return t.clone();
        }
        let t = self.names.fresh(&format!("t{v}"));
        self.tangents.insert(v.to_string(), t.clone());
        t
    }

    /// Whether the tangent of a value pushed under `label` travels on the
    /// tape. Labels pushed and popped in different functions (helpers of a
    /// reverse-mode derivative) always carry one, so both sides agree.
    fn carries_tangent(&self, label: &str) -> bool {
        if !(self.pushes.contains(label) && self.pops.contains(label)) {
            return true;
        }
        self.act.pushed.get(label).is_some_and(|v| self.act.is_active(v))
    }
}

fn zero_of(e: Expr) -> Expr {
    Expr::call("init_grad", vec![e])
}

impl<'a> Forward<'a> {
    fn new(src: &'a Program, reg: &'a Registry) -> Self {
        let mut base = NameGen::for_program(src);
        let names = src
            .functions
            .iter()
            .map(|f| (f.name.clone(), base.fresh(&forward_name(&f.name))))
            .collect();
        Forward {
            src,
            reg,
            base,
            names,
            started: BTreeSet::new(),
            generated: Vec::new(),
            plain_calls: BTreeSet::new(),
        }
    }

    fn function(&mut self, f: &FunctionDef, name: &str, wrt: &[String]) -> Result<FunctionDef> {
        let mut names = self.base.clone();
        let mut body = normalize_body(&f.body, &mut names)?;
        let ret: Vec<String> = match body.iter().rposition(|s| !s.is_comment()) {
            Some(i) => match &body[i].kind {
                StmtKind::Return(values) => {
                    let r = values.iter().map(|v| v.as_name().expect("normalized").to_string()).collect();
                    body.truncate(i);
                    r
                }
                _ => return Err(Error::transform(format!("'{}' does not end with a return", f.name))),
            },
            None => return Err(Error::transform(format!("'{}' is empty", f.name))),
        };
        let (mut pushes, mut pops) = (BTreeSet::new(), BTreeSet::new());
        walk_stmts(&body, &mut |s| {
            for e in s.exprs() {
                if let Some(l) = tape_label(e) {
                    if e.is_call_to("push") {
                        pushes.insert(l.to_string());
                    } else {
                        pops.insert(l.to_string());
                    }
                }
            }
        });
        // A value pushed by another function may vary with the inputs, and
        // its tangent travels with it, so the popped variable seeds the
        // analysis like a differentiated parameter.
        let mut seeds = wrt.to_vec();
        walk_stmts(&body, &mut |s| {
            if let StmtKind::Assign { target, value } = &s.kind {
                if let Some(l) = tape_label(value) {
                    if !pushes.contains(l) && !seeds.contains(target) {
                        seeds.push(target.clone());
                    }
                }
            }
        });
        let act = analyze(&body, &seeds, &ret, &|n| self.src.has_function(n));
        let mut cx = Ctx {
            names,
            act,
            tangents: BTreeMap::new(),
            pushes,
            pops,
        };

        let params: Vec<String> = f.params.iter().map(|p| p.name.clone()).collect();
        let mut ps: Vec<Param> = params.iter().map(|p| Param::new(p.clone())).collect();
        for w in wrt {
            let t = cx.tangent(w);
            ps.push(Param::new(t));
        }
        let mut out = Vec::new();
        // Parameters that become active through reassignment start with a
        // zero tangent.
        let reassigned: Vec<&String> = params.iter().filter(|p| !wrt.contains(p) && cx.act.is_active(p)).collect();
        for p in reassigned {
            let t = cx.tangent(p);
            out.push(Stmt::assign(t, zero_of(Expr::name(p.clone()))));
        }
        out.extend(self.block(&mut cx, &body)?);
        let mut values: Vec<Expr> = ret.iter().map(|r| Expr::name(r.clone())).collect();
        for r in &ret {
            if cx.act.is_active(r) || wrt.contains(r) {
                values.push(Expr::name(cx.tangent(r)));
            } else {
                values.push(zero_of(Expr::name(r.clone())));
            }
        }
        out.push(Stmt::ret(values));
        Ok(FunctionDef::new(name, ps, out))
    }

    fn block(&mut self, cx: &mut Ctx, body: &[Stmt]) -> Result<Vec<Stmt>> {
        let mut out = Vec::new();
        for s in body {
            self.stmt(cx, s, &mut out)?;
        }
        Ok(out)
    }

    fn stmt(&mut self, cx: &mut Ctx, s: &Stmt, out: &mut Vec<Stmt>) -> Result<()> {
        match &s.kind {
            StmtKind::Assign { target, value } => self.assign(cx, s, target, value, out)?,
            StmtKind::ExprStmt(e) => {
                if let Expr::Call { func, args } = e {
                    if self.src.has_function(func) {
                        self.plain_calls.insert(func.clone());
                    }
                    if let (true, Some(label)) = (func == "push", tape_label(e)) {
                        if cx.carries_tangent(label) {
                            let tv = match args[1].as_name() {
                                Some(v) if cx.act.is_active(v) => Expr::name(cx.tangent(v)),
                                _ => zero_of(args[1].clone()),
                            };
                            out.push(Stmt::expr(Expr::call(
                                "push",
                                vec![args[0].clone(), tv, Expr::str(format!("{label}_t"))],
                            )));
                        }
                    }
                }
                out.push(s.clone());
            }
            StmtKind::If { cond, then_body, else_body } => {
                let t = self.block(cx, then_body)?;
                let e = self.block(cx, else_body)?;
                out.push(Stmt::if_(cond.clone(), t, e));
            }
            StmtKind::While { cond, body } => {
                let b = self.block(cx, body)?;
                out.push(Stmt::while_(cond.clone(), b));
            }
            StmtKind::ForRange { var, count, body } => {
                let b = self.block(cx, body)?;
                out.push(Stmt::for_range(var.clone(), count.clone(), b));
            }
            // Gradient-only code has no forward-mode meaning.
            StmtKind::InsertGradOf { .. } | StmtKind::Comment(_) => {}
            StmtKind::Return(_) => {
                return Err(Error::transform(format!(
                    "line {}: 'return' is only supported as the last statement",
                    s.line
                )))
            }
            StmtKind::IndexAssign { .. } | StmtKind::Unsupported { .. } => {
                unreachable!("removed by normalization")
            }
        }
        Ok(())
    }

    fn assign(&mut self, cx: &mut Ctx, s: &Stmt, z: &str, value: &Expr, out: &mut Vec<Stmt>) -> Result<()> {
        let z_active = cx.act.is_active(z);
        match classify(value, &|n| self.src.has_function(n)) {
            Rhs::Primitive("stack", _) => out.push(s.clone()),
            Rhs::Primitive("pop", args) => {
                out.push(s.clone());
                if let Some(label) = tape_label(value) {
                    if cx.carries_tangent(label) {
                        let tz = cx.tangent(z);
                        out.push(Stmt::assign(
                            tz,
                            Expr::call("pop", vec![args[0].clone(), Expr::str(format!("{label}_t"))]),
                        ));
                        return Ok(());
                    }
                }
                if z_active {
                    let tz = cx.tangent(z);
                    out.push(Stmt::assign(tz, zero_of(Expr::name(z))));
                }
            }
            Rhs::UserCall(g, args) if z_active && args.iter().any(|a| cx.act.is_active_expr(a)) => {
                let fname = self.callee(g)?;
                let callee = self.src.function(g).expect("user function");
                let mut full: Vec<Expr> = args.to_vec();
                for p in &callee.params[args.len()..] {
                    full.push(p.default.clone().ok_or_else(|| {
                        Error::transform(format!("call of '{g}' is missing argument '{}'", p.name))
                    })?);
                }
                let mut call_args = full.clone();
                for a in &full {
                    call_args.push(match a.as_name() {
                        Some(v) if cx.act.is_active(v) => Expr::name(cx.tangent(v)),
                        _ => zero_of(a.clone()),
                    });
                }
                let res = cx.names.fresh("_out");
                let tz = cx.tangent(z);
                out.push(Stmt::assign(res.clone(), Expr::call(fname, call_args)));
                // The derivative returns the k primal values, then their k
                // tangents; a multi-value callee is repacked into tuples.
                let k = return_arity(callee);
                let part = |i: usize| Expr::index(Expr::name(res.clone()), Expr::Int(i as i64));
                let pack = |r: std::ops::Range<usize>| match r.len() {
                    1 => part(r.start),
                    _ => Expr::call("tuple", r.map(part).collect()),
                };
                out.push(Stmt::assign(z, pack(0..k)));
                out.push(Stmt::assign(tz, pack(k..2 * k)));
            }
            rhs => {
                if let Rhs::UserCall(g, _) = rhs {
                    self.plain_calls.insert(g.to_string());
                }
                let prim = match rhs {
                    Rhs::Identity(x) => Some(("identity", vec![x.clone()])),
                    Rhs::Primitive(name, _) if NONDIFFERENTIABLE.contains(&name) => None,
                    Rhs::Primitive(name, args) => Some((name, args)),
                    _ => None,
                };
                let mut tangent = None;
                if let Some((name, args)) = prim.filter(|(_, a)| z_active && a.iter().any(|x| cx.act.is_active_expr(x))) {
                    let t = self.reg.tangent(name, args.len())?;
                    let act = cx.act.clone();
                    tangent = expand_tangent(t, &Expr::name(z), &args, &|a| act.is_active_expr(a), &mut |a| {
                        Ok(Expr::name(cx.tangent(a.as_name().expect("active operands are names"))))
                    })?;
                }
                match tangent {
                    Some(e) => {
                        let tz = cx.tangent(z);
                        out.push(Stmt::assign(tz, e));
                        out.push(s.clone());
                    }
                    None => {
                        out.push(s.clone());
                        if z_active {
                            let tz = cx.tangent(z);
                            out.push(Stmt::assign(tz, zero_of(Expr::name(z))));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Forward derivative of a called function with respect to all of its
    /// parameters, generated on first use.
    fn callee(&mut self, g: &str) -> Result<String> {
        let name = self.names[g].clone();
        if self.started.insert(g.to_string()) {
            let f = self.src.function(g).expect("user function");
            let params: Vec<String> = f.params.iter().map(|p| p.name.clone()).collect();
            let d = self.function(f, &name, &params)?;
            self.generated.push(d);
        }
        Ok(name)
    }
}

/// Number of values `f` returns from its final `return`.
fn return_arity(f: &FunctionDef) -> usize {
    match f.body.iter().rev().find(|s| !s.is_comment()).map(|s| &s.kind) {
        Some(StmtKind::Return(values)) => values.len().max(1),
        _ => 1,
    }
}
