//! Reverse-mode source transformation.
//!
//! The entry function is normalized (one primitive per statement) and
//! rewritten into a derivative function made of two halves:
//!
//! * the forward pass: the original statements, each preceded by a push of
//!   the variable it is about to overwrite, and
//! * the backward pass: for every forward statement, in reverse order, a
//!   pop restoring the overwritten value followed by the expanded adjoint
//!   template of the statement's primitive.
//!
//! Control flow is reversed by recording branch decisions and iteration
//! counts on the tape. Calls to user functions whose result needs a
//! derivative are split into a primal helper (`_primal_g`) that leaves its
//! intermediate state on the tape and an adjoint helper (`_adjoint_g`) that
//! consumes it.
//!
//! The output is ordinary source: it parses, validates and can be fed back
//! into the transform for higher-order derivatives. Tape operations found
//! in the input (from a previous transform) are themselves differentiated:
//! the gradient of a popped value travels back to its push through the
//! same tape under a fresh label.

use std::collections::{BTreeMap, BTreeSet};

use crate::activity::{analyze, tape_label, Activity};
use crate::anf::{classify, normalize_body, Rhs};
use crate::ast::*;
use crate::error::{Error, Result};
use crate::names::{LabelGen, NameGen};
use crate::printer::emit_stmt_string;
use crate::template::{expand_adjoint, Registry, NONDIFFERENTIABLE};

/// Name of the derivative of `entry` with respect to `wrt`: `dfdx`,
/// `dfdx_y` for several parameters.
pub fn derivative_name(entry: &str, wrt: &[&str]) -> String {
    format!("d{entry}d{}", wrt.join("_"))
}

/// Differentiate `entry` with respect to the parameters at positions `wrt`.
///
/// The result holds the derivative function, the helpers it calls, and the
/// original functions those call without differentiation. The derivative
/// takes the original parameters plus a seed for the output gradient
/// (default `1.0`) and returns one gradient per `wrt` entry.
pub fn transform_reverse(p: &Program, entry: &str, wrt: &[usize], reg: &Registry) -> Result<Program> {
    let f = p
        .function(entry)
        .ok_or_else(|| Error::UnknownFunction(entry.to_string()))?;
    if wrt.is_empty() {
        return Err(Error::transform("no parameter to differentiate with respect to"));
    }
    let mut wrt_names = Vec::new();
    for &i in wrt {
        let param = f.params.get(i).ok_or_else(|| {
            Error::transform(format!("'{entry}' has no parameter at position {i}"))
        })?;
        if wrt_names.contains(&param.name) {
            return Err(Error::transform(format!("parameter '{}' listed twice", param.name)));
        }
        wrt_names.push(param.name.clone());
    }
    let mut t = Transformer::new(p, reg);
    let refs: Vec<&str> = wrt_names.iter().map(String::as_str).collect();
    let name = t.base.fresh(&derivative_name(entry, &refs));
    let mut d = t.function(f, &name, Role::Entry(&wrt_names))?;

    let mut functions = vec![d.remove(0)];
    functions.extend(t.generated);
    // Original functions still called as-is, and everything they call.
    let mut needed: Vec<String> = t.plain_calls.into_iter().collect();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    while let Some(g) = needed.pop() {
        if !seen.insert(g.clone()) {
            continue;
        }
        if let Some(gf) = p.function(&g) {
            walk_stmts(&gf.body, &mut |s| {
                for e in s.exprs() {
                    for c in e.calls() {
                        if p.has_function(&c) {
                            needed.push(c);
                        }
                    }
                }
            });
        }
    }
    for gf in &p.functions {
        if seen.contains(&gf.name) {
            functions.push(gf.clone());
        }
    }
    Ok(Program::new(functions))
}

enum Role<'r> {
    /// The requested derivative: differentiated parameters.
    Entry(&'r [String]),
    /// Primal/adjoint helper pair of a called function.
    Callee { primal: String, adjoint: String },
}

#[derive(Clone)]
struct CalleeNames {
    primal: String,
    adjoint: String,
    nparams: usize,
}

struct Transformer<'a> {
    src: &'a Program,
    reg: &'a Registry,
    base: NameGen,
    labels: LabelGen,
    callees: BTreeMap<String, CalleeNames>,
    generated: Vec<FunctionDef>,
    /// Functions whose helpers have been (or are being) generated.
    started: BTreeSet<String>,
    plain_calls: BTreeSet<String>,
}

/// Per-function state.
struct Ctx {
    names: NameGen,
    act: Activity,
    stack: String,
    scope: String,
    grads: BTreeMap<String, String>,
    /// Label of a tape value in the input → label carrying its gradient.
    transport: BTreeMap<String, String>,
    /// Label → variable receiving the popped value.
    pop_targets: BTreeMap<String, String>,
}

impl Ctx {
    fn grad(&self, v: &str) -> &str {
        &self.grads[v]
    }
}

fn push(stack: &str, value: Expr, label: &str) -> Stmt {
    Stmt::expr(Expr::call("push", vec![Expr::name(stack), value, Expr::str(label)]))
}

fn pop(stack: &str, label: &str) -> Expr {
    Expr::call("pop", vec![Expr::name(stack), Expr::str(label)])
}

fn init_grad(e: Expr) -> Expr {
    Expr::call("init_grad", vec![e])
}

fn add_grad(acc: &str, partial: &str) -> Stmt {
    Stmt::assign(acc, Expr::call("add_grad", vec![Expr::name(acc), Expr::name(partial)]))
}

fn pin_all(body: &mut [Stmt]) {
    walk_stmts_mut(body, &mut |s| s.pinned = true);
}

fn rename_in_stmts(body: &mut [Stmt], from: &str, to: &str) {
    walk_stmts_mut(body, &mut |s| {
        for e in s.exprs_mut() {
            e.rename(from, to);
        }
        match &mut s.kind {
            StmtKind::Assign { target, .. } | StmtKind::IndexAssign { target, .. } if target == from => {
                *target = to.to_string();
            }
            StmtKind::ForRange { var, .. } if var == from => *var = to.to_string(),
            _ => {}
        }
    });
}

/// `bz = setitem(bz, ...)` / `bz = drop_last(bz)`: an adjoint that updates
/// the output gradient row-wise and can run in place.
fn is_in_place_update(value: &Expr, grad: &str) -> bool {
    matches!(value, Expr::Call { func, args }
        if matches!(func.as_str(), "setitem" | "drop_last")
            && args.first().and_then(Expr::as_name) == Some(grad))
}

impl<'a> Transformer<'a> {
    fn new(src: &'a Program, reg: &'a Registry) -> Self {
        let mut base = NameGen::for_program(src);
        // Helper names are fixed up front so that no local variable
        // generated later can shadow them.
        let mut callees = BTreeMap::new();
        for f in &src.functions {
            let primal = base.fresh(&format!("_primal_{}", f.name));
            let adjoint = base.fresh(&format!("_adjoint_{}", f.name));
            callees.insert(
                f.name.clone(),
                CalleeNames {
                    primal,
                    adjoint,
                    nparams: f.params.len(),
                },
            );
        }
        Transformer {
            src,
            reg,
            base,
            labels: LabelGen::for_program(src),
            callees,
            generated: Vec::new(),
            started: BTreeSet::new(),
            plain_calls: BTreeSet::new(),
        }
    }

    fn is_user_fn(&self, name: &str) -> bool {
        self.src.has_function(name)
    }

    fn label(&mut self, cx: &Ctx) -> String {
        self.labels.next(&cx.scope)
    }

    /// Generate the derivative (entry) or the helper pair (callee) of `f`.
    fn function(&mut self, f: &FunctionDef, name: &str, role: Role) -> Result<Vec<FunctionDef>> {
        let mut names = self.base.clone();
        let mut body = normalize_body(&f.body, &mut names)?;
        let ret = match body.iter().rposition(|s| !s.is_comment()) {
            Some(i) => match &body[i].kind {
                StmtKind::Return(values) => {
                    if values.len() != 1 {
                        return Err(Error::transform(format!(
                            "'{}' returns {} values; only a single output can be differentiated",
                            f.name,
                            values.len()
                        )));
                    }
                    let r = values[0].as_name().expect("normalized").to_string();
                    body.truncate(i);
                    r
                }
                _ => return Err(Error::transform(format!("'{}' does not end with a return", f.name))),
            },
            None => return Err(Error::transform(format!("'{}' is empty", f.name))),
        };
        let params: Vec<String> = f.params.iter().map(|p| p.name.clone()).collect();
        // The seed belongs to the output; keep it apart from parameter
        // gradients when a parameter is returned directly.
        let ret = if params.contains(&ret) {
            let r = names.fresh("_return");
            body.push(Stmt::assign(r.clone(), Expr::name(ret)));
            r
        } else {
            ret
        };
        let inputs: Vec<String> = match &role {
            Role::Entry(wrt) => wrt.to_vec(),
            Role::Callee { .. } => params.clone(),
        };
        let is_user = |n: &str| self.is_user_fn(n);
        let act = analyze(&body, &inputs, &[ret.clone()], &is_user);
        let stack = names.fresh("_stack");
        let scope = match &role {
            Role::Entry(_) => name.to_string(),
            Role::Callee { primal, .. } => primal.clone(),
        };
        let mut cx = Ctx {
            names,
            act,
            stack,
            scope,
            grads: BTreeMap::new(),
            transport: BTreeMap::new(),
            pop_targets: BTreeMap::new(),
        };
        walk_stmts(&body, &mut |s| {
            if let StmtKind::Assign { target, value } = &s.kind {
                if value.is_call_to("pop") {
                    if let Some(l) = tape_label(value) {
                        cx.pop_targets.insert(l.to_string(), target.clone());
                    }
                }
            }
        });

        // Gradient names: the seed, then parameters, then active locals in
        // order of first assignment.
        let seed = cx.names.fresh(&format!("b{ret}"));
        cx.grads.insert(ret.clone(), seed.clone());
        let locals = assigned_vars(&body);
        for v in params.iter().chain(locals.iter().filter(|v| cx.act.is_active(v))) {
            if !cx.grads.contains_key(v) {
                let g = cx.names.fresh(&format!("b{v}"));
                cx.grads.insert(v.clone(), g);
            }
        }
        let active_locals: Vec<String> = locals
            .iter()
            .filter(|v| cx.act.is_active(v) && !params.contains(v) && **v != ret)
            .cloned()
            .collect();

        let (primal, adjoint) = self.block(&mut cx, &body)?;
        let stack = cx.stack.clone();
        let grad_inits = |cx: &Ctx, of: &mut dyn Iterator<Item = &String>| -> Vec<Stmt> {
            of.filter(|v| **v != ret)
                .map(|v| Stmt::assign(cx.grad(v), init_grad(Expr::name(v.clone()))))
                .collect()
        };
        let mut none_inits: Vec<Stmt> = assigned_vars(&primal)
            .into_iter()
            .filter(|v| !params.contains(v) && *v != stack)
            .map(|v| Stmt::assign(v, Expr::None))
            .collect();

        match role {
            Role::Entry(wrt) => {
                let mut out = vec![Stmt::comment("Initialize the tape"), Stmt::assign(stack.clone(), Expr::call("stack", vec![]))];
                out.append(&mut none_inits);
                out.push(Stmt::comment("Beginning of forward pass"));
                out.extend(primal);
                out.push(Stmt::comment("Beginning of backward pass"));
                let mut inited: Vec<&String> = Vec::new();
                for v in params.iter().filter(|p| wrt.contains(p) || cx.act.is_active(p)) {
                    inited.push(v);
                }
                inited.extend(active_locals.iter());
                out.extend(grad_inits(&cx, &mut inited.into_iter()));
                out.extend(adjoint);
                out.push(Stmt::ret(wrt.iter().map(|w| Expr::name(cx.grad(w))).collect()));
                let mut ps = f.params.clone();
                ps.push(Param::with_default(seed, Expr::Float(1.0)));
                Ok(vec![FunctionDef::new(name, ps, out)])
            }
            Role::Callee { primal: pname, adjoint: aname } => {
                // The primal helper leaves its final local state on the tape
                // for the adjoint helper to pick up.
                let saved: Vec<String> = assigned_vars(&primal).into_iter().filter(|v| *v != stack).collect();
                let labels: Vec<String> = saved.iter().map(|_| self.label(&cx)).collect();
                let mut pbody = none_inits;
                pbody.extend(primal);
                for (v, l) in saved.iter().zip(&labels) {
                    pbody.push(push(&stack, Expr::name(v.clone()), l));
                }
                pbody.push(Stmt::ret(vec![Expr::name(ret.clone())]));
                let mut abody: Vec<Stmt> = saved
                    .iter()
                    .zip(&labels)
                    .rev()
                    .map(|(v, l)| Stmt::assign(v.clone(), pop(&stack, l)))
                    .collect();
                let mut inited: Vec<&String> = params.iter().collect();
                inited.extend(active_locals.iter());
                abody.extend(grad_inits(&cx, &mut inited.into_iter()));
                abody.extend(adjoint);
                abody.push(Stmt::ret(params.iter().map(|p| Expr::name(cx.grad(p))).collect()));

                let mut pparams = vec![Param::new(stack.clone())];
                pparams.extend(params.iter().map(|p| Param::new(p.clone())));
                let mut aparams = pparams.clone();
                aparams.push(Param::new(seed));
                Ok(vec![FunctionDef::new(pname, pparams, pbody), FunctionDef::new(aname, aparams, abody)])
            }
        }
    }

    /// Forward and backward code of a block; the backward code is already
    /// in reverse statement order.
    fn block(&mut self, cx: &mut Ctx, body: &[Stmt]) -> Result<(Vec<Stmt>, Vec<Stmt>)> {
        let mut primal = Vec::new();
        let mut adjoints = Vec::new();
        for s in body {
            let (p, a) = self.stmt(cx, s)?;
            primal.extend(p);
            adjoints.push(a);
        }
        Ok((primal, adjoints.into_iter().rev().flatten().collect()))
    }

    fn stmt(&mut self, cx: &mut Ctx, s: &Stmt) -> Result<(Vec<Stmt>, Vec<Stmt>)> {
        match &s.kind {
            StmtKind::Assign { target, value } => self.assign(cx, s, target, value),
            StmtKind::ExprStmt(e) => self.expr_stmt(cx, s, e),
            StmtKind::If { cond, then_body, else_body } => {
                let (pt, at) = self.block(cx, then_body)?;
                let (pe, ae) = self.block(cx, else_body)?;
                let c = cx.names.fresh("_cond");
                let l = self.label(cx);
                let primal = vec![
                    Stmt::assign(c.clone(), cond.clone()),
                    Stmt::if_(Expr::name(c.clone()), pt, pe),
                    push(&cx.stack, Expr::name(c.clone()), &l),
                ];
                let mut adjoint = vec![Stmt::assign(c.clone(), pop(&cx.stack, &l))];
                if !(at.is_empty() && ae.is_empty()) {
                    adjoint.push(Stmt::if_(Expr::name(c), at, ae));
                }
                Ok((primal, adjoint))
            }
            StmtKind::While { cond, body } => {
                let (pb, ab) = self.block(cx, body)?;
                let count = cx.names.fresh("_count");
                let i = cx.names.fresh("_i");
                let l = self.label(cx);
                let mut loop_body = vec![Stmt::assign(
                    count.clone(),
                    Expr::binop(BinOp::Add, Expr::name(count.clone()), Expr::Int(1)),
                )];
                loop_body.extend(pb);
                let primal = vec![
                    Stmt::assign(count.clone(), Expr::Int(0)),
                    Stmt::while_(cond.clone(), loop_body),
                    push(&cx.stack, Expr::name(count.clone()), &l),
                ];
                let adjoint = vec![
                    Stmt::assign(count.clone(), pop(&cx.stack, &l)),
                    Stmt::for_range(i, Expr::name(count), ab),
                ];
                Ok((primal, adjoint))
            }
            StmtKind::ForRange { var, count, body } => {
                let (pb, ab) = self.block(cx, body)?;
                let n = cx.names.fresh("_n");
                let i = cx.names.fresh("_i");
                let l = self.label(cx);
                let primal = vec![
                    Stmt::assign(n.clone(), count.clone()),
                    Stmt::for_range(var.clone(), Expr::name(n.clone()), pb),
                    push(&cx.stack, Expr::name(n.clone()), &l),
                ];
                // Iterations run backwards: recompute the loop variable.
                let mut loop_body = vec![Stmt::assign(
                    var.clone(),
                    Expr::binop(
                        BinOp::Sub,
                        Expr::binop(BinOp::Sub, Expr::name(n.clone()), Expr::Int(1)),
                        Expr::name(i.clone()),
                    ),
                )];
                loop_body.extend(ab);
                let adjoint = vec![
                    Stmt::assign(n.clone(), pop(&cx.stack, &l)),
                    Stmt::for_range(i, Expr::name(n), loop_body),
                ];
                Ok((primal, adjoint))
            }
            StmtKind::InsertGradOf { var, alias, body } => {
                if !cx.act.is_active(var) {
                    return Err(Error::transform(format!(
                        "line {}: insert_grad_of({var}): '{var}' does not influence the differentiated output, so it has no gradient",
                        s.line
                    )));
                }
                let mut inserted = body.clone();
                rename_in_stmts(&mut inserted, alias, cx.grad(var));
                pin_all(&mut inserted);
                if inserted.is_empty() {
                    return Ok((vec![], vec![]));
                }
                let mut adjoint = vec![Stmt::comment("Inserted code")];
                adjoint.extend(inserted);
                Ok((vec![], adjoint))
            }
            StmtKind::Comment(_) => Ok((vec![], vec![])),
            StmtKind::Return(_) => Err(Error::transform(format!(
                "line {}: 'return' is only supported as the last statement",
                s.line
            ))),
            StmtKind::IndexAssign { .. } | StmtKind::Unsupported { .. } => {
                unreachable!("removed by normalization")
            }
        }
    }

    fn expr_stmt(&mut self, cx: &mut Ctx, s: &Stmt, e: &Expr) -> Result<(Vec<Stmt>, Vec<Stmt>)> {
        let primal = vec![s.clone()];
        let Expr::Call { func, args } = e else {
            return Ok((primal, vec![]));
        };
        if self.is_user_fn(func) {
            self.plain_calls.insert(func.clone());
        }
        if func != "push" {
            return Ok((primal, vec![]));
        }
        // A push from a previous transform: its value may receive a
        // gradient from the matching pop.
        let Some(label) = tape_label(e) else {
            return Ok((primal, vec![]));
        };
        let Some(v) = args.get(1).and_then(Expr::as_name) else {
            return Ok((primal, vec![]));
        };
        if !cx.act.is_active(v) {
            return Ok((primal, vec![]));
        }
        let Some(target) = cx.pop_targets.get(label) else {
            return Err(Error::transform(format!(
                "value pushed under '{label}' is popped in another function; higher-order derivatives through calls to user functions are not supported"
            )));
        };
        if !cx.act.is_active(target) {
            return Ok((primal, vec![]));
        }
        let lg = self.transport_label(cx, label);
        let gv = cx.grad(v).to_string();
        let tmp = cx.names.fresh(&format!("_{gv}"));
        let adjoint = vec![
            Stmt::comment(format!("Grad of: {}", emit_stmt_string(s).trim_end())),
            Stmt::assign(tmp.clone(), pop(&stack_of(args), &lg)),
            add_grad(&gv, &tmp),
        ];
        Ok((primal, adjoint))
    }

    fn transport_label(&mut self, cx: &mut Ctx, label: &str) -> String {
        if let Some(l) = cx.transport.get(label) {
            return l.clone();
        }
        let l = self.label(cx);
        cx.transport.insert(label.to_string(), l.clone());
        l
    }

    fn assign(&mut self, cx: &mut Ctx, s: &Stmt, z: &str, value: &Expr) -> Result<(Vec<Stmt>, Vec<Stmt>)> {
        // A tape created by an inner derivative stays live across the
        // backward pass, which routes gradients through it.
        if value.is_call_to("stack") {
            return Ok((vec![s.clone()], vec![]));
        }
        let rhs = classify(value, &|n| self.src.has_function(n));
        let comment = Stmt::comment(format!("Grad of: {}", emit_stmt_string(s).trim_end()));
        let l = self.label(cx);
        let stack = cx.stack.clone();
        let z_active = cx.act.is_active(z);

        match &rhs {
            Rhs::Primitive("pop", args) => {
                let inner = tape_label(value).map(str::to_string);
                let primal = vec![push(&stack, Expr::name(z), &l), s.clone()];
                let mut adjoint = vec![comment, Stmt::assign(z, pop(&stack, &l))];
                if let (Some(label), true) = (inner, z_active) {
                    match cx.act.pushed.get(&label) {
                        None => {
                            return Err(Error::transform(format!(
                                "value popped under '{label}' is pushed in another function; higher-order derivatives through calls to user functions are not supported"
                            )))
                        }
                        Some(v) if cx.act.is_active(v) => {
                            let lg = self.transport_label(cx, &label);
                            let gz = cx.grad(z).to_string();
                            adjoint.push(push(&stack_of(args), Expr::name(gz.clone()), &lg));
                            adjoint.push(Stmt::assign(gz, init_grad(Expr::name(z))));
                        }
                        Some(_) => {}
                    }
                }
                return Ok((primal, adjoint));
            }
            Rhs::UserCall(g, args) if z_active && any_active(&cx.act, args) => {
                return self.user_call(cx, z, g, args, comment, l);
            }
            Rhs::UserCall(g, _) => {
                self.plain_calls.insert(g.to_string());
            }
            _ => {}
        }

        // Save what the statement overwrites. A row update of `z` itself
        // only saves the affected row (or the version handle).
        let (primal, restore) = match value {
            Expr::Call { func, args } if func == "setitem" && args[0].as_name() == Some(z) => {
                let i = args[1].clone();
                (
                    vec![
                        push(&stack, Expr::call("save_row", vec![Expr::name(z), i.clone()]), &l),
                        s.clone(),
                    ],
                    Stmt::assign(z, Expr::call("restore_row", vec![Expr::name(z), i, pop(&stack, &l)])),
                )
            }
            _ => (vec![push(&stack, Expr::name(z), &l), s.clone()], Stmt::assign(z, pop(&stack, &l))),
        };
        let mut adjoint = vec![comment, restore];
        if !z_active {
            return Ok((primal, adjoint));
        }
        let gz = cx.grad(z).to_string();
        let prim = match &rhs {
            Rhs::Identity(x) => Some(("identity", vec![(*x).clone()])),
            Rhs::Primitive(name, _) if NONDIFFERENTIABLE.contains(name) => None,
            Rhs::Primitive(name, args) => Some((*name, args.clone())),
            _ => None,
        };
        let Some((name, args)) = prim.filter(|(_, args)| any_active(&cx.act, args)) else {
            adjoint.push(Stmt::assign(gz, init_grad(Expr::name(z))));
            return Ok((primal, adjoint));
        };
        let t = self.reg.adjoint(name, args.len())?;
        let out = Expr::name(z);
        let act = &cx.act;
        let grads = &cx.grads;
        let expanded = expand_adjoint(t, &out, &args, &|a| act.is_active_expr(a), &mut |is_output, e| {
            if is_output {
                return Ok(Expr::name(gz.clone()));
            }
            Ok(match e.as_name() {
                // The gradient of the overwritten value starts from zero.
                Some(v) if v == z => init_grad(e.clone()),
                Some(v) if act.is_active(v) => Expr::name(grads[v].clone()),
                _ => init_grad(e.clone()),
            })
        })?;

        let uses_of_z = args.iter().filter(|a| a.as_name() == Some(z)).count();
        let mut partials = Vec::new();
        let mut direct = Vec::new();
        let mut in_place = None;
        let mut sums = Vec::new();
        for g in expanded {
            let v = g.target.as_name().expect("only active names are wanted");
            let gv = cx.grad(v).to_string();
            if v == z && uses_of_z == 1 && is_in_place_update(&g.value, &gz) {
                in_place = Some(Stmt::assign(gz.clone(), g.value));
            } else if g.accumulates && v != z {
                direct.push(Stmt::assign(gv, g.value));
            } else {
                let tmp = cx.names.fresh(&format!("_{gv}"));
                partials.push(Stmt::assign(tmp.clone(), g.value));
                sums.push(add_grad(&gv, &tmp));
            }
        }
        adjoint.extend(partials);
        adjoint.extend(direct);
        adjoint.push(in_place.unwrap_or_else(|| Stmt::assign(gz.clone(), init_grad(Expr::name(z)))));
        adjoint.extend(sums);
        Ok((primal, adjoint))
    }

    #[allow(clippy::too_many_arguments)]
    fn user_call(
        &mut self,
        cx: &mut Ctx,
        z: &str,
        g: &str,
        args: &[Expr],
        comment: Stmt,
        l: String,
    ) -> Result<(Vec<Stmt>, Vec<Stmt>)> {
        let names = self.callee(g)?;
        let callee = self.src.function(g).expect("user function");
        let mut full: Vec<Expr> = args.to_vec();
        for p in &callee.params[args.len()..] {
            full.push(p.default.clone().ok_or_else(|| {
                Error::transform(format!("call of '{g}' is missing argument '{}'", p.name))
            })?);
        }
        let stack = cx.stack.clone();
        let mut call_args = vec![Expr::name(stack.clone())];
        call_args.extend(full.iter().cloned());
        // The callee's tape entries go first, so that the adjoint restores
        // `z` (possibly one of the arguments) before running the callee's
        // adjoint.
        let out = cx.names.fresh(&format!("_{g}_out"));
        let primal = vec![
            Stmt::assign(out.clone(), Expr::call(names.primal.clone(), call_args.clone())),
            push(&stack, Expr::name(z), &l),
            Stmt::assign(z, Expr::name(out)),
        ];
        let gz = cx.grad(z).to_string();
        call_args.push(Expr::name(gz.clone()));
        let call = Expr::call(names.adjoint.clone(), call_args);

        let mut adjoint = vec![comment, Stmt::assign(z, pop(&stack, &l))];
        let active: Vec<(usize, String)> = full
            .iter()
            .enumerate()
            .filter_map(|(k, a)| a.as_name().filter(|n| cx.act.is_active(n)).map(|n| (k, n.to_string())))
            .collect();
        let mut partials = Vec::new();
        let mut sums = Vec::new();
        if names.nparams == 1 {
            let gv = cx.grad(&active[0].1).to_string();
            let tmp = cx.names.fresh(&format!("_{gv}"));
            partials.push(Stmt::assign(tmp.clone(), call));
            sums.push(add_grad(&gv, &tmp));
        } else {
            let res = cx.names.fresh(&format!("_{g}_grads"));
            partials.push(Stmt::assign(res.clone(), call));
            for (k, v) in active {
                let gv = cx.grad(&v).to_string();
                let tmp = cx.names.fresh(&format!("_{gv}"));
                partials.push(Stmt::assign(tmp.clone(), Expr::index(Expr::name(res.clone()), Expr::Int(k as i64))));
                sums.push(add_grad(&gv, &tmp));
            }
        }
        adjoint.extend(partials);
        adjoint.push(Stmt::assign(gz, init_grad(Expr::name(z))));
        adjoint.extend(sums);
        Ok((primal, adjoint))
    }

    /// Names of the helper pair for `g`, generating it on first use.
    fn callee(&mut self, g: &str) -> Result<CalleeNames> {
        let names = self.callees[g].clone();
        // Registered before generation so that recursive calls resolve.
        if !self.started.insert(g.to_string()) {
            return Ok(names);
        }
        let f = self.src.function(g).expect("user function");
        let fns = self.function(
            f,
            &names.primal,
            Role::Callee {
                primal: names.primal.clone(),
                adjoint: names.adjoint.clone(),
            },
        )?;
        self.generated.extend(fns);
        Ok(names)
    }
}

fn any_active(act: &Activity, args: &[Expr]) -> bool {
    args.iter().any(|a| act.is_active_expr(a))
}

/// The stack argument of a tape call.
fn stack_of(args: &[Expr]) -> String {
    args[0].as_name().expect("tape handle is a variable").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::run;
    use crate::parser::parse;
    use crate::printer::emit_source;
    use crate::validate::validate;
    use crate::value::Value;

    fn derive(src: &str, entry: &str, wrt: &[usize]) -> Program {
        let p = parse(src).unwrap();
        transform_reverse(&p, entry, wrt, &Registry::builtin()).unwrap()
    }

    fn grad_at(src: &str, args: Vec<Value>) -> Value {
        let d = derive(src, "f", &[0]);
        let text = emit_source(&d);
        let reparsed = parse(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
        let name = d.functions[0].name.clone();
        let diags = validate(&reparsed, &name, &[0]).unwrap();
        assert!(diags.iter().all(|d| d.severity != crate::validate::Severity::Error), "{diags:?}\n{text}");
        run(&reparsed, &name, args).unwrap_or_else(|e| panic!("{e}\n{text}"))
    }

    fn scalar(v: Value) -> f64 {
        v.as_f64().unwrap()
    }

    #[test]
    fn square() {
        let d = derive("def f(x):\n    return x * x\n", "f", &[0]);
        let text = emit_source(&d);
        assert!(text.starts_with("def dfdx(x, b_return=1.0):\n"), "{text}");
        assert!(text.contains("_bx = unbroadcast(b_return * x, x)\n"), "{text}");
        assert!(text.contains("_bx2 = unbroadcast(b_return * x, x)\n"), "{text}");
        assert!(text.contains("bx = add_grad(bx, _bx2)\n"), "{text}");
        assert!(text.trim_end().ends_with("return bx"), "{text}");
        assert_eq!(scalar(grad_at("def f(x):\n    return x * x\n", vec![Value::Float(3.0)])), 6.0);
    }

    #[test]
    fn identity_raw_output() {
        let text = emit_source(&derive("def f(x):\n    y = x\n    return y\n", "f", &[0]));
        for needle in ["_stack = stack()", "push(_stack, y, '", "# Grad of: y = x", "y = pop(_stack, '", "_bx = copy(by)"] {
            assert!(text.contains(needle), "missing {needle}:\n{text}");
        }
    }

    #[test]
    fn while_loop_counts_iterations() {
        let src = "def f(x):\n    while x < 10000.0:\n        x = x + 1.0\n    return x\n";
        assert_eq!(scalar(grad_at(src, vec![Value::Float(0.0)])), 1.0);
        let src = "def f(x):\n    y = x\n    while y < 100.0:\n        y = y * 2.0\n    return y\n";
        // 3 -> 6 -> ... -> 192: six doublings.
        assert_eq!(scalar(grad_at(src, vec![Value::Float(3.0)])), 64.0);
    }

    #[test]
    fn branches_and_for_loops() {
        let src = "def f(x):\n    y = x\n    for i in range(3):\n        if y > 0.0:\n            y = y * x\n        else:\n            y = y - x\n    return y\n";
        // x > 0: y = x^4.
        assert_eq!(scalar(grad_at(src, vec![Value::Float(2.0)])), 32.0);
        // x = -1: y takes the values 0 (y - x), 1 (y - x), -1 (y * x), so
        // y = (x - x - x) * x = -x^2 along this path, derivative -2x = 2.
        assert_eq!(scalar(grad_at(src, vec![Value::Float(-1.0)])), 2.0);
    }

    #[test]
    fn clipping_with_inserted_code() {
        let src = "def f(x):\n    with insert_grad_of(x) as dx:\n        if dx > 10.0:\n            dx = 10.0\n    y = x * x\n    return y\n";
        let text = emit_source(&derive(src, "f", &[0]));
        assert!(text.contains("# Inserted code\n    if bx > 10.0:\n        bx = 10.0\n"), "{text}");
        assert_eq!(scalar(grad_at(src, vec![Value::Float(3.0)])), 6.0);
        assert_eq!(scalar(grad_at(src, vec![Value::Float(8.0)])), 10.0);
    }

    #[test]
    fn user_function_calls() {
        let src = "def g(a, b):\n    c = a * b\n    return tanh(c)\n\ndef f(x):\n    y = g(x, 2.0)\n    z = g(y, x)\n    return z\n";
        let x: f64 = 0.3;
        let y = (2.0 * x).tanh();
        let dy = 2.0 * (1.0 - y * y);
        let z_in = y * x;
        let dz = (1.0 - z_in.tanh().powi(2)) * (dy * x + y);
        let got = scalar(grad_at(src, vec![Value::Float(x)]));
        assert!((got - dz).abs() < 1e-12, "{got} vs {dz}");
    }

    #[test]
    fn recursive_user_function() {
        let src = "def p(x, n):\n    r = x\n    if n > 0:\n        r = x * p(x, n - 1)\n    return r\n\ndef f(x):\n    return p(x, 3)\n";
        // x^4
        assert_eq!(scalar(grad_at(src, vec![Value::Float(1.5)])), 4.0 * 1.5f64.powi(3));
    }

    #[test]
    fn lattice_gradient() {
        let src = "def f(x, n, m, d):\n    r = zeros(d)\n    for i in range(n):\n        x = append(x, r)\n        for j in range(m):\n            y = add(x[-1], 1.0)\n            x = setitem(x, -1, y)\n    return mean(x)\n";
        let x = Value::array(&[2, 3], &[1.0; 6]).unwrap();
        let g = grad_at(src, vec![x, Value::Int(4), Value::Int(2), Value::Int(3)]);
        // The first two rows survive unchanged; each contributes 1/(rows*d).
        let rows = 6.0;
        assert_eq!(g.shape().unwrap(), vec![2, 3]);
        for v in g.flat().unwrap() {
            assert!((v - 1.0 / (rows * 3.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn inactive_wrt_gives_zero_and_missing_template_is_reported() {
        let g = grad_at("def f(x, c):\n    return c * 2.0\n", vec![Value::Float(1.0), Value::Float(2.0)]);
        assert!(g.is_zero());
        let p = parse("def f(x):\n    return shape_of(x)\n").unwrap();
        assert!(transform_reverse(&p, "f", &[0], &Registry::builtin()).is_ok());
        let reg = Registry::empty();
        let p = parse("def f(x):\n    return tanh(x)\n").unwrap();
        assert!(matches!(transform_reverse(&p, "f", &[0], &reg), Err(Error::MissingTemplate(_))));
    }

    #[test]
    fn second_order_by_reapplication() {
        let p = parse("def f(x):\n    return x * x * x\n").unwrap();
        let reg = Registry::builtin();
        let d1 = transform_reverse(&p, "f", &[0], &reg).unwrap();
        let d2 = transform_reverse(&d1, "dfdx", &[0], &reg).unwrap();
        let text = emit_source(&d2);
        let reparsed = parse(&text).unwrap();
        let name = &d2.functions[0].name;
        let v = run(&reparsed, name, vec![Value::Float(2.0)]).unwrap_or_else(|e| panic!("{e}\n{text}"));
        assert_eq!(scalar(v), 12.0);
    }

    #[test]
    fn output_is_deterministic() {
        let src = "def f(x):\n    y = tanh(x)\n    for i in range(2):\n        y = y * x\n    return y\n";
        assert_eq!(emit_source(&derive(src, "f", &[0])), emit_source(&derive(src, "f", &[0])));
    }
}
