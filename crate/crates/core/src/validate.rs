//! Static checks that a program lies in the differentiable subset.
//!
//! | rule | meaning |
//! |------|---------|
//! | R1 | a function that index-assigns into a parameter must return it |
//! | R2 | no free-variable references (no closures, no function values) |
//! | R3 | every callee resolves to a builtin or a function of the program |
//! | R4 | unsupported syntax |
//! | R5 | a call whose result is discarded is assumed pure (warning) |

use std::collections::BTreeSet;
use std::fmt;

use crate::ast::*;
use crate::builtins;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    InPlaceMustReturn,
    FreeVariable,
    UnresolvedCallee,
    UnsupportedSyntax,
    UnusedCallResult,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::InPlaceMustReturn => "R1",
            Rule::FreeVariable => "R2",
            Rule::UnresolvedCallee => "R3",
            Rule::UnsupportedSyntax => "R4",
            Rule::UnusedCallResult => "R5",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            Rule::UnusedCallResult => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Diagnostic {
    pub severity: Severity,
    pub line: u32,
    pub rule: Rule,
    pub function: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(
            f,
            "line {}: {sev}[{}] in '{}': {}",
            self.line,
            self.rule.id(),
            self.function,
            self.message
        )
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

/// Validate `entry` and every function it can reach. `wrt` indices must
/// name parameters of `entry`.
pub fn validate(p: &Program, entry: &str, wrt: &[usize]) -> Result<Vec<Diagnostic>> {
    let f = p
        .function(entry)
        .ok_or_else(|| Error::UnknownFunction(entry.to_string()))?;
    if let Some(&bad) = wrt.iter().find(|&&i| i >= f.params.len()) {
        return Err(Error::transform(format!(
            "wrt index {bad} is out of range: '{entry}' has {} parameter(s)",
            f.params.len()
        )));
    }
    let mut diags = Vec::new();
    for name in reachable_functions(p, entry) {
        let g = p.function(&name).expect("reachable functions exist");
        check_function(p, g, &mut diags);
    }
    diags.sort_by(|a, b| (a.line, a.rule, &a.message).cmp(&(b.line, b.rule, &b.message)));
    diags.dedup();
    Ok(diags)
}

/// Like [`validate`], but turns error diagnostics into an `Err`.
pub fn ensure_valid(p: &Program, entry: &str, wrt: &[usize]) -> Result<Vec<Diagnostic>> {
    let diags = validate(p, entry, wrt)?;
    if has_errors(&diags) {
        return Err(Error::Invalid(
            diags
                .into_iter()
                .filter(|d| d.severity == Severity::Error)
                .collect(),
        ));
    }
    Ok(diags)
}

/// Functions reachable from `entry` through calls, in discovery order.
pub fn reachable_functions(p: &Program, entry: &str) -> Vec<String> {
    let mut order = vec![entry.to_string()];
    let mut i = 0;
    while i < order.len() {
        if let Some(f) = p.function(&order[i]) {
            let mut callees = Vec::new();
            walk_stmts(&f.body, &mut |s| {
                for e in s.exprs() {
                    callees.extend(e.calls());
                }
            });
            for param in &f.params {
                if let Some(d) = &param.default {
                    callees.extend(d.calls());
                }
            }
            for c in callees {
                if p.has_function(&c) && !order.contains(&c) {
                    order.push(c);
                }
            }
        }
        i += 1;
    }
    order
}

struct Checker<'a> {
    program: &'a Program,
    function: &'a FunctionDef,
    diags: &'a mut Vec<Diagnostic>,
}

impl<'a> Checker<'a> {
    fn report(&mut self, line: u32, rule: Rule, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            severity: rule.severity(),
            line,
            rule,
            function: self.function.name.clone(),
            message: message.into(),
        });
    }
}

fn check_function(p: &Program, f: &FunctionDef, diags: &mut Vec<Diagnostic>) {
    let mut c = Checker {
        program: p,
        function: f,
        diags,
    };
    let mut defined: BTreeSet<String> = f.params.iter().map(|p| p.name.clone()).collect();
    for param in &f.params {
        if let Some(d) = &param.default {
            if !d.is_literal() {
                c.report(0, Rule::UnsupportedSyntax, format!("default value of parameter '{}' must be a literal", param.name));
            }
        }
    }
    check_block(&mut c, &f.body, &mut defined, &mut Vec::new(), true);

    // Final-return discipline.
    let code: Vec<&Stmt> = f.body.iter().filter(|s| !s.is_comment()).collect();
    match code.last() {
        Some(Stmt {
            kind: StmtKind::Return(values),
            ..
        }) if !values.is_empty() => {}
        Some(s) => c.report(
            s.line,
            Rule::UnsupportedSyntax,
            "function must end with a 'return' of a value",
        ),
        None => c.report(0, Rule::UnsupportedSyntax, "function body is empty"),
    }

    // R1: index assignment into a parameter requires returning it.
    let params: BTreeSet<&str> = f.params.iter().map(|p| p.name.as_str()).collect();
    let returned: BTreeSet<String> = f
        .final_return()
        .map(|vals| vals.iter().filter_map(|e| e.as_name().map(String::from)).collect())
        .unwrap_or_default();
    let mut mutated: Vec<(String, u32)> = Vec::new();
    walk_stmts(&f.body, &mut |s| {
        if let StmtKind::IndexAssign { target, .. } = &s.kind {
            if params.contains(target.as_str()) && !mutated.iter().any(|(t, _)| t == target) {
                mutated.push((target.clone(), s.line));
            }
        }
    });
    for (target, line) in mutated {
        if !returned.contains(&target) {
            c.report(
                line,
                Rule::InPlaceMustReturn,
                format!("'{}' modifies parameter '{target}' in place but does not return it", f.name),
            );
        }
    }
}

fn check_block(
    c: &mut Checker,
    body: &[Stmt],
    defined: &mut BTreeSet<String>,
    loop_vars: &mut Vec<String>,
    top_level: bool,
) {
    let last_code = body.iter().rposition(|s| !s.is_comment());
    for (i, s) in body.iter().enumerate() {
        for e in s.exprs() {
            check_expr(c, e, s.line, defined, is_tape_or_print(s));
        }
        match &s.kind {
            StmtKind::Assign { target, .. } | StmtKind::IndexAssign { target, .. } => {
                if let StmtKind::IndexAssign { .. } = s.kind {
                    if !defined.contains(target) {
                        c.report(s.line, Rule::FreeVariable, format!("index assignment into undefined variable '{target}'"));
                    }
                }
                if loop_vars.contains(target) {
                    c.report(s.line, Rule::UnsupportedSyntax, format!("assignment to loop variable '{target}' inside its loop"));
                }
                check_target_name(c, target, s.line);
                defined.insert(target.clone());
            }
            StmtKind::If {
                then_body,
                else_body,
                ..
            } => {
                let mut a = defined.clone();
                let mut b = defined.clone();
                check_block(c, then_body, &mut a, loop_vars, false);
                check_block(c, else_body, &mut b, loop_vars, false);
                defined.extend(a);
                defined.extend(b);
            }
            StmtKind::While { body: inner, .. } => {
                defined.extend(assigned_vars(inner));
                check_block(c, inner, defined, loop_vars, false);
            }
            StmtKind::ForRange { var, body: inner, .. } => {
                check_target_name(c, var, s.line);
                defined.insert(var.clone());
                defined.extend(assigned_vars(inner));
                loop_vars.push(var.clone());
                check_block(c, inner, defined, loop_vars, false);
                loop_vars.pop();
            }
            StmtKind::InsertGradOf { var, alias, body: inner } => {
                if !defined.contains(var) {
                    c.report(s.line, Rule::FreeVariable, format!("insert_grad_of refers to undefined variable '{var}'"));
                }
                let mut scope = defined.clone();
                scope.insert(alias.clone());
                let mut has_return = false;
                walk_stmts(inner, &mut |t| {
                    if matches!(t.kind, StmtKind::Return(_)) {
                        has_return = true;
                    }
                });
                if has_return {
                    c.report(s.line, Rule::UnsupportedSyntax, "'return' inside an insert_grad_of block");
                }
                check_block(c, inner, &mut scope, loop_vars, false);
            }
            StmtKind::Return(_) => {
                if !(top_level && Some(i) == last_code) {
                    c.report(s.line, Rule::UnsupportedSyntax, "'return' is only supported as the last statement of a function");
                }
            }
            StmtKind::ExprStmt(e) => {
                if let Expr::Call { func, .. } = e {
                    if !matches!(func.as_str(), "push") {
                        c.report(s.line, Rule::UnusedCallResult, format!("result of '{func}(...)' is unused; its arguments are assumed unchanged"));
                    }
                } else {
                    c.report(s.line, Rule::UnusedCallResult, "expression statement has no effect");
                }
            }
            StmtKind::Unsupported { construct, .. } => {
                c.report(s.line, Rule::UnsupportedSyntax, format!("unsupported construct: {construct}"));
            }
            StmtKind::Comment(_) => {}
        }
    }
}

fn is_tape_or_print(s: &Stmt) -> bool {
    let call = match &s.kind {
        StmtKind::ExprStmt(e) => e,
        StmtKind::Assign { value, .. } => value,
        _ => return false,
    };
    matches!(call, Expr::Call { func, .. } if matches!(func.as_str(), "print" | "push" | "pop"))
}

fn check_target_name(c: &mut Checker, name: &str, line: u32) {
    if builtins::is_builtin(name) || c.program.has_function(name) {
        c.report(line, Rule::UnsupportedSyntax, format!("'{name}' names a function and cannot be assigned"));
    }
}

fn check_expr(c: &mut Checker, e: &Expr, line: u32, defined: &BTreeSet<String>, strings_ok: bool) {
    match e {
        Expr::Name(n) => {
            if !defined.contains(n) {
                let what = if builtins::is_builtin(n) || c.program.has_function(n) {
                    format!("function '{n}' used as a value")
                } else {
                    format!("reference to undefined or free variable '{n}'")
                };
                c.report(line, Rule::FreeVariable, what);
            }
        }
        Expr::Str(_) => {
            if !strings_ok {
                c.report(line, Rule::UnsupportedSyntax, "string values are only allowed as print arguments and tape labels");
            }
        }
        Expr::Call { func, args } => {
            if let Some(b) = builtins::lookup(func) {
                let n = args.len();
                let too_many = b.max_args.map(|m| n > m).unwrap_or(false);
                if n < b.min_args || too_many {
                    c.report(line, Rule::UnresolvedCallee, format!("builtin '{func}' called with {n} argument(s)"));
                }
            } else if let Some(g) = c.program.function(func) {
                let required = g.params.iter().filter(|p| p.default.is_none()).count();
                if args.len() < required || args.len() > g.params.len() {
                    c.report(line, Rule::UnresolvedCallee, format!("'{func}' takes {} argument(s) but is called with {}", g.params.len(), args.len()));
                }
            } else {
                c.report(line, Rule::UnresolvedCallee, format!("call to unknown function '{func}'"));
            }
            for (i, a) in args.iter().enumerate() {
                // Labels of tape operations are strings wherever the call
                // appears; `print` takes strings only as a statement.
                let ok = match func.as_str() {
                    "print" => strings_ok,
                    "push" | "pop" => i + 1 == args.len(),
                    _ => false,
                };
                check_expr(c, a, line, defined, ok);
            }
        }
        Expr::BinOp { lhs, rhs, .. } => {
            check_expr(c, lhs, line, defined, false);
            check_expr(c, rhs, line, defined, false);
        }
        Expr::Index { base, index } => {
            check_expr(c, base, line, defined, false);
            check_expr(c, index, line, defined, false);
        }
        Expr::Neg(inner) => check_expr(c, inner, line, defined, false),
        Expr::Float(_) | Expr::Int(_) | Expr::Bool(_) | Expr::None => {}
    }
}
