//! Derivative templates and their registry.
//!
//! Templates are written in the source language itself. An adjoint
//! template is a function whose first parameter stands for the output of a
//! primitive and whose remaining parameters stand for its arguments; its
//! body is a list of `d[p] = expr` statements, where `d[p]` denotes the
//! gradient of placeholder `p`:
//!
//! ```text
//! @adjoint(multiply)
//! def adjoint_multiply(z, x, y):
//!     d[x] = unbroadcast(d[z] * y, x)
//!     d[y] = unbroadcast(d[z] * x, y)
//! ```
//!
//! Tangent templates use `@tangent(name)` and a single `t[z] = ...`
//! statement. Expansion is purely syntactic: placeholders are replaced by
//! the argument expressions of the statement being differentiated.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::ast::*;
use crate::builtins;
use crate::error::{Error, Result};
use crate::parser::parse;

const REVERSE_SOURCE: &str = include_str!("../templates/reverse.tg");
const FORWARD_SOURCE: &str = include_str!("../templates/forward.tg");

/// Builtins whose output carries no derivative information.
pub const NONDIFFERENTIABLE: &[&str] = &["zeros", "shape_of", "init_grad", "stack", "tuple", "print"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Adjoint,
    Tangent,
}

impl Kind {
    /// The name of the derivative accessor used in template bodies.
    fn accessor(self) -> &'static str {
        match self {
            Kind::Adjoint => "d",
            Kind::Tangent => "t",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub kind: Kind,
    pub primitive: String,
    /// Placeholders: the output first, then the arguments.
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
}

impl Template {
    /// Number of primitive arguments the template covers.
    pub fn arity(&self) -> usize {
        self.params.len() - 1
    }

    pub fn output(&self) -> &str {
        &self.params[0]
    }

    /// Build and check a template from a parsed function definition.
    pub fn from_function(kind: Kind, primitive: &str, f: &FunctionDef) -> Result<Template> {
        let t = Template {
            kind,
            primitive: primitive.to_string(),
            params: f.params.iter().map(|p| p.name.clone()).collect(),
            body: f.body.iter().filter(|s| !s.is_comment()).cloned().collect(),
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Template(format!("{} template for '{}': {msg}", self.kind_name(), self.primitive)));
        if self.params.is_empty() {
            return fail("needs at least the output placeholder".into());
        }
        let acc = self.kind.accessor();
        let placeholders: BTreeSet<&str> = self.params.iter().map(|s| s.as_str()).collect();
        if placeholders.contains(acc) {
            return fail(format!("'{acc}' cannot be used as a placeholder"));
        }
        if self.kind == Kind::Tangent && self.body.len() != 1 {
            return fail("tangent templates have exactly one statement".into());
        }
        for s in &self.body {
            let StmtKind::IndexAssign { target, index, value } = &s.kind else {
                return fail(format!("statements must have the form {acc}[p] = expr"));
            };
            if target != acc {
                return fail(format!("statements must assign to {acc}[p]"));
            }
            match index.as_name() {
                Some(p) if placeholders.contains(p) => {
                    if self.kind == Kind::Tangent && p != self.output() {
                        return fail("the tangent statement must assign the output".into());
                    }
                    if self.kind == Kind::Adjoint && p == self.output() {
                        return fail("adjoint statements assign input gradients, not the output's".into());
                    }
                }
                _ => return fail(format!("'{acc}[...]' must index a placeholder")),
            }
            let mut problem = None;
            check_expr(value, acc, &placeholders, &mut problem);
            if let Some(msg) = problem {
                return fail(msg);
            }
        }
        Ok(())
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            Kind::Adjoint => "adjoint",
            Kind::Tangent => "tangent",
        }
    }
}

fn check_expr(e: &Expr, acc: &str, placeholders: &BTreeSet<&str>, problem: &mut Option<String>) {
    match e {
        Expr::Index { base, index } if base.as_name() == Some(acc) => match index.as_name() {
            Some(p) if placeholders.contains(p) => {}
            _ => *problem = Some(format!("'{acc}[...]' must index a placeholder")),
        },
        Expr::Name(n) => {
            if n == acc {
                *problem = Some(format!("'{acc}' can only be used as {acc}[p]"));
            } else if !placeholders.contains(n.as_str()) {
                *problem = Some(format!("unbound name '{n}'"));
            }
        }
        Expr::Call { func, args } => {
            if !builtins::is_builtin(func) {
                *problem = Some(format!("templates can only call builtins, not '{func}'"));
            }
            for a in args {
                check_expr(a, acc, placeholders, problem);
            }
        }
        Expr::BinOp { lhs, rhs, .. } => {
            check_expr(lhs, acc, placeholders, problem);
            check_expr(rhs, acc, placeholders, problem);
        }
        Expr::Neg(inner) => check_expr(inner, acc, placeholders, problem),
        Expr::Index { base, index } => {
            check_expr(base, acc, placeholders, problem);
            check_expr(index, acc, placeholders, problem);
        }
        Expr::Str(_) => *problem = Some("string literals are not allowed".into()),
        _ => {}
    }
}

/// Parse a template file: functions preceded by `@adjoint(name)` or
/// `@tangent(name)` lines.
pub fn parse_templates(source: &str) -> Result<Vec<Template>> {
    let mut annotations = Vec::new();
    let mut cleaned = String::with_capacity(source.len());
    for (lineno, line) in source.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix('@') {
            let (kind, inner) = if let Some(r) = rest.strip_prefix("adjoint(") {
                (Kind::Adjoint, r)
            } else if let Some(r) = rest.strip_prefix("tangent(") {
                (Kind::Tangent, r)
            } else {
                return Err(Error::syntax(lineno as u32 + 1, 1, "expected @adjoint(name) or @tangent(name)"));
            };
            let name = inner
                .strip_suffix(')')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::syntax(lineno as u32 + 1, 1, "malformed template annotation"))?;
            annotations.push((kind, name.to_string()));
            // Keep line numbers aligned for parse errors.
            cleaned.push('\n');
        } else {
            cleaned.push_str(line);
            cleaned.push('\n');
        }
    }
    let program = parse(&cleaned)?;
    if program.functions.len() != annotations.len() {
        return Err(Error::Template(format!(
            "{} annotations for {} template functions; every template needs exactly one annotation",
            annotations.len(),
            program.functions.len()
        )));
    }
    program
        .functions
        .iter()
        .zip(annotations)
        .map(|(f, (kind, name))| Template::from_function(kind, &name, f))
        .collect()
}

/// Adjoint and tangent templates, keyed by primitive name and arity.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    adjoints: BTreeMap<(String, usize), Template>,
    tangents: BTreeMap<(String, usize), Template>,
}

impl Registry {
    /// A registry without any templates.
    pub fn empty() -> Registry {
        Registry::default()
    }

    /// The built-in templates covering every differentiable kernel.
    pub fn builtin() -> Registry {
        let mut r = Registry::empty();
        r.load(REVERSE_SOURCE, false).expect("built-in adjoint templates are valid");
        r.load(FORWARD_SOURCE, false).expect("built-in tangent templates are valid");
        r
    }

    /// Register every template in `source`. Without `replace`, a template
    /// for an already covered (primitive, arity) is an error.
    pub fn load(&mut self, source: &str, replace: bool) -> Result<()> {
        for t in parse_templates(source)? {
            self.register(t, replace)?;
        }
        Ok(())
    }

    pub fn register(&mut self, t: Template, replace: bool) -> Result<()> {
        let table = match t.kind {
            Kind::Adjoint => &mut self.adjoints,
            Kind::Tangent => &mut self.tangents,
        };
        let key = (t.primitive.clone(), t.arity());
        if table.contains_key(&key) && !replace {
            return Err(Error::Template(format!(
                "{} template for '{}' with {} arguments is already registered",
                t.kind_name(),
                t.primitive,
                t.arity()
            )));
        }
        table.insert(key, t);
        Ok(())
    }

    pub fn register_adjoint(&mut self, primitive: &str, f: &FunctionDef, replace: bool) -> Result<()> {
        self.register(Template::from_function(Kind::Adjoint, primitive, f)?, replace)
    }

    pub fn register_tangent(&mut self, primitive: &str, f: &FunctionDef, replace: bool) -> Result<()> {
        self.register(Template::from_function(Kind::Tangent, primitive, f)?, replace)
    }

    pub fn adjoint(&self, primitive: &str, arity: usize) -> Result<&Template> {
        self.adjoints
            .get(&(primitive.to_string(), arity))
            .ok_or_else(|| Error::MissingTemplate(format!("{primitive}/{arity}")))
    }

    pub fn tangent(&self, primitive: &str, arity: usize) -> Result<&Template> {
        self.tangents
            .get(&(primitive.to_string(), arity))
            .ok_or_else(|| Error::MissingTangent(format!("{primitive}/{arity}")))
    }

    /// Primitives with at least one adjoint template.
    pub fn adjoint_primitives(&self) -> BTreeSet<String> {
        self.adjoints.keys().map(|(n, _)| n.clone()).collect()
    }

    pub fn tangent_primitives(&self) -> BTreeSet<String> {
        self.tangents.keys().map(|(n, _)| n.clone()).collect()
    }
}

/// One expanded adjoint statement: `d[target] = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStmt {
    /// The argument expression whose gradient is assigned.
    pub target: Expr,
    pub value: Expr,
    /// The value reads the target's own gradient (e.g. a scatter-add), so it
    /// updates the gradient rather than producing a separate partial.
    pub accumulates: bool,
}

/// Substitute placeholders (bound to argument expressions) and gradient
/// references (resolved by `grad`, which receives the bound expression).
fn substitute(
    e: &Expr,
    acc: &str,
    bindings: &HashMap<&str, &Expr>,
    grad: &mut dyn FnMut(&str, &Expr) -> Result<Expr>,
) -> Result<Expr> {
    Ok(match e {
        Expr::Index { base, index } if base.as_name() == Some(acc) => {
            let p = index.as_name().expect("checked at registration");
            grad(p, bindings[p])?
        }
        Expr::Name(n) => match bindings.get(n.as_str()) {
            Some(b) => (*b).clone(),
            None => return Err(Error::Template(format!("unbound placeholder '{n}'"))),
        },
        Expr::Call { func, args } => Expr::Call {
            func: func.clone(),
            args: args
                .iter()
                .map(|a| substitute(a, acc, bindings, grad))
                .collect::<Result<_>>()?,
        },
        Expr::BinOp { op, lhs, rhs } => Expr::binop(
            *op,
            substitute(lhs, acc, bindings, grad)?,
            substitute(rhs, acc, bindings, grad)?,
        ),
        Expr::Neg(inner) => Expr::neg(substitute(inner, acc, bindings, grad)?),
        Expr::Index { base, index } => Expr::index(
            substitute(base, acc, bindings, grad)?,
            substitute(index, acc, bindings, grad)?,
        ),
        other => other.clone(),
    })
}

fn bind<'a>(t: &'a Template, output: &'a Expr, args: &'a [Expr]) -> Result<HashMap<&'a str, &'a Expr>> {
    if args.len() != t.arity() {
        return Err(Error::Template(format!(
            "template for '{}' takes {} arguments, got {}",
            t.primitive,
            t.arity(),
            args.len()
        )));
    }
    let mut m = HashMap::new();
    m.insert(t.params[0].as_str(), output);
    for (p, a) in t.params[1..].iter().zip(args) {
        m.insert(p.as_str(), a);
    }
    Ok(m)
}

fn mentions_grad_of(e: &Expr, acc: &str, p: &str) -> bool {
    let mut found = false;
    e.walk(&mut |x| {
        if let Expr::Index { base, index } = x {
            if base.as_name() == Some(acc) && index.as_name() == Some(p) {
                found = true;
            }
        }
    });
    found
}

/// Expand an adjoint template for `output = primitive(args...)`.
///
/// Only statements for which `wants(arg)` holds are produced (typically:
/// the argument is an active variable). `grad(is_output, bound)` maps the
/// expression bound to a placeholder to the expression naming its
/// gradient; `is_output` tells the output placeholder apart from an
/// argument bound to the same variable.
pub fn expand_adjoint(
    t: &Template,
    output: &Expr,
    args: &[Expr],
    wants: &dyn Fn(&Expr) -> bool,
    grad: &mut dyn FnMut(bool, &Expr) -> Result<Expr>,
) -> Result<Vec<GradStmt>> {
    let bindings = bind(t, output, args)?;
    let out_name = t.output().to_string();
    let mut grad = |p: &str, e: &Expr| grad(p == out_name, e);
    let grad = &mut grad;
    let mut out = Vec::new();
    for s in &t.body {
        let StmtKind::IndexAssign { index, value, .. } = &s.kind else {
            unreachable!("checked at registration")
        };
        let p = index.as_name().expect("checked at registration");
        let target = bindings[p];
        if !wants(target) {
            continue;
        }
        out.push(GradStmt {
            target: target.clone(),
            value: substitute(value, "d", &bindings, grad)?,
            accumulates: mentions_grad_of(value, "d", p),
        });
    }
    Ok(out)
}

/// Split a sum into signed terms.
fn terms(e: &Expr, positive: bool, out: &mut Vec<(bool, Expr)>) {
    match e {
        Expr::BinOp {
            op: BinOp::Add,
            lhs,
            rhs,
        } => {
            terms(lhs, positive, out);
            terms(rhs, positive, out);
        }
        Expr::BinOp {
            op: BinOp::Sub,
            lhs,
            rhs,
        } => {
            terms(lhs, positive, out);
            terms(rhs, !positive, out);
        }
        other => out.push((positive, other.clone())),
    }
}

/// Expand a tangent template for `output = primitive(args...)`. Returns
/// `None` when every term involves only inactive tangents.
///
/// `active(arg)` tells whether an argument has a tangent, and `tangent`
/// names it. Inactive tangents inside kept terms become `init_grad(arg)`.
pub fn expand_tangent(
    t: &Template,
    output: &Expr,
    args: &[Expr],
    active: &dyn Fn(&Expr) -> bool,
    tangent: &mut dyn FnMut(&Expr) -> Result<Expr>,
) -> Result<Option<Expr>> {
    let bindings = bind(t, output, args)?;
    let StmtKind::IndexAssign { value, .. } = &t.body[0].kind else {
        unreachable!("checked at registration")
    };
    let mut parts = Vec::new();
    terms(value, true, &mut parts);
    let mut result: Option<Expr> = None;
    for (positive, term) in parts {
        let mut any_active = false;
        term.walk(&mut |x| {
            if let Expr::Index { base, index } = x {
                if base.as_name() == Some("t") {
                    if let Some(p) = index.as_name() {
                        if active(bindings[p]) {
                            any_active = true;
                        }
                    }
                }
            }
        });
        if !any_active {
            continue;
        }
        let mut resolve = |_: &str, a: &Expr| -> Result<Expr> {
            if active(a) {
                tangent(a)
            } else {
                Ok(Expr::call("init_grad", vec![a.clone()]))
            }
        };
        let e = substitute(&term, "t", &bindings, &mut resolve)?;
        result = Some(match (result, positive) {
            (None, true) => e,
            (None, false) => Expr::neg(e),
            (Some(acc), true) => Expr::binop(BinOp::Add, acc, e),
            (Some(acc), false) => Expr::binop(BinOp::Sub, acc, e),
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::printer::emit_expr;

    #[test]
    fn builtin_templates_load() {
        let r = Registry::builtin();
        for p in ["add", "multiply", "dot", "tanh", "exp", "log", "sum", "mean", "setitem", "append", "index"] {
            assert!(r.adjoint_primitives().contains(p), "{p}");
            assert!(r.tangent_primitives().contains(p), "{p}");
        }
        assert!(r.adjoint("sum", 3).is_ok());
        assert!(matches!(r.adjoint("frobnicate", 1), Err(Error::MissingTemplate(_))));
    }

    #[test]
    fn duplicate_registration_needs_override() {
        let mut r = Registry::builtin();
        let src = "@adjoint(tanh)\ndef straight_through(z, x):\n    d[x] = copy(d[z])\n";
        assert!(r.load(src, false).is_err());
        r.load(src, true).unwrap();
        assert_eq!(r.adjoint("tanh", 1).unwrap().params, vec!["z", "x"]);
    }

    #[test]
    fn malformed_templates_are_rejected() {
        for src in [
            "@adjoint(f)\ndef a(z, x):\n    y = x\n",
            "@adjoint(f)\ndef a(z, x):\n    d[x] = q\n",
            "@adjoint(f)\ndef a(z, x):\n    d[w] = d[z]\n",
            "@adjoint(f)\ndef a(z, x):\n    d[x] = user_fn(d[z])\n",
            "def a(z, x):\n    d[x] = d[z]\n",
        ] {
            let mut r = Registry::empty();
            assert!(r.load(src, false).is_err(), "{src}");
        }
    }

    #[test]
    fn expansion_substitutes_placeholders() {
        let mut r = Registry::empty();
        r.load("@adjoint(multiply)\ndef adjoint_multiply(z, x, y):\n    d[x] = y * d[z]\n    d[y] = x * d[z]\n", false)
            .unwrap();
        let t = r.adjoint("multiply", 2).unwrap();
        let out = expand_adjoint(
            t,
            &Expr::name("c"),
            &[Expr::name("a"), Expr::name("b")],
            &|_| true,
            &mut |_, e| Ok(Expr::name(format!("b_{}", e.as_name().unwrap()))),
        )
        .unwrap();
        let text: Vec<String> = out
            .iter()
            .map(|g| format!("{} = {}", emit_expr(&g.target), emit_expr(&g.value)))
            .collect();
        assert_eq!(text, vec!["a = b * b_c", "b = a * b_c"]);
    }

    #[test]
    fn inactive_tangent_terms_are_dropped() {
        let r = Registry::builtin();
        let t = r.tangent("multiply", 2).unwrap();
        let e = expand_tangent(
            t,
            &Expr::name("z"),
            &[Expr::name("x"), Expr::name("y")],
            &|e| e.as_name() == Some("x"),
            &mut |e| Ok(Expr::name(format!("t{}", e.as_name().unwrap()))),
        )
        .unwrap()
        .unwrap();
        assert_eq!(emit_expr(&e), "tx * y");
        let none = expand_tangent(t, &Expr::name("z"), &[Expr::name("x"), Expr::name("y")], &|_| false, &mut |e| {
            Ok(e.clone())
        })
        .unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn accumulating_statements_are_flagged() {
        let r = Registry::builtin();
        let t = r.adjoint("index", 2).unwrap();
        let out = expand_adjoint(t, &Expr::name("z"), &[Expr::name("x"), Expr::Int(0)], &|e| e.as_name().is_some(), &mut |_, e| {
            Ok(Expr::name(format!("b{}", e.as_name().unwrap())))
        })
        .unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].accumulates);
        assert_eq!(emit_expr(&out[0].value), "add_at(bx, x, 0, bz)");
    }
}
