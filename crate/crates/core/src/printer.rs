//! Deterministic source emitter.
//!
//! Output uses four-space indentation and LF newlines, and parenthesizes
//! only where precedence requires it, so that generated derivatives read
//! like hand-written code.

use crate::ast::*;

/// Render a whole program. Functions are separated by one blank line.
pub fn emit_source(p: &Program) -> String {
    let mut out = String::new();
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        emit_function_into(f, &mut out);
    }
    out
}

pub fn emit_function(f: &FunctionDef) -> String {
    let mut out = String::new();
    emit_function_into(f, &mut out);
    out
}

fn emit_function_into(f: &FunctionDef, out: &mut String) {
    out.push_str("def ");
    out.push_str(&f.name);
    out.push('(');
    let params: Vec<String> = f
        .params
        .iter()
        .map(|p| match &p.default {
            Some(d) => format!("{}={}", p.name, emit_expr(d)),
            None => p.name.clone(),
        })
        .collect();
    out.push_str(&params.join(", "));
    out.push_str("):\n");
    emit_block(&f.body, 1, out);
}

fn emit_block(body: &[Stmt], depth: usize, out: &mut String) {
    for s in body {
        emit_stmt(s, depth, out);
    }
    if body.iter().all(|s| s.is_comment()) {
        indent(depth, out);
        out.push_str("pass\n");
    }
}

fn indent(depth: usize, out: &mut String) {
    for _ in 0..depth {
        out.push_str("    ");
    }
}

/// Render one statement (and its nested blocks) at the given depth.
pub fn emit_stmt_string(s: &Stmt) -> String {
    let mut out = String::new();
    emit_stmt(s, 0, &mut out);
    out
}

fn emit_stmt(s: &Stmt, depth: usize, out: &mut String) {
    match &s.kind {
        StmtKind::Comment(text) => {
            indent(depth, out);
            if text.is_empty() {
                out.push_str("#\n");
            } else {
                out.push_str("# ");
                out.push_str(text);
                out.push('\n');
            }
        }
        StmtKind::Assign { target, value } => {
            indent(depth, out);
            out.push_str(&format!("{target} = {}\n", emit_expr(value)));
        }
        StmtKind::IndexAssign {
            target,
            index,
            value,
        } => {
            indent(depth, out);
            out.push_str(&format!(
                "{target}[{}] = {}\n",
                emit_expr(index),
                emit_expr(value)
            ));
        }
        StmtKind::ExprStmt(e) => {
            indent(depth, out);
            out.push_str(&emit_expr(e));
            out.push('\n');
        }
        StmtKind::Return(values) => {
            indent(depth, out);
            if values.is_empty() {
                out.push_str("return\n");
            } else {
                let parts: Vec<String> = values.iter().map(emit_expr).collect();
                out.push_str(&format!("return {}\n", parts.join(", ")));
            }
        }
        StmtKind::If {
            cond,
            then_body,
            else_body,
        } => {
            indent(depth, out);
            out.push_str(&format!("if {}:\n", emit_expr(cond)));
            emit_block(then_body, depth + 1, out);
            if !else_body.is_empty() {
                indent(depth, out);
                out.push_str("else:\n");
                emit_block(else_body, depth + 1, out);
            }
        }
        StmtKind::While { cond, body } => {
            indent(depth, out);
            out.push_str(&format!("while {}:\n", emit_expr(cond)));
            emit_block(body, depth + 1, out);
        }
        StmtKind::ForRange { var, count, body } => {
            indent(depth, out);
            out.push_str(&format!("for {var} in range({}):\n", emit_expr(count)));
            emit_block(body, depth + 1, out);
        }
        StmtKind::InsertGradOf { var, alias, body } => {
            indent(depth, out);
            out.push_str(&format!("with insert_grad_of({var}) as {alias}:\n"));
            emit_block(body, depth + 1, out);
        }
        StmtKind::Unsupported { text, .. } => {
            for line in text {
                indent(depth, out);
                out.push_str(line);
                out.push('\n');
            }
        }
    }
}

/// Render an expression with minimal parentheses.
pub fn emit_expr(e: &Expr) -> String {
    match e {
        Expr::Name(n) => n.clone(),
        Expr::Float(v) => format_float(*v),
        Expr::Int(v) => v.to_string(),
        Expr::Bool(true) => "True".into(),
        Expr::Bool(false) => "False".into(),
        Expr::None => "None".into(),
        Expr::Str(s) => format!("'{}'", escape(s)),
        Expr::BinOp { op, lhs, rhs } => {
            let prec = op.precedence();
            let l = wrap_if(lhs, |c| c < prec || (op.is_comparison() && c == prec));
            // Operators are left-associative, so an equal-precedence right
            // operand needs parentheses.
            let r = wrap_if(rhs, |c| c <= prec);
            format!("{l} {} {r}", op.symbol())
        }
        Expr::Call { func, args } => {
            let parts: Vec<String> = args.iter().map(emit_expr).collect();
            format!("{func}({})", parts.join(", "))
        }
        Expr::Index { base, index } => {
            let b = match **base {
                Expr::BinOp { .. } | Expr::Neg(_) => format!("({})", emit_expr(base)),
                Expr::Float(v) if v < 0.0 => format!("({})", emit_expr(base)),
                Expr::Int(v) if v < 0 => format!("({})", emit_expr(base)),
                _ => emit_expr(base),
            };
            format!("{b}[{}]", emit_expr(index))
        }
        Expr::Neg(inner) => match **inner {
            Expr::BinOp { .. } | Expr::Neg(_) => format!("-({})", emit_expr(inner)),
            // `-1.0` would re-parse as a negative literal, not a negation.
            Expr::Float(_) | Expr::Int(_) => format!("-({})", emit_expr(inner)),
            _ => format!("-{}", emit_expr(inner)),
        },
    }
}

fn wrap_if(e: &Expr, needs: impl Fn(u8) -> bool) -> String {
    match e {
        Expr::BinOp { op, .. } if needs(op.precedence()) => format!("({})", emit_expr(e)),
        _ => emit_expr(e),
    }
}

/// Shortest representation that parses back to the same bits, always with
/// a decimal point or exponent so the literal stays a float.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\'', "\\'")
        .replace('\n', "\\n")
        .replace('\t', "\\t")
}
