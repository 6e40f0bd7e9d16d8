//! Recursive-descent parser for `.tg` source.
//!
//! Constructs outside the language (`break`, `try`, keyword arguments,
//! attribute access, ...) do not abort parsing: the offending statement is
//! captured verbatim as [`StmtKind::Unsupported`] so that validation can
//! report every violation with its line number.

use crate::ast::*;
use crate::error::{Error, Result};
use crate::lexer::{tokenize, Tok, Token};

/// Parse a whole program.
pub fn parse(source: &str) -> Result<Program> {
    let tokens = tokenize(source)?;
    let lines: Vec<&str> = source.split('\n').collect();
    let mut p = Parser {
        toks: tokens,
        pos: 0,
        lines,
    };
    p.program()
}

/// Parse a single expression (used for CLI literals and tests).
pub fn parse_expr(source: &str) -> Result<Expr> {
    let tokens = tokenize(source)?;
    let mut p = Parser {
        toks: tokens,
        pos: 0,
        lines: source.split('\n').collect(),
    };
    let e = p.expr().map_err(PErr::into_error)?;
    p.skip_newlines();
    if !matches!(p.peek(), Tok::Eof) {
        return Err(p.error_here("unexpected trailing input after expression"));
    }
    Ok(e)
}

const UNSUPPORTED_KEYWORDS: &[&str] = &[
    "break", "continue", "try", "except", "finally", "class", "lambda", "import", "from",
    "global", "nonlocal", "yield", "raise", "del", "assert", "async", "await", "def", "match",
];

/// Words that may not be used as variable names.
pub const RESERVED: &[&str] = &[
    "def", "return", "if", "elif", "else", "while", "for", "in", "with", "as", "pass", "True",
    "False", "None", "and", "or", "not", "is", "break", "continue", "try", "except", "finally",
    "class", "lambda", "import", "from", "global", "nonlocal", "yield", "raise", "del", "assert",
    "async", "await",
];

enum PErr {
    Syntax(Error),
    Unsupported(String),
}

impl PErr {
    fn into_error(self) -> Error {
        match self {
            PErr::Syntax(e) => e,
            PErr::Unsupported(what) => Error::syntax(0, 0, format!("unsupported construct: {what}")),
        }
    }
}

impl From<Error> for PErr {
    fn from(e: Error) -> Self {
        PErr::Syntax(e)
    }
}

type PResult<T> = std::result::Result<T, PErr>;

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    lines: Vec<&'a str>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, offset: usize) -> &Tok {
        let i = (self.pos + offset).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn cur(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, msg: impl Into<String>) -> Error {
        let t = self.cur();
        Error::syntax(t.line, t.col, msg)
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Name(n) => format!("'{n}'"),
            Tok::Int(v) => format!("'{v}'"),
            Tok::Float(v) => format!("'{v}'"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Op(o) => format!("'{o}'"),
            Tok::Comment(_) => "comment".into(),
            Tok::Newline => "end of line".into(),
            Tok::Indent => "indent".into(),
            Tok::Dedent => "dedent".into(),
            Tok::Eof => "end of input".into(),
        }
    }

    fn expect_op(&mut self, op: &str) -> PResult<()> {
        match self.peek() {
            Tok::Op(o) if *o == op => {
                self.advance();
                Ok(())
            }
            other => Err(PErr::Syntax(self.error_here(format!(
                "expected '{op}', found {}",
                Self::describe(other)
            )))),
        }
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(self.peek(), Tok::Op(o) if *o == op)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Name(n) if n == kw)
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.is_kw(kw) {
            self.advance();
            Ok(())
        } else {
            Err(PErr::Syntax(self.error_here(format!(
                "expected '{kw}', found {}",
                Self::describe(self.peek())
            ))))
        }
    }

    fn expect_name(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Name(n) if !RESERVED.contains(&n.as_str()) => {
                self.advance();
                Ok(n)
            }
            other => Err(PErr::Syntax(self.error_here(format!(
                "expected a name, found {}",
                Self::describe(&other)
            )))),
        }
    }

    fn expect_newline(&mut self) -> PResult<()> {
        match self.peek() {
            Tok::Newline => {
                self.advance();
                Ok(())
            }
            Tok::Eof => Ok(()),
            other => Err(PErr::Syntax(self.error_here(format!(
                "expected end of line, found {}",
                Self::describe(other)
            )))),
        }
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Tok::Newline) {
            self.advance();
        }
    }

    fn program(&mut self) -> Result<Program> {
        let mut functions: Vec<FunctionDef> = Vec::new();
        loop {
            match self.peek() {
                Tok::Newline | Tok::Comment(_) => {
                    self.advance();
                }
                Tok::Eof => break,
                Tok::Name(n) if n == "def" => {
                    let line = self.cur().line;
                    let f = self.funcdef().map_err(PErr::into_error)?;
                    if functions.iter().any(|g| g.name == f.name) {
                        return Err(Error::syntax(
                            line,
                            1,
                            format!("duplicate function '{}'", f.name),
                        ));
                    }
                    functions.push(f);
                }
                other => {
                    return Err(self.error_here(format!(
                        "expected a function definition, found {}",
                        Self::describe(other)
                    )))
                }
            }
        }
        Ok(Program { functions })
    }

    fn funcdef(&mut self) -> PResult<FunctionDef> {
        self.expect_kw("def")?;
        let name = self.expect_name()?;
        self.expect_op("(")?;
        let mut params: Vec<Param> = Vec::new();
        while !self.is_op(")") {
            let pname = self.expect_name()?;
            if params.iter().any(|p| p.name == pname) {
                return Err(PErr::Syntax(
                    self.error_here(format!("duplicate parameter '{pname}'")),
                ));
            }
            let default = if self.is_op("=") {
                self.advance();
                Some(self.expr()?)
            } else {
                None
            };
            params.push(Param {
                name: pname,
                default,
            });
            if !self.is_op(")") {
                self.expect_op(",")?;
            }
        }
        self.expect_op(")")?;
        self.expect_op(":")?;
        let body = self.block()?;
        Ok(FunctionDef { name, params, body })
    }

    /// `NEWLINE INDENT stmt+ DEDENT`
    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect_newline()?;
        let mut body = Vec::new();
        // Comments that precede the block's first line are lexed before
        // the indent token.
        while let Tok::Comment(text) = self.peek().clone() {
            let line = self.cur().line;
            self.advance();
            self.expect_newline()?;
            body.push(Stmt::at(line, StmtKind::Comment(text)));
        }
        if !matches!(self.peek(), Tok::Indent) {
            if !body.is_empty() {
                return Ok(body);
            }
            return Err(PErr::Syntax(self.error_here("expected an indented block")));
        }
        self.advance();
        loop {
            match self.peek() {
                Tok::Dedent => {
                    self.advance();
                    break;
                }
                Tok::Eof => break,
                Tok::Newline => {
                    self.advance();
                }
                _ => {
                    if let Some(s) = self.stmt()? {
                        body.push(s);
                    }
                }
            }
        }
        Ok(body)
    }

    fn stmt(&mut self) -> PResult<Option<Stmt>> {
        let start = self.pos;
        match self.stmt_inner() {
            Ok(s) => Ok(s),
            Err(PErr::Unsupported(what)) => Ok(Some(self.recover_unsupported(start, what))),
            Err(e) => Err(e),
        }
    }

    /// Skip the rest of the statement beginning at token `start` (including
    /// an attached indented block) and capture its source text.
    fn recover_unsupported(&mut self, start: usize, construct: String) -> Stmt {
        self.pos = start;
        let first_line = self.toks[start].line;
        let mut last_line = first_line;
        let mut last_tok_was_colon = false;
        while !matches!(self.peek(), Tok::Newline | Tok::Eof) {
            last_tok_was_colon = self.is_op(":");
            last_line = self.cur().line;
            self.advance();
        }
        if matches!(self.peek(), Tok::Newline) {
            self.advance();
        }
        if last_tok_was_colon {
            while matches!(self.peek(), Tok::Comment(_) | Tok::Newline) {
                last_line = self.cur().line;
                self.advance();
            }
            if matches!(self.peek(), Tok::Indent) {
                let mut depth = 0usize;
                loop {
                    match self.peek() {
                        Tok::Indent => depth += 1,
                        Tok::Dedent => {
                            depth -= 1;
                            if depth == 0 {
                                self.advance();
                                break;
                            }
                        }
                        Tok::Eof => break,
                        _ => last_line = last_line.max(self.cur().line),
                    }
                    self.advance();
                }
            }
        }
        let raw: Vec<&str> = self
            .lines
            .iter()
            .skip(first_line as usize - 1)
            .take((last_line - first_line + 1) as usize)
            .copied()
            .collect();
        let base = raw
            .first()
            .map(|l| l.len() - l.trim_start().len())
            .unwrap_or(0);
        let text = raw
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let lead = l.len() - l.trim_start().len();
                l[lead.min(base)..].trim_end().to_string()
            })
            .collect();
        Stmt::at(first_line, StmtKind::Unsupported { construct, text })
    }

    fn stmt_inner(&mut self) -> PResult<Option<Stmt>> {
        let line = self.cur().line;
        let kind = match self.peek().clone() {
            Tok::Comment(text) => {
                self.advance();
                self.expect_newline()?;
                StmtKind::Comment(text)
            }
            Tok::Name(kw) if UNSUPPORTED_KEYWORDS.contains(&kw.as_str()) => {
                let what = if kw == "def" {
                    "nested function definition".to_string()
                } else {
                    format!("'{kw}' statement")
                };
                return Err(PErr::Unsupported(what));
            }
            Tok::Name(kw) if kw == "pass" => {
                self.advance();
                self.expect_newline()?;
                return Ok(None);
            }
            Tok::Name(kw) if kw == "if" => {
                self.advance();
                return Ok(Some(self.if_rest(line)?));
            }
            Tok::Name(kw) if kw == "while" => {
                self.advance();
                let cond = self.expr()?;
                self.expect_op(":")?;
                let body = self.block()?;
                StmtKind::While { cond, body }
            }
            Tok::Name(kw) if kw == "for" => {
                self.advance();
                let var = self.expect_name()?;
                self.expect_kw("in")?;
                if !self.is_kw("range") {
                    return Err(PErr::Unsupported("for loop over a non-range iterable".into()));
                }
                self.advance();
                self.expect_op("(")?;
                let count = self.expr()?;
                if self.is_op(",") {
                    return Err(PErr::Unsupported("range with start/step arguments".into()));
                }
                self.expect_op(")")?;
                self.expect_op(":")?;
                let body = self.block()?;
                StmtKind::ForRange { var, count, body }
            }
            Tok::Name(kw) if kw == "return" => {
                self.advance();
                let mut values = Vec::new();
                if !matches!(self.peek(), Tok::Newline | Tok::Eof) {
                    values.push(self.expr()?);
                    while self.is_op(",") {
                        self.advance();
                        values.push(self.expr()?);
                    }
                }
                self.expect_newline()?;
                StmtKind::Return(values)
            }
            Tok::Name(kw) if kw == "with" => {
                self.advance();
                if !self.is_kw("insert_grad_of") {
                    return Err(PErr::Unsupported("'with' statement".into()));
                }
                self.advance();
                self.expect_op("(")?;
                let var = self.expect_name()?;
                self.expect_op(")")?;
                self.expect_kw("as")?;
                let alias = self.expect_name()?;
                self.expect_op(":")?;
                let body = self.block()?;
                StmtKind::InsertGradOf { var, alias, body }
            }
            Tok::Name(kw) if kw == "else" || kw == "elif" => {
                return Err(PErr::Syntax(
                    self.error_here(format!("'{kw}' without a matching 'if'")),
                ));
            }
            _ => self.simple_stmt()?,
        };
        Ok(Some(Stmt::at(line, kind)))
    }

    fn if_rest(&mut self, line: u32) -> PResult<Stmt> {
        let cond = self.expr()?;
        self.expect_op(":")?;
        let then_body = self.block()?;
        let else_body = if self.is_kw("elif") {
            let l = self.cur().line;
            self.advance();
            vec![self.if_rest(l)?]
        } else if self.is_kw("else") {
            self.advance();
            self.expect_op(":")?;
            self.block()?
        } else {
            Vec::new()
        };
        Ok(Stmt::at(
            line,
            StmtKind::If {
                cond,
                then_body,
                else_body,
            },
        ))
    }

    fn simple_stmt(&mut self) -> PResult<StmtKind> {
        let lhs = self.expr()?;
        if self.is_op(",") {
            return Err(PErr::Unsupported("tuple unpacking".into()));
        }
        for aug in ["+=", "-=", "*=", "/="] {
            if self.is_op(aug) {
                return Err(PErr::Unsupported(format!("augmented assignment '{aug}'")));
            }
        }
        if self.is_op("=") {
            self.advance();
            let value = self.expr()?;
            if self.is_op(",") {
                return Err(PErr::Unsupported("tuple construction".into()));
            }
            if self.is_op("=") {
                return Err(PErr::Unsupported("chained assignment".into()));
            }
            self.expect_newline()?;
            return match lhs {
                Expr::Name(target) => Ok(StmtKind::Assign { target, value }),
                Expr::Index { base, index } => match *base {
                    Expr::Name(target) => Ok(StmtKind::IndexAssign {
                        target,
                        index: *index,
                        value,
                    }),
                    _ => Err(PErr::Unsupported("nested index assignment".into())),
                },
                _ => Err(PErr::Syntax(self.error_here("invalid assignment target"))),
            };
        }
        self.expect_newline()?;
        Ok(StmtKind::ExprStmt(lhs))
    }

    pub(crate) fn expr(&mut self) -> PResult<Expr> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Tok::Op("<") => BinOp::Lt,
            Tok::Op(">") => BinOp::Gt,
            Tok::Op("<=") => BinOp::Le,
            Tok::Op(">=") => BinOp::Ge,
            Tok::Op("==") => BinOp::Eq,
            Tok::Op("!=") => return Err(PErr::Unsupported("'!=' operator".into())),
            Tok::Name(n) if matches!(n.as_str(), "and" | "or" | "is" | "in" | "not" | "if") => {
                return Err(PErr::Unsupported(format!("'{n}' operator")))
            }
            _ => return Ok(lhs),
        };
        self.advance();
        let rhs = self.additive()?;
        if matches!(self.peek(), Tok::Op("<" | ">" | "<=" | ">=" | "==")) {
            return Err(PErr::Unsupported("chained comparison".into()));
        }
        Ok(Expr::binop(op, lhs, rhs))
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Op("+") => BinOp::Add,
                Tok::Op("-") => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.multiplicative()?;
            lhs = Expr::binop(op, lhs, rhs);
        }
    }

    fn multiplicative(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op("*") => BinOp::Mul,
                Tok::Op("/") => BinOp::Div,
                Tok::Op(o @ ("%" | "//" | "@")) => {
                    return Err(PErr::Unsupported(format!("'{o}' operator")))
                }
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::binop(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.is_op("-") {
            self.advance();
            // A minus directly followed by a number is a negative literal;
            // anything else (including a parenthesized number) is negation.
            match self.peek().clone() {
                Tok::Float(v) => {
                    self.advance();
                    return Ok(Expr::Float(-v));
                }
                Tok::Int(v) => {
                    self.advance();
                    return Ok(Expr::Int(v.wrapping_neg()));
                }
                _ => {}
            }
            let inner = self.unary()?;
            return Ok(Expr::neg(inner));
        }
        if self.is_op("+") {
            return Err(PErr::Unsupported("unary '+'".into()));
        }
        if self.is_kw("not") {
            return Err(PErr::Unsupported("'not' operator".into()));
        }
        let e = self.postfix()?;
        if self.is_op("**") {
            return Err(PErr::Unsupported("'**' operator".into()));
        }
        Ok(e)
    }

    fn postfix(&mut self) -> PResult<Expr> {
        let mut e = self.atom()?;
        loop {
            if self.is_op("[") {
                self.advance();
                if self.is_op(":") {
                    return Err(PErr::Unsupported("slice".into()));
                }
                let index = self.expr()?;
                if self.is_op(":") {
                    return Err(PErr::Unsupported("slice".into()));
                }
                if self.is_op(",") {
                    return Err(PErr::Unsupported("multi-dimensional index".into()));
                }
                self.expect_op("]")?;
                e = Expr::index(e, index);
            } else if self.is_op("(") {
                let func = match &e {
                    Expr::Name(n) => n.clone(),
                    _ => return Err(PErr::Unsupported("call of a computed function value".into())),
                };
                self.advance();
                let mut args = Vec::new();
                while !self.is_op(")") {
                    if matches!(self.peek(), Tok::Name(_)) && matches!(self.peek_at(1), Tok::Op("="))
                    {
                        return Err(PErr::Unsupported("keyword argument".into()));
                    }
                    if self.is_op("*") {
                        return Err(PErr::Unsupported("argument unpacking".into()));
                    }
                    args.push(self.expr()?);
                    if !self.is_op(")") {
                        self.expect_op(",")?;
                    }
                }
                self.expect_op(")")?;
                e = Expr::Call { func, args };
            } else if self.is_op(".") {
                return Err(PErr::Unsupported("attribute access".into()));
            } else {
                return Ok(e);
            }
        }
    }

    fn atom(&mut self) -> PResult<Expr> {
        let t = self.peek().clone();
        match t {
            Tok::Int(v) => {
                self.advance();
                Ok(Expr::Int(v))
            }
            Tok::Float(v) => {
                self.advance();
                Ok(Expr::Float(v))
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Expr::Str(s))
            }
            Tok::Name(n) => match n.as_str() {
                "True" => {
                    self.advance();
                    Ok(Expr::Bool(true))
                }
                "False" => {
                    self.advance();
                    Ok(Expr::Bool(false))
                }
                "None" => {
                    self.advance();
                    Ok(Expr::None)
                }
                "lambda" => Err(PErr::Unsupported("lambda expression".into())),
                "not" => Err(PErr::Unsupported("'not' operator".into())),
                _ if RESERVED.contains(&n.as_str()) => Err(PErr::Syntax(
                    self.error_here(format!("unexpected keyword '{n}'")),
                )),
                _ => {
                    self.advance();
                    Ok(Expr::Name(n))
                }
            },
            Tok::Op("(") => {
                self.advance();
                if self.is_op(")") {
                    return Err(PErr::Unsupported("tuple construction".into()));
                }
                let e = self.expr()?;
                if self.is_op(",") {
                    return Err(PErr::Unsupported("tuple construction".into()));
                }
                self.expect_op(")")?;
                Ok(e)
            }
            Tok::Op("[") => Err(PErr::Unsupported("list literal".into())),
            Tok::Op("{") => Err(PErr::Unsupported("dict or set literal".into())),
            other => Err(PErr::Syntax(self.error_here(format!(
                "expected an expression, found {}",
                Self::describe(&other)
            )))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_square() {
        let p = parse("def f(x):\n    return x * x").unwrap();
        assert_eq!(p.functions.len(), 1);
        let f = &p.functions[0];
        assert_eq!(f.name, "f");
        assert_eq!(f.param_names(), vec!["x"]);
        assert_eq!(
            f.body,
            vec![Stmt::ret(vec![Expr::binop(
                BinOp::Mul,
                Expr::name("x"),
                Expr::name("x")
            )])]
        );
    }

    #[test]
    fn empty_source_has_no_functions() {
        assert!(parse("").unwrap().functions.is_empty());
    }

    #[test]
    fn identity_program() {
        let p = parse("def f(x):\n    y = x\n    return y").unwrap();
        let body = &p.functions[0].body;
        assert_eq!(body[0], Stmt::assign("y", Expr::name("x")));
        assert_eq!(body[1], Stmt::ret(vec![Expr::name("y")]));
    }

    #[test]
    fn precedence_and_negation() {
        let e = parse_expr("-x * y + 2 < 3").unwrap();
        let expected = Expr::binop(
            BinOp::Lt,
            Expr::binop(
                BinOp::Add,
                Expr::binop(BinOp::Mul, Expr::neg(Expr::name("x")), Expr::name("y")),
                Expr::Int(2),
            ),
            Expr::Int(3),
        );
        assert_eq!(e, expected);
        assert_eq!(parse_expr("-1.5").unwrap(), Expr::Float(-1.5));
    }

    #[test]
    fn unsupported_constructs_are_captured() {
        let src = "def f(x):\n    while x < 3:\n        break\n    y = add(x, x, out=x)\n    try:\n        x = 1\n    except:\n        x = 2\n    return x\n";
        let p = parse(src).unwrap();
        let body = &p.functions[0].body;
        let kinds: Vec<_> = body
            .iter()
            .map(|s| match &s.kind {
                StmtKind::Unsupported { construct, .. } => construct.clone(),
                _ => String::new(),
            })
            .collect();
        assert!(kinds.contains(&"keyword argument".to_string()));
        assert!(kinds.contains(&"'try' statement".to_string()));
        assert!(kinds.contains(&"'except' statement".to_string()));
        match &body[0].kind {
            StmtKind::While { body, .. } => {
                assert!(matches!(body[0].kind, StmtKind::Unsupported { .. }))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(body.last().unwrap().kind, StmtKind::Return(_)));
    }

    #[test]
    fn insert_grad_of_block() {
        let src = "def f(x):\n    with insert_grad_of(x) as dx:\n        if dx > 10:\n            print('Clipping', dx)\n            dx = 10\n    return x * x\n";
        let p = parse(src).unwrap();
        match &p.functions[0].body[0].kind {
            StmtKind::InsertGradOf { var, alias, body } => {
                assert_eq!(var, "x");
                assert_eq!(alias, "dx");
                assert_eq!(body.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elif_desugars_to_nested_if() {
        let src = "def f(x):\n    if x < 0:\n        y = 1\n    elif x < 1:\n        y = 2\n    else:\n        y = 3\n    return y\n";
        let p = parse(src).unwrap();
        match &p.functions[0].body[0].kind {
            StmtKind::If { else_body, .. } => {
                assert!(matches!(else_body[0].kind, StmtKind::If { .. }))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_report_position() {
        match parse("def f(x):\n    y = = x\n") {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn defaults_and_multiline_calls() {
        let src = "def g(x, by=1.0):\n    y = f(x,\n          by)\n    return y\n";
        let p = parse(src).unwrap();
        assert_eq!(p.functions[0].params[1].default, Some(Expr::Float(1.0)));
    }
}
