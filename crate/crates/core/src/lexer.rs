//! Indentation-aware tokenizer.
//!
//! Produces a flat token stream with explicit `Newline`, `Indent` and
//! `Dedent` tokens. Newlines inside brackets are ignored (implicit line
//! joining), blank lines never affect indentation, and full-line comments
//! are emitted as `Comment` tokens attached to whichever block their
//! indentation places them in.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Name(String),
    Int(i64),
    Float(f64),
    Str(String),
    /// Operator or punctuation, e.g. `+`, `<=`, `(`, `:`.
    Op(&'static str),
    Comment(String),
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: u32,
    pub col: u32,
}

const OPS: &[&str] = &[
    "**", "//", "<=", ">=", "==", "!=", "+=", "-=", "*=", "/=", "->", "+", "-", "*", "/", "%",
    "<", ">", "=", "(", ")", "[", "]", "{", "}", ",", ":", ".", "@", ";", "&", "|", "^", "~",
    "!",
];

struct Line<'a> {
    number: u32,
    indent: usize,
    text: &'a str,
}

/// Split `source` into tokens.
pub fn tokenize(source: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut indents: Vec<usize> = vec![0];
    let mut depth = 0usize;
    let mut pending_comments: Vec<(Line, String)> = Vec::new();

    for (idx, raw) in source.split('\n').enumerate() {
        let number = idx as u32 + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if depth > 0 {
            lex_line(raw, number, 0, &mut depth, &mut out)?;
            if depth == 0 {
                out.push(tok(Tok::Newline, number, raw.len()));
            }
            continue;
        }
        let stripped = raw.trim_start_matches(' ');
        if stripped.starts_with('\t') {
            return Err(Error::syntax(number, 1, "tab characters are not allowed in indentation"));
        }
        let indent = raw.len() - stripped.len();
        if stripped.trim().is_empty() {
            continue;
        }
        if let Some(text) = stripped.strip_prefix('#') {
            let text = text.strip_prefix(' ').unwrap_or(text).trim_end().to_string();
            pending_comments.push((
                Line {
                    number,
                    indent,
                    text: stripped,
                },
                text,
            ));
            continue;
        }

        // Comments indented less than the new line's block stay in the
        // block they trail; the rest open the new line's block.
        let (before, after): (Vec<_>, Vec<_>) = pending_comments
            .drain(..)
            .partition(|(c, _)| c.indent > indent);
        for (c, text) in before {
            out.push(tok(Tok::Comment(text), c.number, c.indent));
            out.push(tok(Tok::Newline, c.number, c.text.len()));
        }

        let top = *indents.last().unwrap();
        if indent > top {
            indents.push(indent);
            out.push(tok(Tok::Indent, number, indent));
        } else {
            while indent < *indents.last().unwrap() {
                indents.pop();
                out.push(tok(Tok::Dedent, number, indent));
            }
            if indent != *indents.last().unwrap() {
                return Err(Error::syntax(number, indent as u32 + 1, "inconsistent dedent"));
            }
        }
        for (c, text) in after {
            out.push(tok(Tok::Comment(text), c.number, c.indent));
            out.push(tok(Tok::Newline, c.number, c.text.len()));
        }

        lex_line(raw, number, indent, &mut depth, &mut out)?;
        if depth == 0 {
            out.push(tok(Tok::Newline, number, raw.len()));
        }
    }
    if depth > 0 {
        let line = source.split('\n').count() as u32;
        return Err(Error::syntax(line, 1, "unclosed bracket at end of input"));
    }
    let last_line = source.split('\n').count() as u32;
    for (c, text) in pending_comments {
        out.push(tok(Tok::Comment(text), c.number, c.indent));
        out.push(tok(Tok::Newline, c.number, c.text.len()));
    }
    while indents.len() > 1 {
        indents.pop();
        out.push(tok(Tok::Dedent, last_line, 0));
    }
    out.push(tok(Tok::Eof, last_line, 0));
    Ok(out)
}

fn tok(t: Tok, line: u32, col0: usize) -> Token {
    Token {
        tok: t,
        line,
        col: col0 as u32 + 1,
    }
}

fn lex_line(
    raw: &str,
    line: u32,
    start: usize,
    depth: &mut usize,
    out: &mut Vec<Token>,
) -> Result<()> {
    let bytes = raw.as_bytes();
    let mut i = start;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == ' ' || c == '\t' {
            i += 1;
            continue;
        }
        if c == '#' {
            // Trailing comment: not preserved.
            break;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let s = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            out.push(tok(Tok::Name(raw[s..i].to_string()), line, s));
            continue;
        }
        if c.is_ascii_digit()
            || (c == '.' && i + 1 < bytes.len() && (bytes[i + 1] as char).is_ascii_digit())
        {
            let s = i;
            let (t, end) = lex_number(raw, i).map_err(|m| Error::syntax(line, s as u32 + 1, m))?;
            i = end;
            out.push(tok(t, line, s));
            continue;
        }
        if c == '\'' || c == '"' {
            let s = i;
            i += 1;
            let mut text = String::new();
            loop {
                if i >= bytes.len() {
                    return Err(Error::syntax(line, s as u32 + 1, "unterminated string literal"));
                }
                let ch = raw[i..].chars().next().unwrap();
                if ch == c {
                    i += 1;
                    break;
                }
                if ch == '\\' && i + 1 < bytes.len() {
                    let next = raw[i + 1..].chars().next().unwrap();
                    text.push(match next {
                        'n' => '\n',
                        't' => '\t',
                        other => other,
                    });
                    i += 1 + next.len_utf8();
                    continue;
                }
                text.push(ch);
                i += ch.len_utf8();
            }
            out.push(tok(Tok::Str(text), line, s));
            continue;
        }
        if let Some(op) = OPS.iter().find(|op| raw[i..].starts_with(**op)) {
            match *op {
                "(" | "[" | "{" => *depth += 1,
                ")" | "]" | "}" => {
                    if *depth == 0 {
                        return Err(Error::syntax(line, i as u32 + 1, format!("unmatched '{op}'")));
                    }
                    *depth -= 1;
                }
                _ => {}
            }
            out.push(tok(Tok::Op(op), line, i));
            i += op.len();
            continue;
        }
        return Err(Error::syntax(
            line,
            i as u32 + 1,
            format!("unexpected character {:?}", raw[i..].chars().next().unwrap()),
        ));
    }
    Ok(())
}

fn lex_number(raw: &str, start: usize) -> std::result::Result<(Tok, usize), String> {
    let bytes = raw.as_bytes();
    let mut i = start;
    let mut is_float = false;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        is_float = true;
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            is_float = true;
            i = j;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    if i < bytes.len() && ((bytes[i] as char).is_ascii_alphabetic() || bytes[i] == b'_') {
        return Err(format!("invalid number literal '{}'", &raw[start..=i]));
    }
    let text = &raw[start..i];
    if is_float {
        text.parse::<f64>()
            .map(|v| (Tok::Float(v), i))
            .map_err(|e| format!("invalid float literal '{text}': {e}"))
    } else {
        text.parse::<i64>()
            .map(|v| (Tok::Int(v), i))
            .map_err(|e| format!("invalid integer literal '{text}': {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn indentation_produces_indent_and_dedent() {
        let toks = kinds("def f(x):\n    return x\n");
        assert!(toks.contains(&Tok::Indent));
        assert!(toks.contains(&Tok::Dedent));
        assert_eq!(toks.last(), Some(&Tok::Eof));
    }

    #[test]
    fn numbers_distinguish_int_and_float() {
        let toks = kinds("a = 1 + 1. + 2.5 + 1e-5 + .5\n");
        assert!(toks.contains(&Tok::Int(1)));
        assert!(toks.contains(&Tok::Float(1.0)));
        assert!(toks.contains(&Tok::Float(2.5)));
        assert!(toks.contains(&Tok::Float(1e-5)));
        assert!(toks.contains(&Tok::Float(0.5)));
    }

    #[test]
    fn newlines_inside_brackets_are_joined() {
        let toks = kinds("y = f(a,\n      b)\n");
        let newlines = toks.iter().filter(|t| **t == Tok::Newline).count();
        assert_eq!(newlines, 1);
    }

    #[test]
    fn trailing_block_comment_stays_in_block() {
        let toks = kinds("def f(x):\n    y = x\n    # done\nz = 1\n");
        let comment = toks.iter().position(|t| matches!(t, Tok::Comment(_))).unwrap();
        let dedent = toks.iter().position(|t| *t == Tok::Dedent).unwrap();
        assert!(comment < dedent);
    }

    #[test]
    fn tabs_are_rejected() {
        assert!(tokenize("def f(x):\n\treturn x\n").is_err());
    }

    #[test]
    fn bad_dedent_is_rejected() {
        assert!(tokenize("def f(x):\n    y = x\n  return y\n").is_err());
    }
}
