//! Recursive-descent parser for the expression DSL.
//!
//! Grammar (standard precedence, `^` above unary minus, all binary operators
//! left-associative):
//!
//! ```text
//! sum      := product (('+' | '-') product)*
//! product  := unary (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := atom ('^' exponent)*
//! exponent := '-' exponent | atom
//! atom     := NUMBER | 'x'IDX | 'u'IDX | FUNC '(' sum ')' | '(' sum ')'
//! ```

use std::fmt;

use super::{BinOp, Expr, Func};

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    Empty,
    UnexpectedChar(char),
    UnexpectedEnd,
    UnexpectedToken(String),
    BadNumber(String),
    UnknownIdent(String),
    IndexOutOfRange { var: char, index: usize, max: usize },
    TrailingInput(String),
}

/// Parse failure with the byte offset of the offending token.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: ", self.offset)?;
        match &self.kind {
            ParseErrorKind::Empty => write!(f, "empty expression"),
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character `{c}`"),
            ParseErrorKind::UnexpectedEnd => write!(f, "unexpected end of expression"),
            ParseErrorKind::UnexpectedToken(t) => write!(f, "unexpected token `{t}`"),
            ParseErrorKind::BadNumber(s) => write!(f, "malformed number `{s}`"),
            ParseErrorKind::UnknownIdent(s) => write!(
                f,
                "unknown identifier `{s}` (variables are x1..xn, u1..um; \
                 functions are sin, cos, tanh, exp, sqrt)"
            ),
            ParseErrorKind::IndexOutOfRange { var, index, max } => {
                write!(f, "variable {var}{index} out of range (declared dimension {max})")
            }
            ParseErrorKind::TrailingInput(t) => write!(f, "trailing input starting at `{t}`"),
        }
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
                // exponent part only when followed by digits (with optional sign)
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::BadNumber(text.to_string()),
                })?;
                toks.push((Tok::Num(v), start));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphabetic() {
                    i += 1;
                }
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                toks.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ParseError { offset: i, kind: ParseErrorKind::UnexpectedChar(c) });
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    end: usize,
    n: usize,
    m: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn bump(&mut self) -> Option<&Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t);
        self.pos += 1;
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError { offset: self.offset(), kind }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat(&Tok::Plus) {
                let rhs = self.product()?;
                lhs = Expr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
            } else if self.eat(&Tok::Minus) {
                let rhs = self.product()?;
                lhs = Expr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(&Tok::Star) {
                let rhs = self.unary()?;
                lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
            } else if self.eat(&Tok::Slash) {
                let rhs = self.unary()?;
                lhs = Expr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.atom()?;
        while self.eat(&Tok::Caret) {
            let rhs = self.exponent()?;
            lhs = Expr::Bin(BinOp::Pow, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn exponent(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            Ok(Expr::Neg(Box::new(self.exponent()?)))
        } else {
            self.atom()
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.bump().cloned() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.sum()?;
                if self.eat(&Tok::RParen) {
                    Ok(e)
                } else {
                    Err(self.err(ParseErrorKind::UnexpectedEnd))
                }
            }
            Some(Tok::Ident(name)) => self.ident(&name, offset),
            Some(t) => Err(ParseError {
                offset,
                kind: ParseErrorKind::UnexpectedToken(format!("{t:?}")),
            }),
            None => Err(ParseError { offset, kind: ParseErrorKind::UnexpectedEnd }),
        }
    }

    fn ident(&mut self, name: &str, offset: usize) -> Result<Expr, ParseError> {
        if let Some(func) = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "tanh" => Some(Func::Tanh),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        } {
            if !self.eat(&Tok::LParen) {
                return Err(self.err(ParseErrorKind::UnexpectedToken(format!(
                    "expected `(` after `{name}`"
                ))));
            }
            let arg = self.sum()?;
            if !self.eat(&Tok::RParen) {
                return Err(self.err(ParseErrorKind::UnexpectedEnd));
            }
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        let (head, digits) = name.split_at(
            name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len()),
        );
        let index: Option<usize> = if digits.is_empty() { None } else { digits.parse().ok() };
        match (head, index) {
            ("x", Some(i)) => {
                if i >= 1 && i <= self.n {
                    Ok(Expr::State(i - 1))
                } else {
                    Err(ParseError {
                        offset,
                        kind: ParseErrorKind::IndexOutOfRange { var: 'x', index: i, max: self.n },
                    })
                }
            }
            ("u", Some(j)) => {
                if j >= 1 && j <= self.m {
                    Ok(Expr::Control(j - 1))
                } else {
                    Err(ParseError {
                        offset,
                        kind: ParseErrorKind::IndexOutOfRange { var: 'u', index: j, max: self.m },
                    })
                }
            }
            _ => Err(ParseError {
                offset,
                kind: ParseErrorKind::UnknownIdent(name.to_string()),
            }),
        }
    }
}

/// Parse an expression over `x1..xn` and `u1..um`.
pub fn parse_expr(src: &str, n: usize, m: usize) -> Result<Expr, ParseError> {
    if src.trim().is_empty() {
        return Err(ParseError { offset: 0, kind: ParseErrorKind::Empty });
    }
    let toks = lex(src)?;
    let mut p = Parser { toks: &toks, pos: 0, end: src.len(), n, m };
    let e = p.sum()?;
    if p.pos != toks.len() {
        return Err(ParseError {
            offset: p.offset(),
            kind: ParseErrorKind::TrailingInput(format!("{:?}", p.peek().unwrap())),
        });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_byte_offsets() {
        let err = parse_expr("x1 + @", 2, 0).unwrap_err();
        assert_eq!(err.offset, 5);
        assert!(matches!(err.kind, ParseErrorKind::UnexpectedChar('@')));
    }

    #[test]
    fn unknown_identifier() {
        let err = parse_expr("abs(x1)", 1, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnknownIdent(ref s) if s == "abs"));
    }

    #[test]
    fn empty_source_rejected() {
        let err = parse_expr("   ", 1, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Empty));
    }

    #[test]
    fn trailing_input_rejected() {
        let err = parse_expr("x1 x1", 1, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::TrailingInput(_)));
        assert_eq!(err.offset, 3);
    }

    #[test]
    fn scientific_notation() {
        let e = parse_expr("1e-3 + 2.5E2", 0, 0).unwrap();
        assert_eq!(e.eval(&[], &[]).unwrap(), 250.001);
    }

    #[test]
    fn zero_index_is_out_of_range() {
        let err = parse_expr("x0", 2, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::IndexOutOfRange { index: 0, .. }));
    }

    #[test]
    fn unbalanced_paren() {
        let err = parse_expr("(x1 + 1", 1, 0).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnexpectedEnd));
    }

    #[test]
    fn mixed_precedence_tree() {
        // 1 + 2*x1^2 parses as 1 + (2*(x1^2))
        let e = parse_expr("1 + 2*x1^2", 1, 0).unwrap();
        assert_eq!(e.eval(&[3.0], &[]).unwrap(), 19.0);
    }
}
