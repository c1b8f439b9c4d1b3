//! Text grammar for reward-assignment expressions.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' number | '-' factor | atom
//! atom   := number | var | call | '(' expr ')'
//! var    := 'x' | 'l' | 'logit' | 'logits'
//! call   := unary '(' expr ')'
//!         | binary '(' expr ',' expr ')'
//!         | 'branch' '(' ['-'] number ',' expr ',' expr ')'
//! unary  := neg | exp | log | abs | tanh | sigmoid | softplus | gelu
//! binary := add | sub | mul | div | min | max
//! ```
//!
//! Whitespace is ignored between tokens. A minus sign directly in front of a
//! numeric literal folds into the constant, so `-0.5` is `Const(-0.5)` while
//! `neg(0.5)` keeps the explicit negation node. `branch(t, a, b)` evaluates
//! `a` when the logit is at most `t` and `b` otherwise.

use super::expr::{BinaryOp, LimitError, RaExpr, UnaryOp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error(transparent)]
    Limit(#[from] LimitError),
}

const MAX_NESTING: usize = 256;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(usize, Tok)>, ParseError> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        loop {
            let (off, tok) = lx.next()?;
            let end = tok == Tok::End;
            out.push((off, tok));
            if end {
                return Ok(out);
            }
        }
    }

    fn next(&mut self) -> Result<(usize, Tok), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((start, Tok::End));
        };
        let simple = match c {
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(t) = simple {
            self.pos += 1;
            return Ok((start, t));
        }
        if c.is_ascii_digit() || c == b'.' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                end += 1;
            }
            if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                let mut k = end + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let text = &self.src[start..end];
            let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("invalid number literal `{text}`"),
            })?;
            self.pos = end;
            return Ok((start, Tok::Num(v)));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            return Ok((start, Tok::Ident(self.src[start..end].to_string())));
        }
        let ch = self.src[start..].chars().next().unwrap_or('?');
        Err(ParseError::Syntax {
            offset: start,
            message: format!("unexpected character `{ch}`"),
        })
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    nesting: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn offset(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.nesting += 1;
        if self.nesting > MAX_NESTING {
            return self.err("expression nested too deeply");
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<RaExpr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.term()?;
            lhs = RaExpr::binary(op, lhs, rhs);
        }
        self.nesting -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<RaExpr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = RaExpr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<RaExpr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            if let Tok::Num(v) = *self.peek() {
                self.bump();
                return Ok(RaExpr::Const(-v));
            }
            self.enter()?;
            let inner = self.factor()?;
            self.nesting -= 1;
            return Ok(RaExpr::unary(UnaryOp::Neg, inner));
        }
        self.atom()
    }

    fn signed_number(&mut self) -> Result<f64, ParseError> {
        let neg = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match *self.peek() {
            Tok::Num(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => self.err("expected a numeric threshold"),
        }
    }

    fn atom(&mut self) -> Result<RaExpr, ParseError> {
        let start = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(RaExpr::Const(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if matches!(name.as_str(), "x" | "l" | "logit" | "logits") {
                    return Ok(RaExpr::Var);
                }
                if *self.peek() != Tok::LParen {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("unknown identifier `{name}`"),
                    });
                }
                self.bump();
                let node = if name == "branch" {
                    let t = self.signed_number()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let a = self.expr()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let b = self.expr()?;
                    RaExpr::branch(t, a, b)
                } else if let Some(op) = unary_alias(&name) {
                    RaExpr::unary(op, self.expr()?)
                } else if let Some(op) = BinaryOp::from_name(&name) {
                    let a = self.expr()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let b = self.expr()?;
                    RaExpr::binary(op, a, b)
                } else {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("unknown function `{name}`"),
                    });
                };
                self.expect(Tok::RParen, "`)`")?;
                Ok(node)
            }
            Tok::End => Err(ParseError::Syntax {
                offset: start,
                message: "unexpected end of input".into(),
            }),
            other => Err(ParseError::Syntax {
                offset: start,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }
}

fn unary_alias(name: &str) -> Option<UnaryOp> {
    match name {
        "ln" => Some(UnaryOp::Log),
        "sigma" => Some(UnaryOp::Sigmoid),
        other => UnaryOp::from_name(other),
    }
}

/// Parses DSL text into an expression tree and enforces the size limits.
pub fn parse(text: &str) -> Result<RaExpr, ParseError> {
    let toks = Lexer::tokens(text)?;
    let mut p = Parser {
        toks,
        at: 0,
        nesting: 0,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.err("trailing input");
    }
    e.check_limits()?;
    Ok(e)
}
