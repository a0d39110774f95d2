//! Tiny integer expression language for assembler operands.
//!
//! Grammar: sums/products of numbers, labels, `.` (current address) and
//! parenthesised sub-expressions. Unary minus is supported.

use std::collections::BTreeMap;

use crate::AsmError;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(i64),
    Label(String),
    Here,
    Neg(Box<Expr>),
    Bin(Box<Expr>, char, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, labels: &BTreeMap<String, u32>, here: u32) -> Result<i64, AsmError> {
        Ok(match self {
            Expr::Num(n) => *n,
            Expr::Here => here as i64,
            Expr::Label(l) => *labels
                .get(l)
                .ok_or_else(|| AsmError::UnknownLabel(l.clone()))? as i64,
            Expr::Neg(e) => -e.eval(labels, here)?,
            Expr::Bin(a, op, b) => {
                let a = a.eval(labels, here)?;
                let b = b.eval(labels, here)?;
                match op {
                    '+' => a + b,
                    '-' => a - b,
                    '*' => a * b,
                    '/' => {
                        if b == 0 {
                            return Err(AsmError::Syntax("division by zero".into()));
                        }
                        a / b
                    }
                    '|' => a | b,
                    _ => unreachable!(),
                }
            }
        })
    }

    /// Evaluates an expression that must not reference labels.
    pub fn constant(&self) -> Result<i64, AsmError> {
        self.eval(&BTreeMap::new(), 0)
    }

    pub fn parse(src: &str) -> Result<Expr, AsmError> {
        let toks = tokenize(src)?;
        let mut p = Parser { toks, pos: 0 };
        let e = p.sum()?;
        if p.pos != p.toks.len() {
            return Err(AsmError::Syntax(format!("trailing input in expression `{src}`")));
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(i64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>, AsmError> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
            let n = if let Some(h) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
                i64::from_str_radix(h, 16)
            } else if let Some(b) = text.strip_prefix("0b") {
                i64::from_str_radix(b, 2)
            } else {
                text.parse::<i64>()
            }
            .map_err(|_| AsmError::Syntax(format!("bad number `{text}`")))?;
            out.push(Tok::Num(n));
        } else if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$' {
            let start = i;
            i += 1;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.' || chars[i] == '$')
            {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/|()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(AsmError::Syntax(format!("unexpected `{c}` in expression `{src}`")));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn sum(&mut self) -> Result<Expr, AsmError> {
        let mut lhs = self.product()?;
        while let Some(Tok::Op(op @ ('+' | '-' | '|'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, AsmError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, AsmError> {
        match self.peek().cloned() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.sum()?;
                if self.peek() != Some(&Tok::Op(')')) {
                    return Err(AsmError::Syntax("missing `)`".into()));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Expr::Num(n))
            }
            Some(Tok::Ident(id)) => {
                self.pos += 1;
                if id == "." {
                    Ok(Expr::Here)
                } else {
                    Ok(Expr::Label(id))
                }
            }
            other => Err(AsmError::Syntax(format!("unexpected token {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_and_labels() {
        let mut labels = BTreeMap::new();
        labels.insert("a".to_string(), 0x100);
        labels.insert("t".to_string(), 0xf0);
        assert_eq!(Expr::parse("(a - t) / 2").unwrap().eval(&labels, 0).unwrap(), 8);
        assert_eq!(Expr::parse("a+1").unwrap().eval(&labels, 0).unwrap(), 0x101);
        assert_eq!(Expr::parse("-4").unwrap().constant().unwrap(), -4);
        assert_eq!(Expr::parse(". + 4").unwrap().eval(&labels, 8).unwrap(), 12);
    }
}
