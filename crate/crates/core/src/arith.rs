// SPDX-License-Identifier: MIT OR Apache-2.0

//! Arithmetic statements embedded in reasoning steps (`16 - 3 - 4 = 9`).

use std::ops::Range;

use crate::chain::Operation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn operation(self) -> Option<Operation> {
        match self {
            BinOp::Add => Some(Operation::Add),
            BinOp::Sub => Some(Operation::Sub),
            BinOp::Mul => Some(Operation::Mul),
            BinOp::Div => None,
        }
    }
}

/// Value of an expression and the operator applied last when evaluating it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluated {
    pub value: f64,
    pub root: Option<BinOp>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Op(BinOp),
    Open,
    Close,
}

fn lex(expr: &str) -> Option<Vec<Tok>> {
    let mut out = Vec::new();
    let mut chars = expr.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '$' => {
                chars.next();
            }
            '0'..='9' | '.' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_digit() || d == '.' {
                        s.push(d);
                    } else if d != ',' {
                        break;
                    }
                    chars.next();
                }
                out.push(Tok::Num(s.parse().ok()?));
            }
            '+' => {
                chars.next();
                out.push(Tok::Op(BinOp::Add));
            }
            '-' | '−' => {
                chars.next();
                out.push(Tok::Op(BinOp::Sub));
            }
            '*' | '×' => {
                chars.next();
                out.push(Tok::Op(BinOp::Mul));
            }
            '/' | '÷' => {
                chars.next();
                out.push(Tok::Op(BinOp::Div));
            }
            '(' => {
                chars.next();
                out.push(Tok::Open);
            }
            ')' => {
                chars.next();
                out.push(Tok::Close);
            }
            _ => return None,
        }
    }
    Some(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn expr(&mut self) -> Option<Evaluated> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(op @ (BinOp::Add | BinOp::Sub))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = Evaluated {
                value: if op == BinOp::Add {
                    acc.value + rhs.value
                } else {
                    acc.value - rhs.value
                },
                root: Some(op),
            };
        }
        Some(acc)
    }

    fn term(&mut self) -> Option<Evaluated> {
        let mut acc = self.factor()?;
        while let Some(Tok::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.factor()?;
            acc = Evaluated {
                value: if op == BinOp::Mul {
                    acc.value * rhs.value
                } else {
                    acc.value / rhs.value
                },
                root: Some(op),
            };
        }
        Some(acc)
    }

    fn factor(&mut self) -> Option<Evaluated> {
        match self.peek().cloned()? {
            Tok::Num(v) => {
                self.pos += 1;
                Some(Evaluated { value: v, root: None })
            }
            Tok::Open => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(&Tok::Close) {
                    return None;
                }
                self.pos += 1;
                Some(inner)
            }
            Tok::Op(BinOp::Sub) => {
                self.pos += 1;
                let inner = self.factor()?;
                Some(Evaluated {
                    value: -inner.value,
                    root: inner.root,
                })
            }
            _ => None,
        }
    }
}

/// Evaluate an infix expression with the usual precedence.
pub fn evaluate(expr: &str) -> Option<Evaluated> {
    let mut p = Parser {
        toks: lex(expr)?,
        pos: 0,
    };
    let out = p.expr()?;
    (p.pos == p.toks.len()).then_some(out)
}

/// The `expression = value` site inside a step's text.
#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub expr: String,
    pub expr_span: Range<usize>,
    pub value: f64,
    pub value_text: String,
    pub value_span: Range<usize>,
}

impl Statement {
    pub fn evaluate(&self) -> Option<Evaluated> {
        evaluate(&self.expr)
    }

    pub fn is_consistent(&self) -> bool {
        self.evaluate()
            .is_some_and(|e| (e.value - self.value).abs() <= 1e-6 * self.value.abs().max(1.0))
    }
}

fn is_expr_char(c: char) -> bool {
    c.is_ascii_digit() || " .,+-−*×/÷()$".contains(c)
}

/// Locate the last `expression = value` in a sentence.
pub fn find_statement(text: &str) -> Option<Statement> {
    let eq = text.rfind('=')?;
    let before = &text[..eq];
    let start = before
        .char_indices()
        .rev()
        .take_while(|&(_, c)| is_expr_char(c))
        .last()
        .map(|(i, _)| i)?;
    let raw = &before[start..];
    let trimmed_start = start
        + raw
            .char_indices()
            .find(|&(_, c)| c.is_ascii_digit() || c == '(' || c == '$')
            .map(|(i, _)| i)?;
    let expr = before[trimmed_start..].trim_end().trim_end_matches(',');
    let expr_span = trimmed_start..trimmed_start + expr.len();

    let after = &text[eq + 1..];
    let lead = after
        .char_indices()
        .find(|&(_, c)| c != ' ' && c != '$')
        .map(|(i, _)| i)?;
    let digits: String = after[lead..]
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == ',' || *c == '-')
        .collect();
    let value_text = digits.trim_end_matches(['.', ',']).to_string();
    if value_text.is_empty() || !value_text.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    let value: f64 = value_text.replace(',', "").parse().ok()?;
    let vs = eq + 1 + lead;
    Some(Statement {
        expr: expr.to_string(),
        expr_span,
        value,
        value_span: vs..vs + value_text.len(),
        value_text,
    })
}

/// Canonical number formatting: integers without a fractional part.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_with_precedence_and_root() {
        let e = evaluate("16 - 3 - 4").unwrap();
        assert_eq!(e.value, 9.0);
        assert_eq!(e.root, Some(BinOp::Sub));
        let e = evaluate("2 + 3 × 4").unwrap();
        assert_eq!(e.value, 14.0);
        assert_eq!(e.root, Some(BinOp::Add));
        let e = evaluate("(2 + 3) * 4").unwrap();
        assert_eq!(e.value, 20.0);
        assert_eq!(e.root, Some(BinOp::Mul));
        assert_eq!(evaluate("$1,200 / 4").unwrap().value, 300.0);
        assert!(evaluate("2 +").is_none());
        assert!(evaluate("(2").is_none());
    }

    #[test]
    fn finds_statement_in_sentence() {
        let s = find_statement("Janet sells 16 - 3 - 4 = 9 duck eggs per day.").unwrap();
        assert_eq!(s.expr, "16 - 3 - 4");
        assert_eq!(s.value, 9.0);
        assert!(s.is_consistent());
        let text = "She makes 9 × 2 = $18.";
        let s = find_statement(text).unwrap();
        assert_eq!(s.value_text, "18");
        assert_eq!(&text[s.value_span.clone()], "18");
        assert_eq!(&text[s.expr_span.clone()], "9 × 2");
        assert!(find_statement("No arithmetic here.").is_none());
    }
}
