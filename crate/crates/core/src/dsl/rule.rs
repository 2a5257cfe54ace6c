//! Stage decision rules: `arith cmp arith` over covariates and regime-index
//! coordinates, e.g. `cd4.0>=psi1` or `psi1*x1+psi2*x2>0`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Ident(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Gt,
    Lt,
    Ge,
    Le,
}

impl CmpOp {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            // exact double equality
            CmpOp::Eq => lhs == rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Le => lhs <= rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Gt => ">",
            CmpOp::Lt => "<",
            CmpOp::Ge => ">=",
            CmpOp::Le => "<=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleExpr {
    pub lhs: Expr,
    pub op: CmpOp,
    pub rhs: Expr,
}

impl Expr {
    /// Visits every identifier in left-to-right order.
    pub fn identifiers<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Const(_) => {}
            Expr::Ident(name) => out.push(name),
            Expr::Neg(inner) => inner.identifiers(out),
            Expr::Binary(_, a, b) => {
                a.identifiers(out);
                b.identifiers(out);
            }
        }
    }

    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64> {
        match self {
            Expr::Const(v) => Ok(*v),
            Expr::Ident(name) => lookup(name).ok_or_else(|| Error::Unbound(name.clone())),
            Expr::Neg(inner) => Ok(-inner.eval(lookup)?),
            Expr::Binary(op, a, b) => {
                let a = a.eval(lookup)?;
                let b_val = b.eval(lookup)?;
                Ok(match op {
                    BinOp::Add => a + b_val,
                    BinOp::Sub => a - b_val,
                    BinOp::Mul => a * b_val,
                    BinOp::Div => {
                        if b_val == 0.0 {
                            return Err(Error::DivisionByZero(b.to_string()));
                        }
                        a / b_val
                    }
                })
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8, right: bool) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Ident(name) => f.write_str(name),
            Expr::Neg(inner) => {
                f.write_str("-")?;
                inner.fmt_prec(f, 3, false)
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                let paren = p < parent || (right && p == parent);
                if paren {
                    f.write_str("(")?;
                }
                a.fmt_prec(f, p, false)?;
                write!(f, "{}", op.symbol())?;
                b.fmt_prec(f, p, true)?;
                if paren {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0, false)
    }
}

impl fmt::Display for RuleExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.lhs, self.op.symbol(), self.rhs)
    }
}

impl RuleExpr {
    pub fn identifiers(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.lhs.identifiers(&mut out);
        self.rhs.identifiers(&mut out);
        out
    }

    /// Evaluates the rule with identifiers resolved through `lookup`.
    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<u8> {
        let l = self.lhs.eval(lookup)?;
        let r = self.rhs.eval(lookup)?;
        Ok(self.op.holds(l, r) as u8)
    }
}

/// Evaluates a rule; regime-index names are looked up before covariates.
pub fn eval_rule(
    rule: &RuleExpr,
    covariates: &std::collections::HashMap<String, f64>,
    psi: &std::collections::HashMap<String, f64>,
) -> Result<u8> {
    rule.eval_with(&|name| psi.get(name).or_else(|| covariates.get(name)).copied())
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(BinOp),
    Cmp(CmpOp),
    LParen,
    RParen,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, message: String| Error::Parse { offset, message };
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        let next = bytes.get(i + 1).map(|&(_, c)| c);
        match c {
            c if c.is_whitespace() => i += 1,
            '+' | '-' | '*' | '/' => {
                let op = match c {
                    '+' => BinOp::Add,
                    '-' => BinOp::Sub,
                    '*' => BinOp::Mul,
                    _ => BinOp::Div,
                };
                out.push((pos, Tok::Op(op)));
                i += 1;
            }
            '(' => {
                out.push((pos, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((pos, Tok::RParen));
                i += 1;
            }
            '=' => {
                if next == Some('=') {
                    out.push((pos, Tok::Cmp(CmpOp::Eq)));
                    i += 2;
                } else {
                    return Err(err(pos, "`=` is not an operator; use `==`".into()));
                }
            }
            '>' | '<' => match next {
                Some('=') => {
                    let op = if c == '>' { CmpOp::Ge } else { CmpOp::Le };
                    out.push((pos, Tok::Cmp(op)));
                    i += 2;
                }
                Some('>') | Some('<') => {
                    return Err(err(pos, format!("illegal operator `{c}{}`", next.unwrap())));
                }
                _ => {
                    let op = if c == '>' { CmpOp::Gt } else { CmpOp::Lt };
                    out.push((pos, Tok::Cmp(op)));
                    i += 1;
                }
            },
            c if c.is_ascii_digit() || (c == '.' && next.is_some_and(|n| n.is_ascii_digit())) => {
                let start = i;
                while i < bytes.len() && (bytes[i].1.is_ascii_digit() || bytes[i].1 == '.') {
                    i += 1;
                }
                // optional exponent
                if i < bytes.len() && matches!(bytes[i].1, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j].1, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].1.is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].1.is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let end = bytes.get(i).map_or(text.len(), |&(p, _)| p);
                let lit = &text[pos..end];
                if i < bytes.len() && is_ident_char(bytes[i].1) {
                    return Err(err(
                        bytes[i].0,
                        format!("unexpected character after number `{lit}`"),
                    ));
                }
                let v: f64 = lit
                    .parse()
                    .map_err(|_| err(bytes[start].0, format!("bad number `{lit}`")))?;
                out.push((pos, Tok::Num(v)));
            }
            c if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                while i < bytes.len() && is_ident_char(bytes[i].1) {
                    i += 1;
                }
                let end = bytes.get(i).map_or(text.len(), |&(p, _)| p);
                out.push((pos, Tok::Ident(text[pos..end].to_string())));
            }
            other => return Err(err(pos, format!("illegal character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn arith(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ (BinOp::Add | BinOp::Sub))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(Tok::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                Ok(Expr::Ident(name))
            }
            Some(Tok::Op(BinOp::Sub)) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(Tok::LParen) => {
                let open = self.offset();
                self.pos += 1;
                let inner = self.arith()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(Error::Parse {
                        offset: open,
                        message: "unbalanced parenthesis".into(),
                    }),
                }
            }
            Some(Tok::RParen) => self.fail("unbalanced parenthesis"),
            Some(_) => self.fail("expected a number, identifier or `(`"),
            None => self.fail("unexpected end of expression"),
        }
    }
}

pub fn parse_rule(text: &str) -> Result<RuleExpr> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty rule".into(),
        });
    }
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let lhs = p.arith()?;
    let op = match p.peek() {
        Some(Tok::Cmp(op)) => *op,
        Some(Tok::RParen) => return p.fail("unbalanced parenthesis"),
        Some(_) => return p.fail("unexpected token"),
        None => return p.fail("rule has no comparison operator"),
    };
    p.pos += 1;
    let rhs = p.arith()?;
    match p.peek() {
        None => Ok(RuleExpr { lhs, op, rhs }),
        Some(Tok::Cmp(_)) => p.fail("a rule may contain only one comparison operator"),
        Some(Tok::RParen) => p.fail("unbalanced parenthesis"),
        Some(_) => p.fail("unexpected token"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn map(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_threshold_rule() {
        let r = parse_rule("cd4.0>=psi1").unwrap();
        assert_eq!(r.lhs, Expr::Ident("cd4.0".into()));
        assert_eq!(r.op, CmpOp::Ge);
        assert_eq!(r.rhs, Expr::Ident("psi1".into()));
    }

    #[test]
    fn parses_linear_index_rule() {
        let r = parse_rule("psi1*x1+psi2*x2>0").unwrap();
        let prod = |a: &str, b: &str| {
            Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Ident(a.into())),
                Box::new(Expr::Ident(b.into())),
            )
        };
        assert_eq!(
            r.lhs,
            Expr::Binary(
                BinOp::Add,
                Box::new(prod("psi1", "x1")),
                Box::new(prod("psi2", "x2"))
            )
        );
        assert_eq!(r.op, CmpOp::Gt);
        assert_eq!(r.rhs, Expr::Const(0.0));
    }

    #[test]
    fn double_greater_is_error_at_offset_two() {
        match parse_rule("x >> 2") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rules() {
        assert!(parse_rule("x + 1").is_err());
        assert!(parse_rule("x > 1 > 0").is_err());
        assert!(parse_rule("(x > 1").is_err());
        assert!(parse_rule("x > (1").is_err());
        assert!(parse_rule("x) > 1").is_err());
        assert!(parse_rule("x $ 1 > 0").is_err());
        assert!(parse_rule("x = 1").is_err());
        assert!(parse_rule("").is_err());
    }

    #[test]
    fn threshold_evaluation() {
        let r = parse_rule("cd4.0>=psi1").unwrap();
        let psi = map(&[("psi1", 335.0)]);
        assert_eq!(eval_rule(&r, &map(&[("cd4.0", 350.0)]), &psi).unwrap(), 1);
        assert_eq!(eval_rule(&r, &map(&[("cd4.0", 335.0)]), &psi).unwrap(), 1);
        assert_eq!(eval_rule(&r, &map(&[("cd4.0", 200.0)]), &psi).unwrap(), 0);
    }

    #[test]
    fn unbound_and_division_errors() {
        let r = parse_rule("x/y>1").unwrap();
        let err = eval_rule(&r, &map(&[("x", 1.0)]), &HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::Unbound(n) if n == "y"));
        let err = eval_rule(&r, &map(&[("x", 1.0), ("y", 0.0)]), &HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::DivisionByZero(_)));
    }

    #[test]
    fn equality_is_exact() {
        let r = parse_rule("x==0.3").unwrap();
        assert_eq!(
            eval_rule(&r, &map(&[("x", 0.1 + 0.2)]), &HashMap::new()).unwrap(),
            0
        );
        assert_eq!(
            eval_rule(&r, &map(&[("x", 0.3)]), &HashMap::new()).unwrap(),
            1
        );
    }

    #[test]
    fn precedence_and_unary_minus() {
        let r = parse_rule("-x+2*3-(1-4)/3 == 6").unwrap();
        assert_eq!(
            eval_rule(&r, &map(&[("x", 1.0)]), &HashMap::new()).unwrap(),
            1
        );
        assert_eq!(r.to_string(), "-x+2*3-(1-4)/3==6");
    }
}
