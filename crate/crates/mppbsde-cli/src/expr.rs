//! Arithmetic expressions over terminal counts.
//!
//! Scenario files describe the terminal payoff either as a table or as a
//! small expression over the count variables `n1..nK` and `ntot`, with
//! `+ - * /`, parentheses, and the functions `min`, `max`, `abs`, `exp`,
//! `ind_ge(a, b)` (indicator of `a ≥ b`). No general code execution: the
//! grammar is closed and every identifier is resolved at parse time.

use mpp_bsde::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Count variable: `None` is `ntot`, `Some(e)` is mark `e` (0-based).
    Var(Option<usize>),
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Func {
    Min,
    Max,
    Abs,
    Exp,
    IndGe,
}

impl Func {
    fn arity(self) -> usize {
        match self {
            Func::Abs | Func::Exp => 1,
            Func::Min | Func::Max | Func::IndGe => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::IndGe => "ind_ge",
        }
    }
}

impl Expr {
    pub fn eval(&self, counts: &[u32]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(None) => counts.iter().sum::<u32>() as f64,
            Expr::Var(Some(e)) => counts[*e] as f64,
            Expr::Neg(a) => -a.eval(counts),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(counts), b.eval(counts));
                match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    Op::Div => x / y,
                }
            }
            Expr::Call(f, args) => match f {
                Func::Min => args[0].eval(counts).min(args[1].eval(counts)),
                Func::Max => args[0].eval(counts).max(args[1].eval(counts)),
                Func::Abs => args[0].eval(counts).abs(),
                Func::Exp => args[0].eval(counts).exp(),
                Func::IndGe => {
                    if args[0].eval(counts) >= args[1].eval(counts) {
                        1.0
                    } else {
                        0.0
                    }
                }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, '0'..='9' | '.' | 'e' | 'E')
                {
                    // allow exponent signs directly after e/E
                    if matches!(bytes[i] as char, 'e' | 'E')
                        && i + 1 < bytes.len()
                        && matches!(bytes[i + 1] as char, '+' | '-')
                    {
                        i += 1;
                    }
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| {
                    Error::Validation(format!("terminal expression: bad number `{text}`"))
                })?;
                out.push(Token::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push(Token::Ident(src[start..i].to_string()));
            }
            other => {
                return Err(Error::Validation(format!(
                    "terminal expression: unexpected character `{other}` at byte {i}"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    k: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Token, what: &str) -> Result<()> {
        match self.bump() {
            Some(ref t) if t == want => Ok(()),
            got => Err(Error::Validation(format!(
                "terminal expression: expected {what}, got {got:?}"
            ))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => Op::Add,
                Some(Token::Minus) => Op::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => Op::Mul,
                Some(Token::Slash) => Op::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.bump() {
            Some(Token::Num(v)) => Ok(Expr::Num(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(&Token::RParen, "`)`")?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                if matches!(self.peek(), Some(Token::LParen)) {
                    self.pos += 1;
                    let func = match name.as_str() {
                        "min" => Func::Min,
                        "max" => Func::Max,
                        "abs" => Func::Abs,
                        "exp" => Func::Exp,
                        "ind_ge" => Func::IndGe,
                        other => {
                            return Err(Error::Validation(format!(
                                "terminal expression: unknown function `{other}` \
                                 (known: min, max, abs, exp, ind_ge)"
                            )))
                        }
                    };
                    let mut args = vec![self.expr()?];
                    while matches!(self.peek(), Some(Token::Comma)) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(&Token::RParen, "`)`")?;
                    if args.len() != func.arity() {
                        return Err(Error::Validation(format!(
                            "terminal expression: `{}` takes {} argument(s), got {}",
                            func.name(),
                            func.arity(),
                            args.len()
                        )));
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    self.variable(&name)
                }
            }
            got => Err(Error::Validation(format!(
                "terminal expression: expected a value, got {got:?}"
            ))),
        }
    }

    fn variable(&self, name: &str) -> Result<Expr> {
        if name == "ntot" {
            return Ok(Expr::Var(None));
        }
        if let Some(idx) = name.strip_prefix('n').and_then(|s| s.parse::<usize>().ok()) {
            if idx >= 1 && idx <= self.k {
                return Ok(Expr::Var(Some(idx - 1)));
            }
            return Err(Error::Validation(format!(
                "terminal expression: `{name}` is out of range for {} mark(s)",
                self.k
            )));
        }
        Err(Error::Validation(format!(
            "terminal expression: unknown identifier `{name}` (known: ntot, n1..n{})",
            self.k
        )))
    }
}

/// Parse an expression over `k` marks; every identifier is validated here.
pub fn parse(src: &str, k: usize) -> Result<Expr> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks: &toks, pos: 0, k };
    let e = p.expr()?;
    if p.pos != toks.len() {
        return Err(Error::Validation(format!(
            "terminal expression: trailing tokens after position {}",
            p.pos
        )));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates() {
        let e = parse("ind_ge(ntot, 1)", 2).unwrap();
        assert_eq!(e.eval(&[0, 0]), 0.0);
        assert_eq!(e.eval(&[1, 0]), 1.0);
        assert_eq!(e.eval(&[0, 3]), 1.0);

        let e = parse("min(n1, 2) * 0.5 + exp(-n2)", 2).unwrap();
        assert_eq!(e.eval(&[3, 0]), 2.0 * 0.5 + 1.0);
        let v = e.eval(&[1, 1]);
        assert!((v - (0.5 + (-1.0f64).exp())).abs() < 1e-15);

        let e = parse("abs(n1 - 2e0)", 1).unwrap();
        assert_eq!(e.eval(&[0]), 2.0);
        assert_eq!(e.eval(&[5]), 3.0);

        // precedence and unary minus
        let e = parse("-n1 + 2 * 3", 1).unwrap();
        assert_eq!(e.eval(&[1]), 5.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("n3", 2).is_err());
        assert!(parse("foo(1)", 1).is_err());
        assert!(parse("bar", 1).is_err());
        assert!(parse("min(1)", 1).is_err());
        assert!(parse("1 +", 1).is_err());
        assert!(parse("(1", 1).is_err());
        assert!(parse("1 2", 1).is_err());
        assert!(parse("n1 $", 1).is_err());
    }
}
