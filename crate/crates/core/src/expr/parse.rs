//! Recursive-descent parser for the objective grammar.
//!
//! ```text
//! expr     := term (('+'|'-') term)*
//! term     := factor ('*' factor)*
//! factor   := atom ('^' rational)?
//! atom     := number | 'x'i | '(' expr ')' | 'abs(' expr ')'
//!           | 'max(' expr (',' expr)+ ')' | 'min(' expr (',' expr)+ ')'
//! rational := integer | '(' integer '/' integer ')'
//! ```
//!
//! A `^` with a non-integer exponent is only legal directly on an `abs(...)`
//! atom, and every exponent must be at least 1; both rules keep the parsed
//! function locally Lipschitz.

use super::{Exponent, Expr};
use num_rational::Ratio;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("variable x{index} at byte {offset} is out of range for dimension {dim}")]
    VarOutOfRange { offset: usize, index: usize, dim: usize },
    #[error("fractional power at byte {offset} applies to a non-abs atom")]
    FracPowOnNonAbs { offset: usize },
    #[error("exponent at byte {offset} is smaller than 1")]
    ExponentBelowOne { offset: usize },
}

/// Parses `text` as an expression over variables `x1..x{n}`.
pub fn parse(text: &str, n: usize) -> Result<Expr, ParseError> {
    let mut p = Parser { bytes: text.as_bytes(), pos: 0, dim: n };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    dim: usize,
}

impl<'a> Parser<'a> {
    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.peek().map_or(false, |b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), ParseError> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(self.syntax(&format!("expected '{}'", b as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.term()?];
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    terms.push(self.term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    terms.push(negate(self.term()?));
                }
                _ => break,
            }
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expr::Sum(terms) })
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut factors = vec![self.factor()?];
        loop {
            self.skip_ws();
            if self.eat(b'*') {
                factors.push(self.factor()?);
            } else {
                break;
            }
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Expr::Prod(factors) })
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let atom_is_abs_like = matches!(self.lookahead_word(), Some("abs"));
        let atom = self.atom()?;
        self.skip_ws();
        if !self.eat(b'^') {
            return Ok(atom);
        }
        let exp_offset = self.pos;
        let p = self.rational()?;
        if p < Ratio::from_integer(1) {
            return Err(ParseError::ExponentBelowOne { offset: exp_offset });
        }
        if p.is_integer() {
            return Ok(Expr::Pow(Box::new(atom), *p.numer() as u32));
        }
        // Non-integer exponents are only defined on abs atoms.
        match atom {
            Expr::Abs(inner) if atom_is_abs_like => Ok(Expr::FracPow(inner, p)),
            _ => Err(ParseError::FracPowOnNonAbs { offset: exp_offset }),
        }
    }

    fn lookahead_word(&self) -> Option<&'a str> {
        let start = self.pos;
        let mut end = start;
        while self.bytes.get(end).map_or(false, |b| b.is_ascii_alphabetic()) {
            end += 1;
        }
        if end > start {
            std::str::from_utf8(&self.bytes[start..end]).ok()
        } else {
            None
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.skip_ws();
                self.expect(b')')?;
                Ok(e)
            }
            Some(b'x') => self.variable(),
            Some(b) if b.is_ascii_digit() || b == b'.' => self.number(),
            Some(b) if b.is_ascii_alphabetic() => match self.lookahead_word() {
                Some("abs") => {
                    self.pos += 3;
                    self.skip_ws();
                    self.expect(b'(')?;
                    let e = self.expr()?;
                    self.skip_ws();
                    self.expect(b')')?;
                    Ok(Expr::Abs(Box::new(e)))
                }
                Some("max") => self.max_min(true),
                Some("min") => self.max_min(false),
                _ => Err(self.syntax("unknown identifier")),
            },
            _ => Err(self.syntax("expected an atom")),
        }
    }

    fn max_min(&mut self, is_max: bool) -> Result<Expr, ParseError> {
        self.pos += 3;
        self.skip_ws();
        self.expect(b'(')?;
        let mut children = vec![self.expr()?];
        self.skip_ws();
        while self.eat(b',') {
            children.push(self.expr()?);
            self.skip_ws();
        }
        self.expect(b')')?;
        if children.len() < 2 {
            return Err(self.syntax("max/min need at least two arguments"));
        }
        Ok(if is_max { Expr::max_of(children) } else { Expr::min_of(children) })
    }

    fn variable(&mut self) -> Result<Expr, ParseError> {
        let offset = self.pos;
        self.pos += 1; // consume 'x'
        let start = self.pos;
        while self.peek().map_or(false, |b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.syntax("expected a variable index after 'x'"));
        }
        let index: usize = std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.syntax("variable index overflows"))?;
        if index < 1 || index > self.dim {
            return Err(ParseError::VarOutOfRange { offset, index, dim: self.dim });
        }
        Ok(Expr::Var(index - 1))
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.peek().map_or(false, |b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.eat(b'.') {
            while self.peek().map_or(false, |b| b.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.peek().map_or(false, |b| b.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == digits {
                // not an exponent suffix after all
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let value: f64 = text
            .parse()
            .map_err(|_| ParseError::Syntax { offset: start, message: "invalid number".into() })?;
        Ok(Expr::Const(value))
    }

    fn rational(&mut self) -> Result<Exponent, ParseError> {
        self.skip_ws();
        if self.eat(b'(') {
            let num = self.integer()?;
            self.skip_ws();
            self.expect(b'/')?;
            let den = self.integer()?;
            self.skip_ws();
            self.expect(b')')?;
            if den == 0 {
                return Err(self.syntax("zero denominator"));
            }
            Ok(Ratio::new(num, den))
        } else {
            Ok(Ratio::from_integer(self.integer()?))
        }
    }

    fn integer(&mut self) -> Result<i64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().map_or(false, |b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.syntax("expected an integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.syntax("integer overflows"))
    }
}

/// `-t` represented as a product with a leading `-1` factor.
fn negate(t: Expr) -> Expr {
    match t {
        Expr::Prod(mut factors) => {
            let mut all = vec![Expr::Const(-1.0)];
            all.append(&mut factors);
            Expr::Prod(all)
        }
        other => Expr::Prod(vec![Expr::Const(-1.0), other]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_fig1a() {
        let text = "abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)";
        let e = parse(text, 2).unwrap();
        let printed = e.to_string();
        assert_eq!(parse(&printed, 2).unwrap(), e);
        assert_eq!(printed, text);
    }

    #[test]
    fn roundtrip_fig1b() {
        let text = "abs(x1^2-1)^(3/2)+2*abs(x1*x2+1)^(3/2)+abs(x2^2-1)^(3/2)";
        let e = parse(text, 2).unwrap();
        assert_eq!(parse(&e.to_string(), 2).unwrap(), e);
    }

    #[test]
    fn fracpow_on_non_abs_is_rejected() {
        match parse("x1^(1/2)", 1) {
            Err(ParseError::FracPowOnNonAbs { .. }) => {}
            other => panic!("expected FracPowOnNonAbs, got {other:?}"),
        }
    }

    #[test]
    fn exponent_below_one_is_rejected() {
        match parse("abs(x1)^(1/2)", 1) {
            Err(ParseError::ExponentBelowOne { .. }) => {}
            other => panic!("expected ExponentBelowOne, got {other:?}"),
        }
        match parse("x1^0", 1) {
            Err(ParseError::ExponentBelowOne { .. }) => {}
            other => panic!("expected ExponentBelowOne, got {other:?}"),
        }
    }

    #[test]
    fn variable_out_of_range_is_rejected() {
        match parse("x3+1", 2) {
            Err(ParseError::VarOutOfRange { index: 3, dim: 2, .. }) => {}
            other => panic!("expected VarOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_carries_offset() {
        match parse("x1+", 1) {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn integer_power_on_abs_is_a_plain_power() {
        let e = parse("abs(x1)^2", 1).unwrap();
        assert_eq!(e, Expr::Pow(Box::new(Expr::Abs(Box::new(Expr::Var(0)))), 2));
    }

    #[test]
    fn reduced_integer_rational_becomes_pow() {
        let e = parse("abs(x1)^(4/2)", 1).unwrap();
        assert_eq!(e, Expr::Pow(Box::new(Expr::Abs(Box::new(Expr::Var(0)))), 2));
    }

    #[test]
    fn subtraction_roundtrips() {
        let e = parse("x1-2*x2", 2).unwrap();
        assert_eq!(parse(&e.to_string(), 2).unwrap(), e);
        assert_eq!(e.to_string(), "x1-2*x2");
    }

    #[test]
    fn scientific_numbers() {
        assert_eq!(parse("1e-3", 1).unwrap(), Expr::Const(1e-3));
        assert_eq!(parse("2.5e2", 1).unwrap(), Expr::Const(250.0));
    }

    #[test]
    fn whitespace_is_ignored() {
        assert_eq!(
            parse(" max( x1 , 0 ) ", 1).unwrap(),
            parse("max(x1,0)", 1).unwrap()
        );
    }
}
