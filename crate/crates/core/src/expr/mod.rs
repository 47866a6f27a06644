//! Expression trees for locally Lipschitz tame objectives.
//!
//! The grammar is deliberately small: polynomials, `abs`, fractional powers
//! `abs(u)^(p)` with rational `p >= 1`, and n-ary `max`/`min`. Every
//! expressible function is locally Lipschitz, and every kink-introducing node
//! (`abs`, `max`, `min`) is visible in the tree, which is what the
//! subdifferential machinery in [`crate::subdiff`] relies on.

mod parse;

pub use parse::{parse, ParseError};

use num_rational::Ratio;
use std::fmt;

/// Rational exponent of a fractional power node, stored reduced.
pub type Exponent = Ratio<i64>;

/// Expression tree over variables `x1..xn`.
///
/// `FracPow(u, p)` denotes `|u|^p` with non-integer rational `p > 1`; a plain
/// kink `|u|` is `Abs(u)`. `Max`/`Min` children are kept in a canonical order
/// (sorted by printed form) so that tie-breaking downstream is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Variable by 0-based index; prints as `x{i+1}`.
    Var(usize),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    /// Integer power, exponent >= 1.
    Pow(Box<Expr>, u32),
    Abs(Box<Expr>),
    /// `|inner|^p` with reduced non-integer rational `p > 1`.
    FracPow(Box<Expr>, Exponent),
    Max(Vec<Expr>),
    Min(Vec<Expr>),
}

/// Smoothness class reported by [`Expr::smoothness`].
///
/// The test is structural and conservative: a function that is continuously
/// differentiable only by cancellation is still reported as
/// `LocallyLipschitzOnly`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    C1,
    LocallyLipschitzOnly,
}

impl Expr {
    /// Builds an n-ary max with canonical child order.
    pub fn max_of(mut children: Vec<Expr>) -> Expr {
        children.sort_by_cached_key(|c| c.to_string());
        Expr::Max(children)
    }

    /// Builds an n-ary min with canonical child order.
    pub fn min_of(mut children: Vec<Expr>) -> Expr {
        children.sort_by_cached_key(|c| c.to_string());
        Expr::Min(children)
    }

    /// Exact recursive evaluation at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Sum(terms) => terms.iter().map(|t| t.eval(x)).sum(),
            Expr::Prod(factors) => factors.iter().map(|f| f.eval(x)).product(),
            Expr::Pow(base, k) => base.eval(x).powi(*k as i32),
            Expr::Abs(inner) => inner.eval(x).abs(),
            Expr::FracPow(inner, p) => {
                let v = inner.eval(x).abs();
                v.powf(ratio_to_f64(*p))
            }
            Expr::Max(children) => children
                .iter()
                .map(|c| c.eval(x))
                .fold(f64::NEG_INFINITY, f64::max),
            Expr::Min(children) => children
                .iter()
                .map(|c| c.eval(x))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Structural smoothness class. `FracPow` is continuously differentiable
    /// in its own kink (`p > 1`), so only its inner expression matters; bare
    /// `abs`/`max`/`min` force `LocallyLipschitzOnly`.
    pub fn smoothness(&self) -> Smoothness {
        match self {
            Expr::Const(_) | Expr::Var(_) => Smoothness::C1,
            Expr::Sum(cs) | Expr::Prod(cs) => smoothness_all(cs),
            Expr::Pow(base, _) => base.smoothness(),
            Expr::Abs(_) | Expr::Max(_) | Expr::Min(_) => Smoothness::LocallyLipschitzOnly,
            Expr::FracPow(inner, _) => inner.smoothness(),
        }
    }

    /// Largest variable index used, plus one (0 for constant expressions).
    pub fn min_dim(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Sum(cs) | Expr::Prod(cs) | Expr::Max(cs) | Expr::Min(cs) => {
                cs.iter().map(|c| c.min_dim()).max().unwrap_or(0)
            }
            Expr::Pow(b, _) => b.min_dim(),
            Expr::Abs(b) | Expr::FracPow(b, _) => b.min_dim(),
        }
    }
}

fn smoothness_all(children: &[Expr]) -> Smoothness {
    if children
        .iter()
        .all(|c| c.smoothness() == Smoothness::C1)
    {
        Smoothness::C1
    } else {
        Smoothness::LocallyLipschitzOnly
    }
}

pub(crate) fn ratio_to_f64(p: Exponent) -> f64 {
    *p.numer() as f64 / *p.denom() as f64
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Sum(terms) => {
                for (idx, t) in terms.iter().enumerate() {
                    // A term of the form (-1) * rest renders as a subtraction.
                    if idx > 0 {
                        if let Some(rest) = negated_term(t) {
                            write!(f, "-")?;
                            rest.fmt_as_term(f)?;
                            continue;
                        }
                        write!(f, "+")?;
                    }
                    t.fmt_as_term(f)?;
                }
                Ok(())
            }
            Expr::Prod(_) => self.fmt_as_term(f),
            Expr::Pow(base, k) => {
                base.fmt_as_atom(f)?;
                write!(f, "^{k}")
            }
            Expr::Abs(inner) => write!(f, "abs({inner})"),
            Expr::FracPow(inner, p) => {
                write!(f, "abs({inner})^({}/{})", p.numer(), p.denom())
            }
            Expr::Max(children) => fmt_call(f, "max", children),
            Expr::Min(children) => fmt_call(f, "min", children),
        }
    }
}

impl Expr {
    fn fmt_as_term(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Prod(factors) => {
                for (idx, factor) in factors.iter().enumerate() {
                    if idx > 0 {
                        write!(f, "*")?;
                    }
                    factor.fmt_as_atom(f)?;
                }
                Ok(())
            }
            other => other.fmt_as_atom(f),
        }
    }

    fn fmt_as_atom(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Sum(_) | Expr::Prod(_) => write!(f, "({self})"),
            other => write!(f, "{other}"),
        }
    }
}

/// If `t` is a product whose leading factor is exactly `-1`, returns the
/// product of the remaining factors.
fn negated_term(t: &Expr) -> Option<Expr> {
    if let Expr::Prod(factors) = t {
        if factors.first() == Some(&Expr::Const(-1.0)) {
            return Some(if factors.len() == 2 {
                factors[1].clone()
            } else {
                Expr::Prod(factors[1..].to_vec())
            });
        }
    }
    None
}

fn fmt_call(f: &mut fmt::Formatter<'_>, name: &str, children: &[Expr]) -> fmt::Result {
    write!(f, "{name}(")?;
    for (idx, c) in children.iter().enumerate() {
        if idx > 0 {
            write!(f, ",")?;
        }
        write!(f, "{c}")?;
    }
    write!(f, ")")
}

/// A point of `R^n` with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self, NonFinitePoint> {
        if crate::vecops::all_finite(&coords) {
            Ok(Point(coords))
        } else {
            Err(NonFinitePoint)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, thiserror::Error)]
#[error("point has a non-finite coordinate")]
pub struct NonFinitePoint;

/// Composite objective `f = (1/N) * sum f_i` (or the plain sum when the
/// averaging flag is off), with per-component access for reshuffling methods.
#[derive(Debug, Clone, PartialEq)]
pub struct SumFunction {
    components: Vec<Expr>,
    dim: usize,
    averaged: bool,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum SumFunctionError {
    #[error("a sum function needs at least one component")]
    Empty,
    #[error("component {index} uses variable x{var} beyond dimension {dim}")]
    DimensionMismatch { index: usize, var: usize, dim: usize },
}

impl SumFunction {
    pub fn new(
        components: Vec<Expr>,
        dim: usize,
        averaged: bool,
    ) -> Result<Self, SumFunctionError> {
        if components.is_empty() {
            return Err(SumFunctionError::Empty);
        }
        for (index, c) in components.iter().enumerate() {
            let need = c.min_dim();
            if need > dim {
                return Err(SumFunctionError::DimensionMismatch { index, var: need, dim });
            }
        }
        Ok(SumFunction { components, dim, averaged })
    }

    /// Wraps a single expression as an `N = 1` objective.
    pub fn single(expr: Expr, dim: usize) -> Result<Self, SumFunctionError> {
        SumFunction::new(vec![expr], dim, false)
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Expr {
        &self.components[i]
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn averaged(&self) -> bool {
        self.averaged
    }

    /// The factor applied to the component sum: `1/N` when averaged, else 1.
    pub fn scale(&self) -> f64 {
        if self.averaged {
            1.0 / self.components.len() as f64
        } else {
            1.0
        }
    }

    /// Value of the composite objective at `x`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let s: f64 = self.components.iter().map(|c| c.eval(x)).sum();
        s * self.scale()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1a() -> Expr {
        parse("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2).unwrap()
    }

    fn fig1b() -> Expr {
        parse(
            "abs(x1^2-1)^(3/2)+2*abs(x1*x2+1)^(3/2)+abs(x2^2-1)^(3/2)",
            2,
        )
        .unwrap()
    }

    #[test]
    fn fig1a_has_three_top_level_summands() {
        match fig1a() {
            Expr::Sum(terms) => assert_eq!(terms.len(), 3),
            other => panic!("expected sum, got {other:?}"),
        }
    }

    #[test]
    fn fig1b_has_three_fracpow_nodes() {
        let mut count = 0;
        fn walk(e: &Expr, count: &mut usize) {
            if let Expr::FracPow(..) = e {
                *count += 1;
            }
            match e {
                Expr::Sum(cs) | Expr::Prod(cs) | Expr::Max(cs) | Expr::Min(cs) => {
                    cs.iter().for_each(|c| walk(c, count))
                }
                Expr::Pow(b, _) | Expr::Abs(b) | Expr::FracPow(b, _) => walk(b, count),
                _ => {}
            }
        }
        walk(&fig1b(), &mut count);
        assert_eq!(count, 3);
    }

    #[test]
    fn eval_fig1a_at_known_points() {
        let f = fig1a();
        assert_eq!(f.eval(&[1.0, -1.0]), 0.0);
        assert_eq!(f.eval(&[0.0, 0.0]), 4.0);
    }

    #[test]
    fn eval_fig1b_at_minimum() {
        assert_eq!(fig1b().eval(&[1.0, -1.0]), 0.0);
    }

    #[test]
    fn smoothness_classification() {
        assert_eq!(fig1b().smoothness(), Smoothness::C1);
        assert_eq!(fig1a().smoothness(), Smoothness::LocallyLipschitzOnly);
        assert_eq!(
            parse("x1^2+x2^2", 2).unwrap().smoothness(),
            Smoothness::C1
        );
        // A kink inside a fractional power stays a kink.
        assert_eq!(
            parse("abs(abs(x1)-1)^(3/2)", 1).unwrap().smoothness(),
            Smoothness::LocallyLipschitzOnly
        );
    }

    #[test]
    fn sum_function_value_is_scaled() {
        let f = SumFunction::new(
            vec![parse("x1", 1).unwrap(), parse("x1^2", 1).unwrap()],
            1,
            true,
        )
        .unwrap();
        assert_eq!(f.value(&[2.0]), (2.0 + 4.0) / 2.0);
    }

    #[test]
    fn max_children_are_canonically_ordered() {
        let a = parse("max(x2,x1)", 2).unwrap();
        let b = parse("max(x1,x2)", 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_rejects_non_finite() {
        assert!(Point::new(vec![1.0, f64::NAN]).is_err());
        assert!(Point::new(vec![1.0, 2.0]).is_ok());
    }
}
