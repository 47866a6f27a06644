//! Clarke subdifferential selections and explicit set models.
//!
//! Three views of `∂f(x)` are provided, in increasing order of effort:
//!
//! * [`clarke_select`] returns one measurable element under deterministic
//!   per-node rules (the inclusion steps of the iterative methods only need
//!   some element).
//! * [`clarke_model`] returns an explicit convex model. Away from kinks it
//!   degenerates to the gradient; at additive `abs` kinks it is a box; when
//!   `max`/`min` branches tie it is the convex hull of the gradients of the
//!   essentially active smooth pieces, found by probing directions around the
//!   point. The model is an outer estimate in general and exact for
//!   subdifferentially regular structures (sums of weighted `abs` of smooth
//!   terms, `max` of smooth terms).
//! * [`joint_model`] / [`component_sum_model`] expose the distinction between
//!   the subdifferential of a composite objective treated as one function and
//!   the Minkowski sum of per-component subdifferentials. The two differ on
//!   non-regular sums, which is exactly what makes reshuffling methods able
//!   to stall at non-critical points.

mod model;

pub use model::{min_norm_distance, min_norm_point, Generator, ModelError, SubgradientModel};

use crate::expr::{ratio_to_f64, Expr, SumFunction};
use crate::vecops::{axpy, norm, scaled};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeSet, HashMap};

/// Value of an `abs` selection exactly at a kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsRule {
    /// Coefficient 0, the min-norm element of `[-1, 1]`.
    #[default]
    Zero,
    /// Slope from the left (`-1`).
    Left,
    /// Slope from the right (`+1`).
    Right,
}

/// Tie-breaking for `max`/`min` nodes whose extreme is attained by several
/// children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// The first extreme child in canonical order.
    #[default]
    FirstChild,
    /// The average of the extreme children's selections.
    MeanOfArgmax,
    /// The min-norm point of the convex hull of the extreme children's
    /// selections (the zero-biased choice: it returns 0 whenever 0 is an
    /// admissible subgradient of the node).
    MinNorm,
}

/// Deterministic resolution of the subdifferential inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectionRule {
    pub abs_at_zero: AbsRule,
    pub tie: TieRule,
}

impl SelectionRule {
    pub fn zero_biased() -> Self {
        SelectionRule { abs_at_zero: AbsRule::Zero, tie: TieRule::MinNorm }
    }

    pub fn mean() -> Self {
        SelectionRule { abs_at_zero: AbsRule::Zero, tie: TieRule::MeanOfArgmax }
    }
}

/// One element of the Clarke subdifferential of `f` at `x` under `rule`.
/// Where `f` is differentiable this is the gradient.
pub fn clarke_select(f: &Expr, x: &[f64], rule: &SelectionRule) -> Vec<f64> {
    select_impl(f, x, rule, 0.0).1
}

/// Selection for a composite objective: the scaled sum of component
/// selections (which coincides with the per-node selection on the summed
/// expression tree).
pub fn select_sum(f: &SumFunction, x: &[f64], rule: &SelectionRule) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for c in f.components() {
        let s = clarke_select(c, x, rule);
        axpy(1.0, &s, &mut g);
    }
    scaled(f.scale(), &g)
}

fn select_impl(e: &Expr, x: &[f64], rule: &SelectionRule, tol: f64) -> (f64, Vec<f64>) {
    let n = x.len();
    match e {
        Expr::Const(c) => (*c, vec![0.0; n]),
        Expr::Var(i) => {
            let mut g = vec![0.0; n];
            g[*i] = 1.0;
            (x[*i], g)
        }
        Expr::Sum(terms) => {
            let mut v = 0.0;
            let mut g = vec![0.0; n];
            for t in terms {
                let (tv, tg) = select_impl(t, x, rule, tol);
                v += tv;
                axpy(1.0, &tg, &mut g);
            }
            (v, g)
        }
        Expr::Prod(factors) => {
            let parts: Vec<(f64, Vec<f64>)> =
                factors.iter().map(|f| select_impl(f, x, rule, tol)).collect();
            product_rule(&parts, n)
        }
        Expr::Pow(base, k) => {
            let (v, g) = select_impl(base, x, rule, tol);
            let kk = *k as i32;
            (v.powi(kk), scaled(kk as f64 * v.powi(kk - 1), &g))
        }
        Expr::Abs(inner) => {
            let (v, g) = select_impl(inner, x, rule, tol);
            if v.abs() <= tol {
                let coef = match rule.abs_at_zero {
                    AbsRule::Zero => 0.0,
                    AbsRule::Left => -1.0,
                    AbsRule::Right => 1.0,
                };
                (v.abs(), scaled(coef, &g))
            } else {
                (v.abs(), scaled(v.signum(), &g))
            }
        }
        Expr::FracPow(inner, p) => {
            let (v, g) = select_impl(inner, x, rule, tol);
            let pf = ratio_to_f64(*p);
            let a = v.abs();
            let coef = if v == 0.0 { 0.0 } else { pf * a.powf(pf - 1.0) * v.signum() };
            (a.powf(pf), scaled(coef, &g))
        }
        Expr::Max(children) => extreme_select(children, x, rule, tol, true),
        Expr::Min(children) => extreme_select(children, x, rule, tol, false),
    }
}

fn product_rule(parts: &[(f64, Vec<f64>)], n: usize) -> (f64, Vec<f64>) {
    let value: f64 = parts.iter().map(|(v, _)| v).product();
    let mut g = vec![0.0; n];
    for j in 0..parts.len() {
        let mut coef = 1.0;
        for (l, (v, _)) in parts.iter().enumerate() {
            if l != j {
                coef *= v;
            }
        }
        axpy(coef, &parts[j].1, &mut g);
    }
    (value, g)
}

fn extreme_select(
    children: &[Expr],
    x: &[f64],
    rule: &SelectionRule,
    tol: f64,
    is_max: bool,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> =
        children.iter().map(|c| select_impl(c, x, rule, tol)).collect();
    let m = parts
        .iter()
        .map(|(v, _)| *v)
        .fold(if is_max { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
            if is_max {
                a.max(b)
            } else {
                a.min(b)
            }
        });
    let tied: Vec<usize> = (0..parts.len())
        .filter(|&i| (parts[i].0 - m).abs() <= tol)
        .collect();
    if tied.len() == 1 {
        return (m, parts[tied[0]].1.clone());
    }
    let g = match rule.tie {
        TieRule::FirstChild => parts[tied[0]].1.clone(),
        TieRule::MeanOfArgmax => {
            let mut g = vec![0.0; x.len()];
            for &i in &tied {
                axpy(1.0, &parts[i].1, &mut g);
            }
            scaled(1.0 / tied.len() as f64, &g)
        }
        TieRule::MinNorm => {
            let pts: Vec<Vec<f64>> = tied.iter().map(|&i| parts[i].1.clone()).collect();
            match model::wolfe_min_norm(&pts) {
                Ok((w, _)) => w,
                Err(_) => parts[tied[0]].1.clone(),
            }
        }
    };
    (m, g)
}

/// One-sided directional derivative `f'(x; d) = lim_{t↓0} (f(x+td)-f(x))/t`.
///
/// Exact for the supported grammar: `abs` contributes `|u'|` at a kink,
/// `max`/`min` take the extreme of the tied children's rates, and fractional
/// powers with `p > 1` are flat at their kink.
pub fn directional_derivative(f: &Expr, x: &[f64], d: &[f64]) -> f64 {
    dir_impl(f, x, d).1
}

fn dir_impl(e: &Expr, x: &[f64], d: &[f64]) -> (f64, f64) {
    match e {
        Expr::Const(c) => (*c, 0.0),
        Expr::Var(i) => (x[*i], d[*i]),
        Expr::Sum(terms) => {
            let mut v = 0.0;
            let mut dv = 0.0;
            for t in terms {
                let (tv, tdv) = dir_impl(t, x, d);
                v += tv;
                dv += tdv;
            }
            (v, dv)
        }
        Expr::Prod(factors) => {
            let parts: Vec<(f64, f64)> = factors.iter().map(|f| dir_impl(f, x, d)).collect();
            let value: f64 = parts.iter().map(|(v, _)| v).product();
            let mut dv = 0.0;
            for j in 0..parts.len() {
                let mut coef = 1.0;
                for (l, (v, _)) in parts.iter().enumerate() {
                    if l != j {
                        coef *= v;
                    }
                }
                dv += coef * parts[j].1;
            }
            (value, dv)
        }
        Expr::Pow(base, k) => {
            let (v, dv) = dir_impl(base, x, d);
            let kk = *k as i32;
            (v.powi(kk), kk as f64 * v.powi(kk - 1) * dv)
        }
        Expr::Abs(inner) => {
            let (v, dv) = dir_impl(inner, x, d);
            if v > 0.0 {
                (v, dv)
            } else if v < 0.0 {
                (-v, -dv)
            } else {
                (0.0, dv.abs())
            }
        }
        Expr::FracPow(inner, p) => {
            let (v, dv) = dir_impl(inner, x, d);
            let pf = ratio_to_f64(*p);
            let a = v.abs();
            if v == 0.0 {
                // |u(x+td)|^p ~ |t u'|^p with p > 1: one-sided rate 0.
                (0.0, 0.0)
            } else {
                (a.powf(pf), pf * a.powf(pf - 1.0) * v.signum() * dv)
            }
        }
        Expr::Max(children) => dir_extreme(children, x, d, true),
        Expr::Min(children) => dir_extreme(children, x, d, false),
    }
}

fn dir_extreme(children: &[Expr], x: &[f64], d: &[f64], is_max: bool) -> (f64, f64) {
    let parts: Vec<(f64, f64)> = children.iter().map(|c| dir_impl(c, x, d)).collect();
    let m = parts
        .iter()
        .map(|(v, _)| *v)
        .fold(if is_max { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
            if is_max {
                a.max(b)
            } else {
                a.min(b)
            }
        });
    let rates = parts.iter().filter(|(v, _)| *v == m).map(|(_, dv)| *dv);
    let rate = if is_max {
        rates.fold(f64::NEG_INFINITY, f64::max)
    } else {
        rates.fold(f64::INFINITY, f64::min)
    };
    (m, rate)
}

/// The interval `[lo, hi]` spanned by the one-sided derivatives of the slice
/// `t -> f(x + t e_i)` at `t = 0`; equals the 1-D Clarke subdifferential of
/// the slice for this function class.
pub fn slice_interval(f: &Expr, x: &[f64], i: usize) -> (f64, f64) {
    let mut d = vec![0.0; x.len()];
    d[i] = 1.0;
    let right = directional_derivative(f, x, &d);
    d[i] = -1.0;
    let left = -directional_derivative(f, x, &d);
    (left.min(right), left.max(right))
}

/// Coordinate selection for coordinate descent: the `i`-th partial derivative
/// where the slice is differentiable, otherwise a rule-resolved element of
/// the slice subdifferential. `i` is 0-based.
pub fn partial_select(f: &Expr, x: &[f64], i: usize, rule: &SelectionRule) -> f64 {
    let (lo, hi) = slice_interval(f, x, i);
    pick_in_interval(lo, hi, rule)
}

/// Same as [`partial_select`] for a composite objective; one-sided rates add
/// across components, so the joint slice interval is exact.
pub fn partial_select_sum(f: &SumFunction, x: &[f64], i: usize, rule: &SelectionRule) -> f64 {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for c in f.components() {
        let (l, h) = slice_interval(c, x, i);
        lo += l;
        hi += h;
    }
    pick_in_interval(lo * f.scale(), hi * f.scale(), rule)
}

fn pick_in_interval(lo: f64, hi: f64, rule: &SelectionRule) -> f64 {
    if lo == hi {
        return lo;
    }
    match rule.abs_at_zero {
        AbsRule::Zero => {
            if lo > 0.0 {
                lo
            } else if hi < 0.0 {
                hi
            } else {
                0.0
            }
        }
        AbsRule::Left => lo,
        AbsRule::Right => hi,
    }
}

// ---------------------------------------------------------------------------
// Explicit models.
// ---------------------------------------------------------------------------

/// Explicit model of `∂f(x)` for a single expression.
pub fn clarke_model(
    f: &Expr,
    x: &[f64],
    kink_tol: f64,
) -> Result<SubgradientModel, ModelError> {
    weighted_model(&[(1.0, f)], x, &Tols { kink_tol, cell_radius: 0.0 })
}

/// Model of the composite objective treated as one function: kinks across
/// all components are analyzed jointly, so branch patterns that cancel
/// between components are filtered out.
pub fn joint_model(
    f: &SumFunction,
    x: &[f64],
    kink_tol: f64,
) -> Result<SubgradientModel, ModelError> {
    let w = f.scale();
    let parts: Vec<(f64, &Expr)> = f.components().iter().map(|c| (w, c)).collect();
    weighted_model(&parts, x, &Tols { kink_tol, cell_radius: 0.0 })
}

/// The conservative-field style model `scale * (∂f_1 + ... + ∂f_N)`: the
/// Minkowski sum of per-component models. An outer estimate of the joint
/// subdifferential; the two differ on non-regular components.
pub fn component_sum_model(
    f: &SumFunction,
    x: &[f64],
    kink_tol: f64,
) -> Result<SubgradientModel, ModelError> {
    let mut acc: Option<SubgradientModel> = None;
    for c in f.components() {
        let m = clarke_model(c, x, kink_tol)?;
        acc = Some(match acc {
            None => m,
            Some(prev) => prev.minkowski_sum(&m)?,
        });
    }
    Ok(acc.unwrap().scale(f.scale()))
}

/// Min-norm distance of a cell-aware model used by landscape scans: kinks
/// and fractional-power bands activate when the inner value could vanish
/// anywhere within `cell_radius` of `x` (first-order test), and tied
/// branches contribute the hull over realizable branch patterns.
pub fn scan_distance(
    f: &SumFunction,
    x: &[f64],
    kink_tol: f64,
    cell_radius: f64,
) -> Result<f64, ModelError> {
    let w = f.scale();
    let parts: Vec<(f64, &Expr)> = f.components().iter().map(|c| (w, c)).collect();
    let tols = Tols { kink_tol, cell_radius };
    let sites = collect_sites(&parts, x, &tols)?;
    let branch_sites: Vec<&Site> =
        sites.iter().filter(|s| matches!(s.kind, SiteKind::Branch { .. })).collect();

    let abs_gen: BTreeSet<usize> = sites
        .iter()
        .filter(|s| matches!(s.kind, SiteKind::AbsSign))
        .map(|s| s.id)
        .collect();
    let bands: HashMap<usize, f64> = sites
        .iter()
        .filter_map(|s| match s.kind {
            SiteKind::FracPowBand { halfwidth } => Some((s.id, halfwidth)),
            _ => None,
        })
        .collect();

    if branch_sites.is_empty() {
        let (g0, gens) = frozen_box(&parts, x, &HashMap::new(), &abs_gen, &bands);
        let model = SubgradientModel::BoxAffine {
            base: g0,
            generators: gens.into_iter().map(Generator::symmetric).collect(),
        };
        return min_norm_distance(&model);
    }

    // Hull over the corner points of every realizable branch pattern's box.
    let patterns = probe_patterns(&parts, x, &sites, &tols, PatternScope::BranchesOnly)?;
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for pat in &patterns {
        let (g0, gens) = frozen_box(&parts, x, pat, &abs_gen, &bands);
        let model = SubgradientModel::BoxAffine {
            base: g0,
            generators: gens.into_iter().map(Generator::symmetric).collect(),
        };
        vertices.extend(model.vertices()?);
    }
    min_norm_distance(&SubgradientModel::Hull { vertices })
}

#[derive(Debug, Clone, Copy)]
struct Tols {
    kink_tol: f64,
    cell_radius: f64,
}

impl Tols {
    fn activation(&self, inner_grad_norm: f64) -> f64 {
        self.kink_tol + 2.0 * self.cell_radius * inner_grad_norm
    }
}

#[derive(Debug, Clone)]
enum SiteKind {
    AbsSign,
    FracPowBand { halfwidth: f64 },
    Branch { tied: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Site {
    id: usize,
    kind: SiteKind,
    additive: bool,
    nested: bool,
}

/// Resolution of one site in a branch pattern.
type Assignment = HashMap<usize, i32>; // AbsSign: ±1; Branch: 2 + child index

const ABS_MINUS: i32 = -1;
const ABS_PLUS: i32 = 1;

fn branch_code(child: usize) -> i32 {
    2 + child as i32
}

/// The shared model builder over a weighted sum of expressions.
fn weighted_model(
    parts: &[(f64, &Expr)],
    x: &[f64],
    tols: &Tols,
) -> Result<SubgradientModel, ModelError> {
    let sites = collect_sites(parts, x, tols)?;
    if sites.is_empty() {
        let g = weighted_select(parts, x);
        return Ok(SubgradientModel::gradient(g));
    }

    let box_eligible = sites
        .iter()
        .all(|s| matches!(s.kind, SiteKind::AbsSign) && s.additive && !s.nested);
    if box_eligible {
        let abs_gen: BTreeSet<usize> = sites.iter().map(|s| s.id).collect();
        let (g0, gens) = frozen_box(parts, x, &HashMap::new(), &abs_gen, &HashMap::new());
        return Ok(SubgradientModel::BoxAffine {
            base: g0,
            generators: gens.into_iter().map(Generator::symmetric).collect(),
        });
    }

    // General case: convex hull of the gradients of the essentially active
    // smooth pieces.
    let patterns = probe_patterns(parts, x, &sites, tols, PatternScope::AllSites)?;
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    for pat in &patterns {
        let (_, g, gens) = frozen_eval_parts(parts, x, pat, &BTreeSet::new(), &HashMap::new());
        debug_assert!(gens.is_empty());
        let key: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            vertices.push(g);
        }
    }
    Ok(SubgradientModel::Hull { vertices })
}

fn weighted_select(parts: &[(f64, &Expr)], x: &[f64]) -> Vec<f64> {
    let rule = SelectionRule::default();
    let mut g = vec![0.0; x.len()];
    for (w, e) in parts {
        let s = clarke_select(e, x, &rule);
        axpy(*w, &s, &mut g);
    }
    g
}

// --- site collection -------------------------------------------------------

struct CollectCtx {
    additive: bool,
    active_ancestors: usize,
    live: bool,
}

fn collect_sites(
    parts: &[(f64, &Expr)],
    x: &[f64],
    tols: &Tols,
) -> Result<Vec<Site>, ModelError> {
    let mut sites = Vec::new();
    let mut counter = 0usize;
    for (_, e) in parts {
        collect_rec(
            e,
            x,
            tols,
            &CollectCtx { additive: true, active_ancestors: 0, live: true },
            &mut counter,
            &mut sites,
        )?;
    }
    Ok(sites)
}

fn collect_rec(
    e: &Expr,
    x: &[f64],
    tols: &Tols,
    ctx: &CollectCtx,
    counter: &mut usize,
    sites: &mut Vec<Site>,
) -> Result<(), ModelError> {
    match e {
        Expr::Const(_) | Expr::Var(_) => Ok(()),
        Expr::Sum(terms) => {
            for t in terms {
                collect_rec(t, x, tols, ctx, counter, sites)?;
            }
            Ok(())
        }
        Expr::Prod(factors) => {
            for (j, f) in factors.iter().enumerate() {
                let others_const = factors
                    .iter()
                    .enumerate()
                    .all(|(l, g)| l == j || matches!(g, Expr::Const(_)));
                let child = CollectCtx {
                    additive: ctx.additive && others_const,
                    active_ancestors: ctx.active_ancestors,
                    live: ctx.live,
                };
                collect_rec(f, x, tols, &child, counter, sites)?;
            }
            Ok(())
        }
        Expr::Pow(base, _) => collect_rec(
            base,
            x,
            tols,
            &CollectCtx { additive: false, active_ancestors: ctx.active_ancestors, live: ctx.live },
            counter,
            sites,
        ),
        Expr::Abs(inner) => {
            let id = next_id(counter);
            let v = inner.eval(x);
            let gnorm = norm(&clarke_select(inner, x, &SelectionRule::default()));
            let active = ctx.live && v.abs() <= tols.activation(gnorm);
            if active {
                check_nesting(ctx.active_ancestors)?;
                sites.push(Site {
                    id,
                    kind: SiteKind::AbsSign,
                    additive: ctx.additive,
                    nested: ctx.active_ancestors > 0,
                });
            }
            collect_rec(
                inner,
                x,
                tols,
                &CollectCtx {
                    additive: false,
                    active_ancestors: ctx.active_ancestors + usize::from(active),
                    live: ctx.live,
                },
                counter,
                sites,
            )
        }
        Expr::FracPow(inner, p) => {
            let id = next_id(counter);
            let v = inner.eval(x);
            let gnorm = norm(&clarke_select(inner, x, &SelectionRule::default()));
            let tol_eff = tols.activation(gnorm);
            let in_band = v.abs() <= tol_eff;
            if in_band && tols.cell_radius > 0.0 && ctx.live {
                let pf = ratio_to_f64(*p);
                sites.push(Site {
                    id,
                    kind: SiteKind::FracPowBand { halfwidth: pf * tol_eff.powf(pf - 1.0) },
                    additive: ctx.additive,
                    nested: ctx.active_ancestors > 0,
                });
            }
            // Inside a vanishing band the composite derivative is damped to
            // zero, so inner kinks are invisible.
            collect_rec(
                inner,
                x,
                tols,
                &CollectCtx {
                    additive: false,
                    active_ancestors: ctx.active_ancestors,
                    live: ctx.live && !in_band,
                },
                counter,
                sites,
            )
        }
        Expr::Max(children) | Expr::Min(children) => {
            let is_max = matches!(e, Expr::Max(_));
            let id = next_id(counter);
            let values: Vec<f64> = children.iter().map(|c| c.eval(x)).collect();
            let m = extreme_value(&values, is_max);
            let tied: Vec<usize> = (0..children.len())
                .filter(|&i| {
                    let gn = if tols.cell_radius > 0.0 {
                        norm(&clarke_select(&children[i], x, &SelectionRule::default()))
                    } else {
                        0.0
                    };
                    (values[i] - m).abs() <= tols.kink_tol + 4.0 * tols.cell_radius * gn.max(1.0)
                })
                .collect();
            let active = ctx.live && tied.len() >= 2;
            if active {
                check_nesting(ctx.active_ancestors)?;
                sites.push(Site {
                    id,
                    kind: SiteKind::Branch { tied: tied.clone() },
                    additive: ctx.additive,
                    nested: ctx.active_ancestors > 0,
                });
            }
            for (i, c) in children.iter().enumerate() {
                let child_live = ctx.live
                    && if active {
                        tied.contains(&i)
                    } else {
                        (values[i] - m).abs() <= tols.kink_tol
                    };
                collect_rec(
                    c,
                    x,
                    tols,
                    &CollectCtx {
                        additive: false,
                        active_ancestors: ctx.active_ancestors + usize::from(active),
                        live: child_live,
                    },
                    counter,
                    sites,
                )?;
            }
            Ok(())
        }
    }
}

fn next_id(counter: &mut usize) -> usize {
    let id = *counter;
    *counter += 1;
    id
}

fn check_nesting(active_ancestors: usize) -> Result<(), ModelError> {
    if active_ancestors >= 2 {
        Err(ModelError::UnsupportedStructure {
            what: "active kinks nested beyond depth 2".to_string(),
        })
    } else {
        Ok(())
    }
}

fn extreme_value(values: &[f64], is_max: bool) -> f64 {
    values
        .iter()
        .copied()
        .fold(if is_max { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
            if is_max {
                a.max(b)
            } else {
                a.min(b)
            }
        })
}

// --- probing ----------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum PatternScope {
    /// Resolve every site (pointwise hull construction).
    AllSites,
    /// Resolve only branch sites; abs sites stay as box generators.
    BranchesOnly,
}

fn probe_patterns(
    parts: &[(f64, &Expr)],
    x: &[f64],
    sites: &[Site],
    tols: &Tols,
    scope: PatternScope,
) -> Result<Vec<Assignment>, ModelError> {
    let n = x.len();
    let xscale = 1.0 + x.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let base_radius = if tols.cell_radius > 0.0 {
        2.0 * tols.cell_radius
    } else {
        1e-4 * xscale
    };
    let radii = [base_radius, base_radius * 0.1, base_radius * 0.01];

    let mut dirs: Vec<Vec<f64>> = Vec::new();
    if n == 1 {
        dirs.push(vec![1.0]);
        dirs.push(vec![-1.0]);
    } else if n == 2 {
        let count = 128;
        for j in 0..count {
            let theta = (j as f64 + 0.5) * std::f64::consts::TAU / count as f64;
            dirs.push(vec![theta.cos(), theta.sin()]);
        }
    } else {
        for i in 0..n {
            for s in [1.0, -1.0] {
                let mut d = vec![0.0; n];
                d[i] = s;
                dirs.push(d);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(0x9E37_79B9_7F4A_7C15);
        for _ in 0..128 {
            let mut d: Vec<f64> = (0..n)
                .map(|_| {
                    // uniform in [-1, 1)
                    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
                })
                .collect();
            let nn = norm(&d);
            if nn > 1e-6 {
                for v in d.iter_mut() {
                    *v /= nn;
                }
                dirs.push(d);
            }
        }
    }

    let mut keys: BTreeSet<Vec<(usize, i32)>> = BTreeSet::new();
    let mut patterns: Vec<Assignment> = Vec::new();
    let mut y = vec![0.0; n];
    for d in &dirs {
        for &rho in &radii {
            for i in 0..n {
                y[i] = x[i] + rho * d[i];
            }
            if let Some(asg) = resolve_at(parts, &y, sites, scope) {
                let mut key: Vec<(usize, i32)> = asg.iter().map(|(&k, &v)| (k, v)).collect();
                key.sort_unstable();
                if keys.insert(key) {
                    patterns.push(asg);
                }
            }
        }
    }

    if patterns.is_empty() {
        // Degenerate probing (e.g. every direction stays on a tie line):
        // fall back to enumerating all combinations, an outer estimate.
        patterns = enumerate_all(sites, scope)?;
    }
    Ok(patterns)
}

fn enumerate_all(sites: &[Site], scope: PatternScope) -> Result<Vec<Assignment>, ModelError> {
    let mut combos: Vec<Assignment> = vec![HashMap::new()];
    for s in sites {
        let options: Vec<i32> = match (&s.kind, scope) {
            (SiteKind::AbsSign, PatternScope::AllSites) => vec![ABS_MINUS, ABS_PLUS],
            (SiteKind::AbsSign, PatternScope::BranchesOnly) => continue,
            (SiteKind::FracPowBand { .. }, _) => continue,
            (SiteKind::Branch { tied }, _) => tied.iter().map(|&c| branch_code(c)).collect(),
        };
        if combos.len() * options.len() > 256 {
            return Err(ModelError::UnsupportedStructure {
                what: "too many unresolved kink combinations".to_string(),
            });
        }
        let mut next = Vec::with_capacity(combos.len() * options.len());
        for c in &combos {
            for &o in &options {
                let mut c2 = c.clone();
                c2.insert(s.id, o);
                next.push(c2);
            }
        }
        combos = next;
    }
    Ok(combos)
}

/// Resolves every site at the probe point `y`; `None` when any site stays
/// ambiguous there.
fn resolve_at(
    parts: &[(f64, &Expr)],
    y: &[f64],
    sites: &[Site],
    scope: PatternScope,
) -> Option<Assignment> {
    let by_id: HashMap<usize, &Site> = sites.iter().map(|s| (s.id, s)).collect();
    let mut asg = Assignment::new();
    let mut counter = 0usize;
    let mut ok = true;
    for (_, e) in parts {
        resolve_rec(e, y, &by_id, scope, &mut counter, &mut asg, &mut ok);
        if !ok {
            return None;
        }
    }
    Some(asg)
}

fn resolve_rec(
    e: &Expr,
    y: &[f64],
    sites: &HashMap<usize, &Site>,
    scope: PatternScope,
    counter: &mut usize,
    asg: &mut Assignment,
    ok: &mut bool,
) -> f64 {
    match e {
        Expr::Const(c) => *c,
        Expr::Var(i) => y[*i],
        Expr::Sum(terms) => terms
            .iter()
            .map(|t| resolve_rec(t, y, sites, scope, counter, asg, ok))
            .sum(),
        Expr::Prod(factors) => factors
            .iter()
            .map(|f| resolve_rec(f, y, sites, scope, counter, asg, ok))
            .product(),
        Expr::Pow(base, k) => {
            let v = resolve_rec(base, y, sites, scope, counter, asg, ok);
            v.powi(*k as i32)
        }
        Expr::Abs(inner) => {
            let id = next_id(counter);
            let v = resolve_rec(inner, y, sites, scope, counter, asg, ok);
            if let Some(site) = sites.get(&id) {
                if matches!(site.kind, SiteKind::AbsSign) && scope == PatternScope::AllSites {
                    if v == 0.0 {
                        *ok = false;
                    } else {
                        asg.insert(id, if v > 0.0 { ABS_PLUS } else { ABS_MINUS });
                    }
                }
            }
            v.abs()
        }
        Expr::FracPow(inner, p) => {
            let _id = next_id(counter);
            let v = resolve_rec(inner, y, sites, scope, counter, asg, ok);
            v.abs().powf(ratio_to_f64(*p))
        }
        Expr::Max(children) | Expr::Min(children) => {
            let is_max = matches!(e, Expr::Max(_));
            let id = next_id(counter);
            let values: Vec<f64> = children
                .iter()
                .map(|c| resolve_rec(c, y, sites, scope, counter, asg, ok))
                .collect();
            if let Some(site) = sites.get(&id) {
                if let SiteKind::Branch { tied } = &site.kind {
                    let mut best: Option<usize> = None;
                    let mut strict = true;
                    for &c in tied {
                        match best {
                            None => best = Some(c),
                            Some(b) => {
                                let better = if is_max {
                                    values[c] > values[b]
                                } else {
                                    values[c] < values[b]
                                };
                                if better {
                                    best = Some(c);
                                    strict = true;
                                } else if values[c] == values[b] {
                                    strict = false;
                                }
                            }
                        }
                    }
                    if strict {
                        asg.insert(id, branch_code(best.unwrap()));
                    } else {
                        *ok = false;
                    }
                }
            }
            extreme_value(&values, is_max)
        }
    }
}

// --- frozen evaluation -------------------------------------------------------

/// Evaluates the weighted sum with kink sites frozen by `asg`; abs sites in
/// `abs_gen` and fracpow sites in `bands` contribute symmetric generators
/// instead of a branch gradient. Returns `(value, base gradient, generators)`.
fn frozen_eval_parts(
    parts: &[(f64, &Expr)],
    x: &[f64],
    asg: &Assignment,
    abs_gen: &BTreeSet<usize>,
    bands: &HashMap<usize, f64>,
) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let mut counter = 0usize;
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    let mut gens: Vec<Vec<f64>> = Vec::new();
    for (w, e) in parts {
        let (v, g, gs) = frozen_rec(e, x, asg, abs_gen, bands, &mut counter);
        value += w * v;
        axpy(*w, &g, &mut grad);
        for gv in gs {
            gens.push(scaled(*w, &gv));
        }
    }
    (value, grad, gens)
}

fn frozen_box(
    parts: &[(f64, &Expr)],
    x: &[f64],
    asg: &Assignment,
    abs_gen: &BTreeSet<usize>,
    bands: &HashMap<usize, f64>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (_, g, gens) = frozen_eval_parts(parts, x, asg, abs_gen, bands);
    (g, gens)
}

#[allow(clippy::type_complexity)]
fn frozen_rec(
    e: &Expr,
    x: &[f64],
    asg: &Assignment,
    abs_gen: &BTreeSet<usize>,
    bands: &HashMap<usize, f64>,
    counter: &mut usize,
) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let n = x.len();
    match e {
        Expr::Const(c) => (*c, vec![0.0; n], Vec::new()),
        Expr::Var(i) => {
            let mut g = vec![0.0; n];
            g[*i] = 1.0;
            (x[*i], g, Vec::new())
        }
        Expr::Sum(terms) => {
            let mut v = 0.0;
            let mut g = vec![0.0; n];
            let mut gens = Vec::new();
            for t in terms {
                let (tv, tg, tgen) = frozen_rec(t, x, asg, abs_gen, bands, counter);
                v += tv;
                axpy(1.0, &tg, &mut g);
                gens.extend(tgen);
            }
            (v, g, gens)
        }
        Expr::Prod(factors) => {
            let parts: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)> = factors
                .iter()
                .map(|f| frozen_rec(f, x, asg, abs_gen, bands, counter))
                .collect();
            let value: f64 = parts.iter().map(|(v, _, _)| v).product();
            let mut g = vec![0.0; n];
            let mut gens = Vec::new();
            for j in 0..parts.len() {
                let mut coef = 1.0;
                for (l, p) in parts.iter().enumerate() {
                    if l != j {
                        coef *= p.0;
                    }
                }
                axpy(coef, &parts[j].1, &mut g);
                for gv in &parts[j].2 {
                    gens.push(scaled(coef, gv));
                }
            }
            (value, g, gens)
        }
        Expr::Pow(base, k) => {
            let (v, g, gens) = frozen_rec(base, x, asg, abs_gen, bands, counter);
            let kk = *k as i32;
            let coef = kk as f64 * v.powi(kk - 1);
            (
                v.powi(kk),
                scaled(coef, &g),
                gens.iter().map(|gv| scaled(coef, gv)).collect(),
            )
        }
        Expr::Abs(inner) => {
            let id = next_id(counter);
            let (v, g, gens) = frozen_rec(inner, x, asg, abs_gen, bands, counter);
            if let Some(&code) = asg.get(&id) {
                let s = code as f64;
                return (
                    s * v,
                    scaled(s, &g),
                    gens.iter().map(|gv| scaled(s, gv)).collect(),
                );
            }
            if abs_gen.contains(&id) {
                let mut out = gens;
                out.push(g);
                return (v.abs(), vec![0.0; n], out);
            }
            let s = if v >= 0.0 { 1.0 } else { -1.0 };
            (v.abs(), scaled(s, &g), gens.iter().map(|gv| scaled(s, gv)).collect())
        }
        Expr::FracPow(inner, p) => {
            let id = next_id(counter);
            let (v, g, gens) = frozen_rec(inner, x, asg, abs_gen, bands, counter);
            let pf = ratio_to_f64(*p);
            let a = v.abs();
            if let Some(&halfwidth) = bands.get(&id) {
                let mut out = gens;
                out.push(scaled(halfwidth, &g));
                return (a.powf(pf), vec![0.0; n], out);
            }
            let coef = if v == 0.0 { 0.0 } else { pf * a.powf(pf - 1.0) * v.signum() };
            (
                a.powf(pf),
                scaled(coef, &g),
                gens.iter().map(|gv| scaled(coef, gv)).collect(),
            )
        }
        Expr::Max(children) | Expr::Min(children) => {
            let is_max = matches!(e, Expr::Max(_));
            let id = next_id(counter);
            let parts: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)> = children
                .iter()
                .map(|c| frozen_rec(c, x, asg, abs_gen, bands, counter))
                .collect();
            let chosen = match asg.get(&id) {
                Some(&code) => (code - 2) as usize,
                None => {
                    // Not a resolved site: plain winner by value.
                    let values: Vec<f64> = parts.iter().map(|p| p.0).collect();
                    let m = extreme_value(&values, is_max);
                    values.iter().position(|&v| v == m).unwrap()
                }
            };
            let value = extreme_value(&parts.iter().map(|p| p.0).collect::<Vec<_>>(), is_max);
            (value, parts[chosen].1.clone(), parts[chosen].2.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn rule() -> SelectionRule {
        SelectionRule::default()
    }

    #[test]
    fn select_abs_at_zero_is_zero() {
        let f = parse("abs(x1)", 1).unwrap();
        assert_eq!(clarke_select(&f, &[0.0], &rule()), vec![0.0]);
    }

    #[test]
    fn select_smooth_is_gradient() {
        let f = parse("0.5*x1^2", 1).unwrap();
        assert_eq!(clarke_select(&f, &[1.0], &rule()), vec![1.0]);
    }

    #[test]
    fn remark4_mean_selection_is_one_third() {
        // (max(x,0) + min(x,0) + x^2)/3 at 0 with mean tie-breaking: each tied
        // pair averages to 1/2, so the scaled sum is exactly 1/3.
        let f = SumFunction::new(
            vec![
                parse("max(x1,0)", 1).unwrap(),
                parse("min(x1,0)", 1).unwrap(),
                parse("x1^2", 1).unwrap(),
            ],
            1,
            true,
        )
        .unwrap();
        let g = select_sum(&f, &[0.0], &SelectionRule::mean());
        assert_eq!(g, vec![1.0 / 3.0]);
    }

    #[test]
    fn remark4_zero_biased_selection_is_zero() {
        let f = SumFunction::new(
            vec![
                parse("max(x1,0)", 1).unwrap(),
                parse("min(x1,0)", 1).unwrap(),
                parse("x1^2", 1).unwrap(),
            ],
            1,
            true,
        )
        .unwrap();
        let g = select_sum(&f, &[0.0], &SelectionRule::zero_biased());
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn model_of_relu_is_unit_interval() {
        let f = parse("max(x1,0)", 1).unwrap();
        let m = clarke_model(&f, &[0.0], 1e-9).unwrap();
        let verts = m.vertices().unwrap();
        let mut vals: Vec<f64> = verts.iter().map(|v| v[0]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vals, vec![0.0, 1.0]);
    }

    #[test]
    fn model_of_separable_abs_is_box() {
        let f = parse("abs(x1)+abs(x2)", 2).unwrap();
        let m = clarke_model(&f, &[0.0, 0.0], 1e-9).unwrap();
        match &m {
            SubgradientModel::BoxAffine { base, generators } => {
                assert_eq!(base, &vec![0.0, 0.0]);
                assert_eq!(generators.len(), 2);
            }
            other => panic!("expected box, got {other:?}"),
        }
        assert!(m.contains(&[0.7, -0.3], 1e-8).unwrap());
    }

    #[test]
    fn fig1a_model_at_upper_corner_contains_zero() {
        let f = parse("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2).unwrap();
        let m = clarke_model(&f, &[1.0, 1.0], 1e-9).unwrap();
        match &m {
            SubgradientModel::BoxAffine { generators, .. } => assert_eq!(generators.len(), 2),
            other => panic!("expected box, got {other:?}"),
        }
        assert!(min_norm_distance(&m).unwrap() < 1e-12);
    }

    #[test]
    fn remark4_joint_vs_component_models() {
        let f = SumFunction::new(
            vec![
                parse("max(x1,0)", 1).unwrap(),
                parse("min(x1,0)", 1).unwrap(),
                parse("x1^2", 1).unwrap(),
            ],
            1,
            true,
        )
        .unwrap();
        let joint = joint_model(&f, &[0.0], 1e-9).unwrap();
        let dj = min_norm_distance(&joint).unwrap();
        assert!((dj - 1.0 / 3.0).abs() < 1e-9, "joint distance {dj}");

        let sum = component_sum_model(&f, &[0.0], 1e-9).unwrap();
        let ds = min_norm_distance(&sum).unwrap();
        assert!(ds.abs() < 1e-9, "component-sum distance {ds}");
    }

    #[test]
    fn linf_ball_corner_is_not_critical() {
        let f = parse("max(abs(x1),abs(x2))", 2).unwrap();
        let m = clarke_model(&f, &[1.0, 1.0], 1e-9).unwrap();
        let d = min_norm_distance(&m).unwrap();
        assert!((d - 0.5_f64.sqrt()).abs() < 1e-9, "distance {d}");
    }

    #[test]
    fn linf_ball_origin_is_critical() {
        let f = parse("max(abs(x1),abs(x2))", 2).unwrap();
        let m = clarke_model(&f, &[0.0, 0.0], 1e-9).unwrap();
        assert!(min_norm_distance(&m).unwrap() < 1e-10);
    }

    #[test]
    fn abs_of_abs_model_is_full_interval() {
        let f = parse("abs(abs(x1))", 1).unwrap();
        let m = clarke_model(&f, &[0.0], 1e-9).unwrap();
        let verts = m.vertices().unwrap();
        let mut vals: Vec<f64> = verts.iter().map(|v| v[0]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vals, vec![-1.0, 1.0]);
    }

    #[test]
    fn nesting_beyond_depth_two_errors() {
        let f = parse("max(abs(max(x1,x2)-1),x2)", 2).unwrap();
        // At (0.5, 1.0): outer max ties (|max(0.5,1)-1| = 0 vs x2... pick a
        // point where three kink layers activate simultaneously.
        let g = parse("abs(max(abs(x1),x2)-1)", 2).unwrap();
        let r = clarke_model(&g, &[0.0, 0.0], 1e-9);
        // |x1| = 0 active, max(|x1|, x2) = 0 tie active, |...-1| = 1 inactive:
        // only depth 2, fine.
        assert!(r.is_ok());
        let h = parse("max(abs(max(x1,0)-0),x1)", 1).unwrap();
        let r2 = clarke_model(&h, &[0.0], 1e-9);
        match r2 {
            Err(ModelError::UnsupportedStructure { .. }) => {}
            other => panic!("expected unsupported structure, got {other:?}"),
        }
        let _ = f;
    }

    #[test]
    fn partial_select_examples() {
        let quad = parse("x1^2+x2^2", 2).unwrap();
        assert_eq!(partial_select(&quad, &[1.0, 2.0], 1, &rule()), 4.0);

        let linf = parse("max(abs(x1),abs(x2))", 2).unwrap();
        let v = partial_select(&linf, &[1.0, 1.0], 0, &SelectionRule::zero_biased());
        assert_eq!(v, 0.0);
        assert_eq!(slice_interval(&linf, &[1.0, 1.0], 0), (0.0, 1.0));

        let fig1b = parse(
            "abs(x1^2-1)^(3/2)+2*abs(x1*x2+1)^(3/2)+abs(x2^2-1)^(3/2)",
            2,
        )
        .unwrap();
        assert_eq!(partial_select(&fig1b, &[1.0, -1.0], 0, &rule()), 0.0);
    }

    #[test]
    fn directional_derivative_of_abs() {
        let f = parse("abs(x1)", 1).unwrap();
        assert_eq!(directional_derivative(&f, &[0.0], &[1.0]), 1.0);
        assert_eq!(directional_derivative(&f, &[0.0], &[-1.0]), 1.0);
        assert_eq!(directional_derivative(&f, &[2.0], &[-1.0]), -1.0);
    }

    #[test]
    fn selection_is_contained_in_model() {
        let f = parse("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2).unwrap();
        for x in [[1.0, -1.0], [1.0, 1.0], [0.3, 0.7], [-1.0, 1.0]] {
            let m = clarke_model(&f, &x, 1e-9).unwrap();
            for r in [
                SelectionRule::default(),
                SelectionRule::mean(),
                SelectionRule::zero_biased(),
                SelectionRule { abs_at_zero: AbsRule::Left, tie: TieRule::FirstChild },
                SelectionRule { abs_at_zero: AbsRule::Right, tie: TieRule::FirstChild },
            ] {
                let s = clarke_select(&f, &x, &r);
                assert!(
                    m.contains(&s, 1e-8).unwrap(),
                    "selection {s:?} outside model at {x:?}"
                );
            }
        }
    }
}
