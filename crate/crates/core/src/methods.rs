//! Constant-step-size first-order methods with full trace capture.
//!
//! Three methods share the trace format:
//!
//! * [`run_momentum`] — subgradient method with momentum
//!   (`y_k = x_k + γ(x_k - x_{k-1})`,
//!   `x_{k+1} = x_k + β(x_k - x_{k-1}) - α s(y_k)` with `s` a Clarke
//!   selection of the whole objective). `β = γ = 0` is the vanilla
//!   subgradient method, `γ = 0` the heavy-ball method, `β = γ` the
//!   accelerated method.
//! * [`run_reshuffled_momentum`] — the same update applied one component at
//!   a time, visiting all components once per epoch in a fresh uniform
//!   permutation.
//! * [`run_cyclic_cd`] — coordinate descent cycling through a fresh
//!   permutation of the coordinates every epoch.
//!
//! Permutations come from a counter-keyed deterministic generator so that a
//! `(seed, epoch)` pair always yields the same permutation on every platform.

use crate::expr::SumFunction;
use crate::subdiff::{self, SelectionRule};
use crate::vecops::{all_finite, dist, norm};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Parameters shared by the momentum methods.
///
/// The initial pair must satisfy `||x_prev - x0|| <= delta * alpha`; the
/// default previous iterate is `x0` itself, which satisfies the bound for
/// any `delta > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub x0: Vec<f64>,
    pub x_prev: Vec<f64>,
}

impl MomentumParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, x0: Vec<f64>) -> Self {
        let x_prev = x0.clone();
        MomentumParams { alpha, beta, gamma, delta: 1.0, x0, x_prev }
    }

    pub fn with_prev(mut self, x_prev: Vec<f64>, delta: f64) -> Self {
        self.x_prev = x_prev;
        self.delta = delta;
        self
    }

    fn validate(&self) -> Result<(), MethodError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(MethodError::BadParams("step size must be positive".into()));
        }
        if !(self.beta > -1.0 && self.beta < 1.0) {
            return Err(MethodError::BadParams("momentum beta must lie in (-1, 1)".into()));
        }
        if !(self.delta > 0.0) {
            return Err(MethodError::BadParams("delta must be positive".into()));
        }
        if !all_finite(&self.x0) || !all_finite(&self.x_prev) {
            return Err(MethodError::BadParams("initial points must be finite".into()));
        }
        let gap = dist(&self.x_prev, &self.x0);
        if gap > self.delta * self.alpha {
            return Err(MethodError::BadParams(format!(
                "||x_prev - x0|| = {gap} exceeds delta * alpha = {}",
                self.delta * self.alpha
            )));
        }
        Ok(())
    }
}

/// Counter-keyed permutation source: epoch `k` of stream `seed` always
/// produces the same uniform permutation (ChaCha12 keyed by the seed with
/// the epoch as stream number, driving a Fisher-Yates shuffle with rejection
/// sampling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationStream {
    pub seed: u64,
}

impl PermutationStream {
    pub fn new(seed: u64) -> Self {
        PermutationStream { seed }
    }

    /// The permutation of `0..len` used in epoch `epoch`.
    pub fn permutation(&self, epoch: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        let mut perm: Vec<usize> = (0..len).collect();
        // Fisher-Yates with rejection sampling for exact uniformity.
        for i in (1..len).rev() {
            let bound = (i + 1) as u64;
            let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
            let j = loop {
                let r = rng.next_u64();
                if r <= zone {
                    break (r % bound) as usize;
                }
            };
            perm.swap(i, j);
        }
        perm
    }
}

/// One recorded inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based inner index within the epoch (component or coordinate count).
    pub inner: usize,
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub selection: Vec<f64>,
    pub f: f64,
}

/// Which method produced a trace, echoing its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamsEcho {
    Momentum { params: MomentumParams, rule: SelectionRule },
    Reshuffled { params: MomentumParams, rule: SelectionRule, seed: u64 },
    CyclicCd { alpha: f64, rule: SelectionRule, seed: u64, allow_nonsmooth: bool },
}

/// Summary of the per-step displacement assertion (Lemma-style bound
/// `||x_{k,i} - x_{k,i-1}|| <= delta' * alpha` with
/// `delta' = r' / (1 - |beta|)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementCheck {
    /// Ball radius `r`; the bound is asserted while every lookahead stays in
    /// `B(0, r)`.
    pub radius: f64,
    /// Empirical bound on selection norms over `B(0, r)`.
    pub selection_bound: f64,
    /// `selection_bound / (1 - |beta|)`.
    pub delta_prime: f64,
    /// Largest observed `||step|| / alpha`.
    pub max_step_over_alpha: f64,
    /// Steps violating the bound while the premise held.
    pub violations: usize,
    /// Steps where the premise (lookaheads inside the ball) had failed.
    pub suspended_steps: usize,
}

/// Full record of a method run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub dim: usize,
    /// Number of inner steps per epoch (components or coordinates; 1 for the
    /// full-objective momentum method).
    pub inner_len: usize,
    pub params: ParamsEcho,
    pub x_prev_init: Vec<f64>,
    /// Outer iterates `x_0 .. x_K`.
    pub outer: Vec<Vec<f64>>,
    /// Objective value at each outer iterate.
    pub outer_f: Vec<f64>,
    /// Inner step records (empty when recording was disabled).
    pub steps: Vec<StepRecord>,
    /// Permutation used in each epoch (empty for the momentum method).
    pub permutations: Vec<Vec<usize>>,
    pub displacement: Option<DisplacementCheck>,
}

impl Trace {
    pub fn epochs(&self) -> usize {
        self.outer.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        self.outer.last().unwrap()
    }

    /// Re-evaluates every recorded objective value and checks the index
    /// conventions; used by tests.
    pub fn self_check(&self, f: &SumFunction) -> bool {
        self.outer
            .iter()
            .zip(&self.outer_f)
            .all(|(x, &v)| f.value(x) == v)
            && self.steps.iter().all(|s| f.value(&s.x) == s.f)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum MethodError {
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("iterates diverged at epoch {epoch}, inner step {inner}: {reason}")]
    Divergence { epoch: usize, inner: usize, reason: String, last_finite: Vec<f64> },
    #[error(
        "displacement bound violated at epoch {epoch}, inner step {inner}: \
         step {step} exceeds delta' * alpha = {bound}"
    )]
    DisplacementBound { epoch: usize, inner: usize, step: f64, bound: f64 },
    #[error("objective is not C1; pass allow_nonsmooth to run the demo anyway")]
    SmoothnessRequired,
}

/// Options shared by the runners.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Record per-inner-step data (disable for very long runs to save memory).
    pub record_inner: bool,
    /// Enable the displacement assertion with ball radius `r`; the selection
    /// bound is estimated by dense deterministic sampling of `B(0, r)`.
    pub displacement_ball: Option<f64>,
    /// Abort with [`MethodError::DisplacementBound`] on a violation instead
    /// of counting it.
    pub fail_on_displacement: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { record_inner: true, displacement_ball: None, fail_on_displacement: false }
    }
}

const DIVERGENCE_RADIUS: f64 = 1e9;

/// Subgradient method with momentum on the whole objective.
pub fn run_momentum(
    f: &SumFunction,
    params: &MomentumParams,
    rule: &SelectionRule,
    epochs: usize,
) -> Result<Trace, MethodError> {
    run_momentum_opts(f, params, rule, epochs, &RunOptions::default())
}

pub fn run_momentum_opts(
    f: &SumFunction,
    params: &MomentumParams,
    rule: &SelectionRule,
    epochs: usize,
    opts: &RunOptions,
) -> Result<Trace, MethodError> {
    params.validate()?;
    let n = f.dim();
    let alpha = params.alpha;
    let mut checker = DisplacementChecker::new(f, params, opts);

    let mut trace = Trace {
        dim: n,
        inner_len: 1,
        params: ParamsEcho::Momentum { params: params.clone(), rule: *rule },
        x_prev_init: params.x_prev.clone(),
        outer: Vec::with_capacity(epochs + 1),
        outer_f: Vec::with_capacity(epochs + 1),
        steps: Vec::new(),
        permutations: Vec::new(),
        displacement: None,
    };

    let mut x = params.x0.clone();
    let mut x_prev = params.x_prev.clone();
    trace.outer.push(x.clone());
    trace.outer_f.push(f.value(&x));

    for k in 0..epochs {
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = x[i] + params.gamma * (x[i] - x_prev[i]);
        }
        let s = subdiff::select_sum(f, &y, rule);
        let mut x_next = vec![0.0; n];
        for i in 0..n {
            x_next[i] = x[i] + params.beta * (x[i] - x_prev[i]) - alpha * s[i];
        }
        guard_finite(&x_next, k, 1, &x)?;
        checker.observe(k, 1, &x_next, &x, &y, &s, alpha)?;
        if opts.record_inner {
            trace.steps.push(StepRecord {
                epoch: k,
                inner: 1,
                x: x_next.clone(),
                y: Some(y),
                selection: s,
                f: f.value(&x_next),
            });
        }
        x_prev = std::mem::replace(&mut x, x_next);
        trace.outer.push(x.clone());
        trace.outer_f.push(f.value(&x));
    }
    trace.displacement = checker.finish();
    Ok(trace)
}

/// Random reshuffling with momentum: epoch `k` visits every component once
/// in the order given by the permutation stream.
pub fn run_reshuffled_momentum(
    f: &SumFunction,
    params: &MomentumParams,
    rule: &SelectionRule,
    stream: &PermutationStream,
    epochs: usize,
) -> Result<Trace, MethodError> {
    run_reshuffled_momentum_opts(f, params, rule, stream, epochs, &RunOptions::default())
}

pub fn run_reshuffled_momentum_opts(
    f: &SumFunction,
    params: &MomentumParams,
    rule: &SelectionRule,
    stream: &PermutationStream,
    epochs: usize,
    opts: &RunOptions,
) -> Result<Trace, MethodError> {
    params.validate()?;
    let n = f.dim();
    let count = f.len();
    let alpha = params.alpha;
    let mut checker = DisplacementChecker::new(f, params, opts);

    let mut trace = Trace {
        dim: n,
        inner_len: count,
        params: ParamsEcho::Reshuffled {
            params: params.clone(),
            rule: *rule,
            seed: stream.seed,
        },
        x_prev_init: params.x_prev.clone(),
        outer: Vec::with_capacity(epochs + 1),
        outer_f: Vec::with_capacity(epochs + 1),
        steps: Vec::new(),
        permutations: Vec::new(),
        displacement: None,
    };

    // x_{k,i-1} and x_{k,i-2} across epoch boundaries: x_{k,-1} = x_{k-1,N-1}.
    let mut x = params.x0.clone();
    let mut x_before = params.x_prev.clone();
    trace.outer.push(x.clone());
    trace.outer_f.push(f.value(&x));

    for k in 0..epochs {
        let perm = stream.permutation(k as u64, count);
        if opts.record_inner || trace.permutations.len() < 4 {
            trace.permutations.push(perm.clone());
        }
        for (i, &comp) in perm.iter().enumerate() {
            let mut y = vec![0.0; n];
            for j in 0..n {
                y[j] = x[j] + params.gamma * (x[j] - x_before[j]);
            }
            let s = subdiff::clarke_select(f.component(comp), &y, rule);
            let mut x_next = vec![0.0; n];
            for j in 0..n {
                x_next[j] = x[j] + params.beta * (x[j] - x_before[j]) - alpha * s[j];
            }
            guard_finite(&x_next, k, i + 1, &x)?;
            checker.observe(k, i + 1, &x_next, &x, &y, &s, alpha)?;
            if opts.record_inner {
                trace.steps.push(StepRecord {
                    epoch: k,
                    inner: i + 1,
                    x: x_next.clone(),
                    y: Some(y),
                    selection: s,
                    f: f.value(&x_next),
                });
            }
            x_before = std::mem::replace(&mut x, x_next);
        }
        trace.outer.push(x.clone());
        trace.outer_f.push(f.value(&x));
    }
    trace.displacement = checker.finish();
    Ok(trace)
}

/// Random-permutations cyclic coordinate descent. Requires a C1 objective
/// unless `allow_nonsmooth` is set (stuck-point demo mode, where the
/// coordinate derivative is a rule-resolved element of the slice
/// subdifferential).
pub fn run_cyclic_cd(
    f: &SumFunction,
    alpha: f64,
    x0: &[f64],
    rule: &SelectionRule,
    stream: &PermutationStream,
    epochs: usize,
    allow_nonsmooth: bool,
) -> Result<Trace, MethodError> {
    run_cyclic_cd_opts(f, alpha, x0, rule, stream, epochs, allow_nonsmooth, &RunOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn run_cyclic_cd_opts(
    f: &SumFunction,
    alpha: f64,
    x0: &[f64],
    rule: &SelectionRule,
    stream: &PermutationStream,
    epochs: usize,
    allow_nonsmooth: bool,
    opts: &RunOptions,
) -> Result<Trace, MethodError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(MethodError::BadParams("step size must be positive".into()));
    }
    if !all_finite(x0) {
        return Err(MethodError::BadParams("initial point must be finite".into()));
    }
    let smooth = f
        .components()
        .iter()
        .all(|c| c.smoothness() == crate::expr::Smoothness::C1);
    if !smooth && !allow_nonsmooth {
        return Err(MethodError::SmoothnessRequired);
    }
    let n = f.dim();

    let mut trace = Trace {
        dim: n,
        inner_len: n,
        params: ParamsEcho::CyclicCd { alpha, rule: *rule, seed: stream.seed, allow_nonsmooth },
        x_prev_init: x0.to_vec(),
        outer: Vec::with_capacity(epochs + 1),
        outer_f: Vec::with_capacity(epochs + 1),
        steps: Vec::new(),
        permutations: Vec::new(),
        displacement: None,
    };

    let mut x = x0.to_vec();
    trace.outer.push(x.clone());
    trace.outer_f.push(f.value(&x));

    for k in 0..epochs {
        let perm = stream.permutation(k as u64, n);
        if opts.record_inner || trace.permutations.len() < 4 {
            trace.permutations.push(perm.clone());
        }
        for (i, &coord) in perm.iter().enumerate() {
            let d = subdiff::partial_select_sum(f, &x, coord, rule);
            let mut x_next = x.clone();
            x_next[coord] = x[coord] - alpha * d;
            guard_finite(&x_next, k, i + 1, &x)?;
            if opts.record_inner {
                let mut selection = vec![0.0; n];
                selection[coord] = d;
                trace.steps.push(StepRecord {
                    epoch: k,
                    inner: i + 1,
                    x: x_next.clone(),
                    y: None,
                    selection,
                    f: f.value(&x_next),
                });
            }
            x = x_next;
        }
        trace.outer.push(x.clone());
        trace.outer_f.push(f.value(&x));
    }
    Ok(trace)
}

fn guard_finite(
    x: &[f64],
    epoch: usize,
    inner: usize,
    last_finite: &[f64],
) -> Result<(), MethodError> {
    if !all_finite(x) {
        return Err(MethodError::Divergence {
            epoch,
            inner,
            reason: "non-finite iterate".into(),
            last_finite: last_finite.to_vec(),
        });
    }
    if norm(x) > DIVERGENCE_RADIUS {
        return Err(MethodError::Divergence {
            epoch,
            inner,
            reason: format!("iterate norm exceeds {DIVERGENCE_RADIUS}"),
            last_finite: last_finite.to_vec(),
        });
    }
    Ok(())
}

struct DisplacementChecker {
    enabled: bool,
    radius: f64,
    delta_prime: f64,
    selection_bound: f64,
    premise_holds: bool,
    max_ratio: f64,
    violations: usize,
    suspended: usize,
    fail_fast: bool,
}

impl DisplacementChecker {
    fn new(f: &SumFunction, params: &MomentumParams, opts: &RunOptions) -> Self {
        match opts.displacement_ball {
            None => DisplacementChecker {
                enabled: false,
                radius: 0.0,
                delta_prime: 0.0,
                selection_bound: 0.0,
                premise_holds: false,
                max_ratio: 0.0,
                violations: 0,
                suspended: 0,
                fail_fast: false,
            },
            Some(r) => {
                let bound = selection_norm_bound(f, r).max(params.delta);
                DisplacementChecker {
                    enabled: true,
                    radius: r,
                    delta_prime: bound / (1.0 - params.beta.abs()),
                    selection_bound: bound,
                    premise_holds: true,
                    max_ratio: 0.0,
                    violations: 0,
                    suspended: 0,
                    fail_fast: opts.fail_on_displacement,
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn observe(
        &mut self,
        epoch: usize,
        inner: usize,
        x_next: &[f64],
        x: &[f64],
        y: &[f64],
        _s: &[f64],
        alpha: f64,
    ) -> Result<(), MethodError> {
        if !self.enabled {
            return Ok(());
        }
        if norm(y) > self.radius {
            self.premise_holds = false;
        }
        if !self.premise_holds {
            self.suspended += 1;
            return Ok(());
        }
        let step = dist(x_next, x);
        self.max_ratio = self.max_ratio.max(step / alpha);
        let bound = self.delta_prime * alpha;
        if step > bound * (1.0 + 1e-12) {
            self.violations += 1;
            if self.fail_fast {
                return Err(MethodError::DisplacementBound { epoch, inner, step, bound });
            }
        }
        Ok(())
    }

    fn finish(self) -> Option<DisplacementCheck> {
        if self.enabled {
            Some(DisplacementCheck {
                radius: self.radius,
                selection_bound: self.selection_bound,
                delta_prime: self.delta_prime,
                max_step_over_alpha: self.max_ratio,
                violations: self.violations,
                suspended_steps: self.suspended,
            })
        } else {
            None
        }
    }
}

/// Empirical bound on `max_i sup { ||s|| : s in ∂f_i(y), ||y|| <= r }` by
/// deterministic dense sampling (interior lattice plus boundary rays), with
/// a 2% inflation for the sampling gap.
pub fn selection_norm_bound(f: &SumFunction, r: f64) -> f64 {
    let n = f.dim();
    let rule = SelectionRule::default();
    let mut best = 0.0_f64;
    let mut rng = ChaCha12Rng::seed_from_u64(0x5EED_0BAD_CAFE_F00D);
    let samples = 4000;
    let mut y = vec![0.0; n];
    for k in 0..samples {
        let mut nn = 0.0;
        for v in y.iter_mut() {
            *v = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
            nn += *v * *v;
        }
        nn = nn.sqrt();
        if nn < 1e-9 {
            continue;
        }
        // Alternate interior points and boundary points; suprema of the
        // selection norm live on the boundary for the polynomial kinks here.
        let target = if k % 2 == 0 { r } else { r * ((k as f64 + 0.5) / samples as f64) };
        for v in y.iter_mut() {
            *v *= target / nn;
        }
        for c in f.components() {
            let s = subdiff::clarke_select(c, &y, &rule);
            best = best.max(norm(&s));
        }
    }
    best * 1.02
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn single(text: &str, n: usize) -> SumFunction {
        SumFunction::single(parse(text, n).unwrap(), n).unwrap()
    }

    fn rule() -> SelectionRule {
        SelectionRule::default()
    }

    #[test]
    fn momentum_plain_gradient_step() {
        let f = single("0.5*x1^2", 1);
        let p = MomentumParams::new(0.1, 0.0, 0.0, vec![1.0]);
        let t = run_momentum(&f, &p, &rule(), 1).unwrap();
        assert_eq!(t.outer[1], vec![1.0 - 0.1]);
    }

    #[test]
    fn momentum_recurrence_matches_oracle() {
        // x_{k+1} = x_k + beta (x_k - x_{k-1}) - alpha x_k on f = x^2/2.
        let f = single("0.5*x1^2", 1);
        let p = MomentumParams::new(0.1, 0.5, 0.0, vec![1.0]);
        let t = run_momentum(&f, &p, &rule(), 2).unwrap();
        assert_eq!(t.outer[1], vec![0.9]);
        let expected = 0.9 + 0.5 * (0.9 - 1.0) - 0.1 * 0.9;
        assert_eq!(t.outer[2], vec![expected]);
        assert!((expected - 0.76).abs() < 1e-15);
    }

    #[test]
    fn momentum_on_remark4_sum_moves_by_one_third_step() {
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
        let p = MomentumParams::new(0.3, 0.0, 0.0, vec![0.0]);
        let t = run_momentum(&f, &p, &SelectionRule::mean(), 1).unwrap();
        assert_eq!(t.outer[1], vec![-0.3 * (1.0 / 3.0)]);
    }

    #[test]
    fn reshuffled_with_single_component_reduces_to_momentum() {
        let f = single("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2);
        let p = MomentumParams::new(0.01, 0.5, 0.3, vec![-1.8, -1.7]);
        let stream = PermutationStream::new(42);
        let a = run_momentum(&f, &p, &rule(), 1000).unwrap();
        let b = run_reshuffled_momentum(&f, &p, &rule(), &stream, 1000).unwrap();
        assert_eq!(a.outer, b.outer);
    }

    #[test]
    fn vanilla_momentum_matches_hand_rolled_subgradient_loop() {
        let f = single("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2);
        let p = MomentumParams::new(0.01, 0.0, 0.0, vec![-1.8, -1.7]);
        let t = run_momentum(&f, &p, &rule(), 1000).unwrap();

        let mut x = vec![-1.8, -1.7];
        for k in 0..1000 {
            let s = subdiff::select_sum(&f, &x, &rule());
            for j in 0..2 {
                x[j] += 0.0 * (x[j] - x[j]) - 0.01 * s[j];
            }
            assert_eq!(t.outer[k + 1], x, "diverged from hand loop at step {k}");
        }
    }

    #[test]
    fn reshuffled_remark4_stays_at_zero_with_zero_biased_rule() {
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
        let p = MomentumParams::new(0.25, 0.4, 0.3, vec![0.0]);
        let stream = PermutationStream::new(7);
        let t = run_reshuffled_momentum(&f, &p, &SelectionRule::zero_biased(), &stream, 50)
            .unwrap();
        for x in &t.outer {
            assert_eq!(x, &vec![0.0]);
        }
        for s in &t.steps {
            assert_eq!(s.x, vec![0.0]);
        }
    }

    #[test]
    fn reshuffled_two_identical_quadratics() {
        let f = SumFunction::new(
            vec![parse("0.5*x1^2", 1).unwrap(), parse("0.5*x1^2", 1).unwrap()],
            1,
            true,
        )
        .unwrap();
        let p = MomentumParams::new(0.1, 0.0, 0.0, vec![1.0]);
        for seed in [1, 2, 3] {
            let t =
                run_reshuffled_momentum(&f, &p, &rule(), &PermutationStream::new(seed), 1)
                    .unwrap();
            assert!((t.outer[1][0] - 0.81).abs() < 1e-15);
        }
    }

    #[test]
    fn cd_separable_quadratic() {
        let f = single("0.5*x1^2+0.5*x2^2", 2);
        for seed in [0, 1] {
            let t = run_cyclic_cd(
                &f,
                0.1,
                &[1.0, 1.0],
                &rule(),
                &PermutationStream::new(seed),
                1,
                false,
            )
            .unwrap();
            assert_eq!(t.outer[1], vec![0.9, 0.9]);
        }
    }

    #[test]
    fn cd_rejects_nonsmooth_without_flag() {
        let f = single("max(abs(x1),abs(x2))", 2);
        let r = run_cyclic_cd(&f, 0.1, &[1.0, 1.0], &rule(), &PermutationStream::new(0), 1, false);
        assert!(matches!(r, Err(MethodError::SmoothnessRequired)));
    }

    #[test]
    fn cd_sticks_at_linf_corner() {
        let f = single("max(abs(x1),abs(x2))", 2);
        let t = run_cyclic_cd(
            &f,
            0.1,
            &[1.0, 1.0],
            &SelectionRule::zero_biased(),
            &PermutationStream::new(3),
            100,
            true,
        )
        .unwrap();
        for x in &t.outer {
            assert_eq!(x, &vec![1.0, 1.0]);
        }
    }

    #[test]
    fn cd_stays_at_c1_minimum() {
        let f = single("abs(x1^2-1)^(3/2)+2*abs(x1*x2+1)^(3/2)+abs(x2^2-1)^(3/2)", 2);
        let t = run_cyclic_cd(
            &f,
            0.05,
            &[1.0, -1.0],
            &rule(),
            &PermutationStream::new(11),
            50,
            false,
        )
        .unwrap();
        for x in &t.outer {
            assert_eq!(x, &vec![1.0, -1.0]);
        }
    }

    #[test]
    fn permutations_are_deterministic_per_seed_and_epoch() {
        let s = PermutationStream::new(123);
        assert_eq!(s.permutation(5, 7), s.permutation(5, 7));
        assert_ne!(s.permutation(5, 7), s.permutation(6, 7));
        let other = PermutationStream::new(124);
        assert_ne!(s.permutation(5, 7), other.permutation(5, 7));
    }

    #[test]
    fn permutation_distribution_is_uniform() {
        // N = 4 has 24 permutations; chi-square against uniform over 1e4
        // epochs must stay below the 0.99 quantile of chi2(23) = 41.638.
        let s = PermutationStream::new(2024);
        let mut counts = std::collections::HashMap::new();
        let epochs = 10_000;
        for k in 0..epochs {
            let p = s.permutation(k, 4);
            *counts.entry(p).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let expect = epochs as f64 / 24.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        assert!(chi2 < 41.638, "chi-square statistic {chi2} too large");
    }

    #[test]
    fn divergence_is_detected() {
        let f = single("0.5*x1^2", 1);
        let p = MomentumParams::new(3.0, 0.0, 0.0, vec![1.0]);
        match run_momentum(&f, &p, &rule(), 200) {
            Err(MethodError::Divergence { last_finite, .. }) => {
                assert!(all_finite(&last_finite));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_initial_pair_is_rejected() {
        let f = single("0.5*x1^2", 1);
        let p = MomentumParams::new(0.1, 0.0, 0.0, vec![1.0]).with_prev(vec![2.0], 1.0);
        assert!(matches!(
            run_momentum(&f, &p, &rule(), 1),
            Err(MethodError::BadParams(_))
        ));
    }

    #[test]
    fn displacement_check_passes_on_quadratic() {
        let f = single("0.5*x1^2", 1);
        let p = MomentumParams::new(0.1, 0.5, 0.0, vec![1.0]);
        let opts = RunOptions {
            displacement_ball: Some(4.0),
            fail_on_displacement: true,
            ..RunOptions::default()
        };
        let t = run_momentum_opts(&f, &p, &rule(), 100, &opts).unwrap();
        let d = t.displacement.unwrap();
        assert_eq!(d.violations, 0);
        assert!(d.max_step_over_alpha <= d.delta_prime);
    }

    #[test]
    fn trace_self_check_holds() {
        let f = single("abs(x1^2-1)+2*abs(x1*x2+1)+abs(x2^2-1)", 2);
        let p = MomentumParams::new(0.01, 0.4, 0.0, vec![-1.8, -1.7]);
        let t = run_reshuffled_momentum(&f, &p, &rule(), &PermutationStream::new(1), 20).unwrap();
        assert!(t.self_check(&f));
        // Outer iterate k+1 equals the last inner iterate of epoch k.
        for k in 0..t.epochs() {
            let last_inner = t
                .steps
                .iter()
                .filter(|s| s.epoch == k)
                .last()
                .unwrap();
            assert_eq!(&t.outer[k + 1], &last_inner.x);
        }
    }
}
