//! Named, runnable property checks over solver outputs.
//!
//! Each check turns one provable statement about the continuous problem —
//! the exponential a priori bound, the submartingale construction behind it,
//! the comparison theorem, monotone convergence of inf-convolution
//! regularizations, integrability of the jump field, Lipschitz continuity of
//! the constraint-level operator — into an inequality evaluated on exact
//! lattice laws (Monte Carlo only where a path functional forces it) with an
//! explicit tolerance. Reports carry the worst margin and its location, so a
//! failure names the node that broke the estimate.
//!
//! The harness is expected to *detect* violations, not only certify: the
//! constructed fixtures (understated Lipschitz constants, doctored
//! compensators) must fail their checks.

use crate::drivers::{inf_convolution, Driver, GrowthParams, SearchSpec, TerminalCondition};
use crate::lattice::{
    self, kernel_targets, LatticeDriver, SolveOptions, StateSpace, TimeGrid, ValueField,
};
use crate::mpp::{self, CompensatorSpec};
use crate::numeric::{ksum, KahanSum, LogSumExp};
use crate::reflection::{operator_l, LossFunction};
use crate::{parallel, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Outcome of one named check. `pass` iff `worst_margin ≤ tolerance`
/// (margins are violation-positive), plus the offending `(layer, state)`
/// node where one exists and per-layer curves for plotting.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub location: Option<(usize, usize)>,
    pub params: Vec<(String, f64)>,
    pub curve: Option<Vec<f64>>,
}

impl CheckReport {
    fn judge(mut self) -> Self {
        self.pass = self.worst_margin <= self.tolerance && self.worst_margin.is_finite();
        self
    }
}

/// The terminal-and-running-cost majorant
/// `Ξ(p, α, β) = E[exp(pλ·e^{βA_T}|ξ| + pλ·∫_0^T e^{βA_s} α_s dA_s)]`,
/// evaluated exactly (log domain, per-mark Poisson summation).
#[derive(Clone, Debug, Serialize)]
pub struct XiBound {
    pub p: f64,
    pub growth: GrowthParams,
    pub value: f64,
    pub log_value: f64,
}

/// Exact evaluation of `Ξ(p, α, β)` for a terminal condition on the lattice.
pub fn xi_bound(
    p: f64,
    growth: &GrowthParams,
    spec: &CompensatorSpec,
    xi: &TerminalCondition,
) -> Result<XiBound> {
    if !(p >= 1.0) {
        return Err(Error::Validation(format!("moment order p must be ≥ 1, got {p}")));
    }
    let lam = growth.lambda;
    let wfac = p * lam * (growth.beta * spec.a_total()).exp();
    let det = p * lam * growth.alpha.exp_weighted_integral(spec.clock(), growth.beta, 0.0, spec.horizon());
    let log_value = det
        + lattice::conditional_log_moment(
            spec,
            &|c: &[u32]| wfac * xi.eval(c).abs(),
            0.0,
            &vec![0u32; spec.k()],
        )?;
    Ok(XiBound { p, growth: growth.clone(), value: log_value.exp(), log_value })
}

/// Exponential a priori bound on the value field:
/// `exp(pλ|y(i,n)|) ≤ E[exp(pλ e^{βA_T}|ξ| + pλ∫_{t_i}^T e^{βA_s}α_s dA_s) | N_{t_i} = n]·(1+slack)`
/// at every lattice node and every `p` in `p_list`. The right side is
/// evaluated by exact conditional Poisson summation, independent of the
/// solver; margins are log-scale (`log LHS − log RHS`).
pub fn check_apriori_y(
    spec: &CompensatorSpec,
    field: &ValueField,
    xi: &TerminalCondition,
    growth: &GrowthParams,
    p_list: &[f64],
    slack: f64,
) -> Result<CheckReport> {
    if p_list.is_empty() {
        return Err(Error::Validation("p_list must not be empty".into()));
    }
    if !(slack > 0.0) {
        return Err(Error::Validation(format!("slack must be positive, got {slack}")));
    }
    let grid = field.grid();
    let states = field.states();
    let lam = growth.lambda;
    let beta = growth.beta;
    let wfac_base = lam * (beta * spec.a_total()).exp();
    let layers = grid.layers();
    let n_states = states.len();
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    let mut curve = vec![f64::NEG_INFINITY; layers];
    let mut params: Vec<(String, f64)> =
        p_list.iter().enumerate().map(|(i, &p)| (format!("p{i}"), p)).collect();
    params.push(("slack".into(), slack));
    params.push(("lambda".into(), lam));
    params.push(("beta".into(), beta));
    for &p in p_list {
        let margins: Vec<Result<f64>> = parallel::map_indexed(layers * n_states, |idx| {
            let (i, s) = (idx / n_states, idx % n_states);
            let t = grid.time(i);
            let det = p * lam
                * growth.alpha.exp_weighted_integral(spec.clock(), beta, t, spec.horizon());
            let log_rhs = det
                + lattice::conditional_log_moment(
                    spec,
                    &|c: &[u32]| p * wfac_base * xi.eval(c).abs(),
                    t,
                    states.counts(s),
                )?;
            Ok(p * lam * field.y(i, s).abs() - log_rhs)
        });
        for (idx, m) in margins.into_iter().enumerate() {
            let m = m?;
            let (i, s) = (idx / n_states, idx % n_states);
            curve[i] = curve[i].max(m);
            if m > worst {
                worst = m;
                at = (i, s);
            }
        }
    }
    Ok(CheckReport {
        name: "apriori_y".into(),
        pass: false,
        worst_margin: worst,
        tolerance: slack.ln_1p(),
        location: Some(at),
        params,
        curve: Some(curve),
    }
    .judge())
}

/// One-step submartingale property of `exp(p·G)` with
/// `G_t = e^{βA_t}·λ|y_t| + λ∫_0^t e^{βA_s} α_s dA_s`: at every node, the
/// renormalized one-step conditional expectation must not fall below the
/// current value by more than `tol` (log-scale margins).
pub fn check_submartingale(
    spec: &CompensatorSpec,
    field: &ValueField,
    growth: &GrowthParams,
    p: f64,
    opts: &SolveOptions,
    tol: f64,
) -> Result<CheckReport> {
    if !(p >= 1.0) {
        return Err(Error::Validation(format!("moment order p must be ≥ 1, got {p}")));
    }
    let grid = field.grid();
    let states = field.states();
    let lam = growth.lambda;
    let beta = growth.beta;
    let layers = grid.layers();
    // pG per layer/state, in log scale directly.
    let pg: Vec<Vec<f64>> = (0..layers)
        .map(|i| {
            let t = grid.time(i);
            let w = (beta * spec.a(t)).exp();
            let run =
                lam * growth.alpha.exp_weighted_integral(spec.clock(), beta, 0.0, t);
            (0..states.len())
                .map(|s| p * (w * lam * field.y(i, s).abs() + run))
                .collect()
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    let mut curve = Vec::with_capacity(layers - 1);
    for i in 0..layers - 1 {
        let kernel =
            lattice::transition_kernel(spec, grid.time(i), grid.time(i + 1), opts.j_max, opts.tail_tol)?;
        let targets = kernel_targets(&kernel, states);
        let next = &pg[i + 1];
        let margins: Vec<f64> = parallel::map_indexed(states.len(), |s| {
            let mut num = LogSumExp::new();
            let mut mass = KahanSum::new();
            for (j, &tgt) in targets[s].iter().enumerate() {
                if tgt >= 0 && kernel.probs[j] > 0.0 {
                    num.add(kernel.probs[j].ln() + next[tgt as usize]);
                    mass.add(kernel.probs[j]);
                }
            }
            let log_e = num.value() - mass.value().ln();
            pg[i][s] - log_e
        });
        let mut layer_worst = f64::NEG_INFINITY;
        for (s, &m) in margins.iter().enumerate() {
            layer_worst = layer_worst.max(m);
            if m > worst {
                worst = m;
                at = (i, s);
            }
        }
        curve.push(layer_worst);
    }
    Ok(CheckReport {
        name: "submartingale".into(),
        pass: false,
        worst_margin: worst,
        tolerance: tol,
        location: Some(at),
        params: vec![("p".into(), p), ("lambda".into(), lam), ("beta".into(), beta)],
        curve: Some(curve),
    }
    .judge())
}

/// Comparison theorem: with `f ≤ f'` (sampled) and `ξ ≤ ξ'` (checked on all
/// lattice states), the solved fields must satisfy `y ≤ y' + tol` nodewise.
/// An unmet hypothesis is reported (`hypothesis_ok = 0`), not asserted.
#[allow(clippy::too_many_arguments)]
pub fn check_comparison(
    spec: &CompensatorSpec,
    d1: &Driver,
    xi1: &TerminalCondition,
    d2: &Driver,
    xi2: &TerminalCondition,
    grid: &TimeGrid,
    opts: &SolveOptions,
    tol: f64,
) -> Result<CheckReport> {
    // Hypothesis f ≤ f' on a deterministic sample cloud.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0_1417);
    let k = spec.k();
    let mut hyp_violation = f64::NEG_INFINITY;
    for _ in 0..512 {
        let t = rng.gen::<f64>() * spec.horizon();
        let y = (rng.gen::<f64>() * 2.0 - 1.0) * 3.0;
        let u: Vec<f64> = (0..k).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * 3.0).collect();
        let phi = spec.phi_at(t);
        hyp_violation = hyp_violation.max(d1.eval(t, y, &u, phi) - d2.eval(t, y, &u, phi));
    }
    let states = StateSpace::new(k, opts.n_max)?;
    for s in 0..states.len() {
        let c = states.counts(s);
        hyp_violation = hyp_violation.max(xi1.eval(c) - xi2.eval(c));
    }
    let hypothesis_ok = hyp_violation <= 1e-12;
    if !hypothesis_ok {
        return Ok(CheckReport {
            name: "comparison".into(),
            pass: false,
            worst_margin: hyp_violation,
            tolerance: tol,
            location: None,
            params: vec![("hypothesis_ok".into(), 0.0)],
            curve: None,
        });
    }
    let lo = lattice::solve_backward(spec, d1, xi1, grid, opts)?;
    let hi = lattice::solve_backward(spec, d2, xi2, grid, opts)?;
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    let mut curve = vec![f64::NEG_INFINITY; grid.layers()];
    for i in 0..grid.layers() {
        for s in 0..states.len() {
            let m = lo.y(i, s) - hi.y(i, s);
            curve[i] = curve[i].max(m);
            if m > worst {
                worst = m;
                at = (i, s);
            }
        }
    }
    Ok(CheckReport {
        name: "comparison".into(),
        pass: false,
        worst_margin: worst,
        tolerance: tol,
        location: Some(at),
        params: vec![("hypothesis_ok".into(), 1.0)],
        curve: Some(curve),
    }
    .judge())
}

/// Generator regularized by inf-convolution at a fixed Lipschitz budget.
struct RegularizedDriver<'a> {
    inner: &'a Driver,
    n: f64,
    search: SearchSpec,
}

impl LatticeDriver for RegularizedDriver<'_> {
    fn eval(
        &self,
        _layer: usize,
        _state: usize,
        t: f64,
        _counts: &[u32],
        y: f64,
        u: &[f64],
        phi: &[f64],
    ) -> f64 {
        inf_convolution(self.inner, self.n, t, y, u, phi, &self.search)
            .expect("inputs validated before the solve")
            .value
    }

    fn lipschitz_y(&self) -> f64 {
        self.inner.growth().beta
    }
}

/// Monotone convergence of the inf-convolution regularizations: solved
/// fields `y^n` must be nondecreasing in `n` at every node (within the
/// search tolerance), with `‖y^{n_last} − y‖_∞ < ‖y^{n_first} − y‖_∞`.
pub fn check_monotone_regularization(
    spec: &CompensatorSpec,
    d: &Driver,
    xi: &TerminalCondition,
    n_list: &[f64],
    grid: &TimeGrid,
    opts: &SolveOptions,
    search: &SearchSpec,
) -> Result<CheckReport> {
    if n_list.len() < 2 {
        return Err(Error::Validation("n_list needs at least two Lipschitz budgets".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("n_list must be strictly increasing".into()));
    }
    if d.convexity() != crate::drivers::Convexity::ConvexInU {
        return Err(Error::Validation(
            "inf-convolution regularization needs a convex generator".into(),
        ));
    }
    if n_list[0] <= d.growth().c0 {
        return Err(Error::Validation(format!(
            "smallest budget {} must exceed the generator's C0 = {}",
            n_list[0],
            d.growth().c0
        )));
    }
    let base = lattice::solve_backward(spec, d, xi, grid, opts)?;
    let mut fields = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let reg = RegularizedDriver { inner: d, n, search: *search };
        fields.push(lattice::solve_backward(spec, &reg, xi, grid, opts)?);
    }
    let mut worst = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    for w in fields.windows(2) {
        for i in 0..grid.layers() {
            for s in 0..base.states().len() {
                let m = w[0].y(i, s) - w[1].y(i, s);
                if m > worst {
                    worst = m;
                    at = (i, s);
                }
            }
        }
    }
    let gaps: Vec<f64> = fields
        .iter()
        .map(|f| {
            let mut g = 0.0f64;
            for i in 0..grid.layers() {
                for s in 0..base.states().len() {
                    g = g.max((f.y(i, s) - base.y(i, s)).abs());
                }
            }
            g
        })
        .collect();
    let shrinks = gaps[gaps.len() - 1] < gaps[0] || gaps[0] <= search.tol;
    let mut report = CheckReport {
        name: "monotone_regularization".into(),
        pass: false,
        worst_margin: worst,
        tolerance: search.tol,
        location: Some(at),
        params: n_list.iter().enumerate().map(|(i, &n)| (format!("n{i}"), n)).collect(),
        curve: Some(gaps),
    }
    .judge();
    report.pass = report.pass && shrinks;
    Ok(report)
}

/// Lipschitz continuity of the constraint-level operator in the law:
/// `|L_t(η) − L_t(η')| ≤ κ·E|η − η'| + 2·bisect_tol` over randomized
/// coupled discrete law pairs on a shared support.
pub fn check_l_lipschitz(
    loss: &LossFunction,
    trials: usize,
    seed: u64,
    bisect_tol: f64,
) -> Result<CheckReport> {
    if trials == 0 {
        return Err(Error::Validation("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Trial {
        t: f64,
        probs: Vec<f64>,
        v1: Vec<f64>,
        v2: Vec<f64>,
    }
    let mut cases = Vec::with_capacity(trials);
    for _ in 0..trials {
        let m = 2 + (rng.gen::<u32>() % 6) as usize;
        let t = rng.gen::<f64>();
        let raw: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let tot = ksum(raw.iter().copied());
        let probs: Vec<f64> = raw.iter().map(|r| r / tot).collect();
        let v1: Vec<f64> = (0..m).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * 3.0).collect();
        let v2: Vec<f64> =
            v1.iter().map(|v| v + (rng.gen::<f64>() * 2.0 - 1.0)).collect();
        cases.push(Trial { t, probs, v1, v2 });
    }
    let kappa = loss.kappa();
    let margins: Vec<Result<f64>> = parallel::map_indexed(cases.len(), |i| {
        let c = &cases[i];
        let l1 = operator_l(loss, c.t, &c.v1, &c.probs, bisect_tol)?;
        let l2 = operator_l(loss, c.t, &c.v2, &c.probs, bisect_tol)?;
        let dist = ksum(
            c.v1.iter().zip(&c.v2).zip(&c.probs).map(|((a, b), p)| p * (a - b).abs()),
        );
        Ok((l1 - l2).abs() - kappa * dist - 2.0 * bisect_tol)
    });
    let mut worst = f64::NEG_INFINITY;
    let mut at = 0usize;
    for (i, m) in margins.into_iter().enumerate() {
        let m = m?;
        if m > worst {
            worst = m;
            at = i;
        }
    }
    Ok(CheckReport {
        name: "l_lipschitz".into(),
        pass: false,
        worst_margin: worst,
        tolerance: 0.0,
        location: Some((0, at)),
        params: vec![("trials".into(), trials as f64), ("kappa".into(), kappa)],
        curve: None,
    }
    .judge())
}

/// The six jump-field integrability functionals at one grid resolution:
/// `E[(∫∫|U|²φdA)^{1/2}]`, `E[∫∫|U|²φdA]`, and `E[(∫∫(e^{qλ|U|}−1)²φdA)^p]`
/// for `p, q ∈ {1, 2}`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct UFunctionals {
    pub sqrt_quadratic: f64,
    pub quadratic: f64,
    pub exp_q1: f64,
    pub exp_q2: f64,
    pub exp_q1_sq: f64,
    pub exp_q2_sq: f64,
}

impl UFunctionals {
    fn as_array(&self) -> [f64; 6] {
        [
            self.sqrt_quadratic,
            self.quadratic,
            self.exp_q1,
            self.exp_q2,
            self.exp_q1_sq,
            self.exp_q2_sq,
        ]
    }
}

/// Second moment `E[(Σ_i c_i(X_i))²]` of an additive path functional over
/// the layer chain, by exact forward propagation of `(P, S₁, S₂)` with the
/// same renormalized kernels as the solver.
fn additive_second_moment(
    spec: &CompensatorSpec,
    grid: &TimeGrid,
    states: &StateSpace,
    coef: &[Vec<f64>],
    opts: &SolveOptions,
) -> Result<f64> {
    let n = grid.steps();
    let m = states.len();
    let mut p = vec![0.0f64; m];
    let mut s1 = vec![0.0f64; m];
    let mut s2 = vec![0.0f64; m];
    p[0] = 1.0;
    for i in 0..n {
        for s in 0..m {
            if p[s] == 0.0 && s1[s] == 0.0 && s2[s] == 0.0 {
                continue;
            }
            let c = coef[i][s];
            s2[s] += 2.0 * c * s1[s] + c * c * p[s];
            s1[s] += c * p[s];
        }
        let kernel =
            lattice::transition_kernel(spec, grid.time(i), grid.time(i + 1), opts.j_max, opts.tail_tol)?;
        let targets = kernel_targets(&kernel, states);
        let mut np = vec![0.0f64; m];
        let mut ns1 = vec![0.0f64; m];
        let mut ns2 = vec![0.0f64; m];
        for s in 0..m {
            if p[s] == 0.0 && s1[s] == 0.0 && s2[s] == 0.0 {
                continue;
            }
            for (j, &tgt) in targets[s].iter().enumerate() {
                if tgt >= 0 {
                    let w = kernel.probs[j];
                    let tgt = tgt as usize;
                    np[tgt] += w * p[s];
                    ns1[tgt] += w * s1[s];
                    ns2[tgt] += w * s2[s];
                }
            }
        }
        let mass = ksum(np.iter().copied());
        for s in 0..m {
            np[s] /= mass;
            ns1[s] /= mass;
            ns2[s] /= mass;
        }
        p = np;
        s1 = ns1;
        s2 = ns2;
    }
    Ok(ksum(s2.iter().copied()))
}

/// Evaluate the six functionals for a solved field: linear-in-law values by
/// exact marginal summation, second moments by the `(P, S₁, S₂)` recursion,
/// and the square-root functional by seeded Monte Carlo over `mc_paths`
/// paths (the one genuinely non-polynomial path functional).
pub fn u_functionals(
    spec: &CompensatorSpec,
    field: &ValueField,
    lam: f64,
    opts: &SolveOptions,
    mc_paths: usize,
    seed: u64,
) -> Result<UFunctionals> {
    if mc_paths == 0 {
        return Err(Error::Validation("need at least one path for the MC functional".into()));
    }
    let grid = field.grid();
    let states = field.states();
    let k = states.k();
    let n = grid.steps();
    let m = states.len();
    // Per-step, per-state additive coefficients.
    let mut quad = vec![vec![0.0f64; m]; n];
    let mut exp1 = vec![vec![0.0f64; m]; n];
    let mut exp2 = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        let phi = spec.phi_at(grid.time(i));
        let da = grid.da(i);
        for s in 0..m {
            let mut cq = KahanSum::new();
            let mut c1 = KahanSum::new();
            let mut c2 = KahanSum::new();
            for e in 0..k {
                if phi[e] == 0.0 {
                    continue;
                }
                let u = field.u(i, s, e);
                cq.add(phi[e] * u * u);
                let g1 = (lam * u.abs()).exp_m1();
                let g2 = (2.0 * lam * u.abs()).exp_m1();
                c1.add(phi[e] * g1 * g1);
                c2.add(phi[e] * g2 * g2);
            }
            quad[i][s] = cq.value() * da;
            exp1[i][s] = c1.value() * da;
            exp2[i][s] = c2.value() * da;
        }
    }
    let law = lattice::forward_law(spec, grid, states.n_max(), opts.j_max, opts.tail_tol)?;
    let linear = |coef: &[Vec<f64>]| -> f64 {
        let mut acc = KahanSum::new();
        for i in 0..n {
            let probs = law.layer(i);
            for s in 0..m {
                if probs[s] != 0.0 {
                    acc.add(probs[s] * coef[i][s]);
                }
            }
        }
        acc.value()
    };
    let quadratic = linear(&quad);
    let exp_q1 = linear(&exp1);
    let exp_q2 = linear(&exp2);
    let exp_q1_sq = additive_second_moment(spec, grid, states, &exp1, opts)?;
    let exp_q2_sq = additive_second_moment(spec, grid, states, &exp2, opts)?;
    // E[√∫∫|U|²φdA] by common-seed Monte Carlo.
    let sums: Vec<Result<f64>> = parallel::map_indexed(mc_paths, |ip| {
        let path = mpp::simulate_path(spec, seed + ip as u64);
        let mut counts = vec![0u32; k];
        let mut next_event = 0usize;
        let mut state = 0usize;
        let mut acc = KahanSum::new();
        for i in 0..n {
            let t = grid.time(i);
            let mut moved = false;
            while next_event < path.events.len() && path.events[next_event].time <= t {
                counts[path.events[next_event].mark] += 1;
                next_event += 1;
                moved = true;
            }
            if moved {
                state = states.index_of(&counts).ok_or(Error::StateOverflow {
                    layer: i,
                    count: counts.iter().sum(),
                    n_max: states.n_max(),
                })? as usize;
            }
            acc.add(quad[i][state]);
        }
        Ok(acc.value().max(0.0).sqrt())
    });
    let mut total = KahanSum::new();
    for s in sums {
        total.add(s?);
    }
    Ok(UFunctionals {
        sqrt_quadratic: total.value() / mc_paths as f64,
        quadratic,
        exp_q1,
        exp_q2,
        exp_q1_sq,
        exp_q2_sq,
    })
}

/// Integrability and grid stability of the jump-field functionals: all six
/// values must be finite on every grid in `grid_steps`, and the relative
/// change between consecutive grids must stay within `rel_tol`.
#[allow(clippy::too_many_arguments)]
pub fn check_apriori_u(
    spec: &CompensatorSpec,
    d: &Driver,
    xi: &TerminalCondition,
    grid_steps: &[usize],
    opts: &SolveOptions,
    mc_paths: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<CheckReport> {
    if grid_steps.len() < 2 {
        return Err(Error::Validation("need at least two grids for a stability check".into()));
    }
    let lam = d.growth().lambda;
    let mut all = Vec::with_capacity(grid_steps.len());
    for &steps in grid_steps {
        let grid = TimeGrid::uniform(spec, steps)?;
        let field = lattice::solve_backward(spec, d, xi, &grid, opts)?;
        all.push(u_functionals(spec, &field, lam, opts, mc_paths, seed)?);
    }
    let mut worst = f64::NEG_INFINITY;
    let mut at = 0usize;
    for w in all.windows(2) {
        let (a, b) = (w[0].as_array(), w[1].as_array());
        for (j, (&va, &vb)) in a.iter().zip(b.iter()).enumerate() {
            if !va.is_finite() || !vb.is_finite() {
                worst = f64::INFINITY;
                at = j;
                continue;
            }
            let scale = vb.abs().max(va.abs());
            let rel = if scale > 1e-300 { (va - vb).abs() / scale } else { 0.0 };
            let m = rel - rel_tol;
            if m > worst {
                worst = m;
                at = j;
            }
        }
    }
    let curve: Vec<f64> = all.iter().flat_map(|u| u.as_array()).collect();
    Ok(CheckReport {
        name: "apriori_u".into(),
        pass: false,
        worst_margin: worst,
        tolerance: 0.0,
        location: Some((0, at)),
        params: vec![
            ("lambda".into(), lam),
            ("rel_tol".into(), rel_tol),
            ("mc_paths".into(), mc_paths as f64),
        ],
        curve: Some(curve),
    }
    .judge())
}

/// A deferred named check, runnable in parallel with its peers.
pub type SuiteJob = Box<dyn Fn() -> Result<CheckReport> + Send + Sync>;

/// Run independent checks in parallel and return the reports sorted by
/// check name (deterministic merge order regardless of scheduling).
pub fn run_suite(jobs: Vec<(String, SuiteJob)>) -> Result<Vec<CheckReport>> {
    let results: Vec<Result<CheckReport>> =
        parallel::map_indexed(jobs.len(), |i| (jobs[i].1)());
    let mut reports = Vec::with_capacity(results.len());
    for (r, (name, _)) in results.into_iter().zip(&jobs) {
        let mut rep = r?;
        if rep.name.is_empty() {
            rep.name = name.clone();
        }
        reports.push(rep);
    }
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{clamp_terminal, AlphaSchedule, Convexity};
    use crate::mpp::{Clock, MarkSpace, PhiSegment};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn unit_spec() -> CompensatorSpec {
        CompensatorSpec::new(
            MarkSpace::new(vec!["e1"]).unwrap(),
            vec![PhiSegment { from: 0.0, probs: vec![1.0] }],
            Clock::new(vec![(0.0, 0.0), (1.0, 1.0)]).unwrap(),
            None,
            1.0,
        )
        .unwrap()
    }

    fn indicator_terminal() -> TerminalCondition {
        TerminalCondition::new(
            "at-least-one-jump",
            Arc::new(|c: &[u32]| if c.iter().sum::<u32>() >= 1 { 1.0 } else { 0.0 }),
            Some(1.0),
        )
    }

    fn understated_beta_driver() -> Driver {
        // True dynamics f = y (β = 1), declared growth says β = 0.1.
        Driver::lipschitz_linear(1.0, 0.0).unwrap().with_growth(
            GrowthParams::new(AlphaSchedule::constant(0.0), 0.1, 1.0, 0.0).unwrap(),
        )
    }

    #[test]
    fn xi_bound_examples() {
        let spec = unit_spec();
        let growth = Driver::zero().growth().clone();
        let zero_xi = TerminalCondition::new("zero", Arc::new(|_: &[u32]| 0.0), Some(0.0));
        let b = xi_bound(1.0, &growth, &spec, &zero_xi).unwrap();
        assert_eq!(b.value, 1.0);

        let xi = indicator_terminal();
        let b1 = xi_bound(1.0, &growth, &spec, &xi).unwrap();
        let expect = (-1.0f64).exp() + (1.0 - (-1.0f64).exp()) * 1.0f64.exp();
        assert_relative_eq!(b1.value, expect, epsilon = 1e-12);
        assert!(b1.value <= 1.0f64.exp()); // ξ bounded by 1
        let b2 = xi_bound(2.0, &growth, &spec, &xi).unwrap();
        assert!(b2.value >= b1.value, "Ξ must be nondecreasing in p");
        assert!(xi_bound(0.5, &growth, &spec, &xi).is_err());
    }

    #[test]
    fn apriori_y_certifies_and_detects() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 200).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };

        let zero = Driver::zero();
        let field = lattice::solve_backward(&spec, &zero, &xi, &grid, &opts).unwrap();
        let rep =
            check_apriori_y(&spec, &field, &xi, zero.growth(), &[1.0, 2.0], 1e-8).unwrap();
        assert!(rep.pass, "zero-driver bound must hold: {rep:?}");
        assert!(rep.worst_margin < 1e-10, "discrete Jensen is exact: {}", rep.worst_margin);

        let ent = Driver::entropic(1.0).unwrap();
        let ef = lattice::solve_backward(&spec, &ent, &xi, &grid, &opts).unwrap();
        let rep2 = check_apriori_y(&spec, &ef, &xi, ent.growth(), &[2.0], 1e-8).unwrap();
        assert!(rep2.pass, "p = 2 has strict Jensen slack: {rep2:?}");

        let bad = understated_beta_driver();
        let bf = lattice::solve_backward(&spec, &bad, &xi, &grid, &opts).unwrap();
        let rep3 = check_apriori_y(&spec, &bf, &xi, bad.growth(), &[1.0], 1e-8).unwrap();
        assert!(!rep3.pass, "understated beta must be detected");
        assert!(rep3.worst_margin > 0.5, "violation should be blatant: {}", rep3.worst_margin);
        assert!(rep3.location.is_some());
    }

    #[test]
    fn apriori_y_entropic_p1_overshoot_is_discretization_order() {
        // At p = 1 the entropic bound is exactly tight in the continuum, so
        // the explicit scheme's O(Δt) bias lands on the wrong side; the
        // overshoot must be positive, below max ΔA, and halve with the step.
        let spec = unit_spec();
        let xi = indicator_terminal();
        let ent = Driver::entropic(1.0).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let mut overshoots = Vec::new();
        for steps in [100usize, 200] {
            let grid = TimeGrid::uniform(&spec, steps).unwrap();
            let field = lattice::solve_backward(&spec, &ent, &xi, &grid, &opts).unwrap();
            let rep =
                check_apriori_y(&spec, &field, &xi, ent.growth(), &[1.0], 1e-8).unwrap();
            assert!(!rep.pass, "tight bound + explicit scheme must overshoot 1e-8 slack");
            assert!(rep.worst_margin > 0.0 && rep.worst_margin < grid.max_da());
            overshoots.push(rep.worst_margin);
        }
        let ratio = overshoots[0] / overshoots[1];
        assert!(
            ratio > 1.4 && ratio < 2.8,
            "overshoot should scale like Δt, got ratio {ratio} from {overshoots:?}"
        );
    }

    #[test]
    fn submartingale_certifies_and_detects() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 100).unwrap();
        let opts = SolveOptions { n_max: 25, ..SolveOptions::default() };
        let zero = Driver::zero();
        let field = lattice::solve_backward(&spec, &zero, &xi, &grid, &opts).unwrap();
        let rep =
            check_submartingale(&spec, &field, zero.growth(), 1.0, &opts, 1e-9).unwrap();
        assert!(rep.pass, "zero driver: conditional Jensen is exact: {rep:?}");

        // entropic at the honest discretization tolerance
        let ent = Driver::entropic(1.0).unwrap();
        let ef = lattice::solve_backward(&spec, &ent, &xi, &grid, &opts).unwrap();
        let rep2 =
            check_submartingale(&spec, &ef, ent.growth(), 1.0, &opts, grid.max_da()).unwrap();
        assert!(rep2.pass, "one-step defect must stay below O(ΔA): {rep2:?}");

        let bad = understated_beta_driver();
        let bf = lattice::solve_backward(&spec, &bad, &xi, &grid, &opts).unwrap();
        let rep3 =
            check_submartingale(&spec, &bf, bad.growth(), 1.0, &opts, grid.max_da()).unwrap();
        assert!(!rep3.pass, "understated beta must break the submartingale property");
    }

    #[test]
    fn comparison_bounds_and_hypothesis_gate() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 50).unwrap();
        let opts = SolveOptions { n_max: 20, ..SolveOptions::default() };
        let ent = Driver::entropic(1.0).unwrap();
        let shifted = Driver::new(
            "entropic_plus_tenth",
            GrowthParams::new(AlphaSchedule::constant(0.1), 0.0, 1.0, 0.0).unwrap(),
            Convexity::ConvexInU,
            {
                let base = Driver::entropic(1.0).unwrap();
                Arc::new(move |t, y, u, phi| base.eval(t, y, u, phi) + 0.1)
            },
        );
        let rep =
            check_comparison(&spec, &ent, &xi, &shifted, &xi, &grid, &opts, 1e-12).unwrap();
        assert!(rep.pass, "f ≤ f + 0.1 must give y ≤ y': {rep:?}");

        // translation is exact: y'(i) − y(i) = 0.1·(A_T − A_i) at state 0
        let lo = lattice::solve_backward(&spec, &ent, &xi, &grid, &opts).unwrap();
        let hi = lattice::solve_backward(&spec, &shifted, &xi, &grid, &opts).unwrap();
        for i in [0usize, 20, 50] {
            let want = 0.1 * (spec.a_total() - spec.a(grid.time(i)));
            assert_relative_eq!(hi.y(i, 0) - lo.y(i, 0), want, epsilon = 1e-12);
        }

        // swapped order: hypothesis unmet, reported rather than asserted
        let rep2 =
            check_comparison(&spec, &shifted, &xi, &ent, &xi, &grid, &opts, 1e-12).unwrap();
        assert!(!rep2.pass);
        assert!(rep2.params.iter().any(|(k, v)| k == "hypothesis_ok" && *v == 0.0));

        // identical inputs: bit-for-bit equality
        let again = lattice::solve_backward(&spec, &ent, &xi, &grid, &opts).unwrap();
        for i in 0..grid.layers() {
            for s in 0..lo.states().len() {
                assert_eq!(lo.y(i, s).to_bits(), again.y(i, s).to_bits());
            }
        }
    }

    #[test]
    fn monotone_regularization_and_terminal_truncation() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 40).unwrap();
        let opts = SolveOptions { n_max: 16, ..SolveOptions::default() };
        let search = SearchSpec::default();

        // entropic with λ = 2: the generator's slope reaches e² − 1 ≈ 6.4 on
        // the visited jump range, so budgets 2 and 4 genuinely cap it while
        // 8 and 16 leave it untouched — monotone in n with a shrinking gap.
        let ent = Driver::entropic(2.0).unwrap();
        let rep = check_monotone_regularization(
            &spec,
            &ent,
            &xi,
            &[2.0, 4.0, 8.0, 16.0],
            &grid,
            &opts,
            &search,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        let gaps = rep.curve.as_ref().unwrap();
        assert!(gaps[0] > 1e-4, "budget 2 must genuinely bind: {gaps:?}");
        assert!(gaps[3] < gaps[0], "gap to the unregularized field must shrink: {gaps:?}");

        // Lipschitz driver dominated by every budget: y^n ≡ y
        let aff = Driver::affine_jump(0.4, 0.5).unwrap();
        let rep2 = check_monotone_regularization(
            &spec,
            &aff,
            &xi,
            &[2.0, 4.0],
            &grid,
            &opts,
            &search,
        )
        .unwrap();
        assert!(rep2.pass);
        let gaps2 = rep2.curve.as_ref().unwrap();
        assert!(gaps2.iter().all(|g| *g < 1e-7), "f^n = f for dominated drivers: {gaps2:?}");

        // preconditions
        assert!(check_monotone_regularization(
            &spec,
            &ent,
            &xi,
            &[4.0],
            &grid,
            &opts,
            &search
        )
        .is_err());
        let lip = Driver::lipschitz_linear(0.5, 0.2).unwrap(); // concave
        assert!(check_monotone_regularization(
            &spec,
            &lip,
            &xi,
            &[2.0, 4.0],
            &grid,
            &opts,
            &search
        )
        .is_err());

        // terminal truncation stability at the initial node: clamping the
        // count terminal at level m perturbs y(0,0) by the Poisson tail
        // E[(N_T − m)⁺], which shrinks to nothing as m grows. (Nodes whose
        // count already exceeds m keep a permanent gap, so the sup over the
        // whole lattice is the wrong yardstick here.)
        let unbounded =
            TerminalCondition::new("total-count", Arc::new(|c: &[u32]| c[0] as f64), None);
        let base = lattice::solve_backward(&spec, &Driver::zero(), &unbounded, &grid, &opts)
            .unwrap();
        let mut dist = Vec::new();
        for m in [2.0, 5.0, 10.0] {
            let clamped = clamp_terminal(&unbounded, m).unwrap();
            let f = lattice::solve_backward(&spec, &Driver::zero(), &clamped, &grid, &opts)
                .unwrap();
            dist.push((f.y0() - base.y0()).abs());
        }
        assert!(dist[0] > dist[1] && dist[1] > dist[2], "{dist:?}");
        assert!(dist[2] < 1e-6, "{dist:?}");
    }

    #[test]
    fn l_lipschitz_bound_holds() {
        let linear = LossFunction::affine(0.4);
        let rep = check_l_lipschitz(&linear, 300, 11, 1e-10).unwrap();
        assert!(rep.pass, "linear loss: |ΔL| = |ΔEη| when binding: {rep:?}");

        let sine = LossFunction::soft_sine(0.2);
        let rep2 = check_l_lipschitz(&sine, 300, 12, 1e-10).unwrap();
        assert!(rep2.pass, "{rep2:?}");

        assert!(check_l_lipschitz(&sine, 0, 1, 1e-10).is_err());
    }

    #[test]
    fn u_functionals_zero_and_stability() {
        let spec = unit_spec();
        let opts = SolveOptions { n_max: 20, ..SolveOptions::default() };

        // constant terminal → U ≡ 0 → every functional is exactly 0
        let flat = TerminalCondition::new("c", Arc::new(|_: &[u32]| 2.0), Some(2.0));
        let grid = TimeGrid::uniform(&spec, 50).unwrap();
        let field =
            lattice::solve_backward(&spec, &Driver::zero(), &flat, &grid, &opts).unwrap();
        let f0 = u_functionals(&spec, &field, 1.0, &opts, 50, 3).unwrap();
        for v in f0.as_array() {
            assert_eq!(v, 0.0);
        }

        // entropic canonical shape: finite and stable across refinement
        let ent = Driver::entropic(1.0).unwrap();
        let xi = indicator_terminal();
        let rep = check_apriori_u(&spec, &ent, &xi, &[100, 400], &opts, 400, 5, 0.05).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.curve.as_ref().unwrap().iter().all(|v| v.is_finite()));

        // second-moment recursion agrees with the marginal route on E[Z]
        let grid = TimeGrid::uniform(&spec, 60).unwrap();
        let field = lattice::solve_backward(&spec, &ent, &xi, &grid, &opts).unwrap();
        let f1 = u_functionals(&spec, &field, 1.0, &opts, 50, 3).unwrap();
        // Var ≥ 0 ⇔ E[J²] ≥ (E[J])²
        assert!(f1.exp_q1_sq >= f1.exp_q1 * f1.exp_q1 - 1e-12);
        assert!(f1.exp_q2_sq >= f1.exp_q2 * f1.exp_q2 - 1e-12);
        assert!(check_apriori_u(&spec, &ent, &xi, &[100], &opts, 10, 5, 0.05).is_err());
    }

    #[test]
    fn suite_runner_sorts_by_name() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 20).unwrap();
        let opts = SolveOptions { n_max: 12, ..SolveOptions::default() };
        let zero = Driver::zero();
        let field = lattice::solve_backward(&spec, &zero, &xi, &grid, &opts).unwrap();
        let spec2 = spec.clone();
        let field2 = field.clone();
        let xi2 = xi.clone();
        let growth = zero.growth().clone();
        let growth2 = growth.clone();
        let spec3 = spec.clone();
        let field3 = field.clone();
        let jobs: Vec<(String, SuiteJob)> = vec![
            (
                "submartingale".into(),
                Box::new(move || {
                    check_submartingale(&spec2, &field2, &growth, 1.0, &SolveOptions::default(), 1e-9)
                }),
            ),
            (
                "apriori_y".into(),
                Box::new(move || {
                    check_apriori_y(&spec3, &field3, &xi2, &growth2, &[1.0], 1e-8)
                }),
            ),
        ];
        let reports = run_suite(jobs).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].name, "apriori_y");
        assert_eq!(reports[1].name, "submartingale");
        assert!(reports.iter().all(|r| r.pass));
    }
}
