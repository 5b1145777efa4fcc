//! Backward dynamic programming on the jump-count lattice.
//!
//! Under a deterministic compensator the per-mark jump counts
//! `N_t = (N_t(e₁), …, N_t(e_K))` are a Markov state for the point-process
//! filtration, so the value process of
//! `Y_t = ξ + ∫_t^T f(s, Y_s, U_s) dA_s − ∫_t^T ∫_E U_s(e) q(ds de)`
//! is a function `y(t, n)` and the jump field is the forward difference
//! `u(t, n, e) = y(t, n + δ_e) − y(t, n)`. The solver walks a time grid
//! backward: one-step transitions are exact Poisson products over the step's
//! per-mark compensator mass (kept to a certified tail, never dropped at
//! `O(ΔA²)`), the conditional expectation is renormalized over in-range
//! targets so constants are preserved exactly, and the generator enters
//! either explicitly (evaluated at the continuation value) or implicitly
//! (damped fixed point; contraction requires `β·ΔA < 1`).
//!
//! Verification routes, deliberately independent of the solver: closed-form
//! conditional expectations for the zero generator, the exponential-moment
//! closed form `(1/λ)·ln E_t[e^{λξ}]` for the entropic generator, a forward
//! Kolmogorov law table, and a pathwise residual check that replays the
//! solved field through simulated paths and the model's stochastic
//! integrals.

use crate::drivers::{Driver, TerminalCondition};
use crate::mpp::{self, CompensatorSpec, MppPath};
use crate::numeric::{fmt_f64, poisson_log_pmf, poisson_pmf, poisson_row, KahanSum, LogSumExp};
use crate::{parallel, Error, Result};
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

/// Longest admissible one-step jump-count truncation.
const KERNEL_CEILING: usize = 20_000;
/// Iteration cap for the implicit fixed point (contraction makes a handful
/// of iterations sufficient; the cap only guards corrupted inputs).
const IMPLICIT_MAX_ITERS: usize = 200;

/// Strictly increasing layer times `0 = t₀ < … < t_N = T` with per-step
/// compensator increments `ΔA_i`. Construction always splices in every
/// breakpoint of the clock and the mark-law schedule, so coefficients are
/// smooth within each step.
#[derive(Clone, Debug)]
pub struct TimeGrid {
    times: Vec<f64>,
    da: Vec<f64>,
}

impl TimeGrid {
    /// Grid from caller-chosen times plus `0`, `T`, and all model
    /// breakpoints; duplicates collapse.
    pub fn new(spec: &CompensatorSpec, extra: &[f64]) -> Result<Self> {
        let horizon = spec.horizon();
        for &t in extra {
            if !(0.0..=horizon).contains(&t) {
                return Err(Error::Validation(format!(
                    "grid time {t} outside [0, {horizon}]"
                )));
            }
        }
        let mut times = spec.breakpoint_times();
        times.extend_from_slice(extra);
        times.push(0.0);
        times.push(horizon);
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let da = times.windows(2).map(|w| spec.a(w[1]) - spec.a(w[0])).collect();
        Ok(Self { times, da })
    }

    /// `steps` equal time steps, plus model breakpoints.
    pub fn uniform(spec: &CompensatorSpec, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Validation("grid needs at least one step".into()));
        }
        let horizon = spec.horizon();
        let extra: Vec<f64> = (1..steps).map(|i| horizon * i as f64 / steps as f64).collect();
        Self::new(spec, &extra)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of layers (`N + 1`).
    pub fn layers(&self) -> usize {
        self.times.len()
    }

    pub fn steps(&self) -> usize {
        self.da.len()
    }

    pub fn time(&self, layer: usize) -> f64 {
        self.times[layer]
    }

    pub fn da(&self, step: usize) -> f64 {
        self.da[step]
    }

    pub fn max_da(&self) -> f64 {
        self.da.iter().copied().fold(0.0, f64::max)
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Greatest layer with `t_i ≤ t` (càdlàg convention).
    pub fn layer_at(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x <= t).max(1) - 1
    }

    /// Greatest layer with `t_i < t`: the step whose half-open interval
    /// `(t_i, t_{i+1}]` contains `t`. Predictable fields are read here.
    pub fn layer_before(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x < t).max(1) - 1
    }
}

/// Count vectors `n ∈ ℕ^K` with `Σ n ≤ n_max`, graded by total then
/// lexicographic, with an index map and precomputed single-jump neighbors.
#[derive(Clone, Debug)]
pub struct StateSpace {
    k: usize,
    n_max: u32,
    states: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, u32>,
    bump: Vec<Vec<Option<u32>>>,
}

fn enumerate_counts(k: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if k == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for c in 0..=total {
        prefix.push(c);
        enumerate_counts(k - 1, total - c, prefix, out);
        prefix.pop();
    }
}

impl StateSpace {
    pub fn new(k: usize, n_max: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("state space needs at least one mark".into()));
        }
        // C(n_max + k, k) states; refuse absurd lattices before allocating.
        let mut size = 1f64;
        for i in 1..=k {
            size *= (n_max as f64 + i as f64) / i as f64;
        }
        if size > 4e6 {
            return Err(Error::Validation(format!(
                "lattice would hold ~{size:.0} states (K = {k}, n_max = {n_max}); \
                 lower n_max or reduce the mark space"
            )));
        }
        let mut states = Vec::new();
        let mut prefix = Vec::with_capacity(k);
        for total in 0..=n_max {
            enumerate_counts(k, total, &mut prefix, &mut states);
        }
        let index: HashMap<Vec<u32>, u32> =
            states.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let bump = states
            .iter()
            .map(|s| {
                (0..k)
                    .map(|e| {
                        let mut b = s.clone();
                        b[e] += 1;
                        index.get(&b).copied()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { k, n_max, states, index, bump })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn counts(&self, idx: usize) -> &[u32] {
        &self.states[idx]
    }

    pub fn total(&self, idx: usize) -> u32 {
        self.states[idx].iter().sum()
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<u32> {
        self.index.get(counts).copied()
    }

    /// Index of `counts + δ_e`, if still inside the truncation.
    pub fn bump(&self, idx: usize, mark: usize) -> Option<u32> {
        self.bump[idx][mark]
    }
}

/// One-step transition law over count increments: exact product of per-mark
/// Poisson masses (the marked process over a step is independent Poisson per
/// mark with mean `ΔA·φ̄(e)`), truncated at a certified tail.
#[derive(Clone, Debug)]
pub struct TransitionKernel {
    pub increments: Vec<Vec<u32>>,
    pub probs: Vec<f64>,
    /// `1 − Σ probs`: Poisson mass beyond the truncation, recorded rather than
    /// redistributed; consumers renormalize at application.
    pub tail: f64,
    /// Effective per-step jump cap after any auto-raise.
    pub j_max: usize,
}

/// Build the one-step kernel for `[t0, t1]`. The requested `j_max` is raised
/// automatically until the Poisson(`ΔA`) tail falls below `tail_tol`;
/// an unreachable tolerance is a hard error naming the required cap.
pub fn transition_kernel(
    spec: &CompensatorSpec,
    t0: f64,
    t1: f64,
    j_max: usize,
    tail_tol: f64,
) -> Result<TransitionKernel> {
    if !(t1 > t0) {
        return Err(Error::Validation(format!(
            "kernel needs t0 < t1, got {t0} and {t1}"
        )));
    }
    if j_max == 0 {
        return Err(Error::Validation("kernel needs j_max ≥ 1".into()));
    }
    let k = spec.k();
    let da = spec.a(t1) - spec.a(t0);
    if da == 0.0 {
        return Ok(TransitionKernel {
            increments: vec![vec![0; k]],
            probs: vec![1.0],
            tail: 0.0,
            j_max,
        });
    }
    let (row, _) = poisson_row(da, tail_tol, KERNEL_CEILING)?;
    let j_eff = j_max.max(row.len() - 1);
    let phibar = spec.phi_average(t0, t1);
    let rows: Vec<Vec<f64>> =
        (0..k).map(|e| poisson_pmf(da * phibar[e], j_eff + 1)).collect();
    let mut increments = Vec::new();
    let mut prefix = Vec::with_capacity(k);
    for total in 0..=j_eff as u32 {
        enumerate_counts(k, total, &mut prefix, &mut increments);
    }
    let mut probs = Vec::with_capacity(increments.len());
    let mut mass = KahanSum::new();
    for inc in &increments {
        let mut p = 1.0;
        for (e, &m) in inc.iter().enumerate() {
            p *= rows[e][m as usize];
        }
        probs.push(p);
        mass.add(p);
    }
    Ok(TransitionKernel {
        increments,
        probs,
        tail: (1.0 - mass.value()).max(0.0),
        j_max: j_eff,
    })
}

/// Generator as seen by the lattice: evaluation may depend on the layer and
/// state (used to freeze the `y`-argument along a previous iterate), and the
/// Lipschitz-in-`y` constant gates the implicit step's contraction.
pub trait LatticeDriver: Sync {
    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        layer: usize,
        state: usize,
        t: f64,
        counts: &[u32],
        y: f64,
        u: &[f64],
        phi: &[f64],
    ) -> f64;

    fn lipschitz_y(&self) -> f64;
}

impl LatticeDriver for Driver {
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
        Driver::eval(self, t, y, u, phi)
    }

    fn lipschitz_y(&self) -> f64 {
        self.growth().beta
    }
}

/// Solver controls. `n_max` bounds the total jump count per state;
/// [`n_max_for_tail`] picks it from the terminal law.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub implicit: bool,
    pub picard_tol: f64,
    pub j_max: usize,
    pub tail_tol: f64,
    pub n_max: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { implicit: false, picard_tol: 1e-12, j_max: 8, tail_tol: 1e-12, n_max: 64 }
    }
}

/// Truncation and iteration diagnostics accumulated over a backward solve.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SolveDiagnostics {
    /// Largest per-step Poisson tail discarded by any layer's kernel.
    pub max_kernel_tail: f64,
    /// Largest in-range probability deficit `1 − Σ p` seen at any state
    /// before renormalization (boundary states lose upward transitions).
    pub max_boundary_defect: f64,
    /// Worst implicit fixed-point iteration count (0 in explicit mode).
    pub implicit_max_iters: usize,
}

/// Solved value field `y(i, n)` / jump field `u(i, n, e)` on a grid.
#[derive(Clone, Debug)]
pub struct ValueField {
    grid: TimeGrid,
    states: StateSpace,
    y: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    diagnostics: SolveDiagnostics,
}

impl ValueField {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn y(&self, layer: usize, state: usize) -> f64 {
        self.y[layer][state]
    }

    /// Jump field at layer `i < N`: `u(i, n, e) = y(i+1, n+δ_e) − y(i+1, n)`,
    /// zero where the neighbor left the truncation.
    pub fn u(&self, layer: usize, state: usize, mark: usize) -> f64 {
        self.u[layer][state * self.states.k() + mark]
    }

    pub fn y_at_counts(&self, layer: usize, counts: &[u32]) -> Result<f64> {
        match self.states.index_of(counts) {
            Some(s) => Ok(self.y[layer][s as usize]),
            None => Err(Error::StateOverflow {
                layer,
                count: counts.iter().sum(),
                n_max: self.states.n_max(),
            }),
        }
    }

    /// Initial value `y(0, 0)`.
    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }

    pub fn diagnostics(&self) -> SolveDiagnostics {
        self.diagnostics
    }

    /// CSV export: one row per (layer, state); terminal-layer jump cells are
    /// empty (no continuation layer exists). Floats carry 17 significant
    /// digits so re-parsing is exact.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let k = self.states.k();
        write!(w, "layer_time")?;
        for e in 0..k {
            write!(w, ",n{}", e + 1)?;
        }
        write!(w, ",y")?;
        for e in 0..k {
            write!(w, ",u{}", e + 1)?;
        }
        writeln!(w)?;
        for layer in 0..self.grid.layers() {
            for s in 0..self.states.len() {
                write!(w, "{}", fmt_f64(self.grid.time(layer)))?;
                for &c in self.states.counts(s) {
                    write!(w, ",{c}")?;
                }
                write!(w, ",{}", fmt_f64(self.y[layer][s]))?;
                for e in 0..k {
                    if layer + 1 < self.grid.layers() {
                        write!(w, ",{}", fmt_f64(self.u(layer, s, e)))?;
                    } else {
                        write!(w, ",")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

type KernelKey = (u64, Vec<u64>, usize, u64);

struct LayerOps {
    kernel: TransitionKernel,
    /// `targets[state][increment]`: destination state index, or `-1` when the
    /// increment leaves the truncation.
    targets: Vec<Vec<i64>>,
}

/// Destination state per (state, kernel increment); `-1` marks increments
/// that leave the truncation.
pub fn kernel_targets(kernel: &TransitionKernel, states: &StateSpace) -> Vec<Vec<i64>> {
    let mut scratch = vec![0u32; states.k()];
    (0..states.len())
        .map(|s| {
            kernel
                .increments
                .iter()
                .map(|inc| {
                    for (dst, (&a, &b)) in
                        scratch.iter_mut().zip(states.counts(s).iter().zip(inc))
                    {
                        *dst = a + b;
                    }
                    states.index_of(&scratch).map_or(-1, |i| i as i64)
                })
                .collect()
        })
        .collect()
}

fn layer_ops(
    cache: &mut HashMap<KernelKey, Arc<LayerOps>>,
    spec: &CompensatorSpec,
    states: &StateSpace,
    t0: f64,
    t1: f64,
    j_max: usize,
    tail_tol: f64,
) -> Result<Arc<LayerOps>> {
    let da = spec.a(t1) - spec.a(t0);
    let phibar = spec.phi_average(t0, t1);
    let key: KernelKey = (
        da.to_bits(),
        phibar.iter().map(|p| p.to_bits()).collect(),
        j_max,
        tail_tol.to_bits(),
    );
    if let Some(ops) = cache.get(&key) {
        return Ok(ops.clone());
    }
    let kernel = transition_kernel(spec, t0, t1, j_max, tail_tol)?;
    let targets = kernel_targets(&kernel, states);
    let ops = Arc::new(LayerOps { kernel, targets });
    cache.insert(key, ops.clone());
    Ok(ops)
}

/// Smallest `n_max` whose terminal total-jump-count tail is below `tail`
/// (total jumps over `[0, T]` are Poisson with mean `A_T`).
pub fn n_max_for_tail(spec: &CompensatorSpec, tail: f64) -> Result<u32> {
    let (row, _) = poisson_row(spec.a_total(), tail, KERNEL_CEILING)?;
    Ok((row.len() - 1) as u32)
}

/// Backward induction for the value and jump fields.
///
/// Per layer `i = N−1, …, 0` and state `n`:
/// continuation `Ê = Σ p·y(i+1, n+inc) / Σ p` over in-range increments,
/// `u(i,n,e) = y(i+1, n+δ_e) − y(i+1, n)`, and
/// `y(i,n) = Ê + f(t_i, ŷ, u(i,n,·))·ΔA_i` with `ŷ = Ê` (explicit) or the
/// damped fixed point of `ŷ ↦ Ê + f(t_i, ŷ, u)·ΔA_i` (implicit; requires
/// `β·max ΔA < 1`). Terminal layer carries `g` exactly.
pub fn solve_backward<G: LatticeDriver + ?Sized>(
    spec: &CompensatorSpec,
    gen: &G,
    xi: &TerminalCondition,
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<ValueField> {
    if opts.implicit {
        let contraction = gen.lipschitz_y() * grid.max_da();
        if contraction >= 1.0 {
            return Err(Error::Validation(format!(
                "implicit step needs beta·max(ΔA) < 1 for contraction, got {contraction}"
            )));
        }
    }
    if !(opts.picard_tol > 0.0) || !(opts.tail_tol > 0.0) {
        return Err(Error::Validation(
            "picard_tol and tail_tol must be positive".into(),
        ));
    }
    let states = StateSpace::new(spec.k(), opts.n_max)?;
    let k = states.k();
    let layers = grid.layers();
    let n = layers - 1;

    let mut y: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut u: Vec<Vec<f64>> = vec![Vec::new(); n];
    y[n] = (0..states.len()).map(|s| xi.eval(states.counts(s))).collect();
    if let Some(bad) = y[n].iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "terminal value is not finite at counts {:?}",
            states.counts(bad)
        )));
    }

    let mut cache: HashMap<KernelKey, Arc<LayerOps>> = HashMap::new();
    let mut diag = SolveDiagnostics::default();

    for i in (0..n).rev() {
        let (t0, t1) = (grid.time(i), grid.time(i + 1));
        let ops = layer_ops(&mut cache, spec, &states, t0, t1, opts.j_max, opts.tail_tol)?;
        let phi = spec.phi_at(t0).to_vec();
        let da = grid.da(i);
        let next = &y[i + 1];

        // (y, u values, boundary defect, implicit iterations)
        let rows: Vec<(f64, Vec<f64>, f64, usize)> =
            parallel::map_indexed(states.len(), |s| {
                let mut acc = KahanSum::new();
                let mut mass = KahanSum::new();
                for (ii, &tgt) in ops.targets[s].iter().enumerate() {
                    if tgt >= 0 {
                        let p = ops.kernel.probs[ii];
                        acc.add(p * next[tgt as usize]);
                        mass.add(p);
                    }
                }
                let mass = mass.value();
                let cont = acc.value() / mass;
                let mut uu = vec![0.0; k];
                for (e, slot) in uu.iter_mut().enumerate() {
                    if let Some(b) = states.bump(s, e) {
                        *slot = next[b as usize] - next[s];
                    }
                }
                let counts = states.counts(s);
                let (yv, iters) = if !opts.implicit || da == 0.0 {
                    (cont + gen.eval(i, s, t0, counts, cont, &uu, &phi) * da, 0)
                } else {
                    let mut cur = cont;
                    let mut done = usize::MAX;
                    for it in 0..IMPLICIT_MAX_ITERS {
                        let nextv = cont + gen.eval(i, s, t0, counts, cur, &uu, &phi) * da;
                        if !nextv.is_finite() {
                            cur = nextv;
                            break;
                        }
                        let settled = (nextv - cur).abs() <= opts.picard_tol * (1.0 + nextv.abs());
                        cur = nextv;
                        if settled {
                            done = it + 1;
                            break;
                        }
                    }
                    (cur, done)
                };
                (yv, uu, 1.0 - mass, iters)
            });

        let mut layer_y = Vec::with_capacity(states.len());
        let mut layer_u = Vec::with_capacity(states.len() * k);
        for (s, (yv, uu, defect, iters)) in rows.into_iter().enumerate() {
            if !yv.is_finite() {
                return Err(Error::Numerical(format!(
                    "value not finite at layer {i}, counts {:?}",
                    states.counts(s)
                )));
            }
            if iters == usize::MAX {
                return Err(Error::Numerical(format!(
                    "implicit fixed point did not converge at layer {i}, counts {:?}",
                    states.counts(s)
                )));
            }
            diag.max_boundary_defect = diag.max_boundary_defect.max(defect);
            diag.implicit_max_iters = diag.implicit_max_iters.max(iters);
            layer_y.push(yv);
            layer_u.extend_from_slice(&uu);
        }
        diag.max_kernel_tail = diag.max_kernel_tail.max(ops.kernel.tail);
        y[i] = layer_y;
        u[i] = layer_u;
    }

    Ok(ValueField { grid: grid.clone(), states, y, u, diagnostics: diag })
}

/// Expectation `Σ_m (∏_e pmf_e[m_e]) · h(base + m)` over a product of
/// per-mark Poisson rows, renormalized by the retained mass.
fn product_expectation(
    rows: &[Vec<f64>],
    base: &[u32],
    h: &dyn Fn(&[u32]) -> f64,
) -> (f64, f64) {
    let mut counts = base.to_vec();
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    fn rec(
        rows: &[Vec<f64>],
        base: &[u32],
        e: usize,
        p: f64,
        counts: &mut Vec<u32>,
        h: &dyn Fn(&[u32]) -> f64,
        num: &mut KahanSum,
        den: &mut KahanSum,
    ) {
        if e == rows.len() {
            num.add(p * h(counts));
            den.add(p);
            return;
        }
        for (m, &pm) in rows[e].iter().enumerate() {
            if pm == 0.0 {
                continue;
            }
            counts[e] = base[e] + m as u32;
            rec(rows, base, e + 1, p * pm, counts, h, num, den);
        }
    }
    rec(rows, base, 0, 1.0, &mut counts, h, &mut num, &mut den);
    (num.value(), den.value())
}

fn adaptive_rows<T, EV>(spec: &CompensatorSpec, t: f64, mut eval: EV, what: &str) -> Result<T>
where
    EV: FnMut(&[usize]) -> (T, f64),
{
    let horizon = spec.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Validation(format!("time {t} outside [0, {horizon}]")));
    }
    let lams = spec.mark_intensity(t, horizon);
    let mut lens: Vec<usize> = lams
        .iter()
        .map(|&l| {
            poisson_row(l, 1e-13, KERNEL_CEILING)
                .map(|(row, _)| row.len())
                .unwrap_or(KERNEL_CEILING)
        })
        .collect();
    let (_, mut scalar) = eval(&lens);
    for _ in 0..8 {
        let next: Vec<usize> = lens.iter().map(|&l| (l * 2).min(KERNEL_CEILING)).collect();
        let (v2, s2) = eval(&next);
        if (s2 - scalar).abs() <= 1e-12 * (1.0 + s2.abs()) {
            return Ok(v2);
        }
        scalar = s2;
        lens = next;
    }
    Err(Error::Numerical(format!(
        "{what} did not stabilize under truncation doubling at t = {t}"
    )))
}

/// Oracle for the zero generator: `Y_t = E[g(N_T) | N_t = counts]`, computed
/// by exact per-mark Poisson summation over `(t, T]` with adaptive
/// truncation (accepted only when doubling every row moves the value by
/// ≤ 1e-12 relative).
pub fn closed_form_zero_driver(
    spec: &CompensatorSpec,
    xi: &TerminalCondition,
    t: f64,
    counts: &[u32],
) -> Result<f64> {
    let lams = spec.mark_intensity(t, spec.horizon());
    adaptive_rows(
        spec,
        t,
        |lens: &[usize]| {
            let rows: Vec<Vec<f64>> =
                lams.iter().zip(lens).map(|(&l, &n)| poisson_pmf(l, n)).collect();
            let (num, den) = product_expectation(&rows, counts, &|c| xi.eval(c));
            let v = num / den;
            (v, v)
        },
        "conditional expectation",
    )
}

/// `ln E[e^{w(N_T)} | N_t = counts]`: exact per-mark Poisson summation over
/// `(t, T]` in log domain, renormalized and adaptively truncated. The log
/// domain keeps exponential moments of unbounded weights representable.
pub fn conditional_log_moment(
    spec: &CompensatorSpec,
    w: &(dyn Fn(&[u32]) -> f64 + Sync),
    t: f64,
    counts: &[u32],
) -> Result<f64> {
    let lams = spec.mark_intensity(t, spec.horizon());
    adaptive_rows(
        spec,
        t,
        |lens: &[usize]| {
            let rows: Vec<Vec<f64>> =
                lams.iter().zip(lens).map(|(&l, &n)| poisson_log_pmf(l, n)).collect();
            let mut cvec = counts.to_vec();
            let mut num = LogSumExp::new();
            let mut den = LogSumExp::new();
            fn rec(
                rows: &[Vec<f64>],
                base: &[u32],
                e: usize,
                lp: f64,
                counts: &mut Vec<u32>,
                w: &(dyn Fn(&[u32]) -> f64 + Sync),
                num: &mut LogSumExp,
                den: &mut LogSumExp,
            ) {
                if e == rows.len() {
                    num.add(lp + w(counts));
                    den.add(lp);
                    return;
                }
                for (m, &lpm) in rows[e].iter().enumerate() {
                    if lpm == f64::NEG_INFINITY {
                        continue;
                    }
                    counts[e] = base[e] + m as u32;
                    rec(rows, base, e + 1, lp + lpm, counts, w, num, den);
                }
            }
            rec(&rows, counts, 0, 0.0, &mut cvec, w, &mut num, &mut den);
            let v = num.value() - den.value();
            (v, v)
        },
        "log-moment expectation",
    )
}

/// Oracle for the entropic generator `f = (1/λ)·j_λ(u)`:
/// `Y_t = (1/λ)·ln E[e^{λ·g(N_T)} | N_t = counts]`.
pub fn entropic_closed_form(
    spec: &CompensatorSpec,
    xi: &TerminalCondition,
    lam: f64,
    t: f64,
    counts: &[u32],
) -> Result<f64> {
    if !(lam > 0.0) {
        return Err(Error::Validation(format!("lambda must be positive, got {lam}")));
    }
    Ok(conditional_log_moment(spec, &|c: &[u32]| lam * xi.eval(c), t, counts)? / lam)
}

/// One jump as replayed through a solved field.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrajectoryEvent {
    pub time: f64,
    pub mark: usize,
    /// `u(layer, pre-jump state, mark)`: the size of the value jump.
    pub jump: f64,
}

/// `(t_i, Y_{t_i})` along one realized path plus its jump record.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub events: Vec<TrajectoryEvent>,
    pub terminal: f64,
}

/// Read the solved field along one path: `Y` at every layer's realized state
/// (càdlàg — events at `t_i` are included in layer `i`'s state) and the jump
/// sizes at event times.
pub fn sample_trajectory(field: &ValueField, path: &MppPath) -> Result<Trajectory> {
    let grid = field.grid();
    if path.horizon != grid.horizon() {
        return Err(Error::Validation(format!(
            "path horizon {} does not match grid horizon {}",
            path.horizon,
            grid.horizon()
        )));
    }
    let states = field.states();
    let k = states.k();
    let mut y = Vec::with_capacity(grid.layers());
    let mut counts = vec![0u32; k];
    let mut next_event = 0;
    for layer in 0..grid.layers() {
        let t = grid.time(layer);
        while next_event < path.events.len() && path.events[next_event].time <= t {
            counts[path.events[next_event].mark] += 1;
            next_event += 1;
        }
        match states.index_of(&counts) {
            Some(s) => y.push(field.y(layer, s as usize)),
            None => {
                return Err(Error::StateOverflow {
                    layer,
                    count: counts.iter().sum(),
                    n_max: states.n_max(),
                })
            }
        }
    }
    let mut events = Vec::with_capacity(path.events.len());
    let mut pre = vec![0u32; k];
    for ev in &path.events {
        let layer = grid.layer_before(ev.time);
        let s = states.index_of(&pre).ok_or(Error::StateOverflow {
            layer,
            count: pre.iter().sum(),
            n_max: states.n_max(),
        })?;
        events.push(TrajectoryEvent {
            time: ev.time,
            mark: ev.mark,
            jump: field.u(layer, s as usize, ev.mark),
        });
        pre[ev.mark] += 1;
    }
    let terminal = y[grid.layers() - 1];
    Ok(Trajectory { times: grid.times().to_vec(), y, events, terminal })
}

/// A value/jump field readable along simulated paths. Implemented by solved
/// [`ValueField`]s (piecewise-constant between layers) and by continuous
/// closed-form oracles.
pub trait ResidualField: Sync {
    /// Value at time `t` in state `counts` (càdlàg in `t`).
    fn value(&self, t: f64, counts: &[u32]) -> Result<f64>;
    /// Predictable jump field at `t` given the pre-jump state.
    fn jump(&self, t: f64, counts_before: &[u32], mark: usize) -> Result<f64>;
    /// Time cut points where the field is allowed to be discontinuous in `t`
    /// (quadrature splits there; exactness for piecewise-constant fields).
    fn time_cuts(&self) -> Vec<f64>;
}

impl ResidualField for ValueField {
    fn value(&self, t: f64, counts: &[u32]) -> Result<f64> {
        self.y_at_counts(self.grid.layer_at(t), counts)
    }

    fn jump(&self, t: f64, counts_before: &[u32], mark: usize) -> Result<f64> {
        let layer = self.grid.layer_before(t);
        match self.states.index_of(counts_before) {
            Some(s) => Ok(self.u(layer, s as usize, mark)),
            None => Err(Error::StateOverflow {
                layer,
                count: counts_before.iter().sum(),
                n_max: self.states.n_max(),
            }),
        }
    }

    fn time_cuts(&self) -> Vec<f64> {
        self.grid.times().to_vec()
    }
}

/// Continuous-time closed-form field: conditional expectation (`lam: None`)
/// or exponential log-moment (`lam: Some(λ)`); jumps are state differences of
/// the same closed form, so the martingale representation holds exactly.
pub struct OracleField<'a> {
    pub spec: &'a CompensatorSpec,
    pub xi: &'a TerminalCondition,
    pub lam: Option<f64>,
}

impl ResidualField for OracleField<'_> {
    fn value(&self, t: f64, counts: &[u32]) -> Result<f64> {
        match self.lam {
            None => closed_form_zero_driver(self.spec, self.xi, t, counts),
            Some(l) => entropic_closed_form(self.spec, self.xi, l, t, counts),
        }
    }

    fn jump(&self, t: f64, counts_before: &[u32], mark: usize) -> Result<f64> {
        let mut bumped = counts_before.to_vec();
        bumped[mark] += 1;
        Ok(self.value(t, &bumped)? - self.value(t, counts_before)?)
    }

    fn time_cuts(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Pathwise defect statistics for `D = Y₀ − ξ − ∫ f dA + ∫∫ U dq`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub stddev: f64,
    pub stderr: f64,
    pub paths: usize,
    pub grid_layers: Option<usize>,
}

/// Replay a field through `paths` simulated paths (seeds `base_seed + i`)
/// and accumulate the defect
/// `D = Y₀ − g(N_T) − ∫₀ᵀ f(s, Y_s, U_s) dA_s + ∫∫ U dq`,
/// evaluated with the model's own stochastic integrals. A true solution has
/// `D ≡ 0`; a solver field carries the scheme's `O(max ΔA)` bias.
pub fn forward_residual<F: ResidualField + ?Sized>(
    field: &F,
    spec: &CompensatorSpec,
    d: &Driver,
    xi: &TerminalCondition,
    paths: usize,
    base_seed: u64,
    quad_step: f64,
) -> Result<ResidualStats> {
    if paths == 0 {
        return Err(Error::Validation("residual check needs at least one path".into()));
    }
    let cuts = field.time_cuts();
    let k = spec.k();
    let y0 = field.value(0.0, &vec![0u32; k])?;
    let defects: Vec<Result<f64>> = parallel::map_indexed(paths, |i| {
        let path = mpp::simulate_path(spec, base_seed + i as u64);
        let terminal = path.terminal_counts(k);
        // Counts only grow, so reachability at T certifies every
        // intermediate state; the closures below cannot fail after this.
        field.value(path.horizon, &terminal)?;
        let jump_field = |t: f64, counts: &[u32], mark: usize| -> f64 {
            field.jump(t, counts, mark).expect("pre-checked state range")
        };
        let driver_term = |t: f64, counts: &[u32], _mark: usize| -> f64 {
            let yv = field.value(t, counts).expect("pre-checked state range");
            let uv: Vec<f64> = (0..k).map(|e| jump_field(t, counts, e)).collect();
            d.eval(t, yv, &uv, spec.phi_at(t))
        };
        let int_f = mpp::integral_nu_cut(spec, &driver_term, &path, quad_step, &cuts)?;
        let int_q = mpp::integral_q_cut(spec, &path, &jump_field, quad_step, &cuts)?;
        Ok(y0 - xi.eval(&terminal) - int_f + int_q)
    });
    let mut ds = Vec::with_capacity(paths);
    for d in defects {
        ds.push(d?);
    }
    let m = ds.len() as f64;
    let mean = crate::numeric::ksum(ds.iter().copied()) / m;
    let mean_abs = crate::numeric::ksum(ds.iter().map(|x| x.abs())) / m;
    let max_abs = ds.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let var = if ds.len() > 1 {
        crate::numeric::ksum(ds.iter().map(|x| (x - mean) * (x - mean))) / (m - 1.0)
    } else {
        0.0
    };
    let stddev = var.max(0.0).sqrt();
    Ok(ResidualStats {
        mean,
        mean_abs,
        max_abs,
        stddev,
        stderr: stddev / m.sqrt(),
        paths,
        grid_layers: None,
    })
}

/// Exact state law per grid layer from the forward Kolmogorov recursion.
#[derive(Clone, Debug)]
pub struct LawTable {
    grid: TimeGrid,
    states: StateSpace,
    probs: Vec<Vec<f64>>,
    leak: Vec<f64>,
}

impl LawTable {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    /// Probability vector over states at layer `i`; sums to 1 exactly
    /// (renormalized; the raw deficit is in [`LawTable::leak`]).
    pub fn layer(&self, i: usize) -> &[f64] {
        &self.probs[i]
    }

    /// Per-layer raw probability deficit absorbed by renormalization
    /// (kernel tails plus mass pushed beyond `n_max`).
    pub fn leak(&self, i: usize) -> f64 {
        self.leak[i]
    }

    pub fn max_leak(&self) -> f64 {
        self.leak.iter().copied().fold(0.0, f64::max)
    }

    /// `E[h(N_{t_i})]` under the layer law.
    pub fn expectation(&self, i: usize, h: impl Fn(&[u32]) -> f64) -> f64 {
        let mut acc = KahanSum::new();
        for (s, &p) in self.probs[i].iter().enumerate() {
            if p != 0.0 {
                acc.add(p * h(self.states.counts(s)));
            }
        }
        acc.value()
    }
}

/// Forward Kolmogorov recursion with the same one-step kernels as the
/// backward solver: layer 0 is a point mass at the empty state.
pub fn forward_law(
    spec: &CompensatorSpec,
    grid: &TimeGrid,
    n_max: u32,
    j_max: usize,
    tail_tol: f64,
) -> Result<LawTable> {
    let states = StateSpace::new(spec.k(), n_max)?;
    let mut probs = vec![vec![0.0; states.len()]; grid.layers()];
    let mut leak = vec![0.0; grid.layers()];
    probs[0][0] = 1.0;
    let mut cache: HashMap<KernelKey, Arc<LayerOps>> = HashMap::new();
    for i in 0..grid.steps() {
        let ops = layer_ops(&mut cache, spec, &states, grid.time(i), grid.time(i + 1), j_max, tail_tol)?;
        let cur = probs[i].clone();
        let nxt = &mut probs[i + 1];
        for (s, &ps) in cur.iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            for (ii, &tgt) in ops.targets[s].iter().enumerate() {
                if tgt >= 0 {
                    nxt[tgt as usize] += ps * ops.kernel.probs[ii];
                }
            }
        }
        let mass = crate::numeric::ksum(nxt.iter().copied());
        leak[i + 1] = (1.0 - mass).max(0.0);
        for p in nxt.iter_mut() {
            *p /= mass;
        }
    }
    Ok(LawTable { grid: grid.clone(), states, probs, leak })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpp::{Clock, MarkSpace, PhiSegment};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

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

    fn two_mark_spec() -> CompensatorSpec {
        CompensatorSpec::new(
            MarkSpace::new(vec!["a", "b"]).unwrap(),
            vec![PhiSegment { from: 0.0, probs: vec![0.5, 0.5] }],
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

    #[test]
    fn grid_contains_breakpoints_and_conserves_mass() {
        let spec = CompensatorSpec::new(
            MarkSpace::new(vec!["a"]).unwrap(),
            vec![
                PhiSegment { from: 0.0, probs: vec![1.0] },
                PhiSegment { from: 0.3, probs: vec![1.0] },
            ],
            Clock::new(vec![(0.0, 0.0), (0.7, 1.4), (1.0, 1.4)]).unwrap(),
            None,
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::uniform(&spec, 4).unwrap();
        for t in [0.3, 0.7, 0.25, 0.5] {
            assert!(grid.times().contains(&t), "missing {t}");
        }
        let total = crate::numeric::ksum((0..grid.steps()).map(|i| grid.da(i)));
        assert_relative_eq!(total, spec.a_total(), epsilon = 1e-12);
        assert!(TimeGrid::uniform(&spec, 0).is_err());
        assert!(TimeGrid::new(&spec, &[2.0]).is_err());
    }

    #[test]
    fn state_space_enumeration_and_bumps() {
        let s = StateSpace::new(2, 2).unwrap();
        let expect: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![0, 2],
            vec![1, 1],
            vec![2, 0],
        ];
        assert_eq!(s.len(), 6);
        for (i, e) in expect.iter().enumerate() {
            assert_eq!(s.counts(i), e.as_slice());
            assert_eq!(s.index_of(e), Some(i as u32));
        }
        // bump from (0,1) by mark 0 → (1,1)
        assert_eq!(s.bump(1, 0), s.index_of(&[1, 1]));
        // bump from (2,0) by mark 0 leaves the truncation
        assert_eq!(s.bump(5, 0), None);
        assert!(StateSpace::new(0, 1).is_err());
        assert!(StateSpace::new(4, 100_000).is_err());
    }

    #[test]
    fn kernel_examples() {
        let spec = unit_spec();
        // ΔA = 0: point mass on the zero increment.
        let flat = CompensatorSpec::new(
            MarkSpace::new(vec!["a"]).unwrap(),
            vec![PhiSegment { from: 0.0, probs: vec![1.0] }],
            Clock::new(vec![(0.0, 0.0), (0.5, 0.0), (1.0, 1.0)]).unwrap(),
            None,
            1.0,
        )
        .unwrap();
        let kf = transition_kernel(&flat, 0.0, 0.5, 4, 1e-9).unwrap();
        assert_eq!(kf.increments, vec![vec![0u32]]);
        assert_eq!(kf.probs, vec![1.0]);
        assert_eq!(kf.tail, 0.0);

        let k1 = transition_kernel(&spec, 0.0, 0.01, 2, 1e-6).unwrap();
        let e = (-0.01f64).exp();
        assert_relative_eq!(k1.probs[0], e, max_relative = 1e-15);
        assert_relative_eq!(k1.probs[1], 0.01 * e, max_relative = 1e-15);
        assert!(k1.tail < 1e-6);

        let k2 = transition_kernel(&two_mark_spec(), 0.0, 0.01, 2, 1e-6).unwrap();
        let i10 = k2.increments.iter().position(|m| m == &vec![1, 0]).unwrap();
        let i01 = k2.increments.iter().position(|m| m == &vec![0, 1]).unwrap();
        assert_eq!(k2.probs[i10].to_bits(), k2.probs[i01].to_bits());
        assert!(transition_kernel(&spec, 0.5, 0.5, 2, 1e-6).is_err());
        assert!(transition_kernel(&spec, 0.0, 1.0, 0, 1e-6).is_err());
    }

    #[test]
    fn kernel_auto_raises_truncation() {
        let spec = CompensatorSpec::new(
            MarkSpace::new(vec!["a"]).unwrap(),
            vec![PhiSegment { from: 0.0, probs: vec![1.0] }],
            Clock::new(vec![(0.0, 0.0), (1.0, 5.0)]).unwrap(),
            None,
            1.0,
        )
        .unwrap();
        let k = transition_kernel(&spec, 0.0, 1.0, 1, 1e-9).unwrap();
        assert!(k.j_max > 1, "j_max should rise to meet the tail tolerance");
        assert!(k.tail < 1e-9);
    }

    #[test]
    fn zero_driver_matches_conditional_expectation_everywhere() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 50).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let field = solve_backward(&spec, &Driver::zero(), &xi, &grid, &opts).unwrap();
        assert_relative_eq!(field.y0(), 1.0 - (-1.0f64).exp(), epsilon = 1e-9);
        for layer in [0, 10, 25, 49] {
            for s in 0..field.states().len() {
                let oracle = closed_form_zero_driver(
                    &spec,
                    &xi,
                    grid.time(layer),
                    field.states().counts(s),
                )
                .unwrap();
                assert!(
                    (field.y(layer, s) - oracle).abs() < 1e-9,
                    "layer {layer} state {s}: {} vs {oracle}",
                    field.y(layer, s)
                );
            }
        }
    }

    #[test]
    fn constant_driver_telescopes_exactly() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 40).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let field =
            solve_backward(&spec, &Driver::constant(-0.7), &xi, &grid, &opts).unwrap();
        let expect = closed_form_zero_driver(&spec, &xi, 0.0, &[0]).unwrap() - 0.7 * 1.0;
        assert_relative_eq!(field.y0(), expect, epsilon = 1e-10);
    }

    #[test]
    fn entropic_solver_first_order_convergence() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let d = Driver::entropic(1.0).unwrap();
        let oracle = entropic_closed_form(&spec, &xi, 1.0, 0.0, &[0]).unwrap();
        assert_relative_eq!(
            oracle,
            ((-1.0f64).exp() + 1.0f64.exp() - 1.0).ln(),
            epsilon = 1e-12
        );
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let mut errs = Vec::new();
        for steps in [50, 100] {
            let grid = TimeGrid::uniform(&spec, steps).unwrap();
            let field = solve_backward(&spec, &d, &xi, &grid, &opts).unwrap();
            errs.push((field.y0() - oracle).abs());
        }
        assert!(errs[1] < 2e-3, "coarse error too large: {:?}", errs);
        let ratio = errs[0] / errs[1];
        assert!(
            ratio > 1.5 && ratio < 2.6,
            "expected ≈ first-order decay, got ratio {ratio} from {errs:?}"
        );
    }

    #[test]
    fn implicit_and_explicit_agree_to_step_order() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let d = Driver::lipschitz_linear(0.8, 0.0).unwrap();
        let grid = TimeGrid::uniform(&spec, 100).unwrap();
        let base = SolveOptions { n_max: 25, ..SolveOptions::default() };
        let ex = solve_backward(&spec, &d, &xi, &grid, &base).unwrap();
        let im = solve_backward(
            &spec,
            &d,
            &xi,
            &grid,
            &SolveOptions { implicit: true, ..base },
        )
        .unwrap();
        assert!((ex.y0() - im.y0()).abs() < 0.8 * grid.max_da() * 2.0);
        assert!(im.diagnostics().implicit_max_iters >= 1);
        // contraction refusal
        let coarse = TimeGrid::uniform(&spec, 1).unwrap();
        let steep = Driver::lipschitz_linear(1.5, 0.0).unwrap();
        let err = solve_backward(
            &spec,
            &steep,
            &xi,
            &coarse,
            &SolveOptions { implicit: true, n_max: 25, ..SolveOptions::default() },
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn comparison_monotonicity_constants_and_terminals() {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, 25).unwrap();
        let opts = SolveOptions { n_max: 20, ..SolveOptions::default() };
        let g1 = indicator_terminal();
        let g2 = TerminalCondition::new(
            "shifted",
            Arc::new(|c: &[u32]| if c.iter().sum::<u32>() >= 1 { 1.0 } else { 0.0 } + 0.1),
            Some(1.1),
        );
        let lo = solve_backward(&spec, &Driver::zero(), &g1, &grid, &opts).unwrap();
        let hi = solve_backward(&spec, &Driver::constant(0.3), &g2, &grid, &opts).unwrap();
        for layer in 0..grid.layers() {
            for s in 0..lo.states().len() {
                assert!(lo.y(layer, s) <= hi.y(layer, s) + 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_zero_driver_examples() {
        let spec = unit_spec();
        let constant = TerminalCondition::new("c", Arc::new(|_: &[u32]| 2.5), Some(2.5));
        assert_eq!(closed_form_zero_driver(&spec, &constant, 0.3, &[4]).unwrap(), 2.5);
        let count = TerminalCondition::new("n", Arc::new(|c: &[u32]| c[0] as f64), None);
        assert_eq!(closed_form_zero_driver(&spec, &count, 1.0, &[3]).unwrap(), 3.0);
        let v = closed_form_zero_driver(&spec, &count, 0.0, &[0]).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-10);
        assert!(closed_form_zero_driver(&spec, &count, 2.0, &[0]).is_err());
    }

    #[test]
    fn entropic_closed_form_examples() {
        let spec = unit_spec();
        let constant = TerminalCondition::new("c", Arc::new(|_: &[u32]| -1.2), Some(1.2));
        assert_relative_eq!(
            entropic_closed_form(&spec, &constant, 2.0, 0.4, &[1]).unwrap(),
            -1.2,
            epsilon = 1e-13
        );
        let xi = indicator_terminal();
        let v = entropic_closed_form(&spec, &xi, 1.0, 0.0, &[0]).unwrap();
        assert_relative_eq!(v, ((-1.0f64).exp() + 1.0f64.exp() - 1.0).ln(), epsilon = 1e-12);
        // λ → 0 limit approaches the plain conditional expectation
        let small = entropic_closed_form(&spec, &xi, 1e-4, 0.0, &[0]).unwrap();
        let zero = closed_form_zero_driver(&spec, &xi, 0.0, &[0]).unwrap();
        assert!((small - zero).abs() < 5e-5, "gap {}", small - zero);
        assert!(small >= zero); // log-moment dominates the mean
        assert!(entropic_closed_form(&spec, &xi, 0.0, 0.0, &[0]).is_err());
    }

    #[test]
    fn trajectory_jump_identity_and_terminal() {
        let spec = two_mark_spec();
        let xi = TerminalCondition::new(
            "weighted",
            Arc::new(|c: &[u32]| c[0] as f64 - 0.5 * c[1] as f64),
            None,
        );
        let grid = TimeGrid::uniform(&spec, 20).unwrap();
        let opts = SolveOptions { n_max: 16, ..SolveOptions::default() };
        let d = Driver::entropic(1.0).unwrap();
        let field = solve_backward(&spec, &d, &xi, &grid, &opts).unwrap();
        let mut checked_jumps = 0;
        for seed in 0..200 {
            let path = mpp::simulate_path(&spec, seed);
            let traj = sample_trajectory(&field, &path).unwrap();
            assert_eq!(traj.terminal, xi.eval(&path.terminal_counts(2)));
            let mut pre = vec![0u32; 2];
            for (ev, te) in path.events.iter().zip(&traj.events) {
                let layer = grid.layer_before(ev.time);
                let s = field.states().index_of(&pre).unwrap();
                assert_eq!(te.jump.to_bits(), field.u(layer, s as usize, ev.mark).to_bits());
                pre[ev.mark] += 1;
                checked_jumps += 1;
            }
        }
        assert!(checked_jumps > 50);
        // overflow guard: a tiny lattice rejects busy paths
        let tiny = SolveOptions { n_max: 1, ..SolveOptions::default() };
        let small = solve_backward(&spec, &d, &xi, &grid, &tiny).unwrap();
        let busy = (0..500)
            .map(|s| mpp::simulate_path(&spec, s))
            .find(|p| p.events.len() > 1)
            .unwrap();
        assert!(matches!(
            sample_trajectory(&small, &busy),
            Err(Error::StateOverflow { .. })
        ));
    }

    #[test]
    fn forward_law_matches_poisson() {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, 10).unwrap();
        let law = forward_law(&spec, &grid, 40, 8, 1e-12).unwrap();
        assert_eq!(law.layer(0)[0], 1.0);
        let pmf = poisson_pmf(1.0, 41);
        let last = law.layer(grid.layers() - 1);
        for (s, &p) in last.iter().enumerate() {
            assert!((0.0..=1.0).contains(&p));
            assert!(
                (p - pmf[law.states().total(s) as usize]).abs() < 1e-9,
                "state {s}: {p} vs {}",
                pmf[s]
            );
        }
        assert!(law.max_leak() < 1e-9);
        let mean = law.expectation(grid.layers() - 1, |c| c[0] as f64);
        assert_relative_eq!(mean, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn oracle_field_residual_is_martingale_exact() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let field = OracleField { spec: &spec, xi: &xi, lam: None };
        let stats =
            forward_residual(&field, &spec, &Driver::zero(), &xi, 200, 77, 5e-3).unwrap();
        assert!(stats.max_abs < 1e-8, "max |D| = {}", stats.max_abs);
    }

    #[test]
    fn entropic_oracle_field_residual_vanishes() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let d = Driver::entropic(1.0).unwrap();
        let field = OracleField { spec: &spec, xi: &xi, lam: Some(1.0) };
        let stats = forward_residual(&field, &spec, &d, &xi, 100, 31, 2e-3).unwrap();
        assert!(stats.max_abs < 1e-7, "max |D| = {}", stats.max_abs);
    }

    #[test]
    fn solver_field_residual_shrinks_with_grid() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let d = Driver::entropic(1.0).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let mut means = Vec::new();
        for steps in [20, 80] {
            let grid = TimeGrid::uniform(&spec, steps).unwrap();
            let field = solve_backward(&spec, &d, &xi, &grid, &opts).unwrap();
            let stats = forward_residual(&field, &spec, &d, &xi, 300, 5, 0.05).unwrap();
            means.push(stats.mean_abs);
        }
        assert!(
            means[1] < means[0],
            "mean |D| should shrink with refinement: {means:?}"
        );
        let field = solve_backward(
            &spec,
            &d,
            &xi,
            &TimeGrid::uniform(&spec, 20).unwrap(),
            &opts,
        )
        .unwrap();
        assert!(matches!(
            forward_residual(&field, &spec, &d, &xi, 0, 0, 0.05),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn csv_export_shape() {
        let spec = unit_spec();
        let xi = indicator_terminal();
        let grid = TimeGrid::uniform(&spec, 3).unwrap();
        let opts = SolveOptions { n_max: 4, ..SolveOptions::default() };
        let field = solve_backward(&spec, &Driver::zero(), &xi, &grid, &opts).unwrap();
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer_time,n1,y,u1");
        assert_eq!(lines.len(), 1 + grid.layers() * field.states().len());
        // terminal layer leaves the jump cell empty
        assert!(lines.last().unwrap().ends_with(','));
        // numeric cells round-trip
        let y_cell = lines[1].split(',').nth(2).unwrap();
        assert_eq!(y_cell.parse::<f64>().unwrap(), field.y(0, 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn comparison_monotone_under_driver_and_terminal_order(
            c1 in -1.0f64..1.0,
            gap in 0.0f64..1.0,
            offset in 0.0f64..0.5,
        ) {
            let spec = unit_spec();
            let grid = TimeGrid::uniform(&spec, 8).unwrap();
            let opts = SolveOptions { n_max: 12, ..SolveOptions::default() };
            let glo = TerminalCondition::new("g", Arc::new(|c: &[u32]| (c[0] % 3) as f64), None);
            let ghi = TerminalCondition::new(
                "g+",
                Arc::new(move |c: &[u32]| (c[0] % 3) as f64 + offset),
                None,
            );
            let lo = solve_backward(&spec, &Driver::constant(c1), &glo, &grid, &opts).unwrap();
            let hi = solve_backward(&spec, &Driver::constant(c1 + gap), &ghi, &grid, &opts).unwrap();
            for layer in 0..grid.layers() {
                for s in 0..lo.states().len() {
                    prop_assert!(lo.y(layer, s) <= hi.y(layer, s) + 1e-12);
                }
            }
        }
    }
}
