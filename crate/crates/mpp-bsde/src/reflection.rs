//! Mean reflection with a deterministic flat compensator.
//!
//! The constrained problem asks for a triple `(Y, U, K)` with
//! `Y_t = ξ + ∫_t^T f(s, Y_s, U_s) dA_s + K_T − K_t − ∫_t^T ∫_E U_s(e) q(ds de)`,
//! `E[ℓ(t, Y_t)] ≥ 0` for a strictly increasing bi-Lipschitz loss `ℓ`, and a
//! deterministic nondecreasing `K` that is *flat*:
//! `∫_0^T E[ℓ(t, Y_{t⁻})] dK_t = 0` — `K` grows only while the constraint
//! binds. The minimal construction is explicit: with `y` the unreflected
//! solution, let `L_t(η)` be the smallest `x ≥ 0` with `E[ℓ(t, x+η)] ≥ 0`,
//! `R_t = sup_{s ≥ t} L_s(law of y_s)`, then `Y = y + R` and
//! `K_t = R_0 − R_t`. The jump field `U` is untouched by the shift.
//!
//! Generators that read `Y` itself are handled by Picard iteration: freeze
//! the previous reflected iterate inside the driver, re-solve, re-reflect.
//! The iteration carries a guarantee flag from the window condition
//! `(32 + 64κ)·β·ρ(h) < 1` with `κ = κ̄/κ_`; when the flag is off the
//! distance trace still certifies (or refutes) convergence empirically.

use crate::drivers::{AssumptionCheck, Driver, TerminalCondition};
use crate::lattice::{self, LatticeDriver, LawTable, SolveOptions, TimeGrid, ValueField};
use crate::mpp::CompensatorSpec;
use crate::numeric::{fmt_f64, KahanSum};
use crate::{parallel, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::sync::Arc;

pub type LossFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Loss `ℓ(t, y)`, strictly increasing in `y`, with declared bi-Lipschitz
/// constants `κ_ ≤ |ℓ(t,y₁)−ℓ(t,y₂)|/|y₁−y₂| ≤ κ̄`.
#[derive(Clone)]
pub struct LossFunction {
    name: String,
    f: Arc<LossFn>,
    kappa_lower: f64,
    kappa_upper: f64,
}

impl std::fmt::Debug for LossFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LossFunction")
            .field("name", &self.name)
            .field("kappa_lower", &self.kappa_lower)
            .field("kappa_upper", &self.kappa_upper)
            .finish()
    }
}

impl LossFunction {
    pub fn new(
        name: impl Into<String>,
        f: Arc<LossFn>,
        kappa_lower: f64,
        kappa_upper: f64,
    ) -> Result<Self> {
        if !(kappa_lower > 0.0) || !kappa_lower.is_finite() {
            return Err(Error::Validation(format!(
                "kappa_lower must be positive and finite, got {kappa_lower}"
            )));
        }
        if !(kappa_upper >= kappa_lower) || !kappa_upper.is_finite() {
            return Err(Error::Validation(format!(
                "kappa_upper must be finite and ≥ kappa_lower, got {kappa_upper}"
            )));
        }
        Ok(Self { name: name.into(), f, kappa_lower, kappa_upper })
    }

    pub fn eval(&self, t: f64, y: f64) -> f64 {
        (self.f)(t, y)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kappa_lower(&self) -> f64 {
        self.kappa_lower
    }

    pub fn kappa_upper(&self) -> f64 {
        self.kappa_upper
    }

    /// Conditioning ratio `κ = κ̄ / κ_` of the level operator.
    pub fn kappa(&self) -> f64 {
        self.kappa_upper / self.kappa_lower
    }

    /// `ℓ(t, y) = y − c`.
    pub fn affine(c: f64) -> Self {
        Self {
            name: format!("affine:{c}"),
            f: Arc::new(move |_t, y| y - c),
            kappa_lower: 1.0,
            kappa_upper: 1.0,
        }
    }

    /// `ℓ(t, y) = y + 0.4·sin y − c`: derivative ranges over `1 ± 0.4`,
    /// so `κ_ = 0.6`, `κ̄ = 1.4`, `κ = 7/3`.
    pub fn soft_sine(c: f64) -> Self {
        Self {
            name: format!("soft_sine:{c}"),
            f: Arc::new(move |_t, y| y + 0.4 * y.sin() - c),
            kappa_lower: 0.6,
            kappa_upper: 1.4,
        }
    }

    /// Parse `"linear"`, `"affine:c"`, or `"soft_sine:c"`.
    pub fn from_catalog(s: &str) -> Result<Self> {
        let (head, args) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let one = |args: Option<&str>| -> Result<f64> {
            let a = args.ok_or_else(|| {
                Error::Validation(format!("loss '{head}' needs one parameter, e.g. '{head}:0.5'"))
            })?;
            a.trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!("loss '{s}': cannot parse '{a}' as a number"))
            })
        };
        match head {
            "linear" => Ok(Self::affine(0.0)),
            "affine" => Ok(Self::affine(one(args)?)),
            "soft_sine" => Ok(Self::soft_sine(one(args)?)),
            other => Err(Error::Validation(format!(
                "unknown loss '{other}' (catalog: linear, affine:c, soft_sine:c)"
            ))),
        }
    }
}

/// Sampling plan for [`validate_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossSamplePlan {
    pub time_count: usize,
    pub pair_count: usize,
    pub y_radius: f64,
    pub seed: u64,
}

impl Default for LossSamplePlan {
    fn default() -> Self {
        Self { time_count: 8, pair_count: 96, y_radius: 8.0, seed: 0x105_5 }
    }
}

/// Certificate for a loss function's declared structure.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub loss: String,
    pub tol: f64,
    pub checks: Vec<AssumptionCheck>,
}

impl LossReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Sample `(t, y₁, y₂)` triples and certify: strict monotonicity in `y`,
/// the two-sided bi-Lipschitz bound, and linear growth
/// `|ℓ(t,y)| ≤ C(1+|y|)` with `C = max_t |ℓ(t,0)| + κ̄`. Margins follow the
/// convention of driver structure checks: positive means violated.
pub fn validate_loss(
    loss: &LossFunction,
    plan: &LossSamplePlan,
    tol: f64,
) -> Result<LossReport> {
    if plan.time_count == 0 || plan.pair_count == 0 {
        return Err(Error::Validation("loss sample plan must request at least one sample".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::Validation(format!("tolerance must be nonnegative, got {tol}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut triples = Vec::with_capacity(plan.time_count * plan.pair_count);
    for _ in 0..plan.time_count {
        let t = rng.gen::<f64>();
        for j in 0..plan.pair_count {
            // Half the pairs hug the origin, where curvature defects of a
            // wrongly declared loss are most visible.
            let r = if j % 2 == 0 { plan.y_radius } else { plan.y_radius * 1e-3 };
            let y1 = (rng.gen::<f64>() * 2.0 - 1.0) * r;
            let y2 = (rng.gen::<f64>() * 2.0 - 1.0) * r;
            triples.push((t, y1, y2));
        }
    }
    let growth_c = {
        let worst_at_zero = triples
            .iter()
            .map(|&(t, _, _)| loss.eval(t, 0.0).abs())
            .fold(0.0, f64::max);
        worst_at_zero + loss.kappa_upper
    };
    let margins: Vec<[f64; 3]> = parallel::map_indexed(triples.len(), |i| {
        let (t, y1, y2) = triples[i];
        let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        let dl = loss.eval(t, hi) - loss.eval(t, lo);
        let gap = hi - lo;
        // strictly increasing: ℓ(hi) − ℓ(lo) must exceed κ_·gap anyway;
        // flag any non-positive increment over a distinguishable gap.
        let m_incr = if gap > 1e-12 { -dl + 1e-15 } else { f64::NEG_INFINITY };
        let m_bilip = (dl.abs() - loss.kappa_upper * gap - tol)
            .max(loss.kappa_lower * gap - dl.abs() - tol);
        let m_growth = loss.eval(t, y1).abs() - growth_c * (1.0 + y1.abs()) - tol;
        [m_incr, m_bilip, m_growth]
    });
    let names = ["strictly_increasing", "bi_lipschitz", "linear_growth"];
    let mut checks = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let (mut worst, mut at) = (f64::NEG_INFINITY, 0usize);
        for (i, m) in margins.iter().enumerate() {
            if m[c] > worst {
                worst = m[c];
                at = i;
            }
        }
        let (t, y1, y2) = triples[at];
        checks.push(AssumptionCheck {
            name: (*name).into(),
            pass: worst <= 0.0,
            worst_margin: worst,
            samples: triples.len(),
            witness: (worst > 0.0).then(|| format!("t = {t}, y1 = {y1}, y2 = {y2}")),
        });
    }
    Ok(LossReport { loss: loss.name.clone(), tol, checks })
}

/// `E[ℓ(t, η)]` for a discrete law given as parallel value/mass slices.
pub fn expected_loss(loss: &LossFunction, t: f64, values: &[f64], probs: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for (&v, &p) in values.iter().zip(probs) {
        if p != 0.0 {
            acc.add(p * loss.eval(t, v));
        }
    }
    acc.value()
}

fn check_law(values: &[f64], probs: &[f64]) -> Result<()> {
    if values.is_empty() || values.len() != probs.len() {
        return Err(Error::Validation(format!(
            "law needs matching nonempty value/mass slices, got {} values and {} masses",
            values.len(),
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("law mass {p} outside [0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("law values must be finite".into()));
    }
    let total = crate::numeric::ksum(probs.iter().copied());
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("law masses sum to {total}, expected 1")));
    }
    Ok(())
}

/// Smallest `x ≥ 0` with `E[ℓ(t, x + η)] ≥ 0` for the discrete law `η`.
///
/// Returns `0` when the constraint already holds. Otherwise bisects on
/// `[0, −E[ℓ(t,η)]/κ_]` — a valid bracket because monotonicity plus the
/// lower Lipschitz bound give `E[ℓ(t, x+η)] ≥ E[ℓ(t,η)] + κ_·x` — and
/// returns the upper endpoint, so the constraint holds *at* the returned
/// shift (margins come out nonnegative, overshooting the root by ≤ `tol`).
pub fn operator_l(
    loss: &LossFunction,
    t: f64,
    values: &[f64],
    probs: &[f64],
    tol: f64,
) -> Result<f64> {
    check_law(values, probs)?;
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("bisection tolerance must be positive, got {tol}")));
    }
    let m0 = expected_loss(loss, t, values, probs);
    if m0 >= 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0f64;
    let mut hi = -m0 / loss.kappa_lower;
    for _ in 0..100 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let shifted: Vec<f64> = values.iter().map(|v| v + mid).collect();
        if expected_loss(loss, t, &shifted, probs) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Deterministic nondecreasing grid function with `K(t₀) = 0`.
#[derive(Clone, Debug, Serialize)]
pub struct FlatCompensator {
    values: Vec<f64>,
}

impl FlatCompensator {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("compensator needs at least one layer".into()));
        }
        if values[0].abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "compensator must start at 0, got {}",
                values[0]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("compensator values must be finite".into()));
        }
        if let Some(w) = values.windows(2).find(|w| w[1] < w[0] - 1e-12) {
            return Err(Error::Validation(format!(
                "compensator must be nondecreasing, got step {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { values })
    }

    pub fn value(&self, layer: usize) -> f64 {
        self.values[layer]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Window-length certificate for the Picard contraction: the largest
/// grid-aligned `h = T/N` with `(32 + 64κ)·β·ρ(h) < 1`.
#[derive(Clone, Debug, Serialize)]
pub struct PicardHorizon {
    pub h: f64,
    pub windows: usize,
    /// `(32 + 64κ)·β·ρ(h)` at the returned `h`.
    pub product: f64,
    /// Whether the strict window condition holds at `h`.
    pub guaranteed: bool,
    pub warning: Option<String>,
}

/// Contraction window from the constants alone. `β = 0` keeps the whole
/// horizon as one window.
pub fn picard_horizon(beta: f64, kappa: f64, spec: &CompensatorSpec) -> Result<PicardHorizon> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Validation(format!(
            "beta must be nonnegative and finite, got {beta}"
        )));
    }
    if !(kappa >= 1.0) {
        return Err(Error::Validation(format!("kappa = κ̄/κ_ must be ≥ 1, got {kappa}")));
    }
    let t_end = spec.horizon();
    if beta == 0.0 {
        return Ok(PicardHorizon {
            h: t_end,
            windows: 1,
            product: 0.0,
            guaranteed: true,
            warning: None,
        });
    }
    let c = (32.0 + 64.0 * kappa) * beta;
    let rho = |h: f64| spec.rho().rho(h);
    let mut n = (c * rho(t_end)).floor().max(0.0) as usize + 1;
    while c * rho(t_end / n as f64) >= 1.0 && n < usize::MAX / 2 {
        n += 1;
    }
    let h = t_end / n as f64;
    let product = c * rho(h);
    Ok(PicardHorizon {
        h,
        windows: n,
        product,
        guaranteed: product < 1.0,
        warning: (n > 1_000_000)
            .then(|| format!("window condition needs {n} windows; iteration may be slow")),
    })
}

/// Reflected solution: unreflected field `y`, deterministic shift
/// `R(t_i) = max_{j ≥ i} L_j`, reflected values `Y = y + R`, flat
/// compensator `K(t_i) = R(t₀) − R(t_i)`, and the untouched jump field.
#[derive(Clone, Debug)]
pub struct ReflectedSolution {
    y_field: ValueField,
    levels: Vec<f64>,
    shifts: Vec<f64>,
    k: FlatCompensator,
    trace: Vec<f64>,
    converged: bool,
    horizon: Option<PicardHorizon>,
}

impl ReflectedSolution {
    /// Unreflected value field `y`.
    pub fn unreflected(&self) -> &ValueField {
        &self.y_field
    }

    /// Constraint levels `L_i` per layer.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Shift `R(t_i)`; nonincreasing in `i`.
    pub fn shift(&self, layer: usize) -> f64 {
        self.shifts[layer]
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    /// Reflected value `Y(i, n) = y(i, n) + R(t_i)`.
    pub fn y(&self, layer: usize, state: usize) -> f64 {
        self.y_field.y(layer, state) + self.shifts[layer]
    }

    pub fn y0(&self) -> f64 {
        self.y(0, 0)
    }

    /// Jump field, identical to the unreflected one (the shift is
    /// deterministic, so `ΔY = Δy`).
    pub fn u(&self, layer: usize, state: usize, mark: usize) -> f64 {
        self.y_field.u(layer, state, mark)
    }

    pub fn compensator(&self) -> &FlatCompensator {
        &self.k
    }

    /// Per-iteration sup-distances `‖Y^{(m)} − Y^{(m−1)}‖_∞`; empty when the
    /// solution came from a single reflection pass.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn horizon_check(&self) -> Option<&PicardHorizon> {
        self.horizon.as_ref()
    }

    /// CSV export `t,k,r,margin` with one row per layer; `margins` as
    /// produced by [`skorokhod_report`].
    pub fn write_csv<W: Write>(&self, margins: &[f64], w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,k,r,margin")?;
        for i in 0..self.shifts.len() {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(self.y_field.grid().time(i)),
                fmt_f64(self.k.value(i)),
                fmt_f64(self.shifts[i]),
                fmt_f64(margins.get(i).copied().unwrap_or(f64::NAN)),
            )?;
        }
        Ok(())
    }
}

fn grids_consistent(field: &ValueField, laws: &LawTable) -> Result<()> {
    let a = field.grid().times();
    let b = laws.grid().times();
    if a != b {
        return Err(Error::Validation(
            "value field and law table live on different grids".into(),
        ));
    }
    if field.states().len() != laws.states().len() {
        return Err(Error::Validation(format!(
            "value field has {} states but law table has {}",
            field.states().len(),
            laws.states().len()
        )));
    }
    Ok(())
}

/// One reflection pass: constraint levels from the exact layer laws, shift
/// by backward running max, compensator by differencing.
pub fn running_sup_reflect(
    y_field: &ValueField,
    laws: &LawTable,
    loss: &LossFunction,
    tol: f64,
) -> Result<ReflectedSolution> {
    grids_consistent(y_field, laws)?;
    let layers = y_field.grid().layers();
    let levels_r: Vec<Result<f64>> = parallel::map_indexed(layers, |i| {
        let values: Vec<f64> =
            (0..y_field.states().len()).map(|s| y_field.y(i, s)).collect();
        operator_l(loss, y_field.grid().time(i), &values, laws.layer(i), tol)
    });
    let mut levels = Vec::with_capacity(layers);
    for l in levels_r {
        levels.push(l?);
    }
    let mut shifts = vec![0.0; layers];
    let mut run = f64::NEG_INFINITY;
    for i in (0..layers).rev() {
        run = run.max(levels[i]);
        shifts[i] = run;
    }
    let k = FlatCompensator::from_values(shifts.iter().map(|r| shifts[0] - r).collect())?;
    Ok(ReflectedSolution {
        y_field: y_field.clone(),
        levels,
        shifts,
        k,
        trace: Vec::new(),
        converged: true,
        horizon: None,
    })
}

/// Controls for [`solve_reflected`].
#[derive(Clone, Copy, Debug)]
pub struct ReflectOptions {
    pub solve: SolveOptions,
    /// Stop when `‖Y^{(m)} − Y^{(m−1)}‖_∞` falls below this.
    pub picard_tol: f64,
    pub max_iter: usize,
    /// Bisection tolerance for the constraint levels.
    pub bisect_tol: f64,
}

impl Default for ReflectOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            picard_tol: 1e-8,
            max_iter: 25,
            bisect_tol: 1e-10,
        }
    }
}

/// Generator with its `y`-argument frozen along a previous reflected
/// iterate, making each Picard step a driver without `y`-feedback.
struct FrozenY<'a> {
    inner: &'a Driver,
    prev: &'a [Vec<f64>],
}

impl LatticeDriver for FrozenY<'_> {
    fn eval(
        &self,
        layer: usize,
        state: usize,
        t: f64,
        _counts: &[u32],
        _y: f64,
        u: &[f64],
        phi: &[f64],
    ) -> f64 {
        self.inner.eval(t, self.prev[layer][state], u, phi)
    }

    fn lipschitz_y(&self) -> f64 {
        0.0
    }
}

/// Picard iteration for `y`-dependent generators: `Y^{(0)} ≡ 0`; each round
/// solves the lattice problem with the driver frozen at `Y^{(m−1)}` and
/// re-reflects. Stops when the sup-distance falls below `picard_tol`;
/// exceeding `max_iter` returns the last iterate flagged `converged: false`
/// together with the full distance trace.
pub fn solve_reflected(
    spec: &CompensatorSpec,
    d: &Driver,
    loss: &LossFunction,
    xi: &TerminalCondition,
    grid: &TimeGrid,
    opts: &ReflectOptions,
) -> Result<ReflectedSolution> {
    if opts.max_iter == 0 {
        return Err(Error::Validation("picard iteration needs max_iter ≥ 1".into()));
    }
    if !(opts.picard_tol > 0.0) {
        return Err(Error::Validation(format!(
            "picard_tol must be positive, got {}",
            opts.picard_tol
        )));
    }
    let laws = lattice::forward_law(spec, grid, opts.solve.n_max, opts.solve.j_max, opts.solve.tail_tol)?;
    let horizon = picard_horizon(d.growth().beta, loss.kappa().max(1.0), spec)?;
    let layers = grid.layers();
    let states = laws.states().len();
    let mut prev = vec![vec![0.0f64; states]; layers];
    let mut trace = Vec::new();
    let mut best: Option<ReflectedSolution> = None;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let frozen = FrozenY { inner: d, prev: &prev };
        let field = lattice::solve_backward(spec, &frozen, xi, grid, &opts.solve)?;
        let refl = running_sup_reflect(&field, &laws, loss, opts.bisect_tol)?;
        let mut dist = 0.0f64;
        let mut cur = vec![vec![0.0f64; states]; layers];
        for (i, row) in cur.iter_mut().enumerate() {
            for (s, slot) in row.iter_mut().enumerate() {
                *slot = refl.y(i, s);
                dist = dist.max((*slot - prev[i][s]).abs());
            }
        }
        trace.push(dist);
        prev = cur;
        best = Some(refl);
        if dist < opts.picard_tol {
            converged = true;
            break;
        }
    }
    let mut sol = best.expect("max_iter ≥ 1 guarantees an iterate");
    sol.trace = trace;
    sol.converged = converged;
    sol.horizon = Some(horizon);
    Ok(sol)
}

/// Constraint margins and the flatness residual for a reflected solution.
#[derive(Clone, Debug, Serialize)]
pub struct SkorokhodReport {
    /// `E[ℓ(t_i, Y_{t_i})]` per layer, from the exact state law.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    /// `Σ_i margin_i · (K_{i+1} − K_i)`; zero iff `K` grows only where the
    /// constraint binds.
    pub flatness: f64,
    pub k_total: f64,
    pub monotone: bool,
    pub starts_at_zero: bool,
    pub tol: f64,
    pub pass: bool,
}

/// Flatness residual `Σ_i margin_i·ΔK_i` with left-endpoint margins (the
/// reflected value has no reflection-induced jumps inside a step, so the
/// left limit at `t_{i+1}` carries layer `i`'s margin).
pub fn flatness_residual(margins: &[f64], k: &FlatCompensator) -> f64 {
    let mut acc = KahanSum::new();
    for i in 0..k.len().saturating_sub(1) {
        acc.add(margins[i] * (k.value(i + 1) - k.value(i)));
    }
    acc.value()
}

/// Recompute constraint margins from the reflected values and the exact
/// layer laws, and judge the two defining conditions: `min margin ≥ −tol`
/// and `|flatness| ≤ tol·max(K(T), 1)`.
pub fn skorokhod_report(
    sol: &ReflectedSolution,
    loss: &LossFunction,
    laws: &LawTable,
    tol: f64,
) -> Result<SkorokhodReport> {
    grids_consistent(sol.unreflected(), laws)?;
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("tolerance must be positive, got {tol}")));
    }
    let layers = sol.unreflected().grid().layers();
    let margins: Vec<f64> = parallel::map_indexed(layers, |i| {
        let values: Vec<f64> =
            (0..sol.unreflected().states().len()).map(|s| sol.y(i, s)).collect();
        expected_loss(loss, sol.unreflected().grid().time(i), &values, laws.layer(i))
    });
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let k = sol.compensator();
    let flatness = flatness_residual(&margins, k);
    let monotone = k.values().windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let starts_at_zero = k.value(0).abs() <= 1e-12;
    let pass = min_margin >= -tol
        && flatness.abs() <= tol * k.total().max(1.0)
        && monotone
        && starts_at_zero;
    Ok(SkorokhodReport {
        margins,
        min_margin,
        flatness,
        k_total: k.total(),
        monotone,
        starts_at_zero,
        tol,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpp::{Clock, MarkSpace, PhiSegment};
    use approx::assert_relative_eq;

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

    const E_XI: f64 = 0.632_120_558_828_557_7; // 1 − e^{−1}

    #[test]
    fn loss_catalog_and_validation() {
        let plan = LossSamplePlan::default();
        let affine = LossFunction::from_catalog("affine:0.5").unwrap();
        assert_eq!(affine.eval(0.3, 2.0), 1.5);
        assert!(validate_loss(&affine, &plan, 1e-12).unwrap().pass());

        let sine = LossFunction::from_catalog("soft_sine:0").unwrap();
        assert_relative_eq!(sine.kappa(), 7.0 / 3.0, epsilon = 1e-15);
        assert!(validate_loss(&sine, &plan, 1e-9).unwrap().pass());

        // y² declared bi-Lipschitz: the lower bound dies at the origin.
        let quad =
            LossFunction::new("quad", Arc::new(|_t, y: f64| y * y), 0.5, 4.0).unwrap();
        let rep = validate_loss(&quad, &plan, 1e-9).unwrap();
        assert!(!rep.pass());
        let bilip = rep.checks.iter().find(|c| c.name == "bi_lipschitz").unwrap();
        assert!(!bilip.pass, "bi-Lipschitz lower bound should fail near 0");

        assert!(LossFunction::from_catalog("linear").is_ok());
        assert!(LossFunction::from_catalog("affine").is_err());
        assert!(LossFunction::from_catalog("huber:1").is_err());
        assert!(LossFunction::new("bad", Arc::new(|_, y| y), 0.0, 1.0).is_err());
        assert!(LossFunction::new("bad", Arc::new(|_, y| y), 2.0, 1.0).is_err());
    }

    #[test]
    fn operator_examples() {
        // constraint already met → exactly 0
        let affine = LossFunction::affine(0.2);
        let v = [0.1, 0.5];
        let p = [0.5, 0.5];
        assert_eq!(operator_l(&affine, 0.0, &v, &p, 1e-10).unwrap(), 0.0);

        // linear loss closed form: L = c − E[η]
        let loss = LossFunction::affine(0.8);
        let values = [0.0, 1.0];
        let probs = [1.0 - E_XI, E_XI];
        let l = operator_l(&loss, 0.0, &values, &probs, 1e-10).unwrap();
        assert_relative_eq!(l, 0.8 - E_XI, epsilon = 1e-10);

        // soft sine, point mass at −1: root of x − 1 + 0.4 sin(x − 1) = 0 is 1
        let sine = LossFunction::soft_sine(0.0);
        let l = operator_l(&sine, 0.0, &[-1.0], &[1.0], 1e-12).unwrap();
        assert_relative_eq!(l, 1.0, epsilon = 1e-9);

        // law validation
        assert!(operator_l(&loss, 0.0, &[0.0], &[0.9], 1e-10).is_err());
        assert!(operator_l(&loss, 0.0, &[0.0, 1.0], &[1.0], 1e-10).is_err());
        assert!(operator_l(&loss, 0.0, &[f64::NAN], &[1.0], 1e-10).is_err());
        assert!(operator_l(&loss, 0.0, &[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn operator_shift_makes_constraint_hold() {
        let sine = LossFunction::soft_sine(0.3);
        let values = [-2.0, -0.5, 0.4];
        let probs = [0.3, 0.5, 0.2];
        let l = operator_l(&sine, 0.0, &values, &probs, 1e-10).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + l).collect();
        let margin = expected_loss(&sine, 0.0, &shifted, &probs);
        assert!(margin >= 0.0, "returned shift must satisfy the constraint, margin {margin}");
        assert!(margin <= 1.4 * 1e-10 + 1e-12, "overshoot beyond tolerance: {margin}");
    }

    #[test]
    fn horizon_examples() {
        let spec = unit_spec();
        let h0 = picard_horizon(0.0, 2.0, &spec).unwrap();
        assert_eq!(h0.h, 1.0);
        assert_eq!(h0.windows, 1);
        assert!(h0.guaranteed);

        let h1 = picard_horizon(1.0, 1.0, &spec).unwrap();
        assert_eq!(h1.windows, 97);
        assert!(h1.product < 1.0 && h1.h < 1.0 / 96.0);

        let h2 = picard_horizon(0.1, 2.0, &spec).unwrap();
        assert_eq!(h2.windows, 17);

        let h3 = picard_horizon(0.1, 1.0, &spec).unwrap();
        assert_eq!(h3.windows, 10);
        assert_relative_eq!(h3.product, 0.96, epsilon = 1e-12);
        assert!(h3.guaranteed);

        assert!(picard_horizon(-1.0, 1.0, &spec).is_err());
        assert!(picard_horizon(1.0, 0.5, &spec).is_err());
    }

    fn reflect_binding(steps: usize) -> (CompensatorSpec, TimeGrid, ReflectedSolution, LawTable) {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, steps).unwrap();
        let opts = ReflectOptions {
            solve: SolveOptions { n_max: 30, ..SolveOptions::default() },
            ..ReflectOptions::default()
        };
        let loss = LossFunction::affine(E_XI);
        let sol = solve_reflected(
            &spec,
            &Driver::constant(-1.0),
            &loss,
            &indicator_terminal(),
            &grid,
            &opts,
        )
        .unwrap();
        let laws = lattice::forward_law(&spec, &grid, 30, 8, 1e-12).unwrap();
        (spec, grid, sol, laws)
    }

    #[test]
    fn binding_case_recovers_linear_compensator() {
        let (_spec, grid, sol, laws) = reflect_binding(100);
        for i in 0..grid.layers() {
            let t = grid.time(i);
            assert!(
                (sol.compensator().value(i) - t).abs() < 1e-8,
                "K({t}) = {} should be ≈ {t}",
                sol.compensator().value(i)
            );
        }
        let loss = LossFunction::affine(E_XI);
        let rep = skorokhod_report(&sol, &loss, &laws, 1e-8).unwrap();
        assert!(rep.pass, "binding case must satisfy constraint and flatness: {rep:?}");
        assert!(rep.min_margin >= -1e-8 && rep.min_margin < 1e-8);
        assert!(rep.flatness.abs() < 1e-9);
        // y-independent driver: first pass lands, second confirms with 0
        assert_eq!(sol.trace().len(), 2);
        assert_eq!(sol.trace()[1], 0.0);
        assert!(sol.converged());
    }

    #[test]
    fn slack_case_leaves_solution_untouched() {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, 50).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let field =
            lattice::solve_backward(&spec, &Driver::zero(), &indicator_terminal(), &grid, &opts)
                .unwrap();
        let laws = lattice::forward_law(&spec, &grid, 30, 8, 1e-12).unwrap();
        let loss = LossFunction::affine(0.3); // E[ξ] ≈ 0.632 > 0.3
        let sol = running_sup_reflect(&field, &laws, &loss, 1e-10).unwrap();
        assert_eq!(sol.compensator().total(), 0.0);
        for i in [0usize, 25, 50] {
            assert_eq!(sol.shift(i), 0.0);
            assert_eq!(sol.y(i, 0).to_bits(), field.y(i, 0).to_bits());
        }

        // c > E[ξ]: constant level, K ≈ 0 (layerwise root wobble only),
        // Y shifted by the constant
        let tight = LossFunction::affine(0.8);
        let sol2 = running_sup_reflect(&field, &laws, &tight, 1e-10).unwrap();
        assert!(sol2.compensator().total() < 1e-9);
        assert_relative_eq!(sol2.shift(0), 0.8 - E_XI, epsilon = 1e-9);
        let rep = skorokhod_report(&sol2, &tight, &laws, 1e-8).unwrap();
        assert!(rep.pass);
        assert!(rep.margins.iter().all(|m| m.abs() < 1e-8));
    }

    #[test]
    fn perturbed_compensator_breaks_flatness() {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, 50).unwrap();
        let opts = SolveOptions { n_max: 30, ..SolveOptions::default() };
        let field =
            lattice::solve_backward(&spec, &Driver::zero(), &indicator_terminal(), &grid, &opts)
                .unwrap();
        let laws = lattice::forward_law(&spec, &grid, 30, 8, 1e-12).unwrap();
        let loss = LossFunction::affine(0.3);
        let sol = running_sup_reflect(&field, &laws, &loss, 1e-10).unwrap();
        let rep = skorokhod_report(&sol, &loss, &laws, 1e-8).unwrap();
        assert!(rep.pass);
        assert!(rep.min_margin > 0.1, "slack scenario should have fat margins");

        // Same margins, doctored K̃(t_i) = 0.01·t_i: grows where the
        // constraint is slack, so the residual must blow past tol·K̃(T).
        let doctored = FlatCompensator::from_values(
            (0..grid.layers()).map(|i| 0.01 * grid.time(i)).collect(),
        )
        .unwrap();
        let res = flatness_residual(&rep.margins, &doctored);
        assert!(
            res.abs() > 1e-8 * doctored.total().max(1.0) * 100.0,
            "perturbed compensator must be detected, residual {res}"
        );

        assert!(FlatCompensator::from_values(vec![0.5, 0.6]).is_err());
        assert!(FlatCompensator::from_values(vec![0.0, 0.2, 0.1]).is_err());
    }

    #[test]
    fn picard_converges_on_y_dependent_driver() {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, 50).unwrap();
        let opts = ReflectOptions {
            solve: SolveOptions { n_max: 25, ..SolveOptions::default() },
            ..ReflectOptions::default()
        };
        let d = Driver::lipschitz_linear(0.1, 0.0).unwrap(); // f = 0.1·y
        let loss = LossFunction::affine(0.5);
        let sol =
            solve_reflected(&spec, &d, &loss, &indicator_terminal(), &grid, &opts).unwrap();
        assert!(sol.converged());
        let tr = sol.trace();
        assert!(tr.len() <= 25);
        for w in tr.windows(2) {
            assert!(w[1] < w[0], "distances must strictly decrease: {tr:?}");
        }
        assert!(*tr.last().unwrap() < 1e-8);
        let hz = sol.horizon_check().unwrap();
        assert!(hz.guaranteed);
        assert_eq!(hz.windows, 10);
        // geometric decay at roughly βA(T) = 0.1 per round
        if tr.len() >= 3 {
            let ratio = tr[2] / tr[1];
            assert!(ratio < 0.2, "contraction ratio too weak: {ratio}");
        }
    }

    #[test]
    fn picard_flags_and_edges() {
        let spec = unit_spec();
        let grid = TimeGrid::uniform(&spec, 25).unwrap();
        let solve = SolveOptions { n_max: 20, ..SolveOptions::default() };
        let d = Driver::lipschitz_linear(0.5, 0.0).unwrap();
        let loss = LossFunction::affine(0.5);
        let xi = indicator_terminal();

        // unreachable tolerance within 2 rounds → flagged, not silent
        let starved = ReflectOptions {
            solve,
            picard_tol: 1e-14,
            max_iter: 2,
            bisect_tol: 1e-10,
        };
        let sol = solve_reflected(&spec, &d, &loss, &xi, &grid, &starved).unwrap();
        assert!(!sol.converged());
        assert_eq!(sol.trace().len(), 2);

        // infinite tolerance → single round
        let lax = ReflectOptions {
            solve,
            picard_tol: f64::INFINITY,
            max_iter: 25,
            bisect_tol: 1e-10,
        };
        let sol = solve_reflected(&spec, &d, &loss, &xi, &grid, &lax).unwrap();
        assert!(sol.converged());
        assert_eq!(sol.trace().len(), 1);

        assert!(solve_reflected(
            &spec,
            &d,
            &loss,
            &xi,
            &grid,
            &ReflectOptions { max_iter: 0, ..ReflectOptions::default() }
        )
        .is_err());
    }

    #[test]
    fn reflected_csv_shape() {
        let (_spec, grid, sol, laws) = reflect_binding(10);
        let loss = LossFunction::affine(E_XI);
        let rep = skorokhod_report(&sol, &loss, &laws, 1e-8).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&rep.margins, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,k,r,margin");
        assert_eq!(lines.len(), 1 + grid.layers());
        let k_cell = lines[2].split(',').nth(1).unwrap();
        assert_relative_eq!(k_cell.parse::<f64>().unwrap(), grid.time(1), epsilon = 1e-8);
    }
}
