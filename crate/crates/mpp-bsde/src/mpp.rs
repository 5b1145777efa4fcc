//! Marked point process model: finite mark space, deterministic compensator
//! `ν(dt, de) = φ_t(de) dA_t`, path simulation, and stochastic integrals.
//!
//! The clock `A` is continuous, nondecreasing, and piecewise linear; the mark
//! law `φ_t` is a piecewise-constant-in-time probability vector. Under these
//! restrictions the filtration generated by the process is Markovian in the
//! vector of per-mark jump counts, which is what the exact lattice solver
//! exploits. Simulation uses time-change inversion: a unit-rate Poisson
//! sequence is pushed through the generalized inverse of `A`, which is exact
//! for piecewise-linear clocks (no thinning, no rejection tuning).

use crate::numeric::KahanSum;
use crate::{parallel, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Finite ordered mark space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkSpace {
    ids: Vec<String>,
}

impl MarkSpace {
    pub fn new<S: Into<String>>(ids: Vec<S>) -> Result<Self> {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        if ids.is_empty() {
            return Err(Error::Validation("mark space must contain at least one mark".into()));
        }
        for (i, a) in ids.iter().enumerate() {
            if ids[..i].contains(a) {
                return Err(Error::Validation(format!("duplicate mark identifier {a:?}")));
            }
        }
        Ok(Self { ids })
    }

    pub fn k(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One segment of the piecewise-constant mark law: `probs` applies on
/// `[from, next_from)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhiSegment {
    pub from: f64,
    pub probs: Vec<f64>,
}

/// Piecewise-linear nondecreasing clock given by `(t, A(t))` breakpoints,
/// starting at `(0, 0)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Clock {
    points: Vec<(f64, f64)>,
}

impl Clock {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Validation("clock needs at least two breakpoints".into()));
        }
        if points[0] != (0.0, 0.0) {
            return Err(Error::Validation(format!(
                "clock must start at (0, 0), got ({}, {})",
                points[0].0, points[0].1
            )));
        }
        for w in points.windows(2) {
            let ((t0, a0), (t1, a1)) = (w[0], w[1]);
            if !(t1 > t0) {
                return Err(Error::Validation(format!(
                    "clock breakpoint times must strictly increase ({t0} then {t1})"
                )));
            }
            if !(a1 >= a0) {
                return Err(Error::Validation(format!(
                    "clock values must be nondecreasing ({a0} then {a1})"
                )));
            }
            if !a1.is_finite() {
                return Err(Error::Validation("clock values must be finite".into()));
            }
        }
        Ok(Self { points })
    }

    /// `A(t)`, clamped to the breakpoint range.
    pub fn value(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        if t >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let i = match pts.binary_search_by(|p| p.0.partial_cmp(&t).unwrap()) {
            Ok(i) => return pts[i].1,
            Err(i) => i,
        };
        let (t0, a0) = pts[i - 1];
        let (t1, a1) = pts[i];
        a0 + (a1 - a0) * (t - t0) / (t1 - t0)
    }

    /// Generalized inverse `inf { t : A(t) ≥ a }`. Flat segments are skipped,
    /// so no simulated event ever lands inside a zero-intensity stretch.
    pub fn inverse(&self, a: f64) -> f64 {
        let pts = &self.points;
        for w in pts.windows(2) {
            let ((t0, a0), (t1, a1)) = (w[0], w[1]);
            if a <= a0 {
                return t0;
            }
            if a <= a1 {
                return t0 + (t1 - t0) * (a - a0) / (a1 - a0);
            }
        }
        pts[pts.len() - 1].0
    }

    pub fn total(&self) -> f64 {
        self.points[self.points.len() - 1].1
    }

    pub fn end_time(&self) -> f64 {
        self.points[self.points.len() - 1].0
    }

    pub fn max_slope(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .fold(0.0, f64::max)
    }

    pub fn breakpoint_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.0)
    }
}

/// Linear modulus of continuity `ρ(h) = slope · h` for the clock: the
/// increments satisfy `A(t) − A(s) ≤ ρ(t − s)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Modulus {
    pub slope: f64,
}

impl Modulus {
    pub fn rho(&self, h: f64) -> f64 {
        self.slope * h.max(0.0)
    }
}

/// Deterministic compensator model: mark space, mark law schedule, clock,
/// certified modulus, and horizon.
#[derive(Clone, Debug)]
pub struct CompensatorSpec {
    mark_space: MarkSpace,
    phi: Vec<PhiSegment>,
    clock: Clock,
    rho: Modulus,
    horizon: f64,
}

impl CompensatorSpec {
    /// Validates and assembles the model. `rho_slope = None` derives the
    /// tightest linear modulus from the clock itself.
    pub fn new(
        mark_space: MarkSpace,
        phi: Vec<PhiSegment>,
        clock: Clock,
        rho_slope: Option<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
        }
        if clock.end_time() != horizon {
            return Err(Error::Validation(format!(
                "clock breakpoints end at t = {} but the horizon is {horizon}",
                clock.end_time()
            )));
        }
        if phi.is_empty() {
            return Err(Error::Validation("mark law schedule is empty".into()));
        }
        if phi[0].from != 0.0 {
            return Err(Error::Validation(format!(
                "first mark-law segment must start at t = 0, got {}",
                phi[0].from
            )));
        }
        for w in phi.windows(2) {
            if !(w[1].from > w[0].from) {
                return Err(Error::Validation(
                    "mark-law segment start times must strictly increase".into(),
                ));
            }
        }
        for (si, seg) in phi.iter().enumerate() {
            if seg.from >= horizon {
                return Err(Error::Validation(format!(
                    "mark-law segment {si} starts at {} beyond the horizon {horizon}",
                    seg.from
                )));
            }
            if seg.probs.len() != mark_space.k() {
                return Err(Error::Validation(format!(
                    "mark-law segment {si} has {} entries for {} marks",
                    seg.probs.len(),
                    mark_space.k()
                )));
            }
            let mut sum = KahanSum::new();
            for (ei, &p) in seg.probs.iter().enumerate() {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::Validation(format!(
                        "mark-law segment {si} entry {ei} must be a finite probability, got {p}"
                    )));
                }
                sum.add(p);
            }
            let total = sum.value();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "mark-law segment {si} probabilities sum to {total}, expected 1"
                )));
            }
        }
        let tight = clock.max_slope();
        let rho = Modulus { slope: rho_slope.unwrap_or(tight) };
        if rho.slope + 1e-12 < tight {
            return Err(Error::Validation(format!(
                "modulus slope {} does not dominate the clock (max slope {tight})",
                rho.slope
            )));
        }
        Ok(Self { mark_space, phi, clock, rho, horizon })
    }

    pub fn mark_space(&self) -> &MarkSpace {
        &self.mark_space
    }

    pub fn k(&self) -> usize {
        self.mark_space.k()
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn rho(&self) -> Modulus {
        self.rho
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn a(&self, t: f64) -> f64 {
        self.clock.value(t)
    }

    pub fn a_total(&self) -> f64 {
        self.clock.total()
    }

    /// Mark law in force at time `t` (segments are left-closed).
    pub fn phi_at(&self, t: f64) -> &[f64] {
        let i = self
            .phi
            .partition_point(|seg| seg.from <= t)
            .max(1);
        &self.phi[i - 1].probs
    }

    /// Per-mark compensator mass `Λ_e = ∫_{t0}^{t1} φ_s(e) dA_s`, exact for
    /// the piecewise model.
    pub fn mark_intensity(&self, t0: f64, t1: f64) -> Vec<f64> {
        let k = self.k();
        let mut acc = vec![KahanSum::new(); k];
        for (lo, hi) in self.phi_spans(t0, t1) {
            let da = self.clock.value(hi) - self.clock.value(lo);
            if da == 0.0 {
                continue;
            }
            let probs = self.phi_at(lo);
            for e in 0..k {
                acc[e].add(probs[e] * da);
            }
        }
        acc.into_iter().map(|s| s.value()).collect()
    }

    /// Average mark law over `[t0, t1]` weighted by `dA`; falls back to the
    /// law at `t0` when the clock is flat there.
    pub fn phi_average(&self, t0: f64, t1: f64) -> Vec<f64> {
        let da = self.clock.value(t1) - self.clock.value(t0);
        if da <= 0.0 {
            return self.phi_at(t0).to_vec();
        }
        self.mark_intensity(t0, t1).into_iter().map(|l| l / da).collect()
    }

    /// Consecutive sub-intervals of `[t0, t1]` on which the mark law is
    /// constant.
    fn phi_spans(&self, t0: f64, t1: f64) -> Vec<(f64, f64)> {
        let mut cuts: Vec<f64> = vec![t0];
        for seg in &self.phi {
            if seg.from > t0 && seg.from < t1 {
                cuts.push(seg.from);
            }
        }
        cuts.push(t1);
        cuts.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Times at which the model's coefficients can kink: clock breakpoints
    /// and mark-law segment starts.
    pub fn breakpoint_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.clock.breakpoint_times().collect();
        ts.extend(self.phi.iter().map(|s| s.from));
        ts.retain(|&t| t >= 0.0 && t <= self.horizon);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        ts
    }
}

/// One realized event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

/// One realized path: time-sorted events on `(0, T]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MppPath {
    pub events: Vec<Event>,
    pub horizon: f64,
}

impl MppPath {
    /// Per-mark terminal jump counts.
    pub fn terminal_counts(&self, k: usize) -> Vec<u32> {
        let mut counts = vec![0u32; k];
        for ev in &self.events {
            counts[ev.mark] += 1;
        }
        counts
    }
}

/// Predictable integrand surrogate: the value at `t` may depend only on the
/// jump counts accumulated strictly before `t` and on the mark argument.
pub trait PredictableField: Sync {
    fn eval(&self, t: f64, counts_before: &[u32], mark: usize) -> f64;
}

impl<F: Fn(f64, &[u32], usize) -> f64 + Sync> PredictableField for F {
    fn eval(&self, t: f64, counts_before: &[u32], mark: usize) -> f64 {
        self(t, counts_before, mark)
    }
}

/// Simulate one path. Pure function of `(spec, seed)`: identical inputs give
/// identical paths.
pub fn simulate_path(spec: &CompensatorSpec, seed: u64) -> MppPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.a_total();
    let mut events = Vec::new();
    let mut s = 0.0f64;
    loop {
        // Unit-rate exponential gap; -ln of a (0,1] uniform.
        let gap = -(1.0 - rng.gen::<f64>()).ln();
        if gap == 0.0 {
            continue;
        }
        s += gap;
        if s >= total {
            break;
        }
        let t = spec.clock.inverse(s);
        let u: f64 = rng.gen();
        events.push(Event { time: t, mark: sample_mark(spec.phi_at(t), u) });
    }
    MppPath { events, horizon: spec.horizon() }
}

fn sample_mark(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if target < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Simulate `count` independent paths with seeds `base_seed + i`.
pub fn simulate_ensemble(spec: &CompensatorSpec, base_seed: u64, count: usize) -> Vec<MppPath> {
    parallel::map_indexed(count, |i| simulate_path(spec, base_seed + i as u64))
}

/// `∫∫ H dp = Σ_n H(T_n, counts before T_n, ζ_n)` over the path's events.
pub fn integral_p<H: PredictableField + ?Sized>(path: &MppPath, h: &H) -> f64 {
    let k = path
        .events
        .iter()
        .map(|e| e.mark + 1)
        .max()
        .unwrap_or(1);
    let mut counts = vec![0u32; k];
    let mut acc = KahanSum::new();
    for ev in &path.events {
        acc.add(h.eval(ev.time, &counts, ev.mark));
        counts[ev.mark] += 1;
    }
    acc.value()
}

/// `∫_0^T Σ_e H(t, counts(t−), e) φ_t(e) dA_t` along the given path's history.
///
/// The time axis is cut at clock breakpoints, mark-law changes, and the
/// path's event times, so the jump-count state and `φ` are constant and `A`
/// is linear on every resulting segment. Each segment is then integrated by
/// composite Simpson with sub-steps below `quad_step`: exact for integrands
/// constant (indeed quadratic) in `t` on the segment.
pub fn integral_nu<H: PredictableField + ?Sized>(
    spec: &CompensatorSpec,
    h: &H,
    path: &MppPath,
    quad_step: f64,
) -> Result<f64> {
    integral_nu_cut(spec, h, path, quad_step, &[])
}

/// [`integral_nu`] with additional time cut points (e.g. the layer times of
/// a piecewise-constant integrand, which make the composite rule exact).
pub fn integral_nu_cut<H: PredictableField + ?Sized>(
    spec: &CompensatorSpec,
    h: &H,
    path: &MppPath,
    quad_step: f64,
    extra_cuts: &[f64],
) -> Result<f64> {
    if !(quad_step > 0.0) {
        return Err(Error::Validation(format!(
            "quad_step must be positive, got {quad_step}"
        )));
    }
    let horizon = spec.horizon();
    let mut cuts: Vec<f64> = spec.breakpoint_times();
    cuts.extend(path.events.iter().map(|e| e.time));
    cuts.extend_from_slice(extra_cuts);
    cuts.push(0.0);
    cuts.push(horizon);
    cuts.retain(|&t| (0.0..=horizon).contains(&t));
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let k = spec.k();
    let mut counts = vec![0u32; k];
    let mut next_event = 0usize;
    let mut acc = KahanSum::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        // Events at `lo` enter the state for the segment (lo, hi].
        while next_event < path.events.len() && path.events[next_event].time <= lo {
            counts[path.events[next_event].mark] += 1;
            next_event += 1;
        }
        let da_seg = spec.a(hi) - spec.a(lo);
        if da_seg == 0.0 {
            continue;
        }
        let probs = spec.phi_at(lo);
        let g = |t: f64| -> f64 {
            let mut s = KahanSum::new();
            for e in 0..k {
                if probs[e] != 0.0 {
                    s.add(probs[e] * h.eval(t, &counts, e));
                }
            }
            s.value()
        };
        let pieces = ((hi - lo) / quad_step).ceil().max(1.0) as usize;
        let dt = (hi - lo) / pieces as f64;
        let da_piece = da_seg / pieces as f64; // A is linear on the segment
        for p in 0..pieces {
            let x0 = lo + p as f64 * dt;
            let x2 = if p + 1 == pieces { hi } else { x0 + dt };
            let x1 = 0.5 * (x0 + x2);
            acc.add(da_piece / 6.0 * (g(x0) + 4.0 * g(x1) + g(x2)));
        }
    }
    Ok(acc.value())
}

/// Compensated integral `∫∫ H dq = ∫∫ H dp − ∫∫ H dν`; mean zero over
/// simulated ensembles.
pub fn integral_q<H: PredictableField + ?Sized>(
    spec: &CompensatorSpec,
    path: &MppPath,
    h: &H,
    quad_step: f64,
) -> Result<f64> {
    Ok(integral_p(path, h) - integral_nu(spec, h, path, quad_step)?)
}

/// [`integral_q`] with additional compensator cut points.
pub fn integral_q_cut<H: PredictableField + ?Sized>(
    spec: &CompensatorSpec,
    path: &MppPath,
    h: &H,
    quad_step: f64,
    extra_cuts: &[f64],
) -> Result<f64> {
    Ok(integral_p(path, h) - integral_nu_cut(spec, h, path, quad_step, extra_cuts)?)
}
