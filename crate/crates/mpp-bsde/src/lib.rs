//! Numerical toolkit for backward stochastic differential equations (BSDEs)
//! driven by marked point processes (MPPs).
//!
//! The model: a nonexplosive MPP on a finite mark space `E = {e_1, …, e_K}`
//! with compensator `ν(dt, de) = φ_t(de) dA_t`, where `φ_t` is a deterministic
//! piecewise-constant probability vector over marks and `A` is a deterministic
//! continuous nondecreasing piecewise-linear clock. The equation solved is
//!
//! ```text
//! Y_t = ξ + ∫_t^T f(s, Y_s, U_s) dA_s − ∫_t^T ∫_E U_s(e) q(ds, de),
//! ```
//!
//! with `q = p − ν` the compensated jump measure and generators `f` of
//! exponential growth in the jump argument `u`, controlled by the envelope
//! `j_λ(t, u) = ∫_E (e^{λu(e)} − 1 − λu(e)) φ_t(de)`.
//!
//! Module map:
//! - [`mpp`]: compensator model, path simulation, and the three stochastic
//!   integrals (against `p`, `ν`, and `q`).
//! - [`drivers`]: generator representation, structural certification by
//!   sampling, the `j_λ` functional, inf-convolution regularization, and
//!   clamp/shift constructions.
//! - [`lattice`]: exact backward dynamic programming on the jump-count
//!   lattice, closed-form oracles, forward state laws, and pathwise residual
//!   verification.
//! - [`reflection`]: mean reflection `E[ℓ(t, Y_t)] ≥ 0` with a deterministic
//!   flat compensator `K`, built from the running supremum of the shift
//!   operator `L_t`, plus the Picard scheme for state-dependent generators.
//! - [`harness`]: named, runnable checks that turn the structural
//!   inequalities (exponential a priori bounds, comparison, monotone
//!   regularization, Lipschitz stability of `L_t`, submartingale property)
//!   into pass/fail reports.
//! - [`parallel`]: data-parallel map with a sequential fallback; all
//!   reductions are ordered so results are identical across thread counts.

pub mod drivers;
pub mod harness;
pub mod lattice;
pub mod mpp;
pub mod numeric;
pub mod parallel;
pub mod reflection;

/// Crate-wide error type.
///
/// `Validation` marks rejected inputs (bad model data, malformed parameters);
/// the remaining variants are hard numerical failures that abort a run.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error(
        "jump-count truncation cannot reach tail tolerance {tail_tol:e}: \
         requires {required} jumps per step, ceiling is {ceiling}"
    )]
    TailTolerance {
        tail_tol: f64,
        required: usize,
        ceiling: usize,
    },
    #[error(
        "state overflow at layer {layer}: total jump count {count} exceeds \
         the lattice truncation n_max = {n_max}"
    )]
    StateOverflow { layer: usize, count: u32, n_max: u32 },
    #[error("numerical: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Conventional process exit code for this failure class
    /// (2 = input validation, 3 = numerical hard error).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            _ => 3,
        }
    }
}
