//! Scenario files: the JSON schema and its translation into solver objects.
//!
//! A scenario is one self-contained problem statement — compensator, driver,
//! terminal payoff, optional mean-reflection loss, grid, and run parameters.
//! Unknown keys are rejected everywhere (`deny_unknown_fields`), and every
//! build error is prefixed with the JSON path of the offending block.

use crate::expr;
use mpp_bsde::drivers::{AlphaSchedule, Convexity, Driver, GrowthParams, TerminalCondition};
use mpp_bsde::lattice::{SolveOptions, TimeGrid};
use mpp_bsde::mpp::{Clock, CompensatorSpec, MarkSpace, PhiSegment};
use mpp_bsde::reflection::LossFunction;
use mpp_bsde::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub compensator: CompensatorBlock,
    pub driver: DriverBlock,
    pub terminal: TerminalBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBlock>,
    pub grid: GridBlock,
    pub run: RunBlock,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompensatorBlock {
    pub marks: Vec<String>,
    pub phi: Vec<PhiBlock>,
    /// Piecewise-linear clock `A` as `[t, A(t)]` breakpoints from `[0, 0]`.
    pub clock: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_slope: Option<f64>,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PhiBlock {
    pub from: f64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DriverBlock {
    /// zero | constant | entropic | lipschitz_linear | affine_jump
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    /// Additive constant on the generator (builds `f + shift`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    /// Override the declared growth envelope (used by violation fixtures).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_growth: Option<GrowthBlock>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthBlock {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub c0: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<TableEntry>>,
    /// Payoff for states not listed in the table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub counts: Vec<u32>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    /// linear | affine | soft_sine
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub steps: usize,
    pub n_max: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implicit: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    /// Base seed; every random draw in a run derives from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_step: Option<f64>,
    /// Grid ladder for the convergence study.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard_tol: Option<f64>,
}

fn ctx<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{path}: {msg}")),
        other => other,
    })
}

impl Scenario {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::Validation(format!("scenario: {e}")))
    }

    pub fn build_compensator(&self) -> Result<CompensatorSpec> {
        let c = &self.compensator;
        let marks = ctx("compensator.marks", MarkSpace::new(c.marks.clone()))?;
        let phi: Vec<PhiSegment> = c
            .phi
            .iter()
            .map(|p| PhiSegment { from: p.from, probs: p.probs.clone() })
            .collect();
        let clock = ctx("compensator.clock", Clock::new(c.clock.clone()))?;
        ctx(
            "compensator.phi",
            CompensatorSpec::new(marks, phi, clock, c.rho_slope, c.horizon),
        )
    }

    pub fn build_driver(&self) -> Result<Driver> {
        let d = &self.driver;
        let take = |name: &str, v: Option<f64>| -> Result<f64> {
            v.ok_or_else(|| {
                Error::Validation(format!(
                    "driver.{name} is required for kind `{}`",
                    d.kind
                ))
            })
        };
        let forbid = |name: &str, v: Option<f64>| -> Result<()> {
            if v.is_some() {
                return Err(Error::Validation(format!(
                    "driver.{name} is not a parameter of kind `{}`",
                    d.kind
                )));
            }
            Ok(())
        };
        let base = match d.kind.as_str() {
            "zero" => {
                forbid("a", d.a)?;
                forbid("b", d.b)?;
                forbid("lambda", d.lambda)?;
                forbid("beta", d.beta)?;
                forbid("l", d.l)?;
                Driver::zero()
            }
            "constant" => {
                forbid("b", d.b)?;
                forbid("lambda", d.lambda)?;
                forbid("beta", d.beta)?;
                forbid("l", d.l)?;
                Driver::constant(take("a", d.a)?)
            }
            "entropic" => {
                forbid("a", d.a)?;
                forbid("b", d.b)?;
                forbid("beta", d.beta)?;
                forbid("l", d.l)?;
                ctx("driver.lambda", Driver::entropic(take("lambda", d.lambda)?))?
            }
            "lipschitz_linear" => {
                forbid("a", d.a)?;
                forbid("b", d.b)?;
                forbid("lambda", d.lambda)?;
                ctx(
                    "driver",
                    Driver::lipschitz_linear(take("beta", d.beta)?, take("l", d.l)?),
                )?
            }
            "affine_jump" => {
                forbid("lambda", d.lambda)?;
                forbid("beta", d.beta)?;
                forbid("l", d.l)?;
                ctx("driver", Driver::affine_jump(take("a", d.a)?, take("b", d.b)?))?
            }
            other => {
                return Err(Error::Validation(format!(
                    "driver.kind `{other}` is unknown \
                     (known: zero, constant, entropic, lipschitz_linear, affine_jump)"
                )))
            }
        };
        let base = match d.shift {
            None => base,
            Some(c) if c.is_finite() => shift_by_constant(&base, c)?,
            Some(c) => {
                return Err(Error::Validation(format!("driver.shift must be finite, got {c}")))
            }
        };
        Ok(match &d.declared_growth {
            None => base,
            Some(g) => {
                let growth = ctx(
                    "driver.declared_growth",
                    GrowthParams::new(AlphaSchedule::constant(g.alpha), g.beta, g.lambda, g.c0),
                )?;
                base.with_growth(growth)
            }
        })
    }

    pub fn build_terminal(&self, k: usize) -> Result<TerminalCondition> {
        let t = &self.terminal;
        match (&t.expr, &t.table) {
            (Some(_), Some(_)) => Err(Error::Validation(
                "terminal: give either `expr` or `table`, not both".into(),
            )),
            (None, None) => Err(Error::Validation(
                "terminal: one of `expr` or `table` is required".into(),
            )),
            (Some(src), None) => {
                if t.default.is_some() {
                    return Err(Error::Validation(
                        "terminal.default only applies to table terminals".into(),
                    ));
                }
                let parsed = ctx("terminal.expr", expr::parse(src, k))?;
                let name = format!("expr({src})");
                Ok(TerminalCondition::new(
                    name,
                    Arc::new(move |c: &[u32]| parsed.eval(c)),
                    None,
                ))
            }
            (None, Some(entries)) => {
                if entries.is_empty() {
                    return Err(Error::Validation("terminal.table must not be empty".into()));
                }
                let mut map = HashMap::with_capacity(entries.len());
                for (i, e) in entries.iter().enumerate() {
                    if e.counts.len() != k {
                        return Err(Error::Validation(format!(
                            "terminal.table[{i}].counts has {} entries, expected {k}",
                            e.counts.len()
                        )));
                    }
                    if !e.value.is_finite() {
                        return Err(Error::Validation(format!(
                            "terminal.table[{i}].value must be finite"
                        )));
                    }
                    if map.insert(e.counts.clone(), e.value).is_some() {
                        return Err(Error::Validation(format!(
                            "terminal.table[{i}] repeats counts {:?}",
                            e.counts
                        )));
                    }
                }
                let default = t.default.unwrap_or(0.0);
                let bound = map
                    .values()
                    .fold(default.abs(), |m, v| m.max(v.abs()));
                Ok(TerminalCondition::new(
                    "table",
                    Arc::new(move |c: &[u32]| map.get(c).copied().unwrap_or(default)),
                    Some(bound),
                ))
            }
        }
    }

    pub fn build_loss(&self) -> Result<Option<LossFunction>> {
        let Some(l) = &self.loss else { return Ok(None) };
        let shift = l.shift.unwrap_or(0.0);
        let loss = match l.kind.as_str() {
            "linear" => {
                if l.shift.is_some() {
                    return Err(Error::Validation(
                        "loss.shift is not a parameter of kind `linear` (use `affine`)".into(),
                    ));
                }
                LossFunction::affine(0.0)
            }
            "affine" => LossFunction::affine(shift),
            "soft_sine" => LossFunction::soft_sine(shift),
            other => {
                return Err(Error::Validation(format!(
                    "loss.kind `{other}` is unknown (known: linear, affine, soft_sine)"
                )))
            }
        };
        Ok(Some(loss))
    }

    pub fn build_grid(&self, spec: &CompensatorSpec) -> Result<TimeGrid> {
        ctx("grid.steps", TimeGrid::uniform(spec, self.grid.steps))
    }

    pub fn solve_options(&self) -> SolveOptions {
        let g = &self.grid;
        let mut o = SolveOptions {
            n_max: g.n_max,
            implicit: g.implicit.unwrap_or(false),
            ..SolveOptions::default()
        };
        if let Some(j) = g.j_max {
            o.j_max = j;
        }
        if let Some(t) = g.tail_tol {
            o.tail_tol = t;
        }
        o
    }
}

/// `f + c` with the declared running cost raised by `|c|` so the stated
/// growth envelope still holds.
pub fn shift_by_constant(d: &Driver, c: f64) -> Result<Driver> {
    let g = d.growth();
    let alpha = AlphaSchedule::constant(g.alpha.max_value() + c.abs());
    let growth = GrowthParams::new(alpha, g.beta, g.lambda, g.c0)?;
    let inner = d.clone();
    Ok(Driver::new(
        format!("{}+{c}", d.name()),
        growth,
        d.convexity(),
        Arc::new(move |t, y, u, phi| inner.eval(t, y, u, phi) + c),
    ))
}

/// Oracle for the starting value when the driver admits a closed form.
pub fn oracle_y0(
    scenario: &Scenario,
    spec: &CompensatorSpec,
    xi: &TerminalCondition,
) -> Result<Option<f64>> {
    let zeros = vec![0u32; spec.k()];
    let shift = scenario.driver.shift.unwrap_or(0.0);
    let v = match scenario.driver.kind.as_str() {
        "zero" => Some(
            mpp_bsde::lattice::closed_form_zero_driver(spec, xi, 0.0, &zeros)?
                + shift * spec.a_total(),
        ),
        "constant" => Some(
            mpp_bsde::lattice::closed_form_zero_driver(spec, xi, 0.0, &zeros)?
                + (scenario.driver.a.unwrap_or(0.0) + shift) * spec.a_total(),
        ),
        "entropic" if shift == 0.0 => {
            let lam = scenario.driver.lambda.unwrap_or(1.0);
            Some(mpp_bsde::lattice::entropic_closed_form(spec, xi, lam, 0.0, &zeros)?)
        }
        _ => None,
    };
    Ok(v)
}

/// Convexity guard used by checks that need inf-convolution.
pub fn require_convex(d: &Driver) -> Result<()> {
    if d.convexity() != Convexity::ConvexInU {
        return Err(Error::Validation(format!(
            "driver `{}` is not convex in u; regularization checks do not apply",
            d.name()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical_json() -> &'static str {
        r#"{
            "name": "canonical",
            "compensator": {
                "marks": ["e1"],
                "phi": [ {"from": 0.0, "probs": [1.0]} ],
                "clock": [[0.0, 0.0], [1.0, 1.0]],
                "horizon": 1.0
            },
            "driver": {"kind": "entropic", "lambda": 1.0},
            "terminal": {"expr": "ind_ge(ntot, 1)"},
            "grid": {"steps": 100, "n_max": 20},
            "run": {"seed": 42, "paths": 200}
        }"#
    }

    #[test]
    fn round_trip_is_identity() {
        let s = Scenario::from_json(canonical_json().as_bytes()).unwrap();
        let ser = serde_json::to_vec_pretty(&s).unwrap();
        let s2 = Scenario::from_json(&ser).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let bad = canonical_json().replace("\"seed\": 42", "\"seed\": 42, \"sneaky\": 1");
        let err = Scenario::from_json(bad.as_bytes()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("sneaky"), "{msg}");
    }

    #[test]
    fn builds_canonical_objects() {
        let s = Scenario::from_json(canonical_json().as_bytes()).unwrap();
        let spec = s.build_compensator().unwrap();
        assert_eq!(spec.k(), 1);
        assert_eq!(spec.a_total(), 1.0);
        let d = s.build_driver().unwrap();
        assert_eq!(d.growth().lambda, 1.0);
        let xi = s.build_terminal(spec.k()).unwrap();
        assert_eq!(xi.eval(&[0]), 0.0);
        assert_eq!(xi.eval(&[2]), 1.0);
        assert!(s.build_loss().unwrap().is_none());
        let grid = s.build_grid(&spec).unwrap();
        assert_eq!(grid.steps(), 100);
        let opts = s.solve_options();
        assert_eq!(opts.n_max, 20);
        assert!(!opts.implicit);
    }

    #[test]
    fn driver_parameter_mismatches_are_named() {
        let mut s = Scenario::from_json(canonical_json().as_bytes()).unwrap();
        s.driver.kind = "zero".into();
        let err = s.build_driver().unwrap_err();
        assert!(format!("{err}").contains("driver.lambda"));

        s.driver.kind = "constant".into();
        s.driver.lambda = None;
        let err = s.build_driver().unwrap_err();
        assert!(format!("{err}").contains("driver.a"));

        s.driver.kind = "mystery".into();
        let err = s.build_driver().unwrap_err();
        assert!(format!("{err}").contains("mystery"));
    }

    #[test]
    fn phi_errors_carry_the_json_path() {
        let bad = canonical_json().replace("\"probs\": [1.0]", "\"probs\": [0.9]");
        let s = Scenario::from_json(bad.as_bytes()).unwrap();
        let err = s.build_compensator().unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("compensator.phi") && msg.contains("0.9"), "{msg}");
    }

    #[test]
    fn table_terminal_with_default() {
        let json = canonical_json().replace(
            r#""terminal": {"expr": "ind_ge(ntot, 1)"}"#,
            r#""terminal": {"table": [{"counts": [0], "value": 2.0}], "default": -1.0}"#,
        );
        let s = Scenario::from_json(json.as_bytes()).unwrap();
        let xi = s.build_terminal(1).unwrap();
        assert_eq!(xi.eval(&[0]), 2.0);
        assert_eq!(xi.eval(&[3]), -1.0);
        assert_eq!(xi.bound(), Some(2.0));

        // malformed tables
        let dup = canonical_json().replace(
            r#""terminal": {"expr": "ind_ge(ntot, 1)"}"#,
            r#""terminal": {"table": [{"counts": [0], "value": 1.0}, {"counts": [0], "value": 2.0}]}"#,
        );
        assert!(Scenario::from_json(dup.as_bytes()).unwrap().build_terminal(1).is_err());
        let both = canonical_json().replace(
            r#""terminal": {"expr": "ind_ge(ntot, 1)"}"#,
            r#""terminal": {"expr": "ntot", "table": [{"counts": [0], "value": 1.0}]}"#,
        );
        assert!(Scenario::from_json(both.as_bytes()).unwrap().build_terminal(1).is_err());
    }

    #[test]
    fn shifted_driver_adds_constant_and_running_cost() {
        let s = Scenario::from_json(canonical_json().as_bytes()).unwrap();
        let base = s.build_driver().unwrap();
        let shifted = shift_by_constant(&base, 0.1).unwrap();
        let phi = [1.0];
        let u = [0.4];
        let t = 0.3;
        assert!(
            (shifted.eval(t, 0.2, &u, &phi) - base.eval(t, 0.2, &u, &phi) - 0.1).abs()
                < 1e-15
        );
        assert_eq!(shifted.growth().alpha.max_value(), 0.1);
    }
}
