//! Attack-success distributions under periodic restarts.
//!
//! `F` is the density of the time at which an attack first succeeds on a
//! system that is never restarted, and `P` is its cumulative. Restarting
//! every `δr` wipes the attacker's progress, so only the head of `F` on
//! `[0, δr)` matters. With `k = ⌊t/δr⌋`:
//!
//! ```text
//! F̂(t) = (1 − P̂(kδr)) · F(t − kδr)
//! P̂(t) = P̂(kδr) + (1 − P̂(kδr)) · P(t − kδr)
//! ```
//!
//! Everything lives on a uniform grid starting at `t = 0`, and `δr` is
//! snapped to a whole number of grid steps.

use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

pub const DEFAULT_GRID_STEP: f64 = 0.1;

/// Slack allowed on the total mass of a tabulated density.
const MASS_TOL: f64 = 1e-6;

/// Density per unit time sampled at `t_i = i·step`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedPdf {
    step: f64,
    values: Vec<f64>,
}

/// Cumulative probability sampled on the same grid as its density.
#[derive(Clone, Debug, PartialEq)]
pub struct Cumulative {
    step: f64,
    values: Vec<f64>,
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("grid step must be positive, got {step}")))
    }
}

fn trapezoid_mass(step: f64, values: &[f64]) -> f64 {
    values.windows(2).map(|w| 0.5 * step * (w[0] + w[1])).sum()
}

impl TabulatedPdf {
    pub fn new(step: f64, values: Vec<f64>) -> Result<Self> {
        check_step(step)?;
        if values.is_empty() {
            return Err(Error::InvalidParameter("density table is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!("density values must be finite and ≥ 0, found {v}")));
        }
        let mass = trapezoid_mass(step, &values);
        if mass > 1.0 + MASS_TOL {
            return Err(Error::InvalidParameter(format!("density integrates to {mass}, more than 1")));
        }
        Ok(Self { step, values })
    }

    /// Samples `f` on `[0, horizon]`.
    pub fn from_fn(step: f64, horizon: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        check_step(step)?;
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be ≥ 0, got {horizon}")));
        }
        let n = (horizon / step).round() as usize + 1;
        Self::new(step, (0..n).map(|i| f(i as f64 * step)).collect())
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.step
    }

    pub fn mass(&self) -> f64 {
        trapezoid_mass(self.step, &self.values)
    }

    /// Value at grid index `i`, zero past the end of the table.
    fn at(&self, i: usize) -> f64 {
        self.values.get(i).copied().unwrap_or(0.0)
    }

    /// Reads `t,density` rows. The first column must form a uniform grid
    /// starting at 0.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut ts = Vec::new();
        let mut vs = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::Config("density rows need two columns: t,density".into()));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number '{s}' in density table")))
            };
            ts.push(parse(&rec[0])?);
            vs.push(parse(&rec[1])?);
        }
        if ts.len() < 2 {
            return Err(Error::Config("density table needs at least two rows".into()));
        }
        let step = ts[1] - ts[0];
        let uniform = ts[0].abs() <= 1e-9 * step.abs().max(1.0)
            && ts
                .iter()
                .enumerate()
                .all(|(i, t)| (t - i as f64 * step).abs() <= 1e-6 * step.abs());
        if !uniform || !(step > 0.0) {
            return Err(Error::Config("density table must be on a uniform grid starting at t = 0".into()));
        }
        Self::new(step, vs)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "density"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([format!("{}", i as f64 * self.step), format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Cumulative {
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at grid index `i`, held constant past the end of the table.
    pub fn at(&self, i: usize) -> f64 {
        self.values
            .get(i)
            .or_else(|| self.values.last())
            .copied()
            .unwrap_or(0.0)
    }

    /// Linear interpolation between grid points.
    pub fn value_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.at(0);
        }
        let x = t / self.step;
        let i = x.floor() as usize;
        let frac = x - i as f64;
        if frac == 0.0 {
            self.at(i)
        } else {
            self.at(i) * (1.0 - frac) + self.at(i + 1) * frac
        }
    }
}

/// Trapezoidal running integral of `F`, clamped to `[0, 1]`.
pub fn cdf_of(f: &TabulatedPdf) -> Cumulative {
    let mut values = Vec::with_capacity(f.len());
    let mut acc = 0.0;
    values.push(0.0);
    for w in f.values.windows(2) {
        acc += 0.5 * f.step * (w[0] + w[1]);
        values.push(acc.clamp(0.0, 1.0));
    }
    Cumulative { step: f.step, values }
}

/// `F̂` and `P̂` for one restart period.
#[derive(Clone, Debug, PartialEq)]
pub struct Restarted {
    pub density: TabulatedPdf,
    pub cdf: Cumulative,
    /// Restart period after snapping to the grid.
    pub delta_r: f64,
    /// Grid steps per restart period.
    pub period_steps: usize,
}

fn snap_period(step: f64, delta_r: f64) -> Result<usize> {
    if !(delta_r > 0.0) || !delta_r.is_finite() {
        return Err(Error::InvalidParameter(format!("restart period must be positive, got {delta_r}")));
    }
    let m = (delta_r / step).round() as usize;
    if m == 0 {
        return Err(Error::InvalidParameter(format!(
            "restart period {delta_r} is shorter than the grid step {step}"
        )));
    }
    Ok(m)
}

/// Builds `F̂` and `P̂` over `len` grid points, cycle by cycle.
pub fn restarted_tables(f: &TabulatedPdf, delta_r: f64, len: usize) -> Result<Restarted> {
    let m = snap_period(f.step, delta_r)?;
    let p = cdf_of(f);
    let mut density = Vec::with_capacity(len);
    let mut cdf = Vec::with_capacity(len);
    let mut base = 0.0;
    for i in 0..len {
        let j = i % m;
        if i > 0 && j == 0 {
            base += (1.0 - base) * p.at(m);
        }
        let survive = 1.0 - base;
        density.push(survive * f.at(j));
        cdf.push((base + survive * p.at(j)).clamp(0.0, 1.0));
    }
    Ok(Restarted {
        density: TabulatedPdf {
            step: f.step,
            values: density,
        },
        cdf: Cumulative {
            step: f.step,
            values: cdf,
        },
        delta_r: m as f64 * f.step,
        period_steps: m,
    })
}

pub fn restarted_density(f: &TabulatedPdf, delta_r: f64) -> Result<TabulatedPdf> {
    Ok(restarted_tables(f, delta_r, f.len())?.density)
}

pub fn restarted_cdf(f: &TabulatedPdf, delta_r: f64) -> Result<Cumulative> {
    Ok(restarted_tables(f, delta_r, f.len())?.cdf)
}

/// Density-weighted mean `∫τ·F(τ)dτ / ∫F(τ)dτ` over the table.
pub fn expected_damage_time(f: &TabulatedPdf) -> Result<f64> {
    let mass = f.mass();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    let moment: f64 = f
        .values
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (t0, t1) = (i as f64 * f.step, (i + 1) as f64 * f.step);
            0.5 * f.step * (t0 * w[0] + t1 * w[1])
        })
        .sum();
    Ok(moment / mass)
}

/// `∫τ·P(τ)dτ` over the table, taken literally with the cumulative inside
/// the integral.
pub fn expected_damage_time_literal(p: &Cumulative) -> Result<f64> {
    if !(p.values.last().copied().unwrap_or(0.0) > 0.0) {
        return Err(Error::ZeroMass);
    }
    Ok(p.values
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (t0, t1) = (i as f64 * p.step, (i + 1) as f64 * p.step);
            0.5 * p.step * (t0 * w[0] + t1 * w[1])
        })
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    #[default]
    Density,
    Literal,
}

/// `F`, `P`, `F̂` and `P̂` on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskProfile {
    pub f: TabulatedPdf,
    pub p: Cumulative,
    pub delta_r: f64,
    pub f_hat: TabulatedPdf,
    pub p_hat: Cumulative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub delta_r: f64,
    pub mode: ExpectationMode,
    /// `None` when the table carries no mass, so damage never occurs.
    pub expected_without_restarts: Option<f64>,
    pub expected_with_restarts: Option<f64>,
    pub mass_without_restarts: f64,
    pub mass_with_restarts: f64,
    /// Attack success probability within one restart period, `P(δr)`.
    pub per_cycle_success: f64,
}

impl RiskProfile {
    pub fn build(f: &TabulatedPdf, delta_r: f64) -> Result<Self> {
        let r = restarted_tables(f, delta_r, f.len())?;
        Ok(Self {
            f: f.clone(),
            p: cdf_of(f),
            delta_r: r.delta_r,
            f_hat: r.density,
            p_hat: r.cdf,
        })
    }

    pub fn summary(&self, mode: ExpectationMode) -> Result<RiskSummary> {
        let never = |r: Result<f64>| match r {
            Err(Error::ZeroMass) => Ok(None),
            other => other.map(Some),
        };
        let (without, with) = match mode {
            ExpectationMode::Density => (
                never(expected_damage_time(&self.f))?,
                never(expected_damage_time(&self.f_hat))?,
            ),
            ExpectationMode::Literal => (
                never(expected_damage_time_literal(&self.p))?,
                never(expected_damage_time_literal(&self.p_hat))?,
            ),
        };
        let m = (self.delta_r / self.f.step).round() as usize;
        Ok(RiskSummary {
            delta_r: self.delta_r,
            mode,
            expected_without_restarts: without,
            expected_with_restarts: with,
            mass_without_restarts: self.p.at(self.p.len() - 1),
            mass_with_restarts: self.p_hat.at(self.p_hat.len() - 1),
            per_cycle_success: self.p.at(m),
        })
    }

    /// Writes `t,F,P,F_hat,P_hat`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "F", "P", "F_hat", "P_hat"])?;
        for i in 0..self.f.len() {
            w.write_record([
                format!("{}", i as f64 * self.f.step),
                format!("{}", self.f.values[i]),
                format!("{}", self.p.values[i]),
                format!("{}", self.f_hat.values[i]),
                format!("{}", self.p_hat.values[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Standard normal CDF.
fn phi_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Normal density restricted to `t ≥ 0` and renormalized.
pub fn truncated_normal_pdf(mean: f64, std: f64, t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let z = (t - mean) / std;
    let dens = (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt());
    dens / (1.0 - phi_cdf(-mean / std))
}

/// Closed-form CDF of [`truncated_normal_pdf`].
pub fn truncated_normal_cdf(mean: f64, std: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let lo = phi_cdf(-mean / std);
    (phi_cdf((t - mean) / std) - lo) / (1.0 - lo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Where an attack-success density comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PdfSpec {
    /// Normal truncated to `t ≥ 0`.
    Normal { mean: f64, std: f64 },
    /// Weighted sum of truncated normals. Weights are normalized to sum to 1.
    Mixture { components: Vec<MixtureComponent> },
    Uniform { lower: f64, upper: f64 },
    /// `t,density` CSV on a uniform grid.
    Tabulated { path: PathBuf },
}

impl PdfSpec {
    pub fn tabulate(&self, step: f64, horizon: f64) -> Result<TabulatedPdf> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match self {
            PdfSpec::Normal { mean, std } => {
                if !(*std > 0.0) || !mean.is_finite() {
                    return bad(format!("normal needs std > 0 and a finite mean, got ({mean}, {std})"));
                }
                TabulatedPdf::from_fn(step, horizon, |t| truncated_normal_pdf(*mean, *std, t))
            }
            PdfSpec::Mixture { components } => {
                if components.is_empty() {
                    return bad("mixture has no components".into());
                }
                if components
                    .iter()
                    .any(|c| !(c.std > 0.0) || !(c.weight >= 0.0) || !c.mean.is_finite())
                {
                    return bad("mixture components need std > 0, weight ≥ 0 and a finite mean".into());
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if !(total > 0.0) {
                    return bad("mixture weights sum to zero".into());
                }
                TabulatedPdf::from_fn(step, horizon, |t| {
                    components
                        .iter()
                        .map(|c| c.weight / total * truncated_normal_pdf(c.mean, c.std, t))
                        .sum()
                })
            }
            PdfSpec::Uniform { lower, upper } => {
                if !(*lower >= 0.0) || !(upper > lower) {
                    return bad(format!("uniform needs 0 ≤ lower < upper, got [{lower}, {upper}]"));
                }
                // Average the density over the cell around each grid point so
                // the jumps at the edges do not inflate the trapezoid mass.
                let h = 1.0 / (upper - lower);
                TabulatedPdf::from_fn(step, horizon, |t| {
                    let covered = (t + 0.5 * step).min(*upper) - (t - 0.5 * step).max(*lower);
                    h * covered.max(0.0) / step
                })
            }
            PdfSpec::Tabulated { path } => {
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::Config(format!("cannot open density table {}: {e}", path.display())))?;
                TabulatedPdf::read_csv(file)
            }
        }
    }
}
