//! Hotelling T² anomaly detection.
//!
//! A profile is learnt from legitimate signal vectors. Signals are min-max
//! normalized with bounds taken from the training data, then summarized by
//! their mean and covariance. Each training sample gets a T² distance, and
//! the spread of those distances sets the acceptance band
//! `[μ_T − λ·σ_T, μ_T + λ·σ_T]`. The band is two-sided, so when
//! `μ_T − λ·σ_T > 0` an observation sitting almost exactly on the mean is
//! also flagged.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Reciprocal condition number below which the covariance counts as singular.
pub const RCOND_MIN: f64 = 1e-12;

/// Eigenvector weight above which a signal is blamed for a singular direction.
const BLAME_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationBounds {
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Some component fell outside the bounds and was clamped.
    pub clamped: bool,
}

impl NormalizationBounds {
    pub fn new(y_min: Vec<f64>, y_max: Vec<f64>) -> Result<Self> {
        check_dim("normalization bounds", y_min.len(), y_max.len())?;
        if let Some(i) = (0..y_min.len()).find(|&i| !(y_min[i] < y_max[i])) {
            return Err(Error::InvalidParameter(format!(
                "signal {i} has degenerate bounds [{}, {}]",
                y_min[i], y_max[i]
            )));
        }
        Ok(Self { y_min, y_max })
    }

    /// Per-signal extremes of the training data.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let k = samples.first().map_or(0, |s| s.len());
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for s in samples {
            check_dim("training sample", k, s.len())?;
            for i in 0..k {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        Self::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.y_min.len()
    }

    pub fn normalize(&self, y: &[f64]) -> Result<Normalized> {
        check_dim("signal vector", self.dim(), y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal vector"));
        }
        let mut clamped = false;
        let values = y
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let z = (v - self.y_min[i]) / (self.y_max[i] - self.y_min[i]);
                if !(0.0..=1.0).contains(&z) {
                    clamped = true;
                }
                z.clamp(0.0, 1.0)
            })
            .collect();
        Ok(Normalized { values, clamped })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T2Profile {
    pub bounds: NormalizationBounds,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub covariance_inverse: Vec<Vec<f64>>,
    pub mu_t: f64,
    pub sigma_t: f64,
    pub lambda_conf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t2: f64,
    pub anomalous: bool,
    pub clamped: bool,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `(y − mean)ᵀ · S⁻¹ · (y − mean)`.
fn quadratic(inv: &[Vec<f64>], mean: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut acc = 0.0;
    for (i, row) in inv.iter().enumerate() {
        let r: f64 = row.iter().zip(&d).map(|(a, b)| a * b).sum();
        acc += d[i] * r;
    }
    acc.max(0.0)
}

/// Inverts a symmetric covariance through its eigen-decomposition and rejects
/// it when the spectrum is too spread out.
fn invert_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let ev = &eig.eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let rcond = if max > 0.0 { (min / max).max(0.0) } else { 0.0 };
    if !(rcond >= RCOND_MIN) {
        let mut signals: Vec<usize> = Vec::new();
        for (j, &lam) in ev.iter().enumerate() {
            if max == 0.0 || lam / max < RCOND_MIN {
                let v = eig.eigenvectors.column(j);
                for (i, c) in v.iter().enumerate() {
                    if c.abs() > BLAME_WEIGHT && !signals.contains(&i) {
                        signals.push(i);
                    }
                }
            }
        }
        signals.sort_unstable();
        return Err(Error::SingularCovariance { rcond, signals });
    }
    let inv_diag = DMatrix::from_diagonal(&ev.map(|l| 1.0 / l));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

impl T2Profile {
    /// Learns a profile with bounds taken from the training data.
    pub fn build(samples: &[Vec<f64>], lambda_conf: f64) -> Result<Self> {
        let k = samples.first().map_or(0, |s| s.len());
        if k == 0 {
            return Err(Error::InvalidParameter("training set is empty".into()));
        }
        // A constant signal would give degenerate bounds; report it as the
        // singular direction it is.
        for i in 0..k {
            let first = samples[0][i];
            if samples.iter().all(|s| s.get(i) == Some(&first)) {
                return Err(Error::SingularCovariance {
                    rcond: 0.0,
                    signals: vec![i],
                });
            }
        }
        let bounds = NormalizationBounds::from_samples(samples)?;
        Self::build_with_bounds(samples, bounds, lambda_conf)
    }

    pub fn build_with_bounds(samples: &[Vec<f64>], bounds: NormalizationBounds, lambda_conf: f64) -> Result<Self> {
        let k = bounds.dim();
        let n = samples.len();
        if n <= k + 1 {
            return Err(Error::InvalidParameter(format!(
                "need more than {} training samples for {k} signals, got {n}",
                k + 1
            )));
        }
        if !(lambda_conf >= 0.0) || !lambda_conf.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda_conf must be ≥ 0, got {lambda_conf}")));
        }
        let ys: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| bounds.normalize(s).map(|z| z.values))
            .collect::<Result<_>>()?;
        let mean: Vec<f64> = (0..k).map(|i| ys.iter().map(|y| y[i]).sum::<f64>() / n as f64).collect();
        let mut cov = DMatrix::zeros(k, k);
        for y in &ys {
            let d = DVector::from_iterator(k, y.iter().zip(&mean).map(|(a, b)| a - b));
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        let inv = invert_covariance(&cov)?;
        let inv_rows = to_rows(&inv);
        let t: Vec<f64> = ys.iter().map(|y| quadratic(&inv_rows, &mean, y)).collect();
        let mu_t = t.iter().sum::<f64>() / n as f64;
        let sigma_t = (t.iter().map(|v| (v - mu_t).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        Ok(Self {
            bounds,
            mean,
            covariance: to_rows(&cov),
            covariance_inverse: inv_rows,
            mu_t,
            sigma_t,
            lambda_conf,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn t2(&self, observation: &[f64]) -> Result<(f64, bool)> {
        let z = self.bounds.normalize(observation)?;
        Ok((quadratic(&self.covariance_inverse, &self.mean, &z.values), z.clamped))
    }

    pub fn band(&self) -> (f64, f64) {
        let h = self.lambda_conf * self.sigma_t;
        (self.mu_t - h, self.mu_t + h)
    }

    pub fn detect(&self, observation: &[f64]) -> Result<Detection> {
        let (t2, clamped) = self.t2(observation)?;
        let (lo, hi) = self.band();
        Ok(Detection {
            t2,
            anomalous: !(t2 >= lo && t2 <= hi),
            clamped,
        })
    }
}

/// Reads signal vectors, one row per sample, after a header row.
pub fn read_signals<R: Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number '{s}' in signal row {}", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

/// Writes one detection per row as `t2,anomalous,clamped`.
pub fn write_detections<W: Write>(out: W, detections: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t2", "anomalous", "clamped"])?;
    for d in detections {
        w.write_record([format!("{}", d.t2), d.anomalous.to_string(), d.clamped.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
