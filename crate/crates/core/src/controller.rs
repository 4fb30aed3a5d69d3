//! Linear state-feedback safety controller and its Lyapunov certificate.
//!
//! The controller regulates around an operating point:
//! `u = sat(K·(x − x_ref) + u_ref + G·w)`, where `G·w` is an optional
//! disturbance feedforward. With `x_ref = 0`, `u_ref = 0`, `G = 0` this is the
//! plain `u = K·x`. The recoverable region is the ellipsoid
//! `(x − x_ref)ᵀ P (x − x_ref) < 1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::plant::{InputBounds, PlantModel};

const SYMMETRY_TOL: f64 = 1e-9;

/// Per-step tolerance on Lyapunov increase, absorbing RK4 round-off.
pub const LYAPUNOV_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct SafetyController {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub input_bounds: InputBounds,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    /// Disturbance feedforward, `m × d`.
    pub g: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub clamped: bool,
}

impl SafetyController {
    /// Builds `u = K·x` with Lyapunov matrix `P`. Fails unless `P` is
    /// symmetric and positive definite.
    pub fn new(k: DMatrix<f64>, p: DMatrix<f64>, input_bounds: InputBounds) -> Result<Self> {
        let n = k.ncols();
        let m = k.nrows();
        check_dim("P rows", n, p.nrows())?;
        check_dim("P columns", n, p.ncols())?;
        check_dim("K rows vs input bounds", m, input_bounds.dim())?;
        if k.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("safety controller gains"));
        }
        for i in 0..n {
            for j in 0..i {
                let scale = 1.0f64.max(p[(i, j)].abs());
                if (p[(i, j)] - p[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotPositiveDefinite("P is not symmetric"));
                }
            }
        }
        // Symmetrise to kill round-off asymmetry, then require a Cholesky factor.
        let p = (&p + p.transpose()) * 0.5;
        if p.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("P has a non-positive leading minor"));
        }
        Ok(Self {
            k,
            p,
            input_bounds,
            x_ref: DVector::zeros(n),
            u_ref: DVector::zeros(m),
            g: DMatrix::zeros(m, 0),
        })
    }

    pub fn with_operating_point(mut self, x_ref: Vec<f64>, u_ref: Vec<f64>) -> Result<Self> {
        check_dim("x_ref", self.state_dim(), x_ref.len())?;
        check_dim("u_ref", self.input_dim(), u_ref.len())?;
        self.x_ref = DVector::from_vec(x_ref);
        self.u_ref = DVector::from_vec(u_ref);
        Ok(self)
    }

    pub fn with_feedforward(mut self, g: DMatrix<f64>) -> Result<Self> {
        check_dim("feedforward rows", self.input_dim(), g.nrows())?;
        self.g = g;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.g.ncols()
    }

    /// Unsaturated command `K·(x − x_ref) + u_ref + G·w`.
    pub fn raw_input(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        (0..self.input_dim())
            .map(|i| {
                let mut v = self.u_ref[i];
                for j in 0..self.state_dim() {
                    v += self.k[(i, j)] * (x[j] - self.x_ref[j]);
                }
                for (j, wj) in w.iter().enumerate().take(self.disturbance_dim()) {
                    v += self.g[(i, j)] * wj;
                }
                v
            })
            .collect()
    }

    /// Saturated control. `w` may be empty when the controller has no
    /// feedforward.
    pub fn control(&self, x: &[f64], w: &[f64]) -> ControlOutput {
        debug_assert_eq!(x.len(), self.state_dim());
        let mut u = self.raw_input(x, w);
        let clamped = self.input_bounds.clamp(&mut u);
        ControlOutput { u, clamped }
    }

    pub fn lyapunov_value(&self, x: &[f64]) -> f64 {
        let n = self.state_dim();
        let mut v = 0.0;
        for i in 0..n {
            let di = x[i] - self.x_ref[i];
            let mut row = 0.0;
            for j in 0..n {
                row += self.p[(i, j)] * (x[j] - self.x_ref[j]);
            }
            v += di * row;
        }
        v.max(0.0)
    }

    pub fn in_recoverable(&self, x: &[f64]) -> bool {
        self.lyapunov_value(x) < 1.0
    }

    /// Largest `|x_i − x_ref_i|` over the ellipsoid, `sqrt((P⁻¹)_ii)`.
    pub fn extents(&self) -> Vec<f64> {
        let inv = self
            .p
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::zeros(self.state_dim(), self.state_dim()));
        (0..self.state_dim()).map(|i| inv[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Uniform sample from the ellipsoid scaled by `radius` (≤ 1 stays in R).
    pub fn sample_ellipsoid<R: Rng>(&self, rng: &mut R, radius: f64) -> Vec<f64> {
        let n = self.state_dim();
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
        // P = L·Lᵀ, so x = x_ref + L⁻ᵀ·y has (x−x_ref)ᵀP(x−x_ref) = |y|².
        let chol = self.p.clone().cholesky().expect("P validated at construction");
        let y = DVector::from_iterator(n, z.iter().map(|v| v / norm * r));
        let lt = chol.l().transpose();
        let d = lt.solve_upper_triangular(&y).unwrap_or_else(|| DVector::zeros(n));
        (0..n).map(|i| self.x_ref[i] + d[i]).collect()
    }

    /// Eigenvalues of `A_clᵀP + P·A_cl` for the unsaturated closed loop.
    pub fn lyapunov_derivative_spectrum(&self, model: &PlantModel) -> Result<Vec<f64>> {
        check_dim("controller vs plant states", model.state_dim(), self.state_dim())?;
        check_dim("controller vs plant inputs", model.input_dim(), self.input_dim())?;
        let acl = &model.a + &model.b * &self.k;
        let q = acl.transpose() * &self.p + &self.p * acl;
        let mut ev: Vec<f64> = SymmetricEigen::new(q).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }
}

/// Settings for [`verify_sc`].
#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub samples: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub samples: usize,
    /// Largest single-step increase of V seen over all runs.
    pub max_increase: f64,
    /// Number of runs in which V increased by more than the tolerance.
    pub increase_runs: usize,
    /// Number of runs that left the admissible set.
    pub exit_runs: usize,
    /// First offending initial state, if any.
    pub first_failure: Option<Vec<f64>>,
    pub passed: bool,
}

/// Samples initial states inside `R`, simulates the closed loop for
/// `horizon` seconds and checks that V never grows and S is never left.
/// Disturbances are drawn uniformly from the plant's disturbance box and held
/// for each run.
pub fn verify_sc(sc: &SafetyController, model: &PlantModel, cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.samples == 0 {
        return Err(Error::InvalidParameter("verify_sc needs at least one sample".into()));
    }
    if !(cfg.dt > 0.0) || !(cfg.horizon >= 0.0) {
        return Err(Error::InvalidParameter("verify_sc needs dt > 0 and horizon ≥ 0".into()));
    }
    check_dim("controller vs plant states", model.state_dim(), sc.state_dim())?;
    check_dim("controller vs plant inputs", model.input_dim(), sc.input_dim())?;
    let steps = (cfg.horizon / cfg.dt).ceil() as usize;
    let dist = model.disturbance();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = VerifyReport {
        samples: cfg.samples,
        max_increase: f64::NEG_INFINITY,
        ..Default::default()
    };
    for _ in 0..cfg.samples {
        let x0 = sc.sample_ellipsoid(&mut rng, 1.0);
        let w: Vec<f64> = dist
            .lower
            .iter()
            .zip(&dist.upper)
            .map(|(lo, hi)| if hi > lo { rng.random_range(*lo..=*hi) } else { *lo })
            .collect();
        let mut x = x0.clone();
        let mut v = sc.lyapunov_value(&x);
        let mut increased = false;
        let mut exited = !model.is_admissible(&x);
        for _ in 0..steps {
            let u = sc.control(&x, &w).u;
            x = model.rk4_step(&x, &u, &w, cfg.dt);
            let v_next = sc.lyapunov_value(&x);
            let inc = v_next - v;
            report.max_increase = report.max_increase.max(inc);
            if inc > LYAPUNOV_TOL || !v_next.is_finite() {
                increased = true;
            }
            if !model.is_admissible(&x) {
                exited = true;
            }
            v = v_next;
            if increased && exited {
                break;
            }
        }
        if increased {
            report.increase_runs += 1;
        }
        if exited {
            report.exit_runs += 1;
        }
        if (increased || exited) && report.first_failure.is_none() {
            report.first_failure = Some(x0);
        }
    }
    report.passed = report.increase_runs == 0 && report.exit_runs == 0;
    Ok(report)
}
