//! Box over-approximation of reachable sets.
//!
//! Two questions are answered here: where can the plant go under *any*
//! admissible input (the untrusted controller, [`ReachMode::Uc`]), and where
//! can it go under the saturated safety controller ([`ReachMode::Sc`]).
//!
//! Propagation is done on a fixed time grid. Rather than re-boxing after every
//! step (which wraps badly for rotating dynamics) the engine keeps the exact
//! linear map from an origin box, `x(t) = Φ(t)·x₀ + ∫ e^{Mσ} N v dσ`, and only
//! boxes the result. The integral of `|e^{Mσ}N|` is bounded from sub-samples
//! plus a Lipschitz remainder, so every reported box is a sound enclosure.
//! Between grid points a Picard a-priori enclosure covers the sweep.
//!
//! In SC mode the saturation of each input channel is replaced per step by a
//! linear relaxation `sat(v) = α·v + e` that holds over the step's a-priori
//! enclosure: `α = 1, e = 0` when the channel never saturates, `α = 0` when it
//! is pinned at a limit, and a chord slope in between. `α` is quantized so
//! the corresponding closed-loop flows can be cached.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::SafetyController;
use crate::error::{check_dim, Error, Result};
use crate::plant::{PlantModel, SafetyPolytope};

/// Sub-samples per step used to bound `∫|e^{Mσ}N|`.
const SUBSAMPLES: usize = 8;
/// Anything beyond this magnitude counts as divergence.
const DIVERGENCE_LIMIT: f64 = 1e12;
const PICARD_ITERATIONS: usize = 30;
/// Quantization of the saturation relaxation slope.
const ALPHA_LEVELS: u8 = 16;
/// Dimensions up to this size get exact vertex enumeration for quadratic forms.
const VERTEX_ENUMERATION_LIMIT: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ReachBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("reach box", lower.len(), upper.len())?;
        if lower.iter().chain(&upper).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("reach box"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidParameter("reach box has lower > upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn from_center_radius(c: &[f64], r: &[f64]) -> Self {
        Self {
            lower: c.iter().zip(r).map(|(c, r)| c - r).collect(),
            upper: c.iter().zip(r).map(|(c, r)| c + r).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// `other ⊆ self`.
    pub fn contains(&self, other: &ReachBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| other.lower[i] >= self.lower[i] && other.upper[i] <= self.upper[i])
    }

    pub fn hull(&self, other: &ReachBox) -> ReachBox {
        ReachBox {
            lower: self.lower.iter().zip(&other.lower).map(|(a, b)| a.min(*b)).collect(),
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    pub fn intersect(&self, other: &ReachBox) -> Option<ReachBox> {
        let lower: Vec<f64> = self.lower.iter().zip(&other.lower).map(|(a, b)| a.max(*b)).collect();
        let upper: Vec<f64> = self.upper.iter().zip(&other.upper).map(|(a, b)| a.min(*b)).collect();
        if lower.iter().zip(&upper).all(|(l, u)| l <= u) {
            Some(ReachBox { lower, upper })
        } else {
            None
        }
    }

    fn is_finite_within(&self, limit: f64) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite() && v.abs() <= limit)
    }

    /// Maximum of `(x − x_ref)ᵀP(x − x_ref)` over the box. Exact for
    /// moderate dimensions (a convex function peaks at a vertex), otherwise an
    /// interval upper bound.
    pub fn max_quadratic(&self, p: &DMatrix<f64>, x_ref: &DVector<f64>) -> f64 {
        let n = self.dim();
        let lo: Vec<f64> = (0..n).map(|i| self.lower[i] - x_ref[i]).collect();
        let hi: Vec<f64> = (0..n).map(|i| self.upper[i] - x_ref[i]).collect();
        if n <= VERTEX_ENUMERATION_LIMIT {
            let mut best = f64::NEG_INFINITY;
            let mut v = vec![0.0; n];
            for mask in 0u32..(1u32 << n) {
                for i in 0..n {
                    v[i] = if mask & (1 << i) != 0 { hi[i] } else { lo[i] };
                }
                let mut q = 0.0;
                for i in 0..n {
                    let mut row = 0.0;
                    for j in 0..n {
                        row += p[(i, j)] * v[j];
                    }
                    q += v[i] * row;
                }
                best = best.max(q);
            }
            best
        } else {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let products = [lo[i] * lo[j], lo[i] * hi[j], hi[i] * lo[j], hi[i] * hi[j]];
                    let (pmin, pmax) = products
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                    let (pmin, pmax) = if i == j { (pmin.max(0.0), pmax) } else { (pmin, pmax) };
                    total += if p[(i, j)] >= 0.0 { p[(i, j)] * pmax } else { p[(i, j)] * pmin };
                }
            }
            total
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReachMode {
    /// Every admissible input, i.e. an adversarial controller.
    Uc,
    /// The closed loop under the saturated safety controller.
    Sc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachConfig {
    /// Grid step, seconds.
    pub step: f64,
    pub mode: ReachMode,
    /// Relative widening applied to every computed box.
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    /// Absolute widening applied to every computed box.
    #[serde(default = "default_pad")]
    pub pad: f64,
}

fn default_inflation() -> f64 {
    1e-9
}

fn default_pad() -> f64 {
    1e-9
}

impl ReachConfig {
    pub fn new(step: f64, mode: ReachMode) -> Self {
        Self {
            step,
            mode,
            inflation: default_inflation(),
            pad: default_pad(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!("reach step must be positive, got {}", self.step)));
        }
        if !(self.inflation >= 0.0 && self.pad >= 0.0) {
            return Err(Error::InvalidParameter("reach inflation and pad must be non-negative".into()));
        }
        Ok(())
    }

    fn widen(&self, c: &[f64], r: &[f64]) -> ReachBox {
        let r: Vec<f64> = c
            .iter()
            .zip(r)
            .map(|(c, r)| r + self.inflation * (c.abs() + r) + self.pad)
            .collect();
        ReachBox::from_center_radius(c, &r)
    }
}

/// Swept union and terminal box of a reachability query.
#[derive(Clone, Debug)]
pub struct ReachResult {
    /// Boxes whose union covers every reachable state over `[0, T]`.
    pub union: Vec<ReachBox>,
    /// Cover of the states reachable at exactly `T`.
    pub final_box: ReachBox,
}

/// Precomputed propagation data for `ẋ = M·x + N·v` over one step.
#[derive(Clone, Debug)]
struct Flow {
    m: DMatrix<f64>,
    n: DMatrix<f64>,
    abs_n: DMatrix<f64>,
    abs_m: DMatrix<f64>,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    /// `e^{M s_q}·N` at `s_q = q·h/Q`, q = 0..=Q.
    samples: Vec<DMatrix<f64>>,
    /// `e^{‖M‖∞·h}`.
    growth: f64,
    /// Largest magnitude in each column of N.
    n_col_max: Vec<f64>,
    h: f64,
}

impl Flow {
    fn new(m: DMatrix<f64>, n: DMatrix<f64>, h: f64) -> Result<Self> {
        let dim = m.nrows();
        let p = n.ncols();
        let mut aug = DMatrix::zeros(dim + p, dim + p);
        aug.view_mut((0, 0), (dim, dim)).copy_from(&(&m * h));
        aug.view_mut((0, dim), (dim, p)).copy_from(&(&n * h));
        let e = aug.exp();
        let phi = e.view((0, 0), (dim, dim)).into_owned();
        let gamma = e.view((0, dim), (dim, p)).into_owned();
        let phi_sub = (&m * (h / SUBSAMPLES as f64)).exp();
        let mut samples = Vec::with_capacity(SUBSAMPLES + 1);
        let mut cur = n.clone();
        samples.push(cur.clone());
        for _ in 0..SUBSAMPLES {
            cur = &phi_sub * cur;
            samples.push(cur.clone());
        }
        let norm_inf = (0..dim)
            .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let n_col_max = (0..p)
            .map(|j| n.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .collect();
        if phi.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::ReachDivergence { steps: 0 });
        }
        Ok(Self {
            abs_n: n.abs(),
            abs_m: m.abs(),
            m,
            n,
            phi,
            gamma,
            samples,
            growth: (norm_inf * h).exp(),
            n_col_max,
            h,
        })
    }
}

/// Exact linear image of an origin box under a fixed flow and input box.
#[derive(Clone, Debug)]
struct Accumulator {
    key: ChannelKey,
    c0: DVector<f64>,
    r0: DVector<f64>,
    v_c: DVector<f64>,
    v_r: DVector<f64>,
    phi_k: DMatrix<f64>,
    gamma_cum: DMatrix<f64>,
    w_cum: DMatrix<f64>,
}

impl Accumulator {
    fn new(origin: &ReachBox, key: ChannelKey, v_c: &[f64], v_r: &[f64]) -> Self {
        let n = origin.dim();
        let p = v_c.len();
        Self {
            key,
            c0: DVector::from_vec(origin.center()),
            r0: DVector::from_vec(origin.radius()),
            v_c: DVector::from_column_slice(v_c),
            v_r: DVector::from_column_slice(v_r),
            phi_k: DMatrix::identity(n, n),
            gamma_cum: DMatrix::zeros(n, p),
            w_cum: DMatrix::zeros(n, p),
        }
    }

    /// Advances one step of `flow.h` and returns `(center, radius)`.
    fn step(&mut self, flow: &Flow) -> (Vec<f64>, Vec<f64>) {
        let n = self.phi_k.nrows();
        let p = flow.n.ncols();
        let eta = flow.h / SUBSAMPLES as f64;
        // Lipschitz constants of |Φ_k e^{Ms} N| entries over the step.
        let m_phi = &flow.m * &self.phi_k;
        let row_l1: Vec<f64> = (0..n).map(|i| m_phi.row(i).iter().map(|v| v.abs()).sum()).collect();
        let mut prev = &self.phi_k * &flow.samples[0];
        for q in 1..=SUBSAMPLES {
            let next = &self.phi_k * &flow.samples[q];
            for j in 0..p {
                for i in 0..n {
                    self.w_cum[(i, j)] += 0.5 * eta * (prev[(i, j)].abs() + next[(i, j)].abs());
                }
            }
            prev = next;
        }
        for j in 0..p {
            for i in 0..n {
                let lip = row_l1[i] * flow.growth * flow.n_col_max[j];
                self.w_cum[(i, j)] += SUBSAMPLES as f64 * lip * eta * eta / 4.0;
            }
        }
        self.gamma_cum += &self.phi_k * &flow.gamma;
        self.phi_k = &self.phi_k * &flow.phi;
        let c = &self.phi_k * &self.c0 + &self.gamma_cum * &self.v_c;
        let r = self.phi_k.abs() * &self.r0 + &self.w_cum * &self.v_r;
        (c.iter().copied().collect(), r.iter().copied().collect())
    }
}

/// Per-channel relaxation slopes (in units of `1/ALPHA_LEVELS`) together
/// with the resulting exogenous input box.
#[derive(Clone, Debug, PartialEq)]
struct ChannelKey {
    alphas: Vec<u8>,
    v_lower: Vec<f64>,
    v_upper: Vec<f64>,
}

impl ChannelKey {
    fn center_radius(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.v_lower.iter().zip(&self.v_upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let r = self.v_lower.iter().zip(&self.v_upper).map(|(l, u)| 0.5 * (u - l)).collect();
        (c, r)
    }
}

fn interval_image(m: &DMatrix<f64>, abs_m: &DMatrix<f64>, c: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = m.nrows();
    let mut oc = vec![0.0; rows];
    let mut or = vec![0.0; rows];
    for i in 0..rows {
        for j in 0..c.len() {
            oc[i] += m[(i, j)] * c[j];
            or[i] += abs_m[(i, j)] * r[j];
        }
    }
    (oc, or)
}

/// Incremental reachability tube on the engine's time grid.
#[derive(Clone, Debug)]
pub struct Tube {
    /// `states[k]` covers the reachable states at `k·step`.
    pub states: Vec<ReachBox>,
    /// `segments[k]` covers every state over `[k·step, (k+1)·step]`.
    pub segments: Vec<ReachBox>,
    acc: Accumulator,
    lockstep: Option<(Accumulator, ReachBox)>,
    channels: Vec<ChannelKey>,
}

impl Tube {
    pub fn steps(&self) -> usize {
        self.segments.len()
    }
}

/// Reachability engine for one plant, controller and configuration. Flows
/// are computed once and cached per saturation pattern.
pub struct ReachEngine<'a> {
    model: &'a PlantModel,
    sc: Option<&'a SafetyController>,
    cfg: ReachConfig,
    uc_flow: Flow,
    uc_key: ChannelKey,
    sc_flows: HashMap<Vec<u8>, Flow>,
}

impl<'a> ReachEngine<'a> {
    pub fn new(model: &'a PlantModel, sc: Option<&'a SafetyController>, cfg: ReachConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == ReachMode::Sc {
            let sc = sc.ok_or_else(|| Error::InvalidParameter("SC reachability needs a safety controller".into()))?;
            check_dim("controller vs plant states", model.state_dim(), sc.state_dim())?;
            check_dim("controller vs plant inputs", model.input_dim(), sc.input_dim())?;
            if sc.disturbance_dim() != 0 {
                check_dim("controller feedforward", model.disturbance_dim(), sc.disturbance_dim())?;
            }
        }
        let n = model.state_dim();
        let (m_in, d) = (model.input_dim(), model.disturbance_dim());
        let mut nmat = DMatrix::zeros(n, m_in + d);
        nmat.view_mut((0, 0), (n, m_in)).copy_from(&model.b);
        nmat.view_mut((0, m_in), (n, d)).copy_from(&model.e);
        let uc_flow = Flow::new(model.a.clone(), nmat, cfg.step)?;
        let dist = model.disturbance();
        let uc_key = ChannelKey {
            alphas: Vec::new(),
            v_lower: model.input_bounds.lower.iter().chain(&dist.lower).copied().collect(),
            v_upper: model.input_bounds.upper.iter().chain(&dist.upper).copied().collect(),
        };
        Ok(Self {
            model,
            sc,
            cfg,
            uc_flow,
            uc_key,
            sc_flows: HashMap::new(),
        })
    }

    pub fn config(&self) -> &ReachConfig {
        &self.cfg
    }

    /// Closed-loop system matrices for a set of relaxation slopes.
    fn closed_loop_matrices(&self, alphas: &[u8]) -> (DMatrix<f64>, DMatrix<f64>) {
        let sc = self.sc.expect("SC mode checked at construction");
        let model = self.model;
        let n = model.state_dim();
        let (m_in, d) = (model.input_dim(), model.disturbance_dim());
        let mut m = model.a.clone();
        let mut e = model.e.clone();
        for (i, &a) in alphas.iter().enumerate().take(m_in) {
            if a > 0 {
                let alpha = a as f64 / ALPHA_LEVELS as f64;
                m += model.b.column(i) * sc.k.row(i) * alpha;
                if sc.disturbance_dim() == d && d > 0 {
                    e += model.b.column(i) * sc.g.row(i) * alpha;
                }
            }
        }
        let mut nmat = DMatrix::zeros(n, m_in + d);
        nmat.view_mut((0, 0), (n, m_in)).copy_from(&model.b);
        nmat.view_mut((0, m_in), (n, d)).copy_from(&e);
        (m, nmat)
    }

    fn sc_flow(&mut self, alphas: &[u8]) -> Result<&Flow> {
        if !self.sc_flows.contains_key(alphas) {
            let (m, n) = self.closed_loop_matrices(alphas);
            let flow = Flow::new(m, n, self.cfg.step)?;
            self.sc_flows.insert(alphas.to_vec(), flow);
        }
        Ok(&self.sc_flows[alphas])
    }

    /// Raw (unsaturated) controller command interval over a state box.
    fn command_interval(&self, omega: &ReachBox) -> (Vec<f64>, Vec<f64>) {
        let sc = self.sc.expect("SC mode");
        let dist = self.model.disturbance();
        let c = omega.center();
        let r = omega.radius();
        let m_in = sc.input_dim();
        let mut lo = vec![0.0; m_in];
        let mut hi = vec![0.0; m_in];
        for i in 0..m_in {
            let mut mid = sc.u_ref[i];
            let mut rad = 0.0;
            for j in 0..sc.state_dim() {
                mid += sc.k[(i, j)] * (c[j] - sc.x_ref[j]);
                rad += sc.k[(i, j)].abs() * r[j];
            }
            if sc.disturbance_dim() == dist.dim() {
                for j in 0..dist.dim() {
                    let wc = 0.5 * (dist.lower[j] + dist.upper[j]);
                    let wr = 0.5 * (dist.upper[j] - dist.lower[j]);
                    mid += sc.g[(i, j)] * wc;
                    rad += sc.g[(i, j)].abs() * wr;
                }
            }
            lo[i] = mid - rad;
            hi[i] = mid + rad;
        }
        (lo, hi)
    }

    /// Relaxation slopes and exogenous input box valid over `omega`.
    fn classify(&self, omega: &ReachBox) -> ChannelKey {
        let sc = self.sc.expect("SC mode");
        let bounds = &self.model.input_bounds;
        let dist = self.model.disturbance();
        let (lo, hi) = self.command_interval(omega);
        let m_in = sc.input_dim();
        let mut alphas = Vec::with_capacity(m_in);
        let mut v_lower = Vec::with_capacity(m_in + dist.dim());
        let mut v_upper = Vec::with_capacity(m_in + dist.dim());
        for i in 0..m_in {
            let (ulo, uhi) = (bounds.lower[i], bounds.upper[i]);
            let sat = |v: f64| v.clamp(ulo, uhi);
            let (a, b) = (lo[i], hi[i]);
            let chord = if b > a { (sat(b) - sat(a)) / (b - a) } else if a > ulo && a < uhi { 1.0 } else { 0.0 };
            let level = (chord * ALPHA_LEVELS as f64).round().clamp(0.0, ALPHA_LEVELS as f64) as u8;
            let alpha = level as f64 / ALPHA_LEVELS as f64;
            // e(v) = sat(v) − α·v is piecewise linear; its extremes sit at the
            // interval ends or at the saturation corners.
            let mut e_lo = f64::INFINITY;
            let mut e_hi = f64::NEG_INFINITY;
            for v in [a, b, ulo, uhi] {
                if v >= a && v <= b {
                    let e = sat(v) - alpha * v;
                    e_lo = e_lo.min(e);
                    e_hi = e_hi.max(e);
                }
            }
            // u = α·(K(x − x_ref) + u_ref + G·w) + e
            let offset = alpha
                * (sc.u_ref[i] - (0..sc.state_dim()).map(|j| sc.k[(i, j)] * sc.x_ref[j]).sum::<f64>());
            alphas.push(level);
            v_lower.push(offset + e_lo);
            v_upper.push(offset + e_hi);
        }
        v_lower.extend_from_slice(&dist.lower);
        v_upper.extend_from_slice(&dist.upper);
        ChannelKey {
            alphas,
            v_lower,
            v_upper,
        }
    }

    /// Interval enclosure of the vector field over `omega` (SC mode).
    fn sc_field(&mut self, omega: &ReachBox) -> Result<(Vec<f64>, Vec<f64>)> {
        let model = self.model;
        let c = omega.center();
        let r = omega.radius();
        // Natural extension: A·Ω + B·sat(command) + E·W.
        let (lo, hi) = self.command_interval(omega);
        let mut u_lo = lo.clone();
        let mut u_hi = hi.clone();
        model.input_bounds.clamp(&mut u_lo);
        model.input_bounds.clamp(&mut u_hi);
        let dist = model.disturbance();
        let v_c: Vec<f64> = u_lo.iter().zip(&u_hi).map(|(l, u)| 0.5 * (l + u)).chain(dist.center()).collect();
        let v_r: Vec<f64> = u_lo
            .iter()
            .zip(&u_hi)
            .map(|(l, u)| 0.5 * (u - l))
            .chain(dist.lower.iter().zip(&dist.upper).map(|(l, u)| 0.5 * (u - l)))
            .collect();
        let (ac, ar) = interval_image(&self.uc_flow.m, &self.uc_flow.abs_m, &c, &r);
        let (bc, br) = interval_image(&self.uc_flow.n, &self.uc_flow.abs_n, &v_c, &v_r);
        let nat_lo: Vec<f64> = (0..c.len()).map(|i| ac[i] + bc[i] - ar[i] - br[i]).collect();
        let nat_hi: Vec<f64> = (0..c.len()).map(|i| ac[i] + bc[i] + ar[i] + br[i]).collect();
        // Closed-loop extension for the saturation pattern valid over Ω.
        let key = self.classify(omega);
        let (kc, kr) = key.center_radius();
        let flow = self.sc_flow(&key.alphas)?;
        let (mc, mr) = interval_image(&flow.m, &flow.abs_m, &c, &r);
        let (nc, nr) = interval_image(&flow.n, &flow.abs_n, &kc, &kr);
        let lo: Vec<f64> = (0..c.len()).map(|i| nat_lo[i].max(mc[i] + nc[i] - mr[i] - nr[i])).collect();
        let hi: Vec<f64> = (0..c.len()).map(|i| nat_hi[i].min(mc[i] + nc[i] + mr[i] + nr[i])).collect();
        Ok((lo, hi))
    }

    fn uc_field(&self, omega: &ReachBox) -> (Vec<f64>, Vec<f64>) {
        let (kc, kr) = self.uc_key.center_radius();
        let c = omega.center();
        let r = omega.radius();
        let (mc, mr) = interval_image(&self.uc_flow.m, &self.uc_flow.abs_m, &c, &r);
        let (nc, nr) = interval_image(&self.uc_flow.n, &self.uc_flow.abs_n, &kc, &kr);
        let lo = (0..c.len()).map(|i| mc[i] + nc[i] - mr[i] - nr[i]).collect();
        let hi = (0..c.len()).map(|i| mc[i] + nc[i] + mr[i] + nr[i]).collect();
        (lo, hi)
    }

    /// A-priori enclosure of all trajectories leaving `x` over `[0, h]`.
    fn picard(&mut self, x: &ReachBox, h: f64, mode: ReachMode, steps: usize) -> Result<ReachBox> {
        let sweep = |x: &ReachBox, lo: &[f64], hi: &[f64]| ReachBox {
            lower: (0..x.dim()).map(|i| x.lower[i] + (h * lo[i]).min(0.0)).collect(),
            upper: (0..x.dim()).map(|i| x.upper[i] + (h * hi[i]).max(0.0)).collect(),
        };
        let field = |engine: &mut Self, omega: &ReachBox| -> Result<(Vec<f64>, Vec<f64>)> {
            match mode {
                ReachMode::Uc => Ok(engine.uc_field(omega)),
                ReachMode::Sc => engine.sc_field(omega),
            }
        };
        let (lo, hi) = field(self, x)?;
        let mut omega = inflate(&sweep(x, &lo, &hi), 0.1);
        for _ in 0..PICARD_ITERATIONS {
            if !omega.is_finite_within(DIVERGENCE_LIMIT) {
                break;
            }
            let (lo, hi) = field(self, &omega)?;
            let cand = sweep(x, &lo, &hi);
            if omega.contains(&cand) {
                return Ok(cand);
            }
            omega = inflate(&cand.hull(&omega), 0.1);
        }
        Err(Error::ReachDivergence { steps })
    }

    /// Starts a tube at `x0`.
    pub fn start(&self, x0: &ReachBox) -> Result<Tube> {
        check_dim("initial box", self.model.state_dim(), x0.dim())?;
        let (vc, vr) = self.uc_key.center_radius();
        let uc_acc = Accumulator::new(x0, self.uc_key.clone(), &vc, &vr);
        let (acc, lockstep) = match self.cfg.mode {
            ReachMode::Uc => (uc_acc, None),
            // The SC accumulator is created lazily on the first step.
            ReachMode::Sc => (uc_acc.clone(), Some((uc_acc, x0.clone()))),
        };
        Ok(Tube {
            states: vec![x0.clone()],
            segments: Vec::new(),
            acc,
            lockstep,
            channels: Vec::new(),
        })
    }

    /// Advances the tube by one grid step.
    pub fn advance(&mut self, tube: &mut Tube) -> Result<()> {
        let k = tube.segments.len();
        let x = tube.states[k].clone();
        let h = self.cfg.step;
        match self.cfg.mode {
            ReachMode::Uc => {
                let omega = self.picard(&x, h, ReachMode::Uc, k)?;
                let (c, r) = tube.acc.step(&self.uc_flow);
                let next = self.cfg.widen(&c, &r);
                if !next.is_finite_within(DIVERGENCE_LIMIT) {
                    return Err(Error::ReachDivergence { steps: k + 1 });
                }
                tube.segments.push(omega);
                tube.states.push(next);
                tube.channels.push(self.uc_key.clone());
            }
            ReachMode::Sc => {
                let (mut uc_acc, uc_box) = tube.lockstep.take().expect("SC tube has a lockstep");
                let omega_uc = self.picard(&uc_box, h, ReachMode::Uc, k)?;
                let omega_sc = self.picard(&x, h, ReachMode::Sc, k)?;
                let omega = omega_sc.intersect(&omega_uc).unwrap_or(omega_sc);
                let key = self.classify(&omega);
                if k == 0 || tube.acc.key != key {
                    let (vc, vr) = key.center_radius();
                    tube.acc = Accumulator::new(&x, key.clone(), &vc, &vr);
                }
                let flow = self.sc_flow(&key.alphas)?.clone();
                let (c, r) = tube.acc.step(&flow);
                let (uc_c, uc_r) = uc_acc.step(&self.uc_flow);
                let uc_next = self.cfg.widen(&uc_c, &uc_r);
                let mut next = self.cfg.widen(&c, &r);
                if let Some(t) = next.intersect(&omega) {
                    next = t;
                }
                if let Some(t) = next.intersect(&uc_next) {
                    next = t;
                }
                if !next.is_finite_within(DIVERGENCE_LIMIT) {
                    return Err(Error::ReachDivergence { steps: k + 1 });
                }
                tube.segments.push(omega);
                tube.states.push(next);
                tube.channels.push(key);
                tube.lockstep = Some((uc_acc, uc_next));
            }
        }
        Ok(())
    }

    /// Grid steps fully covered by `t`, and the leftover fraction of a step.
    fn split_time(&self, t: f64) -> (usize, f64) {
        let h = self.cfg.step;
        let ratio = t / h;
        let full = (ratio + 1e-9).floor().max(0.0) as usize;
        let rest = t - full as f64 * h;
        if rest <= 1e-9 * h {
            (full, 0.0)
        } else {
            (full, rest)
        }
    }

    /// Number of segments needed to cover `[0, t]`.
    pub fn segments_for(&self, t: f64) -> usize {
        let (full, rest) = self.split_time(t);
        full + usize::from(rest > 0.0)
    }

    /// Extends `tube` until it covers `[0, t]`.
    pub fn extend_to(&mut self, tube: &mut Tube, t: f64) -> Result<()> {
        let need = self.segments_for(t);
        while tube.segments.len() < need {
            self.advance(tube)?;
        }
        Ok(())
    }

    /// Cover of the states reachable at exactly `t`. The tube must already
    /// extend to `t`.
    pub fn state_at(&mut self, tube: &Tube, t: f64) -> Result<ReachBox> {
        let (full, rest) = self.split_time(t);
        if rest == 0.0 {
            return tube
                .states
                .get(full)
                .cloned()
                .ok_or_else(|| Error::InvalidParameter("tube does not reach the requested time".into()));
        }
        let (x, seg, key) = match (tube.states.get(full), tube.segments.get(full), tube.channels.get(full)) {
            (Some(x), Some(s), Some(k)) => (x, s, k),
            _ => return Err(Error::InvalidParameter("tube does not reach the requested time".into())),
        };
        let (m, n) = match self.cfg.mode {
            ReachMode::Uc => (self.uc_flow.m.clone(), self.uc_flow.n.clone()),
            ReachMode::Sc => self.closed_loop_matrices(&key.alphas),
        };
        let flow = Flow::new(m, n, rest)?;
        let (vc, vr) = key.center_radius();
        let mut acc = Accumulator::new(x, key.clone(), &vc, &vr);
        let (c, r) = acc.step(&flow);
        let out = self.cfg.widen(&c, &r);
        Ok(match self.cfg.mode {
            ReachMode::Uc => out,
            ReachMode::Sc => out.intersect(seg).unwrap_or(out),
        })
    }

    /// Segment boxes covering `[0, t]`; just the start box when `t = 0`.
    pub fn union_upto<'t>(&self, tube: &'t Tube, t: f64) -> &'t [ReachBox] {
        let k = self.segments_for(t).min(tube.segments.len());
        if k == 0 {
            &tube.states[..1]
        } else {
            &tube.segments[..k]
        }
    }

    pub fn reach_upto(&mut self, x0: &ReachBox, t: f64) -> Result<ReachResult> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("reach horizon must be ≥ 0, got {t}")));
        }
        let mut tube = self.start(x0)?;
        self.extend_to(&mut tube, t)?;
        let final_box = self.state_at(&tube, t)?;
        let union = self.union_upto(&tube, t).to_vec();
        Ok(ReachResult { union, final_box })
    }
}

fn inflate(b: &ReachBox, rel: f64) -> ReachBox {
    let c = b.center();
    let r: Vec<f64> = b.radius().iter().zip(&c).map(|(r, c)| r * (1.0 + rel) + 1e-12 * (1.0 + c.abs())).collect();
    ReachBox::from_center_radius(&c, &r)
}

/// One grid step from `b`.
pub fn reach_step(
    model: &PlantModel,
    b: &ReachBox,
    cfg: &ReachConfig,
    sc: Option<&SafetyController>,
) -> Result<ReachBox> {
    let mut engine = ReachEngine::new(model, sc, *cfg)?;
    let mut tube = engine.start(b)?;
    engine.advance(&mut tube)?;
    Ok(tube.states[1].clone())
}

pub fn reach_upto(
    model: &PlantModel,
    x0: &ReachBox,
    cfg: &ReachConfig,
    sc: Option<&SafetyController>,
    t: f64,
) -> Result<ReachResult> {
    ReachEngine::new(model, sc, *cfg)?.reach_upto(x0, t)
}

/// True iff every box lies in `S` (worst corner per row).
pub fn always_inside(boxes: &[ReachBox], safety: &SafetyPolytope) -> bool {
    boxes.iter().all(|b| box_inside(b, safety))
}

pub fn box_inside(b: &ReachBox, safety: &SafetyPolytope) -> bool {
    let n = safety.state_dim();
    if b.dim() != n {
        return false;
    }
    (0..safety.rows()).all(|i| {
        let mut worst = 0.0;
        for j in 0..n {
            let hij = safety.h_matrix[(i, j)];
            worst += if hij >= 0.0 { hij * b.upper[j] } else { hij * b.lower[j] };
        }
        worst <= safety.h_vector[i]
    })
}

/// True iff `max (x − x_ref)ᵀP(x − x_ref) < 1` over the box.
pub fn inside_recoverable(b: &ReachBox, sc: &SafetyController) -> bool {
    b.dim() == sc.state_dim() && b.max_quadratic(&sc.p, &sc.x_ref) < 1.0
}
