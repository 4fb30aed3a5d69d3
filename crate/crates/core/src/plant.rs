//! Continuous-time plant models.
//!
//! Every plant is affine in state, input and exogenous disturbance:
//! `ẋ = A·x + B·u + E·w`. The warehouse temperature system and a synthetic
//! 3-DOF helicopter are provided as ready-made models; anything else can be
//! loaded from a scenario file.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Component-wise lower/upper limits, used for inputs and disturbances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub type InputBounds = Bounds;

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("bounds", lower.len(), upper.len())?;
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::NonFinite("bounds"));
            }
            if lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "bound {i}: lower {lo} exceeds upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-limit, limit]` in every component.
    pub fn symmetric(limits: &[f64]) -> Result<Self> {
        Self::new(limits.iter().map(|l| -l.abs()).collect(), limits.iter().map(|l| l.abs()).collect())
    }

    pub fn point(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    /// Clamps `v` in place. Returns true if any component was modified.
    pub fn clamp(&self, v: &mut [f64]) -> bool {
        let mut clamped = false;
        for (x, (lo, hi)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            if *x < *lo {
                *x = *lo;
                clamped = true;
            } else if *x > *hi {
                *x = *hi;
                clamped = true;
            }
        }
        clamped
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }
}

/// The admissible set `S = { x : H·x ≤ h }`.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyPolytope {
    pub h_matrix: DMatrix<f64>,
    pub h_vector: DVector<f64>,
}

impl SafetyPolytope {
    pub fn new(h_matrix: DMatrix<f64>, h_vector: DVector<f64>) -> Result<Self> {
        if h_matrix.nrows() == 0 {
            return Err(Error::InvalidParameter("safety polytope needs at least one row".into()));
        }
        check_dim("safety polytope rows", h_matrix.nrows(), h_vector.len())?;
        if h_matrix.iter().chain(h_vector.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("safety polytope"));
        }
        Ok(Self { h_matrix, h_vector })
    }

    pub fn from_rows(rows: &[Vec<f64>], limits: &[f64]) -> Result<Self> {
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidParameter("ragged safety matrix".into()));
        }
        let h = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self::new(h, DVector::from_column_slice(limits))
    }

    pub fn state_dim(&self) -> usize {
        self.h_matrix.ncols()
    }

    pub fn rows(&self) -> usize {
        self.h_matrix.nrows()
    }

    /// `h − H·x` per row; admissible iff every entry is non-negative.
    pub fn slack(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                let hx: f64 = (0..self.state_dim()).map(|j| self.h_matrix[(i, j)] * x[j]).sum();
                self.h_vector[i] - hx
            })
            .collect()
    }

    pub fn is_admissible(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.state_dim());
        self.slack(x).iter().all(|s| *s >= 0.0)
    }
}

pub fn is_admissible(safety: &SafetyPolytope, x: &[f64]) -> bool {
    safety.is_admissible(x)
}

/// An affine plant `ẋ = A·x + B·u + E·w` with actuator limits and a safety
/// polytope.
#[derive(Clone, Debug)]
pub struct PlantModel {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Disturbance coupling, `n × d` (zero columns when there is no disturbance).
    pub e: DMatrix<f64>,
    pub disturbance_bounds: Option<Bounds>,
    pub input_bounds: InputBounds,
    pub safety: SafetyPolytope,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub disturbance_names: Vec<String>,
}

impl PlantModel {
    pub fn new(
        name: impl Into<String>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        input_bounds: InputBounds,
        safety: SafetyPolytope,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("input bounds", b.ncols(), input_bounds.dim())?;
        check_dim("safety columns", n, safety.state_dim())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plant matrices"));
        }
        let m = b.ncols();
        Ok(Self {
            name: name.into(),
            a,
            b,
            e: DMatrix::zeros(n, 0),
            disturbance_bounds: None,
            input_bounds,
            safety,
            state_names: (1..=n).map(|i| format!("x{i}")).collect(),
            input_names: (1..=m).map(|i| format!("u{i}")).collect(),
            disturbance_names: Vec::new(),
        })
    }

    pub fn with_disturbance(mut self, e: DMatrix<f64>, bounds: Bounds) -> Result<Self> {
        check_dim("E rows", self.state_dim(), e.nrows())?;
        check_dim("disturbance bounds", e.ncols(), bounds.dim())?;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("disturbance coupling"));
        }
        self.disturbance_names = (1..=e.ncols()).map(|i| format!("w{i}")).collect();
        self.e = e;
        self.disturbance_bounds = Some(bounds);
        Ok(self)
    }

    pub fn with_names(mut self, states: &[&str], inputs: &[&str], disturbances: &[&str]) -> Self {
        if states.len() == self.state_dim() {
            self.state_names = states.iter().map(|s| s.to_string()).collect();
        }
        if inputs.len() == self.input_dim() {
            self.input_names = inputs.iter().map(|s| s.to_string()).collect();
        }
        if disturbances.len() == self.disturbance_dim() {
            self.disturbance_names = disturbances.iter().map(|s| s.to_string()).collect();
        }
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.e.ncols()
    }

    /// Disturbance bounds, or an empty box when the plant has none.
    pub fn disturbance(&self) -> Bounds {
        self.disturbance_bounds.clone().unwrap_or(Bounds {
            lower: Vec::new(),
            upper: Vec::new(),
        })
    }

    /// Copy of the model with the disturbance pinned to `w` (used for map cells
    /// and scenarios with a known outside condition).
    pub fn with_disturbance_value(&self, w: &[f64]) -> Result<Self> {
        check_dim("disturbance value", self.disturbance_dim(), w.len())?;
        let mut m = self.clone();
        m.disturbance_bounds = Some(Bounds::point(w)?);
        Ok(m)
    }

    pub fn is_admissible(&self, x: &[f64]) -> bool {
        self.safety.is_admissible(x)
    }

    /// `A·x + B·u + E·w` written into `out` without allocating.
    pub(crate) fn derivative_into(&self, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            for (j, wj) in w.iter().enumerate() {
                acc += self.e[(i, j)] * wj;
            }
            *o = acc;
        }
    }

    /// One classical RK4 step with the input held constant across the step.
    pub fn rk4_step(&self, x: &[f64], u: &[f64], w: &[f64], dt: f64) -> Vec<f64> {
        let n = self.state_dim();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.derivative_into(x, u, w, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        self.derivative_into(&tmp, u, w, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        self.derivative_into(&tmp, u, w, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        self.derivative_into(&tmp, u, w, &mut k4);
        (0..n)
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }
}

/// `A·x + B·u + E·w`.
pub fn linear_derivative(model: &PlantModel, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_dim("state", model.state_dim(), x.len())?;
    check_dim("input", model.input_dim(), u.len())?;
    check_dim("disturbance", model.disturbance_dim(), w.len())?;
    if x.iter().chain(u).chain(w).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("derivative arguments"));
    }
    let mut out = vec![0.0; model.state_dim()];
    model.derivative_into(x, u, w, &mut out);
    Ok(out)
}

/// Values above this magnitude are treated as numerical blow-up.
const OVERFLOW_GUARD: f64 = 1e12;

/// Source of inputs for [`integrate`].
pub trait ControlLaw {
    fn input(&mut self, t: f64, x: &[f64]) -> Vec<f64>;
}

/// Holds a fixed input vector.
pub struct ConstantInput(pub Vec<f64>);

impl ControlLaw for ConstantInput {
    fn input(&mut self, _t: f64, _x: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

impl<F: FnMut(f64, &[f64]) -> Vec<f64>> ControlLaw for F {
    fn input(&mut self, t: f64, x: &[f64]) -> Vec<f64> {
        self(t, x)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Input applied over `[times[k], times[k+1])`, after clamping.
    pub inputs: Vec<Vec<f64>>,
    /// Number of steps whose requested input had to be clamped.
    pub clamped_steps: usize,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().map(|s| s.as_slice()).unwrap_or(&[])
    }
}

/// Fixed-step RK4 with zero-order-hold inputs clamped to the model's bounds.
pub fn integrate(
    model: &PlantModel,
    x0: &[f64],
    policy: &mut dyn ControlLaw,
    w: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    check_dim("initial state", model.state_dim(), x0.len())?;
    check_dim("disturbance", model.disturbance_dim(), w.len())?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {dt}")));
    }
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        clamped_steps: 0,
    };
    let mut x = x0.to_vec();
    traj.times.push(0.0);
    traj.states.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut u = policy.input(t, &x);
        check_dim("control law output", model.input_dim(), u.len())?;
        if model.input_bounds.clamp(&mut u) {
            traj.clamped_steps += 1;
        }
        let next = model.rk4_step(&x, &u, w, dt);
        if next.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
            return Err(Error::Divergence {
                time: t + dt,
                last_finite: x,
            });
        }
        x = next;
        traj.inputs.push(u);
        traj.times.push((k + 1) as f64 * dt);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

/// Physical constants of the warehouse heating model. Heat-transfer
/// coefficients are given per hour, as is customary for building data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarehouseParams {
    /// Room/outside heat-transfer coefficient, J/(h·m²·K).
    pub u_room_outside: f64,
    /// Floor/room heat-transfer coefficient, J/(h·m²·K).
    pub u_floor_room: f64,
    /// Wall and ceiling area, m².
    pub area_room_outside: f64,
    /// Floor area, m².
    pub area_floor_room: f64,
    pub mass_floor: f64,
    pub mass_room: f64,
    /// Specific heat of the (concrete) floor, J/(kg·K).
    pub cp_floor: f64,
    /// Specific heat of air, J/(kg·K).
    pub cp_room: f64,
    /// Floor conditioner capacity, J/s (symmetric heating/cooling).
    pub floor_capacity: f64,
    /// Room conditioner capacity, J/s (symmetric heating/cooling).
    pub room_capacity: f64,
}

impl Default for WarehouseParams {
    fn default() -> Self {
        Self {
            u_room_outside: 539.61,
            u_floor_room: 49920.0,
            area_room_outside: 48.0,
            area_floor_room: 25.0,
            mass_floor: 6000.0,
            mass_room: 69.96,
            cp_floor: 880.0,
            cp_room: 1005.0,
            floor_capacity: 115.0,
            room_capacity: 800.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarehouseRate {
    /// dT_F/dt, °C/s.
    pub floor: f64,
    /// dT_R/dt, °C/s.
    pub room: f64,
    /// The requested input exceeded the conditioner capacity and was clamped.
    pub clamped: bool,
}

impl WarehouseParams {
    fn validate(&self) -> Result<()> {
        let all = [
            self.u_room_outside,
            self.u_floor_room,
            self.area_room_outside,
            self.area_floor_room,
            self.mass_floor,
            self.mass_room,
            self.cp_floor,
            self.cp_room,
            self.floor_capacity,
            self.room_capacity,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("warehouse constants must be positive and finite".into()))
        }
    }

    /// Floor↔room conductance in W/K.
    pub fn floor_room_conductance(&self) -> f64 {
        self.u_floor_room / 3600.0 * self.area_floor_room
    }

    /// Room↔outside conductance in W/K.
    pub fn room_outside_conductance(&self) -> f64 {
        self.u_room_outside / 3600.0 * self.area_room_outside
    }

    pub fn floor_heat_capacity(&self) -> f64 {
        self.mass_floor * self.cp_floor
    }

    pub fn room_heat_capacity(&self) -> f64 {
        self.mass_room * self.cp_room
    }

    pub fn input_bounds(&self) -> InputBounds {
        Bounds {
            lower: vec![-self.floor_capacity, -self.room_capacity],
            upper: vec![self.floor_capacity, self.room_capacity],
        }
    }

    /// State `(T_F, T_R)`, input `(u_H/F, u_H/R)`, disturbance `T_O`; the room
    /// must stay within `[room_min, room_max]` °C.
    pub fn model(&self, outside: Bounds, room_min: f64, room_max: f64) -> Result<PlantModel> {
        self.validate()?;
        let gfr = self.floor_room_conductance();
        let gro = self.room_outside_conductance();
        let cf = self.floor_heat_capacity();
        let cr = self.room_heat_capacity();
        let a = DMatrix::from_row_slice(2, 2, &[-gfr / cf, gfr / cf, gfr / cr, -(gfr + gro) / cr]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0 / cf, 0.0, 0.0, 1.0 / cr]);
        let e = DMatrix::from_row_slice(2, 1, &[0.0, gro / cr]);
        let safety = SafetyPolytope::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]], &[room_max, -room_min])?;
        Ok(PlantModel::new("warehouse", a, b, self.input_bounds(), safety)?
            .with_disturbance(e, outside)?
            .with_names(&["T_F", "T_R"], &["u_HF", "u_HR"], &["T_O"]))
    }
}

/// Floor and room temperature rates for the warehouse, in °C/s. Inputs
/// beyond the conditioner capacity are clamped and flagged.
pub fn warehouse_derivative(
    params: &WarehouseParams,
    floor: f64,
    room: f64,
    outside: f64,
    u: &[f64],
) -> Result<WarehouseRate> {
    params.validate()?;
    check_dim("warehouse input", 2, u.len())?;
    if ![floor, room, outside, u[0], u[1]].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("warehouse state"));
    }
    let mut u = [u[0], u[1]];
    let clamped = params.input_bounds().clamp(&mut u);
    let gfr = params.floor_room_conductance();
    let gro = params.room_outside_conductance();
    let cf = params.floor_heat_capacity();
    let cr = params.room_heat_capacity();
    Ok(WarehouseRate {
        floor: -gfr / cf * (floor - room) + u[0] / cf,
        room: -gro / cr * (room - outside) + gfr / cr * (floor - room) + u[1] / cr,
        clamped,
    })
}

/// Named view of the helicopter's six states.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HelicopterState {
    pub elevation: f64,
    pub pitch: f64,
    pub travel: f64,
    pub elevation_rate: f64,
    pub pitch_rate: f64,
    pub travel_rate: f64,
}

impl HelicopterState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.elevation,
            self.pitch,
            self.travel,
            self.elevation_rate,
            self.pitch_rate,
            self.travel_rate,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        check_dim("helicopter state", 6, x.len())?;
        Ok(Self {
            elevation: x[0],
            pitch: x[1],
            travel: x[2],
            elevation_rate: x[3],
            pitch_rate: x[4],
            travel_rate: x[5],
        })
    }
}

/// Coefficients of the synthetic helicopter model. These are not identified
/// from hardware: elevation and pitch are mildly unstable double integrators,
/// travel is driven by pitch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelicopterParams {
    pub elevation_stiffness: f64,
    pub pitch_stiffness: f64,
    pub travel_from_pitch: f64,
    pub elevation_gain: f64,
    pub pitch_gain: f64,
    pub voltage_limit: f64,
}

impl Default for HelicopterParams {
    fn default() -> Self {
        Self {
            elevation_stiffness: 0.00625,
            pitch_stiffness: 0.01875,
            travel_from_pitch: -0.025,
            elevation_gain: 0.005,
            pitch_gain: 0.0075,
            voltage_limit: 1.1,
        }
    }
}

impl HelicopterParams {
    /// State `(ε, ρ, λ, ε̇, ρ̇, λ̇)`, input `(v_l, v_r)`. Safety:
    /// `−ε + |ρ| ≤ 0.3` and `|ρ| ≤ π/4`.
    pub fn model(&self) -> Result<PlantModel> {
        let mut a = DMatrix::zeros(6, 6);
        a[(0, 3)] = 1.0;
        a[(1, 4)] = 1.0;
        a[(2, 5)] = 1.0;
        a[(3, 0)] = self.elevation_stiffness;
        a[(4, 1)] = self.pitch_stiffness;
        a[(5, 1)] = self.travel_from_pitch;
        let mut b = DMatrix::zeros(6, 2);
        b[(3, 0)] = self.elevation_gain;
        b[(3, 1)] = self.elevation_gain;
        b[(4, 0)] = self.pitch_gain;
        b[(4, 1)] = -self.pitch_gain;
        let quarter = std::f64::consts::FRAC_PI_4;
        let safety = SafetyPolytope::from_rows(
            &[
                vec![-1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                vec![-1.0, -1.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
            ],
            &[0.3, 0.3, quarter, quarter],
        )?;
        let bounds = Bounds::symmetric(&[self.voltage_limit, self.voltage_limit])?;
        Ok(PlantModel::new("helicopter", a, b, bounds, safety)?.with_names(
            &["eps", "rho", "lambda", "eps_dot", "rho_dot", "lambda_dot"],
            &["v_l", "v_r"],
            &[],
        ))
    }
}
