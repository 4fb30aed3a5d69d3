//! Closed-loop execution of the restart protocol.
//!
//! Each cycle runs a secure execution interval (SEI) where the safety
//! controller drives the plant while the restart window is searched. The SEI
//! ends when a window is found and written to the root-of-trust timer. Normal
//! operation follows, with the mission controller or the attacker in charge.
//! When the timer fires the platform reboots for `T_r` with the actuators
//! holding their last command, and then a new SEI begins.
//!
//! One simulated clock drives everything. Controllers update on a fixed
//! control period and also at every protocol event, so phase changes take
//! effect at the exact instant they happen.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controller::{ControlOutput, SafetyController};
use crate::error::{check_dim, Error, Result};
use crate::plant::PlantModel;
use crate::policy::{find_restart_time, Budget, Outcome, PolicyConfig};
use crate::rot::RotEmulator;

const OVERFLOW_GUARD: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "SEI")]
    Sei,
    Normal,
    Rebooting,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Sei => "SEI",
            Phase::Normal => "Normal",
            Phase::Rebooting => "Rebooting",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimEvent {
    RestartSet,
    RebootStart,
    RebootEnd,
    AttackActive,
    SeiExtended,
    SafetyViolation,
}

impl SimEvent {
    pub fn label(self) -> &'static str {
        match self {
            SimEvent::RestartSet => "restart-set",
            SimEvent::RebootStart => "reboot-start",
            SimEvent::RebootEnd => "reboot-end",
            SimEvent::AttackActive => "attack-active",
            SimEvent::SeiExtended => "SEI-extended",
            SimEvent::SafetyViolation => "safety-violation",
        }
    }
}

/// How a compromised platform falsifies what the mission controller sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    Additive { offset: Vec<f64> },
    Replace { values: Vec<f64> },
    Noise { std: Vec<f64> },
}

/// Attack applied during every normal phase. Activation delays are measured
/// from the end of the SEI of the same cycle, since a restart wipes the
/// attacker and each cycle has to be compromised anew.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackScenario {
    #[default]
    None,
    /// The mission task dies and the actuators keep its last command.
    KillController { activation: f64 },
    SensorCorruption { activation: f64, corruption: Corruption },
    /// Inputs steer toward the nearest face of the safety polytope.
    WorstCaseTakeover,
    /// Every actuator at its upper limit. `outside_temperature`, when given,
    /// overrides the first disturbance channel of the run.
    MaxHeaters {
        #[serde(default)]
        outside_temperature: Option<f64>,
    },
}

impl AttackScenario {
    fn activation(&self) -> Option<f64> {
        match self {
            AttackScenario::None => None,
            AttackScenario::KillController { activation } | AttackScenario::SensorCorruption { activation, .. } => {
                Some(*activation)
            }
            AttackScenario::WorstCaseTakeover | AttackScenario::MaxHeaters { .. } => Some(0.0),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if let Some(a) = self.activation() {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::InvalidParameter(format!("attack activation must be ≥ 0, got {a}")));
            }
        }
        if let AttackScenario::SensorCorruption { corruption, .. } = self {
            let len = match corruption {
                Corruption::Additive { offset } => offset.len(),
                Corruption::Replace { values } => values.len(),
                Corruption::Noise { std } => {
                    if std.iter().any(|s| !(*s >= 0.0)) {
                        return Err(Error::InvalidParameter("noise std must be ≥ 0".into()));
                    }
                    std.len()
                }
            };
            check_dim("sensor corruption", n, len)?;
        }
        Ok(())
    }
}

/// Linear setpoint-tracking law `sat(K·(x − x_sp) + u_sp + G·w)` that stands
/// in for the mission controller.
#[derive(Clone, Debug, PartialEq)]
pub struct MissionController {
    pub k: DMatrix<f64>,
    pub setpoint: Vec<f64>,
    pub input_offset: Vec<f64>,
    pub feedforward: Option<DMatrix<f64>>,
    /// State components that count toward the tracking error.
    pub tracked: Vec<usize>,
}

impl MissionController {
    pub fn new(k: DMatrix<f64>, setpoint: Vec<f64>, input_offset: Vec<f64>) -> Result<Self> {
        check_dim("mission setpoint", k.ncols(), setpoint.len())?;
        check_dim("mission input offset", k.nrows(), input_offset.len())?;
        let tracked = (0..setpoint.len()).collect();
        Ok(Self {
            k,
            setpoint,
            input_offset,
            feedforward: None,
            tracked,
        })
    }

    pub fn with_feedforward(mut self, g: DMatrix<f64>) -> Result<Self> {
        check_dim("mission feedforward rows", self.k.nrows(), g.nrows())?;
        self.feedforward = Some(g);
        Ok(self)
    }

    pub fn with_tracked(mut self, tracked: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = tracked.iter().find(|&&i| i >= self.setpoint.len()) {
            return Err(Error::InvalidParameter(format!("tracked index {bad} out of range")));
        }
        self.tracked = tracked;
        Ok(self)
    }

    /// Reuses a safety controller's gains around a different setpoint.
    pub fn from_safety_controller(sc: &SafetyController, setpoint: Vec<f64>, input_offset: Vec<f64>) -> Result<Self> {
        let m = Self::new(sc.k.clone(), setpoint, input_offset)?;
        if sc.disturbance_dim() > 0 {
            m.with_feedforward(sc.g.clone())
        } else {
            Ok(m)
        }
    }

    /// Clamped mission command for the state the controller believes in.
    pub fn main_controller(&self, model: &PlantModel, x: &[f64], w: &[f64]) -> ControlOutput {
        let mut u: Vec<f64> = (0..self.k.nrows())
            .map(|i| {
                let mut v = self.input_offset[i];
                for j in 0..self.k.ncols() {
                    v += self.k[(i, j)] * (x[j] - self.setpoint[j]);
                }
                if let Some(g) = &self.feedforward {
                    for (j, wj) in w.iter().enumerate().take(g.ncols()) {
                        v += g[(i, j)] * wj;
                    }
                }
                v
            })
            .collect();
        let clamped = model.input_bounds.clamp(&mut u);
        ControlOutput { u, clamped }
    }

    /// Euclidean distance to the setpoint over the tracked components.
    pub fn tracking_error(&self, x: &[f64]) -> f64 {
        self.tracked
            .iter()
            .map(|&i| (x[i] - self.setpoint[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Model used for the restart-window analysis, including disturbance
    /// bounds.
    pub model: PlantModel,
    pub sc: SafetyController,
    pub policy: PolicyConfig,
    pub mission: MissionController,
    pub scenario: AttackScenario,
    pub control_period: f64,
    pub integration_step: f64,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    /// Actual disturbance acting on the plant. Defaults to the centre of the
    /// model's disturbance bounds.
    pub disturbance: Option<Vec<f64>>,
    pub seed: u64,
    /// Refuse wall-clock search budgets.
    pub deterministic: bool,
    /// SEI rounds in a single cycle beyond which the run is flagged as stuck.
    pub max_sei_rounds: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.model.state_dim();
        self.policy.validate()?;
        check_dim("initial state", n, self.initial_state.len())?;
        check_dim("controller states", n, self.sc.state_dim())?;
        check_dim("mission setpoint", n, self.mission.setpoint.len())?;
        check_dim("mission inputs", self.model.input_dim(), self.mission.k.nrows())?;
        if let Some(w) = &self.disturbance {
            check_dim("disturbance", self.model.disturbance_dim(), w.len())?;
        }
        for (name, v) in [
            ("control period", self.control_period),
            ("integration step", self.integration_step),
            ("horizon", self.horizon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.deterministic && matches!(self.policy.budget, Budget::WallClock(_)) {
            return Err(Error::Config(
                "deterministic runs need an iteration budget, not a wall-clock one".into(),
            ));
        }
        self.scenario.validate(n)
    }

    fn true_disturbance(&self) -> Vec<f64> {
        let mut w = self
            .disturbance
            .clone()
            .unwrap_or_else(|| self.model.disturbance().center());
        if let AttackScenario::MaxHeaters {
            outside_temperature: Some(t),
        } = self.scenario
        {
            if let Some(first) = w.first_mut() {
                *first = t;
            }
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    /// Phase in force from `t` until the next record.
    pub phase: Phase,
    pub state: Vec<f64>,
    /// Input applied from `t` until the next record.
    pub input: Vec<f64>,
    pub lyapunov: f64,
    pub events: Vec<SimEvent>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimSummary {
    pub violations: usize,
    pub restart_sets: usize,
    pub reboots: usize,
    pub sei_extensions: usize,
    pub max_sei_rounds: usize,
    /// Some SEI needed more rounds than the configured limit.
    pub liveness_violation: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimTrace {
    pub records: Vec<TraceRecord>,
    pub summary: SimSummary,
}

impl SimTrace {
    pub fn has_violation(&self) -> bool {
        self.records.iter().any(|r| r.events.contains(&SimEvent::SafetyViolation))
    }

    pub fn max_state(&self, i: usize) -> f64 {
        self.records.iter().map(|r| r.state[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_state(&self, i: usize) -> f64 {
        self.records.iter().map(|r| r.state[i]).fold(f64::INFINITY, f64::min)
    }

    /// Total time spent in `phase`.
    pub fn time_in(&self, phase: Phase) -> f64 {
        self.records
            .windows(2)
            .filter(|w| w[0].phase == phase)
            .map(|w| w[1].t - w[0].t)
            .fold(0.0, |a, b| a + b)
    }

    pub fn duration(&self) -> f64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Time-weighted mean tracking error of the mission controller.
    pub fn mean_tracking_error(&self, mission: &MissionController) -> f64 {
        let total = self.duration();
        if total <= 0.0 {
            return self.records.first().map_or(0.0, |r| mission.tracking_error(&r.state));
        }
        self.records
            .windows(2)
            .map(|w| mission.tracking_error(&w[0].state) * (w[1].t - w[0].t))
            .sum::<f64>()
            / total
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let (n, m) = self
            .records
            .first()
            .map_or((0, 0), |r| (r.state.len(), r.input.len()));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "phase".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("V".into());
        header.push("event".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![format!("{}", r.t), r.phase.to_string()];
            row.extend(r.state.iter().map(|v| format!("{v}")));
            row.extend(r.input.iter().map(|v| format!("{v}")));
            row.push(format!("{}", r.lyapunov));
            row.push(r.events.iter().map(|e| e.label()).collect::<Vec<_>>().join(";"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of the trace during which the mission controller was in charge.
pub fn availability_of(trace: &SimTrace) -> f64 {
    let total = trace.duration();
    if total <= 0.0 {
        return match trace.records.first() {
            Some(r) if r.phase == Phase::Normal => 1.0,
            _ => 0.0,
        };
    }
    (trace.time_in(Phase::Normal) / total).clamp(0.0, 1.0)
}

/// Per safety row, the input direction that moves the row value fastest
/// toward its limit, taken from the first nonzero `H_i·A^k·B`.
fn attack_directions(model: &PlantModel) -> Vec<Vec<f64>> {
    let h = &model.safety.h_matrix;
    let n = model.state_dim();
    (0..h.nrows())
        .map(|i| {
            let mut row = h.row(i).clone_owned();
            for _ in 0..n {
                let d = &row * &model.b;
                if d.iter().any(|v| v.abs() > 1e-300) {
                    return d.iter().copied().collect();
                }
                row = &row * &model.a;
            }
            vec![0.0; model.input_dim()]
        })
        .collect()
}

fn takeover_input(model: &PlantModel, directions: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let h = &model.safety.h_matrix;
    let slack = model.safety.slack(x);
    let nearest = (0..h.nrows())
        .min_by(|&a, &b| {
            let na = h.row(a).norm().max(f64::MIN_POSITIVE);
            let nb = h.row(b).norm().max(f64::MIN_POSITIVE);
            (slack[a] / na).total_cmp(&(slack[b] / nb))
        })
        .unwrap_or(0);
    let bounds = &model.input_bounds;
    directions
        .get(nearest)
        .map(|d| {
            d.iter()
                .enumerate()
                .map(|(j, &s)| if s < 0.0 { bounds.lower[j] } else { bounds.upper[j] })
                .collect()
        })
        .unwrap_or_else(|| bounds.upper.clone())
}

struct Runner<'a> {
    cfg: &'a SimConfig,
    w: Vec<f64>,
    rot: RotEmulator,
    rng: ChaCha8Rng,
    directions: Vec<Vec<f64>>,
    phase: Phase,
    x: Vec<f64>,
    u: Vec<f64>,
    /// End of the running SEI round and the window it produced.
    round: Option<(f64, Option<f64>)>,
    rounds_this_cycle: usize,
    normal_start: f64,
    attack_active: bool,
    /// Last command the mission task issued in this normal phase.
    mission_hold: Option<Vec<f64>>,
    reboot_end: f64,
    records: Vec<TraceRecord>,
    summary: SimSummary,
}

impl<'a> Runner<'a> {
    fn start_round(&mut self, t: f64) -> Result<()> {
        let outcome = find_restart_time(&self.x, &self.cfg.model, &self.cfg.sc, &self.cfg.policy)?;
        let (length, window) = match outcome {
            Outcome::Safe(win) => (win.elapsed_adjustment, Some(win.delta_safe)),
            Outcome::Inadmissible | Outcome::Unrecoverable => (self.cfg.policy.t_s, None),
        };
        self.rounds_this_cycle += 1;
        self.summary.max_sei_rounds = self.summary.max_sei_rounds.max(self.rounds_this_cycle);
        self.round = Some((t + length, window));
        Ok(())
    }

    /// Applies every protocol transition due at `t`.
    fn transitions(&mut self, t: f64, events: &mut Vec<SimEvent>) -> Result<()> {
        let fired = self.rot.poll(t)?;
        loop {
            match self.phase {
                Phase::Sei => match self.round {
                    None => {
                        if t < self.cfg.horizon {
                            self.start_round(t)?;
                        }
                        return Ok(());
                    }
                    Some((end, window)) if t >= end => {
                        self.round = None;
                        match window {
                            Some(delta) if self.rot.set_restart_time(t, delta) => {
                                events.push(SimEvent::RestartSet);
                                self.summary.restart_sets += 1;
                                self.phase = Phase::Normal;
                                self.normal_start = t;
                                self.attack_active = false;
                                self.mission_hold = None;
                            }
                            _ => {
                                events.push(SimEvent::SeiExtended);
                                self.summary.sei_extensions += 1;
                            }
                        }
                    }
                    Some(_) => return Ok(()),
                },
                Phase::Normal => {
                    if let Some(a) = self.cfg.scenario.activation() {
                        if !self.attack_active && t >= self.normal_start + a {
                            self.attack_active = true;
                            events.push(SimEvent::AttackActive);
                        }
                    }
                    // The timer can only have been armed in this cycle, so a
                    // signal seen now belongs to this normal phase.
                    if fired.is_some() || self.rot.fire_at().is_some_and(|f| t >= f) {
                        if fired.is_none() {
                            self.rot.poll(t)?;
                        }
                        events.push(SimEvent::RebootStart);
                        self.summary.reboots += 1;
                        self.phase = Phase::Rebooting;
                        self.reboot_end = t + self.cfg.policy.t_r;
                    }
                    return Ok(());
                }
                Phase::Rebooting => {
                    if t >= self.reboot_end {
                        events.push(SimEvent::RebootEnd);
                        self.rot.rearm()?;
                        self.phase = Phase::Sei;
                        self.rounds_this_cycle = 0;
                    } else {
                        return Ok(());
                    }
                }
            }
        }
    }

    fn normal_input(&mut self) -> Vec<f64> {
        let model = &self.cfg.model;
        let mission = &self.cfg.mission;
        let x = &self.x;
        let active = self.attack_active;
        match &self.cfg.scenario {
            AttackScenario::WorstCaseTakeover if active => takeover_input(model, &self.directions, x),
            AttackScenario::MaxHeaters { .. } if active => model.input_bounds.upper.clone(),
            AttackScenario::KillController { .. } if active => self
                .mission_hold
                .clone()
                .unwrap_or_else(|| mission.main_controller(model, x, &self.w).u),
            AttackScenario::SensorCorruption { corruption, .. } if active => {
                let view: Vec<f64> = match corruption {
                    Corruption::Additive { offset } => x.iter().zip(offset).map(|(a, b)| a + b).collect(),
                    Corruption::Replace { values } => values.clone(),
                    Corruption::Noise { std } => x
                        .iter()
                        .zip(std)
                        .map(|(&a, &s)| {
                            if s > 0.0 {
                                a + Normal::new(0.0, s).expect("std checked").sample(&mut self.rng)
                            } else {
                                a
                            }
                        })
                        .collect(),
                };
                mission.main_controller(model, &view, &self.w).u
            }
            _ => {
                let u = mission.main_controller(model, x, &self.w).u;
                self.mission_hold = Some(u.clone());
                u
            }
        }
    }

    fn next_boundary(&self, t: f64) -> f64 {
        let p = self.cfg.control_period;
        let k = (t / p + 1e-9).floor() + 1.0;
        let mut next = (k * p).min(self.cfg.horizon);
        match self.phase {
            Phase::Sei => {
                if let Some((end, _)) = self.round {
                    next = next.min(end);
                }
            }
            Phase::Normal => {
                if let Some(f) = self.rot.fire_at() {
                    next = next.min(f);
                }
                if let Some(a) = self.cfg.scenario.activation() {
                    if !self.attack_active {
                        next = next.min(self.normal_start + a);
                    }
                }
            }
            Phase::Rebooting => next = next.min(self.reboot_end),
        }
        next
    }

    fn push(&mut self, t: f64, events: Vec<SimEvent>) {
        let mut events = events;
        if !self.cfg.model.is_admissible(&self.x) {
            events.push(SimEvent::SafetyViolation);
            self.summary.violations += 1;
        }
        self.records.push(TraceRecord {
            t,
            phase: self.phase,
            state: self.x.clone(),
            input: self.u.clone(),
            lyapunov: self.cfg.sc.lyapunov_value(&self.x),
            events,
        });
    }

    fn advance(&mut self, t: f64, next: f64) -> Result<()> {
        let span = next - t;
        let steps = ((span / self.cfg.integration_step) - 1e-9).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        for s in 1..=steps {
            let x_next = self.cfg.model.rk4_step(&self.x, &self.u, &self.w, dt);
            if x_next.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
                return Err(Error::Divergence {
                    time: t + s as f64 * dt,
                    last_finite: self.x.clone(),
                });
            }
            self.x = x_next;
            if s < steps && !self.cfg.model.is_admissible(&self.x) {
                self.push(t + s as f64 * dt, Vec::new());
            }
        }
        Ok(())
    }
}

/// Runs the full protocol from `cfg.initial_state` for `cfg.horizon` seconds.
pub fn run(cfg: &SimConfig) -> Result<SimTrace> {
    cfg.validate()?;
    let w = cfg.true_disturbance();
    let mut r = Runner {
        cfg,
        w,
        rot: RotEmulator::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        directions: attack_directions(&cfg.model),
        phase: Phase::Sei,
        x: cfg.initial_state.clone(),
        u: vec![0.0; cfg.model.input_dim()],
        round: None,
        rounds_this_cycle: 0,
        normal_start: 0.0,
        attack_active: false,
        mission_hold: None,
        reboot_end: 0.0,
        records: Vec::new(),
        summary: SimSummary::default(),
    };
    let mut t = 0.0;
    loop {
        let mut events = Vec::new();
        r.transitions(t, &mut events)?;
        r.u = match r.phase {
            Phase::Sei => cfg.sc.control(&r.x, &r.w).u,
            Phase::Normal => r.normal_input(),
            Phase::Rebooting => r.u.clone(),
        };
        r.push(t, events);
        if t >= cfg.horizon {
            break;
        }
        let next = r.next_boundary(t);
        r.advance(t, next)?;
        t = next;
    }
    r.summary.liveness_violation = r.summary.max_sei_rounds > cfg.max_sei_rounds;
    Ok(SimTrace {
        records: r.records,
        summary: r.summary,
    })
}
