//! Safe restart windows.
//!
//! A restart `δ` seconds from now is safe when
//! 1. the adversary cannot leave `S` during `δ + T_r`,
//! 2. the safety controller, started from anywhere the adversary could have
//!    driven the plant, keeps it in `S` for `T_α`, and
//! 3. after `T_α` under the safety controller the plant is inside `R`.
//!
//! [`find_restart_time`] searches for the largest such `δ` with the greedy
//! increment/decrement scheme, and [`restart_time_map`] sweeps a 2-D slice of
//! the state/disturbance space.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::SafetyController;
use crate::error::{check_dim, Error, Result};
use crate::plant::PlantModel;
use crate::reach::{always_inside, box_inside, inside_recoverable, ReachBox, ReachConfig, ReachEngine, ReachMode, Tube};

/// How long the greedy search may run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// A fixed number of candidate checks; the elapsed time is taken to be
    /// exactly `T_s`. Fully reproducible.
    Iterations(usize),
    /// Search until this many wall-clock seconds have passed.
    WallClock(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Length of one secure execution interval round, s.
    pub t_s: f64,
    /// Reboot duration, s.
    pub t_r: f64,
    /// Horizon given to the safety controller to re-enter `R`, s.
    pub t_alpha: f64,
    pub delta_init: f64,
    pub inc_step: f64,
    pub budget: Budget,
    /// Reachability grid step, s.
    pub reach_step: f64,
    #[serde(default = "default_inflation")]
    pub reach_inflation: f64,
    #[serde(default = "default_pad")]
    pub reach_pad: f64,
}

fn default_inflation() -> f64 {
    1e-9
}

fn default_pad() -> f64 {
    1e-9
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_s", self.t_s),
            ("t_r", self.t_r),
            ("t_alpha", self.t_alpha),
            ("delta_init", self.delta_init),
            ("inc_step", self.inc_step),
            ("reach_step", self.reach_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.delta_init < self.inc_step {
            return Err(Error::InvalidParameter("delta_init must be at least inc_step".into()));
        }
        match self.budget {
            Budget::Iterations(0) => Err(Error::InvalidParameter("iteration budget must be positive".into())),
            Budget::WallClock(s) if !(s > 0.0) => {
                Err(Error::InvalidParameter("wall-clock budget must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn reach(&self, mode: ReachMode) -> ReachConfig {
        ReachConfig {
            step: self.reach_step,
            mode,
            inflation: self.reach_inflation,
            pad: self.reach_pad,
        }
    }
}

/// Result of checking one of the three window conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// The adversary can leave `S` before the reboot completes.
    UnsafeUnderAttack,
    /// The safety controller may leave `S` while recovering.
    UnsafeDuringRecovery,
    /// The safety controller may not reach `R` within `T_α`.
    NotRecovered,
    /// The reachable set blew up numerically.
    Diverged,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// Evaluates the restart conditions for one initial state, sharing the
/// adversarial tube between candidate windows.
pub struct ConditionChecker<'a> {
    model: &'a PlantModel,
    sc: &'a SafetyController,
    cfg: &'a PolicyConfig,
    uc: ReachEngine<'a>,
    sc_engine: ReachEngine<'a>,
    tube: Tube,
    /// Segments `[0, safe_prefix)` have been verified inside `S`.
    safe_prefix: usize,
    /// First segment found outside `S`, if any.
    first_unsafe: Option<usize>,
    diverged_at: Option<usize>,
}

impl<'a> ConditionChecker<'a> {
    pub fn new(x: &[f64], model: &'a PlantModel, sc: &'a SafetyController, cfg: &'a PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        check_dim("state", model.state_dim(), x.len())?;
        let uc = ReachEngine::new(model, None, cfg.reach(ReachMode::Uc))?;
        let sc_engine = ReachEngine::new(model, Some(sc), cfg.reach(ReachMode::Sc))?;
        let tube = uc.start(&ReachBox::point(x))?;
        Ok(Self {
            model,
            sc,
            cfg,
            uc,
            sc_engine,
            tube,
            safe_prefix: 0,
            first_unsafe: None,
            diverged_at: None,
        })
    }

    pub fn check(&mut self, delta: f64) -> Verdict {
        match self.try_check(delta) {
            Ok(v) => v,
            Err(_) => Verdict::Diverged,
        }
    }

    fn try_check(&mut self, delta: f64) -> Result<Verdict> {
        let horizon = delta + self.cfg.t_r;
        let need = self.uc.segments_for(horizon);
        if let Some(bad) = self.first_unsafe {
            if need > bad {
                return Ok(Verdict::UnsafeUnderAttack);
            }
        }
        if let Some(d) = self.diverged_at {
            if need > d {
                return Ok(Verdict::Diverged);
            }
        }
        while self.tube.steps() < need {
            if let Err(e) = self.uc.advance(&mut self.tube) {
                self.diverged_at = Some(self.tube.steps());
                return Err(e);
            }
        }
        while self.safe_prefix < need {
            if box_inside(&self.tube.segments[self.safe_prefix], &self.model.safety) {
                self.safe_prefix += 1;
            } else {
                self.first_unsafe = Some(self.safe_prefix);
                return Ok(Verdict::UnsafeUnderAttack);
            }
        }
        if need == 0 && !always_inside(&self.tube.states[..1], &self.model.safety) {
            return Ok(Verdict::UnsafeUnderAttack);
        }
        let handover = self.uc.state_at(&self.tube, horizon)?;
        self.recovery(&handover)
    }

    /// Conditions 2 and 3 from the box the adversary may hand over.
    fn recovery(&mut self, start: &ReachBox) -> Result<Verdict> {
        let mut tube = self.sc_engine.start(start)?;
        let need = self.sc_engine.segments_for(self.cfg.t_alpha);
        while tube.steps() < need {
            self.sc_engine.advance(&mut tube)?;
            let last = tube.segments.last().expect("just advanced");
            if !box_inside(last, &self.model.safety) {
                return Ok(Verdict::UnsafeDuringRecovery);
            }
        }
        let terminal = self.sc_engine.state_at(&tube, self.cfg.t_alpha)?;
        Ok(if inside_recoverable(&terminal, self.sc) {
            Verdict::Pass
        } else {
            Verdict::NotRecovered
        })
    }
}

/// Whether restarting `delta_r` seconds from now is safe from state `x`.
/// Divergence of the reachable set counts as unsafe.
pub fn check_conditions(
    x: &[f64],
    delta_r: f64,
    model: &PlantModel,
    sc: &SafetyController,
    cfg: &PolicyConfig,
) -> Result<bool> {
    Ok(ConditionChecker::new(x, model, sc, cfg)?.check(delta_r).passed())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafeWindow {
    /// Restart delay measured from the end of the search, s.
    pub delta_safe: f64,
    pub computed_at_state: Vec<f64>,
    /// Time already consumed by the search and subtracted from the raw window.
    pub elapsed_adjustment: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Safe(SafeWindow),
    /// The state violates the safety constraints.
    Inadmissible,
    /// No positive window passed the conditions.
    Unrecoverable,
}

impl Outcome {
    pub fn window(&self) -> Option<&SafeWindow> {
        match self {
            Outcome::Safe(w) => Some(w),
            _ => None,
        }
    }

    pub fn delta_safe(&self) -> Option<f64> {
        self.window().map(|w| w.delta_safe)
    }
}

/// Greedy search for the largest safe restart delay from `x`.
pub fn find_restart_time(x: &[f64], model: &PlantModel, sc: &SafetyController, cfg: &PolicyConfig) -> Result<Outcome> {
    check_dim("state", model.state_dim(), x.len())?;
    if !model.is_admissible(x) {
        return Ok(Outcome::Inadmissible);
    }
    let started = Instant::now();
    let mut checker = ConditionChecker::new(x, model, sc, cfg)?;
    let mut memo: HashMap<i64, bool> = HashMap::new();
    let key = |d: f64| (d / cfg.inc_step * 1e6).round() as i64;
    let mut candidate = cfg.delta_init;
    let mut best: Option<f64> = None;
    let mut iterations = 0usize;
    loop {
        let out_of_budget = match cfg.budget {
            Budget::Iterations(n) => iterations >= n,
            Budget::WallClock(s) => started.elapsed().as_secs_f64() >= s,
        };
        if out_of_budget || candidate <= 0.0 {
            break;
        }
        let passed = match memo.get(&key(candidate)) {
            Some(p) => *p,
            None => {
                let p = checker.check(candidate).passed();
                memo.insert(key(candidate), p);
                p
            }
        };
        iterations += 1;
        if passed {
            best = Some(best.map_or(candidate, |b: f64| b.max(candidate)));
            candidate += cfg.inc_step;
        } else {
            candidate -= cfg.inc_step;
        }
        // Once the search only bounces between the best pass and the failure
        // just above it, further iterations cannot change the answer.
        if let Some(b) = best {
            if memo.get(&key(b + cfg.inc_step)) == Some(&false) {
                break;
            }
        }
    }
    let elapsed = match cfg.budget {
        Budget::Iterations(_) => cfg.t_s,
        Budget::WallClock(_) => started.elapsed().as_secs_f64().max(cfg.t_s),
    };
    Ok(match best {
        Some(b) if b - elapsed > 0.0 => Outcome::Safe(SafeWindow {
            delta_safe: b - elapsed,
            computed_at_state: x.to_vec(),
            elapsed_adjustment: elapsed,
        }),
        _ => Outcome::Unrecoverable,
    })
}

/// What a map axis varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisTarget {
    State(usize),
    Disturbance(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub target: AxisTarget,
    pub min: f64,
    pub max: f64,
    pub cells: usize,
    #[serde(default)]
    pub label: Option<String>,
}

impl Axis {
    /// Cell-center coordinates.
    pub fn values(&self) -> Vec<f64> {
        let w = (self.max - self.min) / self.cells as f64;
        (0..self.cells).map(|i| self.min + (i as f64 + 0.5) * w).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapGrid {
    pub x: Axis,
    pub y: Axis,
    /// Values for the state components that are not swept.
    pub base_state: Vec<f64>,
    /// Pinned disturbance value; the plant's full disturbance box when absent.
    #[serde(default)]
    pub disturbance: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellClass {
    Inadmissible,
    Unrecoverable,
    Safe(f64),
}

impl CellClass {
    pub fn label(&self) -> &'static str {
        match self {
            CellClass::Inadmissible => "inadmissible",
            CellClass::Unrecoverable => "unrecoverable",
            CellClass::Safe(_) => "safe",
        }
    }

    pub fn delta_safe(&self) -> Option<f64> {
        match self {
            CellClass::Safe(d) => Some(*d),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapCell {
    pub x_index: usize,
    pub y_index: usize,
    pub x_value: f64,
    pub y_value: f64,
    pub class: CellClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestartMap {
    pub x_cells: usize,
    pub y_cells: usize,
    /// Row-major with `x` varying fastest.
    pub cells: Vec<MapCell>,
}

impl RestartMap {
    pub fn cell(&self, xi: usize, yi: usize) -> &MapCell {
        &self.cells[yi * self.x_cells + xi]
    }

    pub fn max_safe(&self) -> Option<&MapCell> {
        self.cells
            .iter()
            .filter(|c| c.class.delta_safe().is_some())
            .max_by(|a, b| a.class.delta_safe().unwrap().total_cmp(&b.class.delta_safe().unwrap()))
    }

    /// Safe cells with at least one 4-neighbour that is not safe (or that lies
    /// off the grid).
    pub fn boundary_safe_cells(&self) -> Vec<&MapCell> {
        self.cells
            .iter()
            .filter(|c| {
                c.class.delta_safe().is_some() && {
                    let (x, y) = (c.x_index as isize, c.y_index as isize);
                    [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|&(nx, ny)| {
                        nx < 0
                            || ny < 0
                            || nx >= self.x_cells as isize
                            || ny >= self.y_cells as isize
                            || self.cell(nx as usize, ny as usize).class.delta_safe().is_none()
                    })
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x_index", "y_index", "x_value", "y_value", "class", "delta_safe"])?;
        for c in &self.cells {
            w.write_record([
                c.x_index.to_string(),
                c.y_index.to_string(),
                format!("{}", c.x_value),
                format!("{}", c.y_value),
                c.class.label().to_string(),
                c.class.delta_safe().map(|d| format!("{d}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(Error::Config(format!("map row has {} fields, expected 6", rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number '{}'", &rec[i])))
            };
            let idx = |i: usize| -> Result<usize> {
                rec[i].trim().parse::<usize>().map_err(|_| Error::Config(format!("bad index '{}'", &rec[i])))
            };
            let class = match rec[4].trim() {
                "inadmissible" => CellClass::Inadmissible,
                "unrecoverable" => CellClass::Unrecoverable,
                "safe" => CellClass::Safe(num(5)?),
                other => return Err(Error::Config(format!("unknown cell class '{other}'"))),
            };
            cells.push(MapCell {
                x_index: idx(0)?,
                y_index: idx(1)?,
                x_value: num(2)?,
                y_value: num(3)?,
                class,
            });
        }
        let x_cells = cells.iter().map(|c| c.x_index + 1).max().unwrap_or(0);
        let y_cells = cells.iter().map(|c| c.y_index + 1).max().unwrap_or(0);
        if cells.len() != x_cells * y_cells {
            return Err(Error::Config("map CSV does not describe a full grid".into()));
        }
        cells.sort_by_key(|c| (c.y_index, c.x_index));
        Ok(Self { x_cells, y_cells, cells })
    }
}

/// Classifies every cell of a 2-D slice. Cells are evaluated in parallel on
/// the current rayon pool; the output order is fixed.
pub fn restart_time_map(
    model: &PlantModel,
    sc: &SafetyController,
    cfg: &PolicyConfig,
    grid: &MapGrid,
) -> Result<RestartMap> {
    cfg.validate()?;
    check_dim("map base state", model.state_dim(), grid.base_state.len())?;
    if grid.x.cells == 0 || grid.y.cells == 0 {
        return Err(Error::InvalidParameter("map grid must have at least one cell per axis".into()));
    }
    for axis in [&grid.x, &grid.y] {
        let ok = match axis.target {
            AxisTarget::State(i) => i < model.state_dim(),
            AxisTarget::Disturbance(i) => i < model.disturbance_dim(),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("axis target {:?} out of range", axis.target)));
        }
    }
    let base_w = match &grid.disturbance {
        Some(w) => {
            check_dim("map disturbance", model.disturbance_dim(), w.len())?;
            Some(w.clone())
        }
        None => None,
    };
    let xs = grid.x.values();
    let ys = grid.y.values();
    let jobs: Vec<(usize, usize)> = (0..ys.len()).flat_map(|j| (0..xs.len()).map(move |i| (i, j))).collect();
    let cells: Result<Vec<MapCell>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut x = grid.base_state.clone();
            let mut w = base_w.clone();
            for (axis, v) in [(&grid.x, xs[i]), (&grid.y, ys[j])] {
                match axis.target {
                    AxisTarget::State(k) => x[k] = v,
                    AxisTarget::Disturbance(k) => {
                        let mut cur = w.take().unwrap_or_else(|| model.disturbance().center());
                        cur[k] = v;
                        w = Some(cur);
                    }
                }
            }
            let cell_model = match &w {
                Some(w) => model.with_disturbance_value(w)?,
                None => model.clone(),
            };
            let class = match find_restart_time(&x, &cell_model, sc, cfg)? {
                Outcome::Inadmissible => CellClass::Inadmissible,
                Outcome::Unrecoverable => CellClass::Unrecoverable,
                Outcome::Safe(win) => CellClass::Safe(win.delta_safe),
            };
            Ok(MapCell {
                x_index: i,
                y_index: j,
                x_value: xs[i],
                y_value: ys[j],
                class,
            })
        })
        .collect();
    Ok(RestartMap {
        x_cells: xs.len(),
        y_cells: ys.len(),
        cells: cells?,
    })
}
