//! Scenario files.
//!
//! One JSON document describes the plant, the safety controller, the policy
//! settings and the inputs of every analysis, so that maps, simulations,
//! availability figures and risk tables all come from the same source.
//! Unknown keys are rejected everywhere.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::availability::RegionWeights;
use crate::controller::SafetyController;
use crate::error::{check_dim, Error, Result};
use crate::plant::{Bounds, HelicopterParams, PlantModel, SafetyPolytope, WarehouseParams};
use crate::policy::{MapGrid, PolicyConfig};
use crate::presets;
use crate::risk::{ExpectationMode, PdfSpec, DEFAULT_GRID_STEP};
use crate::sim::{AttackScenario, MissionController, SimConfig};

pub type Matrix = Vec<Vec<f64>>;

fn to_matrix(rows: &Matrix, context: &'static str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{context} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySpec {
    #[serde(rename = "H")]
    pub h_matrix: Matrix,
    #[serde(rename = "h")]
    pub h_vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    Warehouse {
        #[serde(default)]
        params: Option<WarehouseParams>,
        /// Outside-temperature range, °C.
        outside: Bounds,
        #[serde(default = "room_min")]
        room_min: f64,
        #[serde(default = "room_max")]
        room_max: f64,
    },
    Helicopter {
        #[serde(default)]
        params: Option<HelicopterParams>,
    },
    Linear {
        #[serde(default)]
        name: Option<String>,
        a: Matrix,
        b: Matrix,
        #[serde(default)]
        e: Option<Matrix>,
        #[serde(default)]
        disturbance_bounds: Option<Bounds>,
        input_bounds: Bounds,
        safety: SafetySpec,
    },
}

fn room_min() -> f64 {
    presets::WAREHOUSE_ROOM_MIN
}

fn room_max() -> f64 {
    presets::WAREHOUSE_ROOM_MAX
}

impl PlantSpec {
    pub fn build(&self) -> Result<PlantModel> {
        match self {
            PlantSpec::Warehouse {
                params,
                outside,
                room_min,
                room_max,
            } => params
                .clone()
                .unwrap_or_default()
                .model(outside.clone(), *room_min, *room_max),
            PlantSpec::Helicopter { params } => params.clone().unwrap_or_default().model(),
            PlantSpec::Linear {
                name,
                a,
                b,
                e,
                disturbance_bounds,
                input_bounds,
                safety,
            } => {
                let h = to_matrix(&safety.h_matrix, "safety H")?;
                check_dim("safety h", h.nrows(), safety.h_vector.len())?;
                let poly = SafetyPolytope::new(h, DVector::from_column_slice(&safety.h_vector))?;
                let model = PlantModel::new(
                    name.clone().unwrap_or_else(|| "linear".into()),
                    to_matrix(a, "A")?,
                    to_matrix(b, "B")?,
                    input_bounds.clone(),
                    poly,
                )?;
                match (e, disturbance_bounds) {
                    (Some(e), Some(bounds)) => model.with_disturbance(to_matrix(e, "E")?, bounds.clone()),
                    (None, None) => Ok(model),
                    _ => Err(Error::Config("'e' and 'disturbance_bounds' must be given together".into())),
                }
            }
        }
    }

    pub fn default_regions(&self) -> Option<RegionWeights> {
        match self {
            PlantSpec::Warehouse { .. } => Some(RegionWeights::warehouse()),
            PlantSpec::Helicopter { .. } => Some(RegionWeights::helicopter()),
            PlantSpec::Linear { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub k: Matrix,
    pub p: Matrix,
    #[serde(default)]
    pub x_ref: Option<Vec<f64>>,
    #[serde(default)]
    pub u_ref: Option<Vec<f64>>,
    /// Disturbance feedforward gain.
    #[serde(default)]
    pub g: Option<Matrix>,
}

impl ControllerSpec {
    pub fn build(&self, model: &PlantModel) -> Result<SafetyController> {
        let sc = SafetyController::new(to_matrix(&self.k, "K")?, to_matrix(&self.p, "P")?, model.input_bounds.clone())?;
        check_dim("controller states", model.state_dim(), sc.state_dim())?;
        check_dim("controller inputs", model.input_dim(), sc.input_dim())?;
        let sc = match (&self.x_ref, &self.u_ref) {
            (None, None) => sc,
            (x, u) => sc.with_operating_point(
                x.clone().unwrap_or_else(|| vec![0.0; model.state_dim()]),
                u.clone().unwrap_or_else(|| vec![0.0; model.input_dim()]),
            )?,
        };
        match &self.g {
            Some(g) => sc.with_feedforward(to_matrix(g, "G")?),
            None => Ok(sc),
        }
    }
}

/// Mission controller; gains default to the safety controller's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionSpec {
    pub setpoint: Vec<f64>,
    #[serde(default)]
    pub k: Option<Matrix>,
    #[serde(default)]
    pub input_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub feedforward: Option<Matrix>,
    #[serde(default)]
    pub tracked: Option<Vec<usize>>,
}

impl MissionSpec {
    pub fn build(&self, model: &PlantModel, sc: &SafetyController) -> Result<MissionController> {
        let offset = self
            .input_offset
            .clone()
            .unwrap_or_else(|| vec![0.0; model.input_dim()]);
        let base = match &self.k {
            Some(k) => MissionController::new(to_matrix(k, "mission K")?, self.setpoint.clone(), offset)?,
            None => MissionController::from_safety_controller(sc, self.setpoint.clone(), offset)?,
        };
        let mission = match &self.feedforward {
            Some(g) => base.with_feedforward(to_matrix(g, "mission feedforward")?)?,
            None => base,
        };
        match &self.tracked {
            Some(t) => mission.with_tracked(t.clone()),
            None => Ok(mission),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub control_period: f64,
    pub integration_step: f64,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub disturbance: Option<Vec<f64>>,
    #[serde(default)]
    pub attack: AttackScenario,
    pub mission: MissionSpec,
    #[serde(default = "max_sei_rounds")]
    pub max_sei_rounds: usize,
}

fn max_sei_rounds() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSpec {
    pub pdf: PdfSpec,
    #[serde(default = "risk_step")]
    pub grid_step: f64,
    pub horizon: f64,
    pub delta_r: Vec<f64>,
    #[serde(default)]
    pub mode: ExpectationMode,
}

fn risk_step() -> f64 {
    DEFAULT_GRID_STEP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    #[serde(default = "lambda_conf")]
    pub lambda_conf: f64,
}

fn lambda_conf() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub plant: PlantSpec,
    /// Falls back to the shipped controller for the warehouse and helicopter
    /// plants.
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub simulation: Option<SimulationSpec>,
    #[serde(default)]
    pub grid: Option<MapGrid>,
    #[serde(default)]
    pub risk: Option<RiskSpec>,
    #[serde(default)]
    pub availability: Option<RegionWeights>,
    #[serde(default)]
    pub anomaly: Option<AnomalySpec>,
    #[serde(default)]
    pub seed: u64,
}

/// Plant and controller built from a scenario.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: PlantModel,
    pub sc: SafetyController,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Schema checks that need more than the JSON structure.
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        let r = self.resolve()?;
        if let Some(grid) = &self.grid {
            check_dim("grid base state", r.model.state_dim(), grid.base_state.len())?;
        }
        if let Some(sim) = &self.simulation {
            self.sim_config(&r, sim, self.seed, true)?.validate()?;
        }
        if let Some(regions) = &self.availability {
            regions.validate()?;
        }
        if let Some(risk) = &self.risk {
            if risk.delta_r.is_empty() {
                return Err(Error::Config("risk block needs at least one delta_r".into()));
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.plant.build()?;
        let sc = match (&self.controller, &self.plant) {
            (Some(spec), _) => spec.build(&model)?,
            (None, PlantSpec::Warehouse { params, .. }) => {
                presets::warehouse_controller(&params.clone().unwrap_or_default())?
            }
            (None, PlantSpec::Helicopter { params }) => {
                presets::helicopter_controller(&params.clone().unwrap_or_default())?
            }
            (None, PlantSpec::Linear { .. }) => {
                return Err(Error::Config("a linear plant needs an explicit controller".into()));
            }
        };
        Ok(Resolved { model, sc })
    }

    pub fn sim_config(&self, r: &Resolved, sim: &SimulationSpec, seed: u64, deterministic: bool) -> Result<SimConfig> {
        Ok(SimConfig {
            model: r.model.clone(),
            sc: r.sc.clone(),
            policy: self.policy.clone(),
            mission: sim.mission.build(&r.model, &r.sc)?,
            scenario: sim.attack.clone(),
            control_period: sim.control_period,
            integration_step: sim.integration_step,
            horizon: sim.horizon,
            initial_state: sim.initial_state.clone(),
            disturbance: sim.disturbance.clone(),
            seed,
            deterministic,
            max_sei_rounds: sim.max_sei_rounds,
        })
    }

    pub fn regions(&self) -> Option<RegionWeights> {
        self.availability.clone().or_else(|| self.plant.default_regions())
    }
}
