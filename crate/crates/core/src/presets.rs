//! Ready-made plants, safety controllers and policy settings for the two
//! reference systems.
//!
//! The safety-controller gains and Lyapunov matrices below were designed
//! offline (maximum-volume invariant ellipsoid subject to the safety rows and
//! the actuator limits) and are validated at runtime by `verify_sc`.

use nalgebra::DMatrix;

use crate::controller::SafetyController;
use crate::error::Result;
use crate::plant::{Bounds, HelicopterParams, PlantModel, WarehouseParams};
use crate::policy::{Budget, PolicyConfig};

/// Temperature the warehouse safety controller regulates to, °C.
pub const WAREHOUSE_SETPOINT: f64 = 25.0;
pub const WAREHOUSE_ROOM_MIN: f64 = 20.0;
pub const WAREHOUSE_ROOM_MAX: f64 = 30.0;

const WAREHOUSE_K: [f64; 4] = [-57.5, 0.0, 0.0, -80.0];
const WAREHOUSE_P: [f64; 4] = [
    0.25997152558690223,
    -0.01903981157419191,
    -0.01903981157419191,
    0.04159544406990896,
];

const HELICOPTER_K: [[f64; 6]; 2] = [
    [
        -2.9467719526258223,
        -4.6932916066239,
        0.07071067811865453,
        -24.286918094421985,
        -25.025431349259875,
        4.419072160213251,
    ],
    [
        -2.946771952625826,
        4.6932916066239025,
        -0.0707106781186546,
        -24.286918094422013,
        25.025431349259893,
        -4.419072160213259,
    ],
];

const HELICOPTER_P: [[f64; 6]; 6] = [
    [
        58.34674320718183,
        -1.6120004175741802e-09,
        8.995494822991732e-12,
        130.14821033706542,
        -9.8279780160963e-09,
        7.98604725662723e-10,
    ],
    [
        -1.6120004175741802e-09,
        60.78089955567939,
        -1.0905363901304088,
        -1.2554450555869397e-08,
        166.48419172176892,
        -71.50488339209205,
    ],
    [
        8.995494822991732e-12,
        -1.0905363901304088,
        0.03284960612909518,
        1.6467765187572295e-10,
        -3.113385177188599,
        1.8060403301834038,
    ],
    [
        130.14821033706542,
        -1.2554450555869397e-08,
        1.6467765187572295e-10,
        1072.662246144232,
        -2.41877445493193e-08,
        1.1809707555176408e-08,
    ],
    [
        -9.8279780160963e-09,
        166.48419172176892,
        -3.113385177188599,
        -2.41877445493193e-08,
        1073.9788180892403,
        -205.83411800403618,
    ],
    [
        7.98604725662723e-10,
        -71.50488339209205,
        1.8060403301834038,
        1.1809707555176408e-08,
        -205.83411800403618,
        118.50854098083401,
    ],
];

pub fn warehouse_model(outside: Bounds) -> Result<PlantModel> {
    WarehouseParams::default().model(outside, WAREHOUSE_ROOM_MIN, WAREHOUSE_ROOM_MAX)
}

/// Regulates both temperatures to the setpoint. The room channel carries a
/// feedforward that cancels the outside-temperature load exactly, which makes
/// the setpoint an equilibrium for every outside temperature the actuator
/// can compensate.
pub fn warehouse_controller(params: &WarehouseParams) -> Result<SafetyController> {
    let g = params.room_outside_conductance();
    SafetyController::new(
        DMatrix::from_row_slice(2, 2, &WAREHOUSE_K),
        DMatrix::from_row_slice(2, 2, &WAREHOUSE_P),
        params.input_bounds(),
    )?
    .with_operating_point(
        vec![WAREHOUSE_SETPOINT, WAREHOUSE_SETPOINT],
        vec![0.0, g * WAREHOUSE_SETPOINT],
    )?
    .with_feedforward(DMatrix::from_row_slice(2, 1, &[0.0, -g]))
}

pub fn warehouse_policy() -> PolicyConfig {
    PolicyConfig {
        t_s: 1.0,
        t_r: 10.0,
        t_alpha: 3600.0,
        delta_init: 500.0,
        inc_step: 500.0,
        budget: Budget::Iterations(40),
        reach_step: 30.0,
        reach_inflation: 1e-9,
        reach_pad: 1e-9,
    }
}

pub fn helicopter_model() -> Result<PlantModel> {
    HelicopterParams::default().model()
}

pub fn helicopter_controller(params: &HelicopterParams) -> Result<SafetyController> {
    let k = DMatrix::from_fn(2, 6, |i, j| HELICOPTER_K[i][j]);
    let p = DMatrix::from_fn(6, 6, |i, j| HELICOPTER_P[i][j]);
    SafetyController::new(k, p, Bounds::symmetric(&[params.voltage_limit, params.voltage_limit])?)
}

pub fn helicopter_policy() -> PolicyConfig {
    PolicyConfig {
        t_s: 0.2,
        t_r: 0.39,
        t_alpha: 10.0,
        delta_init: 0.05,
        inc_step: 0.05,
        budget: Budget::Iterations(60),
        reach_step: 0.01,
        reach_inflation: 1e-9,
        reach_pad: 1e-9,
    }
}
