//! Weighted controller availability over a restart-time map.
//!
//! A cycle with restart window `δr` gives the mission controller
//! `δr / (δr + T_s + T_r)` of the time. Cells of the map are grouped into
//! regions by how often the plant is expected to operate there, and each
//! region's availability is weighted accordingly.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::RestartMap;

pub fn cell_availability(delta_r: f64, t_s: f64, t_r: f64) -> f64 {
    delta_r / (delta_r + t_s + t_r)
}

/// One of the two map axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapVar {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub var: MapVar,
    #[serde(default = "one")]
    pub coef: f64,
    /// Use `|v|` instead of `v`.
    #[serde(default)]
    pub abs: bool,
}

fn one() -> f64 {
    1.0
}

/// `lower < Σ terms < upper`, either side optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub terms: Vec<Term>,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl Constraint {
    pub fn on(var: MapVar, lower: Option<f64>, upper: Option<f64>) -> Self {
        Self {
            terms: vec![Term { var, coef: 1.0, abs: false }],
            lower,
            upper,
        }
    }

    fn holds(&self, x: f64, y: f64) -> bool {
        let v: f64 = self
            .terms
            .iter()
            .map(|t| {
                let raw = match t.var {
                    MapVar::X => x,
                    MapVar::Y => y,
                };
                t.coef * if t.abs { raw.abs() } else { raw }
            })
            .sum();
        self.lower.is_none_or(|l| v > l) && self.upper.is_none_or(|u| v < u)
    }
}

/// A cell belongs to the region if it satisfies every constraint of at least
/// one clause.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub weight: f64,
    pub any_of: Vec<Vec<Constraint>>,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.any_of.iter().any(|clause| clause.iter().all(|c| c.holds(x, y)))
    }
}

/// Regions listed from most to least common. A cell takes the weight of the
/// first region that contains it and weight 0 if none does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionWeights {
    pub regions: Vec<Region>,
}

impl RegionWeights {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::InvalidParameter("no availability regions given".into()));
        }
        if let Some(r) = self.regions.iter().find(|r| !(r.weight > 0.0) || !r.weight.is_finite()) {
            return Err(Error::InvalidParameter(format!("region '{}' needs a positive weight", r.name)));
        }
        Ok(())
    }

    /// Region index and weight for a cell.
    pub fn classify(&self, x: f64, y: f64) -> Option<(usize, f64)> {
        self.regions
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains(x, y))
            .map(|(i, r)| (i, r.weight))
    }

    /// Uniform weight everywhere.
    pub fn uniform() -> Self {
        Self {
            regions: vec![Region {
                name: "all".into(),
                weight: 1.0,
                any_of: vec![vec![]],
            }],
        }
    }

    /// Outside-temperature bands on the `x` axis: 15–40 °C, then 0–15 or
    /// 40–60 °C, then everything colder or hotter.
    pub fn warehouse() -> Self {
        let t = |lo: Option<f64>, hi: Option<f64>| vec![Constraint::on(MapVar::X, lo, hi)];
        Self {
            regions: vec![
                Region {
                    name: "15 < T_O < 40".into(),
                    weight: 1.0,
                    any_of: vec![t(Some(15.0), Some(40.0))],
                },
                Region {
                    name: "0 < T_O < 15 or 40 < T_O < 60".into(),
                    weight: 0.5,
                    any_of: vec![t(Some(0.0), Some(15.0)), t(Some(40.0), Some(60.0))],
                },
                Region {
                    name: "T_O < 0 or 60 < T_O".into(),
                    weight: 0.3,
                    any_of: vec![t(None, Some(0.0)), t(Some(60.0), None)],
                },
            ],
        }
    }

    /// Elevation on `x` and pitch on `y`. The middle band is ordered
    /// `0.1 < −ε + |ρ| < 0.2`.
    pub fn helicopter() -> Self {
        let margin = |lo: Option<f64>, hi: Option<f64>| Constraint {
            terms: vec![
                Term {
                    var: MapVar::X,
                    coef: -1.0,
                    abs: false,
                },
                Term {
                    var: MapVar::Y,
                    coef: 1.0,
                    abs: true,
                },
            ],
            lower: lo,
            upper: hi,
        };
        let pitch = |lo: Option<f64>, hi: Option<f64>| Constraint {
            terms: vec![Term {
                var: MapVar::Y,
                coef: 1.0,
                abs: true,
            }],
            lower: lo,
            upper: hi,
        };
        let elev = |lo: Option<f64>, hi: Option<f64>| Constraint::on(MapVar::X, lo, hi);
        Self {
            regions: vec![
                Region {
                    name: "common".into(),
                    weight: 1.0,
                    any_of: vec![vec![margin(None, Some(0.1)), elev(None, Some(0.2)), pitch(None, Some(PI / 8.0))]],
                },
                Region {
                    name: "less common".into(),
                    weight: 0.5,
                    any_of: vec![vec![
                        margin(Some(0.1), Some(0.2)),
                        elev(Some(0.2), Some(0.3)),
                        pitch(Some(PI / 8.0), Some(PI / 6.0)),
                    ]],
                },
                Region {
                    name: "rare".into(),
                    weight: 0.3,
                    any_of: vec![vec![margin(None, Some(0.2)), elev(Some(0.3), None), pitch(Some(PI / 6.0), None)]],
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub name: String,
    pub weight: f64,
    pub safe_cells: usize,
    /// Plain mean over the region's safe cells, absent when it has none.
    pub mean_availability: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub weighted_availability: f64,
    pub t_s: f64,
    pub t_r: f64,
    pub safe_cells: usize,
    /// Safe cells outside every region.
    pub unweighted_cells: usize,
    pub min_cell_availability: f64,
    pub max_cell_availability: f64,
    pub regions: Vec<RegionReport>,
}

pub fn weighted_availability(
    map: &RestartMap,
    weights: &RegionWeights,
    t_s: f64,
    t_r: f64,
) -> Result<AvailabilityReport> {
    weights.validate()?;
    if !(t_s > 0.0) || !(t_r > 0.0) {
        return Err(Error::InvalidParameter(format!("T_s and T_r must be positive, got {t_s} and {t_r}")));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut safe = 0;
    let mut unweighted = 0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut per_region = vec![(0usize, 0.0f64); weights.regions.len()];
    for cell in &map.cells {
        let Some(delta) = cell.class.delta_safe() else {
            continue;
        };
        safe += 1;
        let a = cell_availability(delta, t_s, t_r);
        match weights.classify(cell.x_value, cell.y_value) {
            Some((idx, w)) => {
                num += w * a;
                den += w;
                lo = lo.min(a);
                hi = hi.max(a);
                per_region[idx].0 += 1;
                per_region[idx].1 += a;
            }
            None => unweighted += 1,
        }
    }
    if safe == 0 {
        return Err(Error::NoSafeCells);
    }
    if den == 0.0 {
        return Err(Error::Config("no safe cell lies inside any availability region".into()));
    }
    Ok(AvailabilityReport {
        weighted_availability: num / den,
        t_s,
        t_r,
        safe_cells: safe,
        unweighted_cells: unweighted,
        min_cell_availability: lo,
        max_cell_availability: hi,
        regions: weights
            .regions
            .iter()
            .zip(per_region)
            .map(|(r, (n, sum))| RegionReport {
                name: r.name.clone(),
                weight: r.weight,
                safe_cells: n,
                mean_availability: (n > 0).then(|| sum / n as f64),
            })
            .collect(),
    })
}
