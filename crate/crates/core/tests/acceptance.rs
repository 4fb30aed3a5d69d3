//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any of them failed.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use restart_core::anomaly::T2Profile;
use restart_core::availability::{cell_availability, weighted_availability, RegionWeights};
use restart_core::controller::{verify_sc, SafetyController, VerifyConfig};
use restart_core::plant::{Bounds, HelicopterParams, PlantModel, WarehouseParams};
use restart_core::policy::{find_restart_time, restart_time_map, CellClass, Outcome, PolicyConfig, RestartMap};
use restart_core::presets;
use restart_core::reach::{ReachBox, ReachConfig, ReachEngine, ReachMode};
use restart_core::risk::{cdf_of, restarted_cdf, truncated_normal_cdf, PdfSpec, RiskProfile, TabulatedPdf};
use restart_core::rot::{RotEmulator, RotPhase};
use restart_core::scenario::ScenarioFile;
use restart_core::sim::run;

type Verdict = Result<String, String>;

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("reachability soundness", reach_soundness),
        ("restart windows sound end to end", window_soundness),
        ("warehouse max-heaters attack stays below 30 °C", warehouse_attack),
        ("warehouse restart-time magnitude", warehouse_magnitude),
        ("availability", availability),
        ("helicopter map maximum is interior", helicopter_interior_maximum),
        ("risk recurrence identities", risk_identities),
        ("risk figure configurations", risk_configurations),
        ("Lyapunov decrease and verify_sc gate", lyapunov_suite),
        ("RoT protocol", rot_protocol),
        ("T² detector", t2_detector),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS criterion {n:>2}: {name} ({detail}; {secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2}: {name} ({detail}; {secs:.1} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario(name: &str) -> ScenarioFile {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    ScenarioFile::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn scenario_map(name: &str) -> (ScenarioFile, RestartMap) {
    let s = scenario(name);
    let r = s.resolve().expect("resolve scenario");
    let grid = s.grid.as_ref().expect("scenario grid");
    let m = restart_time_map(&r.model, &r.sc, &s.policy, grid).expect("map");
    (s, m)
}

/// Piecewise-constant signal inside a box: a fixed corner, random corners, or
/// uniform values, each held for a random number of steps.
#[derive(Clone, Copy)]
enum Kind {
    Corner(u32),
    BangBang,
    Uniform,
}

struct Signal {
    lower: Vec<f64>,
    upper: Vec<f64>,
    kind: Kind,
    current: Vec<f64>,
    left: usize,
    max_hold: usize,
}

impl Signal {
    fn new(b: &Bounds, kind: Kind, max_hold: usize) -> Self {
        Self {
            lower: b.lower.clone(),
            upper: b.upper.clone(),
            kind,
            current: Vec::new(),
            left: 0,
            max_hold,
        }
    }

    fn random_kind<R: Rng>(rng: &mut R, dim: usize) -> Kind {
        match rng.random_range(0..3) {
            0 => Kind::Corner(rng.random_range(0..(1u32 << dim))),
            1 => Kind::BangBang,
            _ => Kind::Uniform,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> &[f64] {
        if self.left == 0 {
            let (lo, hi) = (&self.lower, &self.upper);
            self.current = match self.kind {
                Kind::Corner(c) => (0..lo.len()).map(|i| if c >> i & 1 == 1 { hi[i] } else { lo[i] }).collect(),
                Kind::BangBang => (0..lo.len()).map(|i| if rng.random_bool(0.5) { hi[i] } else { lo[i] }).collect(),
                Kind::Uniform => (0..lo.len()).map(|i| rng.random_range(lo[i]..=hi[i])).collect(),
            };
            self.left = rng.random_range(1..=self.max_hold);
        }
        self.left -= 1;
        &self.current
    }
}

fn uniform_in<R: Rng>(rng: &mut R, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..=*h)).collect()
}

// ---------------------------------------------------------------- 1

struct SoundnessRun {
    trajectories: usize,
    samples: usize,
    violations: usize,
}

/// Random trajectories from random points checked against the UC tube of
/// their own start point, at every grid time and at random off-grid times.
fn reach_trajectories(
    model: &PlantModel,
    start: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
    step: f64,
    dt: f64,
    horizon: f64,
    max_hold: usize,
    count: usize,
    seed: u64,
) -> SoundnessRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engine = ReachEngine::new(model, None, ReachConfig::new(step, ReachMode::Uc)).unwrap();
    let sub = (step / dt).round() as usize;
    let grid_steps = (horizon / step).round() as usize;
    let dist = model.disturbance();
    let mut out = SoundnessRun {
        trajectories: count,
        samples: 0,
        violations: 0,
    };
    for _ in 0..count {
        let x0 = start(&mut rng);
        let mut tube = engine.start(&ReachBox::point(&x0)).unwrap();
        engine.extend_to(&mut tube, horizon).unwrap();
        let mut u_sig = Signal::new(&model.input_bounds, Signal::random_kind(&mut rng, model.input_dim()), max_hold);
        let mut w_sig = Signal::new(&dist, Signal::random_kind(&mut rng, dist.dim()), max_hold);
        let off_grid: Vec<usize> = (0..5).map(|_| rng.random_range(1..grid_steps * sub)).collect();
        let mut x = x0;
        for k in 1..=grid_steps * sub {
            let u = u_sig.next(&mut rng).to_vec();
            let w = w_sig.next(&mut rng).to_vec();
            x = model.rk4_step(&x, &u, &w, dt);
            let t = k as f64 * dt;
            let inside = if k % sub == 0 {
                tube.states[k / sub].contains_point(&x)
            } else if off_grid.contains(&k) {
                let exact = engine.state_at(&tube, t).unwrap().contains_point(&x);
                let swept = engine.union_upto(&tube, t).iter().any(|b| b.contains_point(&x));
                exact && swept
            } else {
                continue;
            };
            out.samples += 1;
            if !inside {
                out.violations += 1;
            }
        }
    }
    out
}

fn reach_soundness() -> Verdict {
    let started = Instant::now();
    let warehouse = presets::warehouse_model(Bounds::new(vec![10.0], vec![40.0]).unwrap()).unwrap();
    let w = reach_trajectories(
        &warehouse,
        |rng| uniform_in(rng, &[15.0, 18.0], &[35.0, 32.0]),
        30.0,
        1.0,
        3600.0,
        300,
        1000,
        11,
    );
    let heli = presets::helicopter_model().unwrap();
    let sc = presets::helicopter_controller(&HelicopterParams::default()).unwrap();
    let h = reach_trajectories(&heli, |rng| sc.sample_ellipsoid(rng, 1.2), 0.01, 0.001, 1.5, 40, 1000, 12);
    let elapsed = started.elapsed();
    let detail = format!(
        "warehouse {}/{} samples outside over {} runs, helicopter {}/{} over {} runs",
        w.violations, w.samples, w.trajectories, h.violations, h.samples, h.trajectories
    );
    ensure(w.violations == 0 && h.violations == 0, || detail.clone())?;
    ensure(elapsed <= Duration::from_secs(120), || format!("{detail}; too slow"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

struct WindowRun {
    states: usize,
    signals: usize,
    exits: usize,
    not_recovered: usize,
    first_failure: Option<String>,
}

/// Advances `x` over `duration` in steps of `dt` plus a final partial step,
/// calling `input` before each step. Returns false as soon as `x` leaves S.
fn drive(
    model: &PlantModel,
    x: &mut Vec<f64>,
    duration: f64,
    dt: f64,
    mut input: impl FnMut(&[f64]) -> (Vec<f64>, Vec<f64>),
) -> bool {
    let full = (duration / dt).floor() as usize;
    let rest = duration - full as f64 * dt;
    let steps = (0..full).map(|_| dt).chain((rest > 1e-12).then_some(rest));
    for h in steps {
        let (u, w) = input(x);
        *x = model.rk4_step(x, &u, &w, h);
        if !model.is_admissible(x) {
            return false;
        }
    }
    true
}

fn window_run(
    label: &str,
    mut pick: impl FnMut(&mut ChaCha8Rng) -> (PlantModel, Vec<f64>),
    sc: &SafetyController,
    cfg: &PolicyConfig,
    dt: f64,
    max_hold: usize,
    seed: u64,
) -> Result<WindowRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = WindowRun {
        states: 0,
        signals: 0,
        exits: 0,
        not_recovered: 0,
        first_failure: None,
    };
    let mut attempts = 0;
    while run.states < 100 {
        attempts += 1;
        if attempts > 20_000 {
            return Err(format!("{label}: only {} states with a safe window", run.states));
        }
        let (model, x0) = pick(&mut rng);
        let window = match find_restart_time(&x0, &model, sc, cfg).map_err(|e| e.to_string())? {
            Outcome::Safe(w) => w,
            _ => continue,
        };
        run.states += 1;
        // The search was run from x0, so the adversary may act for the whole
        // raw window, not just the part left after the search.
        let attack = window.delta_safe + window.elapsed_adjustment + cfg.t_r;
        let dist = model.disturbance();
        for s in 0..200 {
            let kind = if s < (1 << model.input_dim()) {
                Kind::Corner(s as u32)
            } else {
                Signal::random_kind(&mut rng, model.input_dim())
            };
            let mut u_sig = Signal::new(&model.input_bounds, kind, max_hold);
            let mut w_sig = Signal::new(&dist, Signal::random_kind(&mut rng, dist.dim()), max_hold);
            let mut x = x0.clone();
            run.signals += 1;
            let rng_ref = &mut rng;
            let mut ok = drive(&model, &mut x, attack, dt, |_| {
                (u_sig.next(rng_ref).to_vec(), w_sig.next(rng_ref).to_vec())
            });
            if ok {
                ok = drive(&model, &mut x, cfg.t_alpha, dt, |x| {
                    let w = w_sig.next(rng_ref).to_vec();
                    (sc.control(x, &w).u, w)
                });
            }
            let recovered = ok && sc.in_recoverable(&x);
            if !ok {
                run.exits += 1;
            } else if !recovered {
                run.not_recovered += 1;
            }
            if (!ok || !recovered) && run.first_failure.is_none() {
                run.first_failure = Some(format!(
                    "{label}: x0 {x0:?}, delta_safe {}, signal {s}, final {x:?}",
                    window.delta_safe
                ));
            }
        }
    }
    Ok(run)
}

fn window_soundness() -> Verdict {
    let started = Instant::now();
    let params = WarehouseParams::default();
    let wsc = presets::warehouse_controller(&params).unwrap();
    let w = window_run(
        "warehouse",
        |rng| {
            let c = rng.random_range(-5.0..45.0);
            let model = presets::warehouse_model(Bounds::new(vec![c - 2.0], vec![c + 2.0]).unwrap()).unwrap();
            (model, uniform_in(rng, &[15.0, 20.5], &[35.0, 29.5]))
        },
        &wsc,
        &presets::warehouse_policy(),
        1.0,
        300,
        21,
    )?;
    let heli = presets::helicopter_model().unwrap();
    let hsc = presets::helicopter_controller(&HelicopterParams::default()).unwrap();
    let h = window_run(
        "helicopter",
        |rng| (heli.clone(), hsc.sample_ellipsoid(rng, 1.3)),
        &hsc,
        &presets::helicopter_policy(),
        0.001,
        40,
        22,
    )?;
    let elapsed = started.elapsed();
    let detail = format!(
        "warehouse {} states × 200 signals: {} exits, {} not in R; helicopter {} states: {} exits, {} not in R",
        w.states, w.exits, w.not_recovered, h.states, h.exits, h.not_recovered
    );
    ensure(w.exits + w.not_recovered + h.exits + h.not_recovered == 0, || {
        format!(
            "{detail}; first: {}",
            w.first_failure.clone().or(h.first_failure.clone()).unwrap_or_default()
        )
    })?;
    ensure(w.signals == 20_000 && h.signals == 20_000, || format!("{detail}; signal count"))?;
    ensure(elapsed <= Duration::from_secs(600), || format!("{detail}; too slow"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn warehouse_attack() -> Verdict {
    let s = scenario("warehouse.json");
    let r = s.resolve().map_err(|e| e.to_string())?;
    let sim = s.simulation.as_ref().ok_or("no simulation block")?;
    let cfg = s.sim_config(&r, sim, s.seed, true).map_err(|e| e.to_string())?;
    let trace = run(&cfg).map_err(|e| e.to_string())?;
    let max_room = trace.max_state(1);
    let detail = format!(
        "max T_R {max_room:.3} °C over {} h, {} restarts, {} violations",
        trace.duration() / 3600.0,
        trace.summary.reboots,
        trace.summary.violations
    );
    ensure(max_room <= 30.0 && trace.summary.violations == 0, || detail.clone())?;
    ensure(trace.summary.reboots > 0, || format!("{detail}; no restart happened"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

fn warehouse_magnitude() -> Verdict {
    let (_, m) = scenario_map("warehouse.json");
    let best = m.max_safe().ok_or("no safe cells")?;
    let d = best.class.delta_safe().unwrap_or(0.0);
    let detail = format!("max delta_safe {d} s at T_O {}, T_R {}", best.x_value, best.y_value);
    ensure((2000.0..=12000.0).contains(&d), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn availability() -> Verdict {
    let (ws, wm) = scenario_map("warehouse.json");
    let wr = weighted_availability(&wm, &ws.regions().unwrap(), ws.policy.t_s, ws.policy.t_r).map_err(|e| e.to_string())?;
    ensure(wr.weighted_availability >= 0.99, || {
        format!("warehouse weighted availability {}", wr.weighted_availability)
    })?;

    let (hs, hm) = scenario_map("helicopter.json");
    let (ts, tr) = (hs.policy.t_s, hs.policy.t_r);
    let regions = RegionWeights::helicopter();
    let hr = weighted_availability(&hm, &regions, ts, tr).map_err(|e| e.to_string())?;
    ensure(
        hr.weighted_availability >= hr.min_cell_availability - 1e-12
            && hr.weighted_availability <= hr.max_cell_availability + 1e-12,
        || format!("helicopter availability {} outside cell range", hr.weighted_availability),
    )?;
    // The per-cell formula, recomputed by hand.
    for c in &hm.cells {
        if let Some(d) = c.class.delta_safe() {
            let a = cell_availability(d, ts, tr);
            ensure(a == d / (d + ts + tr), || format!("cell formula at {d}"))?;
        }
    }
    // Lengthening any one safe cell's window never lowers the average.
    for i in 0..hm.cells.len() {
        if let CellClass::Safe(d) = hm.cells[i].class {
            let mut bumped = hm.clone();
            bumped.cells[i].class = CellClass::Safe(d * 1.5 + 0.1);
            let b = weighted_availability(&bumped, &regions, ts, tr).map_err(|e| e.to_string())?;
            ensure(b.weighted_availability >= hr.weighted_availability - 1e-15, || {
                format!("availability fell when cell {i} grew")
            })?;
        }
    }
    Ok(format!(
        "warehouse {:.4} over {} safe cells; helicopter {:.4} (reported only) over {} safe cells",
        wr.weighted_availability, wr.safe_cells, hr.weighted_availability, hr.safe_cells
    ))
}

// ---------------------------------------------------------------- 6

fn helicopter_interior_maximum() -> Verdict {
    let (s, m) = scenario_map("helicopter.json");
    let sc = s.resolve().map_err(|e| e.to_string())?.sc;
    let best = m.max_safe().ok_or("no safe cells")?;
    let top = best.class.delta_safe().unwrap();
    let boundary = m.boundary_safe_cells();
    let mut x = s.grid.as_ref().unwrap().base_state.clone();
    x[0] = best.x_value;
    x[1] = best.y_value;
    let detail = format!(
        "max {top:.3} s at (eps {}, rho {}), {} boundary safe cells, largest {:.3} s",
        best.x_value,
        best.y_value,
        boundary.len(),
        boundary.iter().filter_map(|c| c.class.delta_safe()).fold(0.0, f64::max)
    );
    ensure(sc.in_recoverable(&x), || format!("{detail}; maximum outside R"))?;
    ensure(!boundary.iter().any(|c| std::ptr::eq(*c, best)), || {
        format!("{detail}; maximum on the safe-region boundary")
    })?;
    ensure(boundary.iter().all(|c| c.class.delta_safe().unwrap() < top), || {
        format!("{detail}; a boundary cell ties the maximum")
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn normal_pdf(mean: f64, std: f64, horizon: f64) -> TabulatedPdf {
    PdfSpec::Normal { mean, std }.tabulate(0.1, horizon).unwrap()
}

fn risk_identities() -> Verdict {
    let dr = 20.0;
    let f = normal_pdf(30.0, 40.0, 1500.0);
    let p = cdf_of(&f);
    let ph = restarted_cdf(&f, dr).unwrap();
    let m = 200;
    let p_dr = p.at(m);
    let mut worst: f64 = 0.0;
    for k in 1..=50 {
        let expected = 1.0 - (1.0 - p_dr).powi(k as i32);
        worst = worst.max((ph.at(k * m) - expected).abs());
    }
    ensure(worst <= 1e-10, || format!("cycle-boundary identity off by {worst:e}"))?;

    // Renewal process: each cycle draws a fresh attack time from the
    // truncated normal and only succeeds if it lands inside the cycle.
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let normal = Normal::new(30.0, 40.0).unwrap();
    let n = 100_000;
    let mut hits: Vec<f64> = (0..n)
        .map(|_| {
            let mut start = 0.0;
            loop {
                let t = loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v >= 0.0 {
                        break v;
                    }
                };
                if t < dr {
                    return start + t;
                }
                start += dr;
            }
        })
        .collect();
    hits.sort_by(f64::total_cmp);
    let mut mc_worst: f64 = 0.0;
    for &t in &[5.0, 10.0, 19.9, 20.0, 35.0, 50.0, 80.0, 120.0, 200.0, 400.0, 800.0] {
        let empirical = hits.partition_point(|&h| h <= t) as f64 / n as f64;
        mc_worst = mc_worst.max((empirical - ph.value_at(t)).abs());
    }
    ensure(mc_worst <= 0.01, || format!("Monte-Carlo disagreement {mc_worst}"))?;

    // Anything F does after δr is irrelevant.
    let mut tail = f.values().to_vec();
    for (i, v) in tail.iter_mut().enumerate().skip(m + 1) {
        *v *= 0.5 + 0.4 * ((i as f64) * 0.37).sin();
    }
    let perturbed = TabulatedPdf::new(0.1, tail).unwrap();
    let ph2 = restarted_cdf(&perturbed, dr).unwrap();
    ensure(ph.values() == ph2.values(), || "tail perturbation changed P̂".into())?;

    // Sanity against the closed form of the un-restarted CDF.
    let cdf_err = (0..=1000)
        .map(|i| (p.at(i) - truncated_normal_cdf(30.0, 40.0, i as f64 * 0.1)).abs())
        .fold(0.0, f64::max);
    ensure(cdf_err <= 1e-4, || format!("trapezoid CDF off by {cdf_err}"))?;
    Ok(format!(
        "identity error {worst:.1e} for k ≤ 50, Monte-Carlo error {mc_worst:.4} at 1e5 samples, tail-independent"
    ))
}

// ---------------------------------------------------------------- 8

fn risk_configurations() -> Verdict {
    let dr = 20.0;
    let early = RiskProfile::build(&normal_pdf(30.0, 40.0, 1500.0), dr).map_err(|e| e.to_string())?;
    let late = RiskProfile::build(&normal_pdf(80.0, 40.0, 1500.0), dr).map_err(|e| e.to_string())?;
    let (a, b) = (early.p_hat.values(), late.p_hat.values());
    ensure(a.len() == b.len(), || "table lengths differ".into())?;
    let bad = a.iter().zip(b).filter(|(e, l)| **l > **e).count();
    ensure(bad == 0, || format!("μ = 80 exceeds μ = 30 at {bad} grid points"))?;

    let mix = PdfSpec::Mixture {
        components: vec![
            restart_core::risk::MixtureComponent {
                weight: 0.5,
                mean: 30.0,
                std: 40.0,
            },
            restart_core::risk::MixtureComponent {
                weight: 0.5,
                mean: 350.0,
                std: 40.0,
            },
        ],
    }
    .tabulate(0.1, 1500.0)
    .map_err(|e| e.to_string())?;
    let prof = RiskProfile::build(&mix, dr).map_err(|e| e.to_string())?;
    let above: Vec<usize> = (0..prof.p.len()).filter(|&i| prof.p_hat.at(i) > prof.p.at(i) + 1e-9).collect();
    ensure(!above.is_empty(), || "P̂ never exceeds P for the two-lobe mixture".into())?;
    // Longest contiguous stretch.
    let (mut best, mut run_start, mut prev) = ((0, 0), above[0], above[0]);
    for &i in &above[1..] {
        if i != prev + 1 {
            run_start = i;
        }
        prev = i;
        if i - run_start > best.1 - best.0 {
            best = (run_start, i);
        }
    }
    if best == (0, 0) {
        best = (above[0], above[0]);
    }
    Ok(format!(
        "μ = 80 never above μ = 30; mixture has P̂ > P on t ∈ [{:.1}, {:.1}]",
        best.0 as f64 * 0.1,
        best.1 as f64 * 0.1
    ))
}

// ---------------------------------------------------------------- 9

/// One-step discrete Lyapunov differences on unsaturated samples inside R.
fn strict_decrease(model: &PlantModel, sc: &SafetyController, dt: f64, seed: u64) -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = model.disturbance();
    let mut tested = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut tries = 0;
    while tested < 1000 {
        tries += 1;
        if tries > 1_000_000 {
            return Err(format!("only {tested} unsaturated samples found"));
        }
        let x = sc.sample_ellipsoid(&mut rng, 1.0);
        let w = uniform_in(&mut rng, &dist.lower, &dist.upper);
        let out = sc.control(&x, &w);
        if out.clamped || !sc.in_recoverable(&x) {
            continue;
        }
        let v0 = sc.lyapunov_value(&x);
        if v0 < 1e-8 {
            continue;
        }
        let v1 = sc.lyapunov_value(&model.rk4_step(&x, &out.u, &w, dt));
        worst = worst.max((v1 - v0) / v0);
        if !(v1 < v0) {
            return Err(format!("V rose from {v0} to {v1} at {x:?}"));
        }
        tested += 1;
    }
    Ok((tested, worst))
}

fn lyapunov_suite() -> Verdict {
    let params = WarehouseParams::default();
    let wmodel = presets::warehouse_model(Bounds::new(vec![10.0], vec![40.0]).unwrap()).unwrap();
    let wsc = presets::warehouse_controller(&params).unwrap();
    let heli = presets::helicopter_model().unwrap();
    let hparams = HelicopterParams::default();
    let hsc = presets::helicopter_controller(&hparams).unwrap();
    let (wn, wr) = strict_decrease(&wmodel, &wsc, 1.0, 91)?;
    let (hn, hr) = strict_decrease(&heli, &hsc, 0.001, 92)?;

    let vw = verify_sc(
        &wsc,
        &wmodel,
        &VerifyConfig {
            samples: 1000,
            horizon: 3600.0,
            dt: 1.0,
            seed: 93,
        },
    )
    .map_err(|e| e.to_string())?;
    let vh = verify_sc(
        &hsc,
        &heli,
        &VerifyConfig {
            samples: 1000,
            horizon: 10.0,
            dt: 0.001,
            seed: 94,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(vw.passed && vh.passed, || {
        format!("verify_sc rejected a shipped fixture: warehouse {vw:?}, helicopter {vh:?}")
    })?;

    // Same P, no feedback: the open-loop helicopter is unstable.
    let broken = SafetyController::new(DMatrix::zeros(2, 6), hsc.p.clone(), hsc.input_bounds.clone()).unwrap();
    let vb = verify_sc(
        &broken,
        &heli,
        &VerifyConfig {
            samples: 200,
            horizon: 10.0,
            dt: 0.001,
            seed: 95,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(!vb.passed && vb.increase_runs > 0, || "verify_sc accepted K = 0 on the helicopter".into())?;
    Ok(format!(
        "{wn} warehouse and {hn} helicopter samples decrease (worst relative change {wr:.2e}, {hr:.2e}); \
         invalid fixture rejected with {} of 200 runs increasing",
        vb.increase_runs
    ))
}

// ---------------------------------------------------------------- 10

fn rot_protocol() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ops = 0usize;
    for seq in 0..10_000 {
        let mut rot = RotEmulator::new();
        let mut now = 0.0f64;
        let mut accepted_this_cycle = 0;
        let mut fired_this_cycle = 0;
        let mut expected_fire: Option<f64> = None;
        let mut cycles = 0;
        let len = rng.random_range(1..60);
        for _ in 0..len {
            ops += 1;
            match rng.random_range(0..10) {
                0..=3 => {
                    let delta = match rng.random_range(0..6) {
                        0 => 0.0,
                        1 => -rng.random_range(0.0..5.0),
                        _ => rng.random_range(0.001..10.0),
                    };
                    let before = rot.fire_at();
                    let ok = rot.set_restart_time(now, delta);
                    let should = rot_accepts(expected_fire, fired_this_cycle) && delta > 0.0;
                    ensure(ok == should, || format!("sequence {seq}: set({now}, {delta}) returned {ok}"))?;
                    if ok {
                        accepted_this_cycle += 1;
                        expected_fire = Some(now + delta);
                        ensure(rot.fire_at() == Some(now + delta), || format!("sequence {seq}: fire_at not exact"))?;
                    } else {
                        ensure(rot.fire_at() == before, || format!("sequence {seq}: rejected set changed state"))?;
                    }
                }
                4..=7 => {
                    now += rng.random_range(0.0..4.0);
                    let signal = rot.poll(now).map_err(|e| e.to_string())?;
                    let due = matches!(expected_fire, Some(f) if now >= f) && fired_this_cycle == 0;
                    ensure(signal.is_some() == due, || format!("sequence {seq}: poll({now}) fired = {}", signal.is_some()))?;
                    if let Some(s) = signal {
                        fired_this_cycle += 1;
                        ensure(Some(s.fire_at) == expected_fire, || format!("sequence {seq}: wrong fire time"))?;
                        ensure(rot.phase() == RotPhase::Fired, || format!("sequence {seq}: not Fired"))?;
                    }
                }
                8 => {
                    let res = rot.rearm();
                    ensure(res.is_ok() == (fired_this_cycle == 1), || {
                        format!("sequence {seq}: rearm returned {res:?}")
                    })?;
                    if res.is_ok() {
                        cycles += 1;
                        accepted_this_cycle = 0;
                        fired_this_cycle = 0;
                        expected_fire = None;
                        ensure(rot.phase() == RotPhase::AwaitingSet, || format!("sequence {seq}: rearm phase"))?;
                    }
                }
                _ => {
                    if now > 0.0 {
                        let back = now - rng.random_range(1e-6..=now.min(1.0).max(1e-6));
                        let phase = rot.phase();
                        ensure(rot.poll(back).is_err(), || format!("sequence {seq}: regression accepted"))?;
                        ensure(rot.phase() == phase, || format!("sequence {seq}: regression changed state"))?;
                    }
                }
            }
            ensure(accepted_this_cycle <= 1 && fired_this_cycle <= 1, || {
                format!("sequence {seq}: {accepted_this_cycle} sets, {fired_this_cycle} fires in one cycle")
            })?;
            ensure(rot.cycle() == cycles, || format!("sequence {seq}: cycle counter"))?;
        }
    }
    Ok(format!("10000 random sequences, {ops} operations, zero protocol violations"))
}

fn rot_accepts(expected_fire: Option<f64>, fired: usize) -> bool {
    expected_fire.is_none() && fired == 0
}

// ---------------------------------------------------------------- 11

fn gaussian_samples(rng: &mut ChaCha8Rng, n: usize, k: usize, shift: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(shift, 1.0).unwrap();
    (0..n).map(|_| (0..k).map(|_| normal.sample(rng)).collect()).collect()
}

fn t2_detector() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let train = gaussian_samples(&mut rng, 1000, 4, 0.0);
    let profile = T2Profile::build(&train, 3.0).map_err(|e| e.to_string())?;
    let (mu, sigma) = (profile.mu_t, profile.sigma_t);
    let s8 = 8f64.sqrt();
    ensure((mu - 4.0).abs() <= 0.15 * 4.0, || format!("mu_T {mu}"))?;
    ensure((sigma - s8).abs() <= 0.15 * s8, || format!("sigma_T {sigma}"))?;

    let shifted = gaussian_samples(&mut rng, 1000, 4, 10.0);
    let caught = shifted
        .iter()
        .filter(|o| profile.detect(o).map(|d| d.anomalous).unwrap_or(false))
        .count();
    ensure(caught == shifted.len(), || format!("10σ shift caught {caught}/1000"))?;

    let scale: Vec<f64> = (0..4).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
    let offset: Vec<f64> = (0..4).map(|_| rng.random_range(-100.0..100.0)).collect();
    let map = |v: &Vec<f64>| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x * scale[i] + offset[i]).collect() };
    let scaled_train: Vec<Vec<f64>> = train.iter().map(map).collect();
    let scaled = T2Profile::build(&scaled_train, 3.0).map_err(|e| e.to_string())?;
    let held_out = gaussian_samples(&mut rng, 1000, 4, 0.0);
    let mut worst: f64 = 0.0;
    for o in &held_out {
        let a = profile.t2(o).map_err(|e| e.to_string())?.0;
        let b = scaled.t2(&map(o)).map_err(|e| e.to_string())?.0;
        worst = worst.max((a - b).abs() / a.max(1.0));
    }
    worst = worst.max((profile.mu_t - scaled.mu_t).abs()).max((profile.sigma_t - scaled.sigma_t).abs());
    ensure(worst <= 1e-9, || format!("scaling changed T² by {worst:e}"))?;
    Ok(format!(
        "mu_T {mu:.3}, sigma_T {sigma:.3}, 1000/1000 shifted observations caught, scaling drift {worst:.1e}"
    ))
}
