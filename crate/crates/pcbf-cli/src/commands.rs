//! Command implementations: each writes its artifacts plus a copy of the
//! resolved scenario config into the output directory.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use pcbf::barrier::write_trajectory_csv;
use pcbf::certificates::{
    estimate_tracking_constants, verify_barrier_condition, TrackingCertificate,
};
use pcbf::dynamics::{FomState, Trajectory};
use pcbf::learner::{load_model, save_model, write_metrics_csv, DeltaModel};
use pcbf::predictor::{simulate_policy, write_delta_table_csv, FilterPolicy};
use pcbf::{Error, Result};

use crate::scenario::Scenario;

fn prepare_out(scenario: &Scenario) -> Result<PathBuf> {
    let out = scenario.file.out.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("scenario.resolved.toml"), scenario.resolved_toml())?;
    Ok(out)
}

fn build_policy<'a>(
    scenario: &Scenario,
    model_slot: &'a mut Option<DeltaModel>,
) -> Result<FilterPolicy<'a>> {
    match scenario.file.filter.mode.as_str() {
        "nominal" => Ok(FilterPolicy::Nominal),
        "constant" => Ok(FilterPolicy::ConstantDelta(scenario.file.filter.delta0)),
        "optimized" => Ok(FilterPolicy::Optimized(scenario.predictor_config())),
        "realtime" => Ok(FilterPolicy::Realtime(scenario.predictor_config())),
        "learned" => {
            let path = scenario
                .file
                .filter
                .model
                .as_ref()
                .ok_or_else(|| Error::Config("learned mode needs filter.model".into()))?;
            let model = load_model(path)?;
            if model.input_dim() != 2 * scenario.file.system.n {
                return Err(Error::Config(format!(
                    "model expects input dimension {}, scenario state is {}",
                    model.input_dim(),
                    2 * scenario.file.system.n
                )));
            }
            *model_slot = Some(model);
            Ok(FilterPolicy::Provider(model_slot.as_ref().unwrap()))
        }
        other => Err(Error::Config(format!("unknown filter mode '{other}'"))),
    }
}

#[derive(Serialize)]
struct SimSummary {
    mode: String,
    min_h: f64,
    violations: usize,
    mean_deviation: f64,
    mean_delta: f64,
    samples: usize,
}

fn summarize(scenario: &Scenario, traj: &Trajectory) -> Result<SimSummary> {
    let sys = scenario.build_system()?;
    let b = scenario.build_barrier()?;
    let k = scenario.build_controller()?;
    let hs = pcbf::barrier::h_series(&b, &sys, traj)?;
    let min_h = hs.iter().cloned().fold(f64::INFINITY, f64::min);
    let violations = hs.iter().filter(|h| **h < -1e-9).count();
    let mut dev = 0.0;
    for (x, v) in traj.states.iter().zip(&traj.inputs) {
        let z = sys.project_state(x);
        dev += (v - k(&z)).norm();
    }
    let mean_delta = traj.deltas.iter().sum::<f64>() / traj.len().max(1) as f64;
    Ok(SimSummary {
        mode: scenario.file.filter.mode.clone(),
        min_h,
        violations,
        mean_deviation: dev / traj.len().max(1) as f64,
        mean_delta,
        samples: traj.len(),
    })
}

fn run_simulation(scenario: &Scenario) -> Result<(Trajectory, f64)> {
    let sys = scenario.build_system()?;
    let b = scenario.build_barrier()?;
    let k = scenario.build_controller()?;
    let mut model_slot = None;
    let policy = build_policy(scenario, &mut model_slot)?;
    let started = Instant::now();
    let traj = simulate_policy(
        &sys,
        &b,
        &k,
        &policy,
        &scenario.x0(),
        scenario.file.sim.dt,
        scenario.file.sim.duration,
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    // Solve rate: filter-policy evaluations per second of wall time.
    let solve_hz = traj.len() as f64 / elapsed.max(1e-12);
    Ok((traj, solve_hz))
}

pub fn simulate(config: &Path, seed: &Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let scenario = Scenario::load(config, seed, out)?;
    let out_dir = prepare_out(&scenario)?;
    let (traj, _) = run_simulation(&scenario)?;
    let sys = scenario.build_system()?;
    let b = scenario.build_barrier()?;
    let mut csv = Vec::new();
    write_trajectory_csv(&traj, &sys, &b, &mut csv)?;
    fs::write(out_dir.join("trajectory.csv"), csv)?;
    let summary = summarize(&scenario, &traj)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "simulate: {} samples, min h = {:.6}, violations = {}",
        summary.samples, summary.min_h, summary.violations
    );
    Ok(())
}

pub fn tabulate_delta(config: &Path, seed: &Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let scenario = Scenario::load(config, seed, out)?;
    let out_dir = prepare_out(&scenario)?;
    let sys = scenario.build_system()?;
    let b = scenario.build_barrier()?;
    let k = scenario.build_controller()?;
    let grid = scenario.grid()?;
    let cfg = scenario.predictor_config();
    let outcomes = pcbf::predictor::tabulate_delta(&sys, &b, &k, &grid, &cfg)?;
    let mut csv = Vec::new();
    write_delta_table_csv(&grid, &outcomes, &mut csv)?;
    fs::write(out_dir.join("delta_table.csv"), csv)?;
    let finite = outcomes.iter().filter(|o| !o.is_infeasible()).count();
    println!(
        "tabulate-delta: {} nodes, {finite} finite, {} unsolvable",
        outcomes.len(),
        outcomes.len() - finite
    );
    Ok(())
}

pub fn train(config: &Path, seed: &Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    let scenario = Scenario::load(config, seed, out)?;
    let out_dir = prepare_out(&scenario)?;
    let b = scenario.build_barrier()?;
    let k = scenario.build_controller()?;
    let cfg = scenario.train_config()?;
    let (model, metrics) = pcbf::learner::train(&cfg.randomization, &b, &k, &cfg)?;
    save_model(&model, out_dir.join("model.json"))?;
    let mut csv = Vec::new();
    write_metrics_csv(&metrics, &mut csv)?;
    fs::write(out_dir.join("metrics.csv"), csv)?;
    if let Some(last) = metrics.last() {
        println!(
            "train: {} epochs, final mean loss {:.6}, violating fraction {:.3}",
            metrics.len(),
            last.mean_loss,
            last.frac_violating
        );
    } else {
        println!("train: 0 epochs, wrote the initialized model");
    }
    Ok(())
}

pub fn verify(
    config: &Path,
    trajectory: &Path,
    seed: &Option<u64>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let scenario = Scenario::load(config, seed, out)?;
    let out_dir = prepare_out(&scenario)?;
    let sys = scenario.build_system()?;
    let b = scenario.build_barrier()?;
    let file = fs::File::open(trajectory)?;
    let traj = Trajectory::read_csv(BufReader::new(file))?;

    let cert = estimate_certificate(&scenario)?;
    fs::write(out_dir.join("certificate.json"), cert.to_json())?;
    let report = verify_barrier_condition(
        &traj,
        &sys,
        &b,
        &cert,
        scenario.file.filter.delta0,
        scenario.file.certificate.residual_tol,
    )?;
    fs::write(out_dir.join("report.json"), report.to_json())?;
    println!(
        "verify: hypotheses {} (lambda {} alpha_x, delta0 {} bound), barrier condition {}, min h = {:.6}",
        if report.hypotheses_hold { "hold" } else { "FAIL" },
        if report.lambda_ok { ">=" } else { "<" },
        if report.delta0_ok { ">=" } else { "<" },
        if report.barrier_condition_ok { "ok" } else { "VIOLATED" },
        report.min_h
    );
    Ok(())
}

/// Estimate tracking constants from the scenario's certificate section.
pub fn estimate_certificate(scenario: &Scenario) -> Result<TrackingCertificate> {
    let sys = scenario.build_system()?;
    let b = scenario.build_barrier()?;
    let k = scenario.build_controller()?;
    let section = &scenario.file.certificate;
    if section.x0.is_empty() {
        return Err(Error::Config(
            "certificate.x0 sampling box is required for estimation".into(),
        ));
    }
    if section.x0.len() != 2 * scenario.file.system.n {
        return Err(Error::Config(format!(
            "certificate.x0 has {} ranges, expected {}",
            section.x0.len(),
            2 * scenario.file.system.n
        )));
    }
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(scenario.file.seed);
    let starts: Vec<FomState> = (0..section.n_samples.max(1))
        .map(|_| {
            FomState(DVector::from_iterator(
                section.x0.len(),
                section.x0.iter().map(|r| {
                    if r[1] > r[0] {
                        rng.random_range(r[0]..r[1])
                    } else {
                        r[0]
                    }
                }),
            ))
        })
        .collect();
    estimate_tracking_constants(
        &sys,
        &b,
        &k,
        scenario.file.filter.delta0,
        &starts,
        &scenario.certificate_config(),
    )
}

pub fn compare(configs: &[PathBuf], seed: &Option<u64>, out: &Option<PathBuf>) -> Result<()> {
    if configs.is_empty() {
        return Err(Error::Config("compare needs at least one scenario".into()));
    }
    let mut rows = Vec::new();
    let mut trajectories: Vec<(String, Trajectory, Scenario)> = Vec::new();
    for path in configs {
        let scenario = Scenario::load(path, seed, out)?;
        let (traj, solve_hz) = run_simulation(&scenario)?;
        let summary = summarize(&scenario, &traj)?;
        rows.push((path.clone(), summary, solve_hz));
        trajectories.push((scenario.file.filter.mode.clone(), traj, scenario));
    }

    // Sup-distance between the optimized and learned runs, if both present.
    let sup_distance = pair_sup_distance(&trajectories, "optimized", "learned")?;

    println!(
        "{:<28} {:<10} {:>12} {:>6} {:>12} {:>12} {:>12}",
        "scenario", "mode", "min_h", "viol", "mean_delta", "mean_dev", "solve_hz"
    );
    for (path, s, hz) in &rows {
        println!(
            "{:<28} {:<10} {:>12.6} {:>6} {:>12.6} {:>12.6} {:>12.1}",
            path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default(),
            s.mode,
            s.min_h,
            s.violations,
            s.mean_delta,
            s.mean_deviation,
            hz
        );
    }
    if let Some(d) = sup_distance {
        println!("sup-distance optimized vs learned: {d:.6}");
        if let Some(threshold) = trajectories
            .iter()
            .find_map(|(_, _, s)| s.file.compare.max_sup_distance)
        {
            if d > threshold {
                println!("  exceeds the reporting threshold {threshold:.6}");
            }
        }
    }

    // CSV rows hold only deterministic columns.
    let out_dir = trajectories
        .first()
        .map(|(_, _, s)| s.file.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("scenario,mode,min_h,violations,mean_delta,mean_deviation\n");
    for (path, s, _) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default(),
            s.mode,
            fmt9(s.min_h),
            s.violations,
            fmt9(s.mean_delta),
            fmt9(s.mean_deviation)
        ));
    }
    if let Some(d) = sup_distance {
        csv.push_str(&format!("sup_distance,optimized-vs-learned,{},,,\n", fmt9(d)));
    }
    fs::write(out_dir.join("compare.csv"), csv)?;
    Ok(())
}

fn fmt9(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        format!("{x}")
    }
}

/// Sup over time of the RoM-projection distance between two trajectories.
fn pair_sup_distance(
    trajectories: &[(String, Trajectory, Scenario)],
    a: &str,
    b: &str,
) -> Result<Option<f64>> {
    let ta = trajectories.iter().find(|(m, _, _)| m == a);
    let tb = trajectories.iter().find(|(m, _, _)| m == b);
    let (Some((_, ta, sa)), Some((_, tb, _))) = (ta, tb) else {
        return Ok(None);
    };
    let sys = sa.build_system()?;
    let len = ta.len().min(tb.len());
    let mut sup = 0.0f64;
    for k in 0..len {
        let za = sys.project_state(&ta.states[k]);
        let zb = sys.project_state(&tb.states[k]);
        sup = sup.max((za - zb).norm());
    }
    Ok(Some(sup))
}

