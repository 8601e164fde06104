//! Scratch probe for scenario tuning (removed before release).

use nalgebra::DVector;
use pcbf::barrier::*;
use pcbf::certificates::*;
use pcbf::dynamics::*;
use pcbf::learner::*;
use pcbf::predictor::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "c2" => c2(),
        "c3" => c3(),
        "c4" => c4(),
        "c7" => c7(),
        "c4p" => {
            let args: Vec<String> = std::env::args().collect();
            let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
            let rollouts = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(192);
            let passes = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(12);
            let lr = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
            c4p(epochs, rollouts, vec![64, 64, 64], passes, lr);
        }
        "c4t" => {
            let args: Vec<String> = std::env::args().collect();
            let epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
            let rollouts = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(96);
            let passes = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
            let lr = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
            let width: usize = std::env::var("WIDTH").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
            c4t(epochs, rollouts, vec![width, width, width], passes, lr);
        }
        _ => println!("usage: probe c2|c3|c4|c7|c4t"),
    }
}

// Criterion 2: scalar example, lambda < alpha_x.
fn c2() {
    for k_v in [1.2, 1.5, 2.0] {
        let sys = make_double_integrator(1, k_v).unwrap();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        for x0 in [[2.0, 0.0], [1.0, -0.5], [3.0, 0.0]] {
            let x0s = FomState::from_slice(&x0);
            let t_nom = simulate_policy(&sys, &b, &k, &FilterPolicy::Nominal, &x0s, 0.01, 10.0)
                .unwrap();
            let h_nom = h_series(&b, &sys, &t_nom).unwrap();
            let min_nom = h_nom.iter().cloned().fold(f64::INFINITY, f64::min);
            let t_d1 = simulate_policy(
                &sys,
                &b,
                &k,
                &FilterPolicy::ConstantDelta(1.0),
                &x0s,
                0.01,
                10.0,
            )
            .unwrap();
            let h_d1 = h_series(&b, &sys, &t_d1).unwrap();
            let min_d1 = h_d1.iter().cloned().fold(f64::INFINITY, f64::min);
            println!("k_v={k_v} x0={x0:?}: nominal min h = {min_nom:.6}, delta0=1 min h = {min_d1:.6}");
        }
    }
}

// Criterion 3: 50x50 grid over [0,4] x [-4,4].
fn c3() {
    let k_v = 1.5;
    let sys = make_double_integrator(1, k_v).unwrap();
    let b = halfspace_barrier(1.0, 2.0).unwrap();
    let k = constant_controller(DVector::from_row_slice(&[-0.5]));
    let mut cfg = PredictorConfig::with_defaults(1.0);
    cfg.max_iters = 600;
    let grid = Grid {
        axes: vec![
            GridAxis { min: 0.0, max: 4.0, count: 50 },
            GridAxis { min: -4.0, max: 4.0, count: 50 },
        ],
    };
    let t0 = std::time::Instant::now();
    let outcomes = tabulate_delta(&sys, &b, &k, &grid, &cfg).unwrap();
    println!("tabulate took {:.1}s", t0.elapsed().as_secs_f64());
    let mut n_inf = 0;
    let mut n_conv = 0;
    let mut n_nonconv = 0;
    let mut worst_margin = f64::INFINITY;
    let mut worst_minh = f64::INFINITY;
    let mut max_iters_seen = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.is_infeasible() {
            n_inf += 1;
            continue;
        }
        if !o.converged {
            n_nonconv += 1;
            let node = grid.node(i);
            println!("NON-CONV node {:?}: delta={} margin={}", node.as_slice(), o.delta, o.final_margin);
            continue;
        }
        n_conv += 1;
        max_iters_seen = max_iters_seen.max(o.iterations);
        let r = rollout_margin(
            &sys,
            &b,
            &k,
            &FomState(grid.node(i)),
            &ConstantDelta(o.delta),
            &cfg,
        )
        .unwrap();
        worst_margin = worst_margin.min(r.margin_e);
        if r.min_h < worst_minh {
            worst_minh = r.min_h;
            if r.min_h < -1e-6 {
                println!(
                    "LOW MINH node {:?}: delta={:.4} margin={:.2e} min_h={:.2e}",
                    grid.node(i).as_slice(),
                    o.delta,
                    r.margin_e,
                    r.min_h
                );
            }
        }
    }
    println!(
        "conv={n_conv} nonconv={n_nonconv} inf={n_inf}; worst re-rolled margin={worst_margin:.3e}, worst min_h={worst_minh:.3e}, max iterations={max_iters_seen}"
    );
}

// Criterion 4: obstacle scenario modes.
fn c4() {
    let k_v = 0.7;
    let sys = make_double_integrator(2, k_v).unwrap();
    let field = ObstacleField::new(vec![DVector::from_row_slice(&[-1.8, 0.0])], vec![1.0]).unwrap();
    let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
    let k = saturated_proportional(1.0, std::env::var("VMAX").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0));
    let x0 = FomState::from_slice(&[std::env::var("X0").ok().and_then(|v| v.parse().ok()).unwrap_or(-3.6), std::env::var("Y0").ok().and_then(|v| v.parse().ok()).unwrap_or(-0.25), 0.0, 0.0]);
    let dt = 0.01;
    let dur = 12.0;

    let t0 = std::time::Instant::now();
    let t_nom =
        simulate_policy(&sys, &b, &k, &FilterPolicy::Nominal, &x0, dt, dur).unwrap();
    let h_nom = h_series(&b, &sys, &t_nom).unwrap();
    println!(
        "nominal: min h = {:.4} ({:.2}s)",
        h_nom.iter().cloned().fold(f64::INFINITY, f64::min),
        t0.elapsed().as_secs_f64()
    );

    let cfg = PredictorConfig::with_defaults(1.0);
    let t0 = std::time::Instant::now();
    let t_opt = simulate_policy(
        &sys,
        &b,
        &k,
        &FilterPolicy::Optimized(cfg.clone()),
        &x0,
        dt,
        dur,
    )
    .unwrap();
    let h_opt = h_series(&b, &sys, &t_opt).unwrap();
    println!(
        "optimized: min h = {:.6} ({:.2}s), mean delta = {:.4}, final z = ({:.3},{:.3})",
        h_opt.iter().cloned().fold(f64::INFINITY, f64::min),
        t0.elapsed().as_secs_f64(),
        t_opt.deltas.iter().sum::<f64>() / t_opt.len() as f64,
        t_opt.states.last().unwrap()[0],
        t_opt.states.last().unwrap()[1],
    );

    let t0 = std::time::Instant::now();
    let t_rt = simulate_policy(
        &sys,
        &b,
        &k,
        &FilterPolicy::Realtime(cfg.clone()),
        &x0,
        dt,
        dur,
    )
    .unwrap();
    let h_rt = h_series(&b, &sys, &t_rt).unwrap();
    println!(
        "realtime: min h = {:.6} ({:.2}s)",
        h_rt.iter().cloned().fold(f64::INFINITY, f64::min),
        t0.elapsed().as_secs_f64()
    );
}

// Criterion 7: certificate estimation + S_delta0 sampling.
fn c7() {
    let k_v = 3.0;
    let sys = make_double_integrator(1, k_v).unwrap();
    let b = halfspace_barrier(1.0, 2.0).unwrap();
    let k = constant_controller(DVector::from_row_slice(&[-0.5]));
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut starts = Vec::new();
    for _ in 0..40 {
        starts.push(FomState::from_slice(&[
            rng.random_range(0.0..3.0),
            rng.random_range(-2.0..2.0),
        ]));
    }
    let ccfg = CertificateConfig::default();
    // two-pass fixed point on delta0
    let cert0 = estimate_tracking_constants(&sys, &b, &k, 0.0, &starts, &ccfg).unwrap();
    let d0 = delta0_lower_bound(&cert0, b.alpha_x);
    let cert = estimate_tracking_constants(&sys, &b, &k, d0, &starts, &ccfg).unwrap();
    let d1 = delta0_lower_bound(&cert, b.alpha_x);
    println!("pass0: lambda={:.3} mu={:.4} d0={d0:.4}", cert0.lambda, cert0.mu);
    println!("pass1: lambda={:.3} mu={:.4} d1={d1:.4}", cert.lambda, cert.mu);

    // sample S_delta0 members, roll 10s, check min h
    let mut accepted = 0;
    let mut worst = f64::INFINITY;
    let mut tries = 0;
    while accepted < 200 && tries < 100000 {
        tries += 1;
        let x = FomState::from_slice(&[
            rng.random_range(0.0..3.0),
            rng.random_range(-3.0..3.0),
        ]);
        let (member, _) = in_safe_set_s_delta0(&x, d1, &cert, &b, &sys, &k).unwrap();
        if !member {
            continue;
        }
        accepted += 1;
        let t = simulate_policy(&sys, &b, &k, &FilterPolicy::ConstantDelta(d1), &x, 0.01, 10.0)
            .unwrap();
        let h = h_series(&b, &sys, &t).unwrap();
        let mh = h.iter().cloned().fold(f64::INFINITY, f64::min);
        if mh < worst {
            worst = mh;
            if mh < -1e-6 {
                println!("VIOLATION from {:?}: min h = {mh:.3e}", x.0.as_slice());
            }
        }
    }
    println!("S_delta0 sampling: {accepted} members in {tries} tries, worst min h = {worst:.3e}");

    // delta0 = 0 witness search
    let mut worst0 = f64::INFINITY;
    let mut witness = None;
    let mut accepted0 = 0;
    for _ in 0..100000 {
        if accepted0 >= 200 {
            break;
        }
        let x = FomState::from_slice(&[
            rng.random_range(0.0..3.0),
            rng.random_range(-3.0..3.0),
        ]);
        let (member, _) = in_safe_set_s_delta0(&x, 0.0, &cert0, &b, &sys, &k).unwrap();
        if !member {
            continue;
        }
        accepted0 += 1;
        let t = simulate_policy(&sys, &b, &k, &FilterPolicy::Nominal, &x, 0.01, 10.0).unwrap();
        let h = h_series(&b, &sys, &t).unwrap();
        let mh = h.iter().cloned().fold(f64::INFINITY, f64::min);
        if mh < worst0 {
            worst0 = mh;
            witness = Some(x.0.clone());
        }
    }
    println!(
        "delta0=0 sampling: {accepted0} members, worst min h = {worst0:.3e} from {:?}",
        witness.map(|w| (w[0], w[1]))
    );
}

// Criterion 4 learned half: train + compare to optimized.
#[allow(dead_code)]
fn c4t(n_epochs: usize, n_rollouts: usize, hidden: Vec<usize>, fit_passes: usize, lr: f64) {
    let k_v = 0.7;
    let sys = make_double_integrator(2, k_v).unwrap();
    let field = ObstacleField::new(vec![DVector::from_row_slice(&[-1.8, 0.0])], vec![1.0]).unwrap();
    let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
    let k = saturated_proportional(1.0, std::env::var("VMAX").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0));
    let x0 = FomState::from_slice(&[std::env::var("X0").ok().and_then(|v| v.parse().ok()).unwrap_or(-3.6), std::env::var("Y0").ok().and_then(|v| v.parse().ok()).unwrap_or(-0.25), 0.0, 0.0]);
    let dt = 0.01;
    let dur = 12.0;

    let cfg = TrainConfig {
        sigma: 0.9,
        eta_j: 1.0,
        eta_decay: std::env::var("ETA_DECAY").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
        n_epochs,
        n_rollouts,
        rollout_t: 2.0,
        dt: 0.01,
        violation_rate: 1.0,
        window: ViolationWindow::Sliding,
        learning_rate: lr,
        batch_size: 256,
        fit_passes,
        hidden,
        seed: std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(42),
        delta_max: 5.0,
        randomization: SystemDistribution {
            rom_dim: 2,
            k_v_range: (0.7, 0.7),
            x0_ranges: vec![(std::env::var("BOXX").ok().and_then(|v| v.parse().ok()).unwrap_or(-4.2), 0.6), (-1.8, 1.4), (-1.3, 1.3), (-1.3, 1.3)],
        },
    };
    let t0 = std::time::Instant::now();
    let (model, metrics) = train(&cfg.randomization, &b, &k, &cfg).unwrap();
    println!("training took {:.1}s", t0.elapsed().as_secs_f64());
    for m in &metrics {
        println!(
            "  epoch {}: loss {:.5} violating {:.3} ({:.1}s)",
            m.epoch, m.mean_loss, m.frac_violating, m.wall_time_s
        );
    }
    let t_learn = simulate_policy(
        &sys,
        &b,
        &k,
        &FilterPolicy::Provider(&model),
        &x0,
        dt,
        dur,
    )
    .unwrap();
    let h_learn = h_series(&b, &sys, &t_learn).unwrap();
    let pcfg = PredictorConfig::with_defaults(1.0);
    let t_opt = simulate_policy(&sys, &b, &k, &FilterPolicy::Optimized(pcfg), &x0, dt, dur).unwrap();
    let mut sup = 0.0f64;
    for kk in 0..t_learn.len().min(t_opt.len()) {
        let za = sys.project_state(&t_learn.states[kk]);
        let zb = sys.project_state(&t_opt.states[kk]);
        sup = sup.max((za - zb).norm());
    }
    println!(
        "learned: min h = {:.6}, sup-distance to optimized = {:.4} (bar 0.1), mean delta learned = {:.4} / optimized = {:.4}",
        h_learn.iter().cloned().fold(f64::INFINITY, f64::min),
        sup,
        t_learn.deltas.iter().sum::<f64>() / t_learn.len() as f64,
        t_opt.deltas.iter().sum::<f64>() / t_opt.len() as f64,
    );
}

// Where along the trajectories does the optimized/learned gap live?
#[allow(dead_code)]
fn c4p(n_epochs: usize, n_rollouts: usize, hidden: Vec<usize>, fit_passes: usize, lr: f64) {
    let k_v = 0.7;
    let sys = make_double_integrator(2, k_v).unwrap();
    let field = ObstacleField::new(vec![DVector::from_row_slice(&[-1.8, 0.0])], vec![1.0]).unwrap();
    let b = obstacle_barrier(field, 1.0, 2.0).unwrap();
    let k = saturated_proportional(1.0, std::env::var("VMAX").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0));
    let x0 = FomState::from_slice(&[std::env::var("X0").ok().and_then(|v| v.parse().ok()).unwrap_or(-3.6), std::env::var("Y0").ok().and_then(|v| v.parse().ok()).unwrap_or(-0.25), 0.0, 0.0]);

    let cfg = TrainConfig {
        sigma: 0.9,
        eta_j: 1.0,
        eta_decay: 1.0,
        n_epochs,
        n_rollouts,
        rollout_t: 2.0,
        dt: 0.01,
        violation_rate: 1.0,
        window: ViolationWindow::Sliding,
        learning_rate: lr,
        batch_size: 256,
        fit_passes,
        hidden,
        seed: std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(42),
        delta_max: 5.0,
        randomization: SystemDistribution {
            rom_dim: 2,
            k_v_range: (0.7, 0.7),
            x0_ranges: vec![(std::env::var("BOXX").ok().and_then(|v| v.parse().ok()).unwrap_or(-4.2), 0.6), (-1.8, 1.4), (-1.3, 1.3), (-1.3, 1.3)],
        },
    };
    let (model, _) = train(&cfg.randomization, &b, &k, &cfg).unwrap();
    let pcfg = PredictorConfig::with_defaults(1.0);
    let dt = 0.01;
    let dur = 12.0;
    let t_opt = simulate_policy(&sys, &b, &k, &FilterPolicy::Optimized(pcfg), &x0, dt, dur).unwrap();
    let t_lrn = simulate_policy(&sys, &b, &k, &FilterPolicy::Provider(&model), &x0, dt, dur).unwrap();
    let mut sup = 0.0f64;
    let mut sup_t = 0.0;
    for i in 0..t_opt.len() {
        let za = sys.project_state(&t_opt.states[i]);
        let zb = sys.project_state(&t_lrn.states[i]);
        let d = (za - zb).norm();
        if d > sup {
            sup = d;
            sup_t = t_opt.times[i];
        }
    }
    println!("sup = {sup:.4} at t = {sup_t:.2}");
    for i in (0..t_opt.len()).step_by(100) {
        let za = sys.project_state(&t_opt.states[i]);
        let zb = sys.project_state(&t_lrn.states[i]);
        println!(
            "t={:5.1} gap={:.4} | opt z=({:6.3},{:6.3}) d={:.3} h={:.3} | lrn z=({:6.3},{:6.3}) d={:.3} h={:.3}",
            t_opt.times[i],
            (za.clone() - zb.clone()).norm(),
            za[0], za[1], t_opt.deltas[i],
            b.h(&za),
            zb[0], zb[1], t_lrn.deltas[i],
            b.h(&zb),
        );
    }
}
