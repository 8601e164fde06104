//! Episodic learning of the buffer network: collect filtered rollouts under
//! the current delta_theta, compute violation-window targets, and fit the
//! network by check-loss (quantile) regression.
//!
//! The check loss with sigma > 0.5 penalizes underestimates of the target
//! buffer more than overestimates, so the fitted network upper-bounds the
//! distribution of required buffers.

pub mod mlp;

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierSpec;
use crate::dynamics::{make_double_integrator, Controller, FomState, LayeredSystem};
use crate::error::{Error, Result};
use crate::predictor::{closed_loop_rollout, score_rollout, DeltaProvider};
use crate::util::{mix_seed, sig9, sliding_window_min};

pub use mlp::{
    load_model, model_from_json, model_to_json, save_model, Activation, DeltaModel,
    OutputTransform, TrainingMeta,
};

impl DeltaProvider for DeltaModel {
    fn delta(&self, x: &DVector<f64>) -> f64 {
        self.forward(x)
    }
}

/// Check (pinball) loss: sigma (y - x) for x <= y, (1 - sigma)(x - y)
/// otherwise, with x the prediction and y the target. Its minimizer over
/// constants is the sigma-quantile of the targets.
pub fn check_loss(pred: f64, target: f64, sigma: f64) -> Result<f64> {
    validate_sigma(sigma)?;
    Ok(if pred <= target {
        sigma * (target - pred)
    } else {
        (1.0 - sigma) * (pred - target)
    })
}

/// Subgradient of the check loss in the prediction; zero at the kink.
pub(crate) fn check_loss_grad(pred: f64, target: f64, sigma: f64) -> f64 {
    if pred < target {
        -sigma
    } else if pred > target {
        1.0 - sigma
    } else {
        0.0
    }
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Config(format!(
            "sigma must lie in (0, 1), got {sigma}"
        )));
    }
    Ok(())
}

/// Check loss of the model at one sample together with its gradient in the
/// parameters, laid out like the model's weights and biases.
pub fn loss_and_gradient(
    model: &DeltaModel,
    x: &DVector<f64>,
    target: f64,
    sigma: f64,
) -> Result<(f64, Vec<nalgebra::DMatrix<f64>>, Vec<DVector<f64>>)> {
    let cache = model.forward_cached(x);
    let loss = check_loss(cache.output, target, sigma)?;
    let mut grads = mlp::Grads::zeros_like(model);
    model.backward(&cache, check_loss_grad(cache.output, target, sigma), &mut grads);
    Ok((loss, grads.weights, grads.biases))
}

/// How the violation window past each sample is clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationWindow {
    /// min over [t, t + T] clipped at the trajectory end.
    Sliding,
    /// min over [t, end] regardless of T.
    ToEnd,
}

/// Distribution of randomized training systems and initial states. Tracking
/// gains and initial states are drawn uniformly from the configured ranges.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemDistribution {
    /// RoM dimension n; the double-integrator FoM has dimension 2n.
    pub rom_dim: usize,
    /// Uniform range for the tracking gain.
    pub k_v_range: (f64, f64),
    /// Per-dimension uniform ranges for the initial FoM state (length 2n).
    pub x0_ranges: Vec<(f64, f64)>,
}

impl SystemDistribution {
    pub fn fom_dim(&self) -> usize {
        2 * self.rom_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.rom_dim == 0 {
            return Err(Error::Config("randomization rom_dim must be >= 1".into()));
        }
        let (lo, hi) = self.k_v_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "k_v range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if self.x0_ranges.len() != self.fom_dim() {
            return Err(Error::Config(format!(
                "x0 ranges: expected {} entries, got {}",
                self.fom_dim(),
                self.x0_ranges.len()
            )));
        }
        for (i, (a, b)) in self.x0_ranges.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && b >= a) {
                return Err(Error::Config(format!(
                    "x0 range {i} invalid: ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha20Rng) -> Result<(LayeredSystem, FomState)> {
        let (lo, hi) = self.k_v_range;
        let k_v = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let sys = make_double_integrator(self.rom_dim, k_v)?;
        let x0 = DVector::from_iterator(
            self.fom_dim(),
            self.x0_ranges.iter().map(|(a, b)| {
                if b > a {
                    rng.random_range(*a..*b)
                } else {
                    *a
                }
            }),
        );
        Ok((sys, FomState(x0)))
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Check-loss quantile.
    pub sigma: f64,
    /// Target step size eta_j.
    pub eta_j: f64,
    /// Geometric per-epoch decay of eta_j (1.0 = constant).
    pub eta_decay: f64,
    pub n_epochs: usize,
    /// Trajectories collected per epoch.
    pub n_rollouts: usize,
    /// Horizon for both trajectory length and violation window, seconds.
    pub rollout_t: f64,
    /// Integration and filter step during collection.
    pub dt: f64,
    /// Rate used inside the violation margin.
    pub violation_rate: f64,
    pub window: ViolationWindow,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the epoch dataset per fit call.
    pub fit_passes: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Targets are clipped to [0, delta_max].
    pub delta_max: f64,
    pub randomization: SystemDistribution,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_sigma(self.sigma)?;
        let positive = [
            ("eta_j", self.eta_j),
            ("eta_decay", self.eta_decay),
            ("rollout_t", self.rollout_t),
            ("dt", self.dt),
            ("learning_rate", self.learning_rate),
            ("delta_max", self.delta_max),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Config(format!(
                    "train {name} must be positive, got {value}"
                )));
            }
        }
        if !(self.violation_rate >= 0.0) {
            return Err(Error::Config("train violation_rate must be >= 0".into()));
        }
        if self.n_rollouts == 0 || self.batch_size == 0 || self.fit_passes == 0 {
            return Err(Error::Config(
                "train n_rollouts, batch_size, fit_passes must be >= 1".into(),
            ));
        }
        self.randomization.validate()
    }

    fn eta_at(&self, epoch: usize) -> f64 {
        self.eta_j * self.eta_decay.powi(epoch as i32)
    }
}

/// One epoch of states, window violations, and clipped buffer targets.
#[derive(Clone, Debug, Default)]
pub struct EpochDataset {
    pub states: Vec<DVector<f64>>,
    pub violations: Vec<f64>,
    pub targets: Vec<f64>,
}

impl EpochDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Roll `n_rollouts` randomized systems under the filter with the current
/// network buffer; every timestep of every surviving trajectory becomes a
/// sample. The violation at a sample is the window minimum of
/// `hdot + violation_rate * h`, and its target is
/// `clip(delta_theta(x) - eta_j * violation, 0, delta_max)`. Divergent
/// rollouts are dropped with a warning.
pub fn collect_epoch(
    dist: &SystemDistribution,
    b: &BarrierSpec,
    k_nominal: &Controller,
    model: &DeltaModel,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochDataset> {
    cfg.validate()?;
    if model.input_dim() != dist.fom_dim() {
        return Err(Error::Shape(format!(
            "model input dimension {} does not match FoM dimension {}",
            model.input_dim(),
            dist.fom_dim()
        )));
    }
    let n_steps = (cfg.rollout_t / cfg.dt).round() as usize;
    let window = n_steps; // [t, t + T] in samples
    let eta = cfg.eta_at(epoch);

    let per_traj: Vec<Option<EpochDataset>> = (0..cfg.n_rollouts)
        .into_par_iter()
        .map(|i| -> Result<Option<EpochDataset>> {
            let mut rng =
                ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, i as u64));
            let (sys, x0) = dist.sample(&mut rng)?;
            let traj = match closed_loop_rollout(
                &sys,
                b,
                k_nominal,
                |x| Ok(model.forward(x)),
                &x0.0,
                cfg.dt,
                n_steps,
            ) {
                Ok(t) => t,
                Err(Error::Divergence { step, t }) => {
                    log::warn!(
                        "epoch {epoch}: rollout {i} diverged at step {step} (t = {t}); dropped"
                    );
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let scored = score_rollout(&sys, b, traj, cfg.violation_rate)?;
            let traj = scored.trajectory;
            let hs = crate::barrier::h_series(b, &sys, &traj)?;
            let hds = crate::barrier::hdot_series(b, &sys, &traj)?;
            let q: Vec<f64> = hds
                .iter()
                .zip(&hs)
                .map(|(hd, h)| hd + cfg.violation_rate * h)
                .collect();
            let win = match cfg.window {
                ViolationWindow::Sliding => window,
                ViolationWindow::ToEnd => q.len(),
            };
            let e = sliding_window_min(&q, win);
            let mut out = EpochDataset::default();
            for (k, x) in traj.states.into_iter().enumerate() {
                let target = (model.forward(&x) - eta * e[k]).clamp(0.0, cfg.delta_max);
                out.states.push(x);
                out.violations.push(e[k]);
                out.targets.push(target);
            }
            Ok(Some(out))
        })
        .collect::<Result<_>>()?;

    let mut data = EpochDataset::default();
    for part in per_traj.into_iter().flatten() {
        data.states.extend(part.states);
        data.violations.extend(part.violations);
        data.targets.extend(part.targets);
    }
    Ok(data)
}

/// Adam state per parameter tensor.
struct Adam {
    m_w: Vec<nalgebra::DMatrix<f64>>,
    v_w: Vec<nalgebra::DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DeltaModel) -> Self {
        Self {
            m_w: model
                .weights
                .iter()
                .map(|w| nalgebra::DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            v_w: model
                .weights
                .iter()
                .map(|w| nalgebra::DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            m_b: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            v_b: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            t: 0,
        }
    }

    fn update(&mut self, model: &mut DeltaModel, grads: &mlp::Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for l in 0..model.weights.len() {
            let g = &grads.weights[l];
            self.m_w[l] = Self::BETA1 * &self.m_w[l] + (1.0 - Self::BETA1) * g;
            self.v_w[l] = Self::BETA2 * &self.v_w[l]
                + (1.0 - Self::BETA2) * g.component_mul(g);
            let step = self.m_w[l].zip_map(&self.v_w[l], |m, v| {
                lr * (m / bc1) / ((v / bc2).sqrt() + Self::EPS)
            });
            model.weights[l] -= step;

            let gb = &grads.biases[l];
            self.m_b[l] = Self::BETA1 * &self.m_b[l] + (1.0 - Self::BETA1) * gb;
            self.v_b[l] = Self::BETA2 * &self.v_b[l]
                + (1.0 - Self::BETA2) * gb.component_mul(gb);
            let step_b = self.m_b[l].zip_map(&self.v_b[l], |m, v| {
                lr * (m / bc1) / ((v / bc2).sqrt() + Self::EPS)
            });
            model.biases[l] -= step_b;
        }
    }
}

/// Mini-batch check-loss regression onto the epoch targets. Deterministic
/// given the config seed; single-threaded.
pub fn fit(
    mut model: DeltaModel,
    data: &EpochDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<DeltaModel> {
    if data.is_empty() {
        return Err(Error::Precondition("fit: empty dataset".into()));
    }
    validate_sigma(cfg.sigma)?;
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0xF17));
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(&model);
    let mut grads = mlp::Grads::zeros_like(&model);
    for pass in 0..cfg.fit_passes {
        // Cosine decay to 1% of the base rate: full-size steps early, and
        // late passes stop oscillating at the step size around the
        // check-loss kink.
        let progress = pass as f64 / (cfg.fit_passes.max(2) - 1) as f64;
        let lr = cfg.learning_rate
            * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        indices.shuffle(&mut rng);
        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            grads.reset();
            let mut batch_loss = 0.0;
            for &i in batch {
                let cache = model.forward_cached(&data.states[i]);
                batch_loss += check_loss(cache.output, data.targets[i], cfg.sigma)?;
                let g = check_loss_grad(cache.output, data.targets[i], cfg.sigma);
                model.backward(&cache, g, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.update(&mut model, &grads, lr);
        }
    }
    Ok(model)
}

/// Mean check loss of a model over a dataset.
pub fn mean_loss(model: &DeltaModel, data: &EpochDataset, sigma: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Precondition("mean_loss: empty dataset".into()));
    }
    let mut total = 0.0;
    for (x, target) in data.states.iter().zip(&data.targets) {
        total += check_loss(model.forward(x), *target, sigma)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub frac_violating: f64,
    pub wall_time_s: f64,
}

/// Run the full episodic loop from a seeded random initialization and
/// return the final model with per-epoch metrics. Zero epochs returns the
/// initialized model unchanged.
pub fn train(
    dist: &SystemDistribution,
    b: &BarrierSpec,
    k_nominal: &Controller,
    cfg: &TrainConfig,
) -> Result<(DeltaModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let meta = TrainingMeta {
        seed: cfg.seed,
        sigma: cfg.sigma,
        delta_max: cfg.delta_max,
    };
    let mut model = DeltaModel::init(dist.fom_dim(), &cfg.hidden, meta)?;
    let mut metrics = Vec::with_capacity(cfg.n_epochs);
    for epoch in 0..cfg.n_epochs {
        let started = Instant::now();
        let data = collect_epoch(dist, b, k_nominal, &model, cfg, epoch)?;
        if data.is_empty() {
            return Err(Error::Precondition(format!(
                "epoch {epoch}: every rollout diverged"
            )));
        }
        model = fit(model, &data, cfg, epoch)?;
        let loss = mean_loss(&model, &data, cfg.sigma)?;
        let frac_violating =
            data.violations.iter().filter(|e| **e < 0.0).count() as f64 / data.len() as f64;
        let wall_time_s = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: {n} samples, mean loss {loss:.6}, violating {frac_violating:.3}, {wall_time_s:.1}s",
            n = data.len()
        );
        metrics.push(EpochMetrics {
            epoch,
            mean_loss: loss,
            frac_violating,
            wall_time_s,
        });
    }
    Ok((model, metrics))
}

/// Metrics CSV: `epoch,mean_loss,frac_violating,wall_time_s`.
pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], w: &mut W) -> Result<()> {
    writeln!(w, "epoch,mean_loss,frac_violating,wall_time_s")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{}",
            m.epoch,
            sig9(m.mean_loss),
            sig9(m.frac_violating),
            sig9(m.wall_time_s)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::halfspace_barrier;
    use crate::dynamics::constant_controller;
    use approx::assert_relative_eq;

    #[test]
    fn check_loss_example_values() {
        assert_relative_eq!(check_loss(1.0, 2.0, 0.9).unwrap(), 0.9);
        assert_relative_eq!(check_loss(2.0, 1.0, 0.9).unwrap(), 0.1, epsilon = 1e-15);
        for c in [-3.0, 0.0, 7.5] {
            for s in [0.1, 0.5, 0.9] {
                assert_eq!(check_loss(c, c, s).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn check_loss_rejects_bad_sigma() {
        for s in [0.0, 1.0, -0.2, 1.7] {
            assert!(matches!(check_loss(0.0, 0.0, s), Err(Error::Config(_))));
        }
    }

    #[test]
    fn check_loss_asymmetry_is_exact() {
        // loss(pred = c - r) = sigma * r and loss(pred = c + r) = (1 - sigma) r,
        // bitwise, for any r: the asymmetry ratio is sigma / (1 - sigma).
        let sigma = 0.9f64;
        for r in [1.0, 0.375, 12.5, 2f64.powi(-20)] {
            let under = check_loss(2.0 - r, 2.0, sigma).unwrap();
            let over = check_loss(2.0 + r, 2.0, sigma).unwrap();
            assert_eq!(under.to_bits(), (sigma * r).to_bits());
            assert_eq!(over.to_bits(), ((1.0 - sigma) * r).to_bits());
        }
        let under = check_loss(1.0, 2.0, sigma).unwrap();
        let over = check_loss(3.0, 2.0, sigma).unwrap();
        assert_eq!((under / over).to_bits(), (sigma / (1.0 - sigma)).to_bits());
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            sigma: 0.9,
            eta_j: 1.0,
            eta_decay: 1.0,
            n_epochs: 2,
            n_rollouts: 4,
            rollout_t: 0.5,
            dt: 0.01,
            violation_rate: 1.0,
            window: ViolationWindow::Sliding,
            learning_rate: 5e-3,
            batch_size: 64,
            fit_passes: 2,
            hidden: vec![8],
            seed: 11,
            delta_max: 5.0,
            randomization: SystemDistribution {
                rom_dim: 1,
                k_v_range: (2.0, 3.0),
                x0_ranges: vec![(1.0, 3.0), (-0.5, 0.5)],
            },
        }
    }

    #[test]
    fn target_arithmetic() {
        // delta_theta(x) = 0.2, e = -0.5, eta = 1, delta_max = 5 -> 0.7
        let target = (0.2 - 1.0 * (-0.5f64)).clamp(0.0, 5.0);
        assert_relative_eq!(target, 0.7);
    }

    #[test]
    fn collect_epoch_zero_targets_when_never_violating() {
        // Fast tracking + interior starts: margins stay nonnegative, and a
        // zero model keeps targets clipped at zero.
        let cfg = TrainConfig {
            randomization: SystemDistribution {
                rom_dim: 1,
                k_v_range: (20.0, 25.0),
                x0_ranges: vec![(2.0, 3.0), (-0.1, 0.1)],
            },
            ..tiny_cfg()
        };
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        // A freshly initialized model is not exactly zero; force one by
        // zeroing the output layer (softplus(0) = ln 2, so shift the bias).
        let meta = TrainingMeta {
            seed: cfg.seed,
            sigma: cfg.sigma,
            delta_max: cfg.delta_max,
        };
        let mut model = DeltaModel::init(2, &cfg.hidden, meta).unwrap();
        let last = model.weights.len() - 1;
        model.weights[last].fill(0.0);
        model.biases[last].fill(-40.0); // softplus(-40) ~ 4e-18
        let data = collect_epoch(&cfg.randomization, &b, &k, &model, &cfg, 0).unwrap();
        assert!(!data.is_empty());
        assert!(data.violations.iter().all(|e| *e >= 0.0));
        assert!(data.targets.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn suffix_window_violations_non_decreasing() {
        let cfg = TrainConfig {
            n_rollouts: 1,
            window: ViolationWindow::ToEnd,
            ..tiny_cfg()
        };
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let meta = TrainingMeta {
            seed: cfg.seed,
            sigma: cfg.sigma,
            delta_max: cfg.delta_max,
        };
        let model = DeltaModel::init(2, &cfg.hidden, meta).unwrap();
        let data = collect_epoch(&cfg.randomization, &b, &k, &model, &cfg, 0).unwrap();
        for w in data.violations.windows(2) {
            assert!(w[0] <= w[1] + 1e-15);
        }
    }

    #[test]
    fn fit_constant_targets_reaches_them() {
        let cfg = TrainConfig {
            fit_passes: 400,
            learning_rate: 2e-2,
            ..tiny_cfg()
        };
        let meta = TrainingMeta {
            seed: 3,
            sigma: cfg.sigma,
            delta_max: cfg.delta_max,
        };
        let model = DeltaModel::init(1, &[8], meta).unwrap();
        let data = EpochDataset {
            states: (0..32).map(|_| DVector::from_row_slice(&[1.0])).collect(),
            violations: vec![0.0; 32],
            targets: vec![1.5; 32],
        };
        let fitted = fit(model, &data, &cfg, 0).unwrap();
        let out = fitted.forward(&DVector::from_row_slice(&[1.0]));
        assert!((out - 1.5).abs() < 1e-2, "fitted constant {out}");
    }

    #[test]
    fn fit_recovers_quantile_of_integer_targets() {
        // Constant feature, targets 0..9, sigma = 0.9: minimizer is the
        // interval [8, 9]; accept within one target gap of it.
        let cfg = TrainConfig {
            fit_passes: 1500,
            learning_rate: 2e-2,
            batch_size: 10,
            ..tiny_cfg()
        };
        let meta = TrainingMeta {
            seed: 5,
            sigma: 0.9,
            delta_max: 100.0,
        };
        let model = DeltaModel::init(1, &[], meta).unwrap();
        let data = EpochDataset {
            states: (0..10).map(|_| DVector::from_row_slice(&[1.0])).collect(),
            violations: vec![0.0; 10],
            targets: (0..10).map(|i| i as f64).collect(),
        };
        let fitted = fit(model, &data, &cfg, 0).unwrap();
        let out = fitted.forward(&DVector::from_row_slice(&[1.0]));
        assert!(
            (7.0..=10.0).contains(&out),
            "quantile estimate {out} outside [7, 10]"
        );
    }

    #[test]
    fn train_zero_epochs_returns_initial_model() {
        let cfg = TrainConfig {
            n_epochs: 0,
            ..tiny_cfg()
        };
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let (model, metrics) = train(&cfg.randomization, &b, &k, &cfg).unwrap();
        assert!(metrics.is_empty());
        let meta = TrainingMeta {
            seed: cfg.seed,
            sigma: cfg.sigma,
            delta_max: cfg.delta_max,
        };
        let fresh = DeltaModel::init(2, &cfg.hidden, meta).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn train_is_deterministic() {
        let cfg = tiny_cfg();
        let b = halfspace_barrier(1.0, 2.0).unwrap();
        let k = constant_controller(DVector::from_row_slice(&[-0.5]));
        let (m1, x1) = train(&cfg.randomization, &b, &k, &cfg).unwrap();
        let (m2, x2) = train(&cfg.randomization, &b, &k, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(model_to_json(&m1), model_to_json(&m2));
        for (a, b) in x1.iter().zip(&x2) {
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
            assert_eq!(a.frac_violating.to_bits(), b.frac_violating.to_bits());
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let metrics = vec![EpochMetrics {
            epoch: 0,
            mean_loss: 0.25,
            frac_violating: 0.5,
            wall_time_s: 1.0,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&metrics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,mean_loss,frac_violating,wall_time_s\n"));
        assert!(text.contains("0,2.50000000e-1,5.00000000e-1,"));
    }
}
