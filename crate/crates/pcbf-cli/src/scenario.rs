//! Scenario configuration: TOML schema, defaults, and construction of the
//! library objects it describes.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use pcbf::barrier::{halfspace_barrier, obstacle_barrier, BarrierSpec, ObstacleField};
use pcbf::dynamics::{
    constant_controller, make_double_integrator, saturated_proportional, Controller, FomState,
    LayeredSystem,
};
use pcbf::certificates::CertificateConfig;
use pcbf::learner::{SystemDistribution, TrainConfig, ViolationWindow};
use pcbf::predictor::{Grid, GridAxis, PredictorConfig};
use pcbf::{Error, Result};

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_dt() -> f64 {
    1e-2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub system: SystemSection,
    pub barrier: BarrierSection,
    pub nominal: NominalSection,
    pub filter: FilterSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub certificate: CertificateSection,
    #[serde(default)]
    pub grid: Option<GridSection>,
    pub sim: SimSection,
    #[serde(default)]
    pub compare: CompareSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Only the integrator family is built in.
    #[serde(default = "SystemSection::default_family")]
    pub family: String,
    pub n: usize,
    pub k_v: f64,
}

impl SystemSection {
    fn default_family() -> String {
        "double-integrator".into()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    /// "halfspace" or "obstacles".
    pub kind: String,
    pub alpha: f64,
    pub alpha_x: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleEntry {
    pub c: Vec<f64>,
    pub r: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalSection {
    /// "constant" or "saturated-proportional".
    pub kind: String,
    #[serde(default)]
    pub value: Vec<f64>,
    #[serde(default)]
    pub k_p: f64,
    #[serde(default)]
    pub v_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    /// "nominal" | "constant" | "optimized" | "realtime" | "learned".
    pub mode: String,
    #[serde(default)]
    pub delta0: f64,
    #[serde(default)]
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub horizon_t: f64,
    pub eta: f64,
    pub max_iters: usize,
    pub dt: f64,
    pub tol: f64,
    pub delta_cap: f64,
    /// "alpha" (RoM rate) or "alpha-x" (full-order rate).
    pub violation_rate: String,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            horizon_t: 2.0,
            eta: 1.0,
            max_iters: 100,
            dt: default_dt(),
            tol: 1e-3,
            delta_cap: 5.0,
            violation_rate: "alpha".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::default_sigma")]
    pub sigma: f64,
    #[serde(default = "TrainSection::default_eta_j")]
    pub eta_j: f64,
    #[serde(default = "TrainSection::default_eta_decay")]
    pub eta_decay: f64,
    pub n_epochs: usize,
    pub n_rollouts: usize,
    pub rollout_t: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "TrainSection::default_window")]
    pub window: ViolationWindow,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub fit_passes: usize,
    #[serde(default = "TrainSection::default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "TrainSection::default_delta_max")]
    pub delta_max: f64,
    pub randomization: RandomizationSection,
}

impl TrainSection {
    fn default_sigma() -> f64 {
        0.9
    }
    fn default_eta_j() -> f64 {
        1.0
    }
    fn default_eta_decay() -> f64 {
        1.0
    }
    fn default_window() -> ViolationWindow {
        ViolationWindow::Sliding
    }
    fn default_hidden() -> Vec<usize> {
        vec![64, 64, 64]
    }
    fn default_delta_max() -> f64 {
        5.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizationSection {
    /// Uniform tracking-gain range [lo, hi].
    pub k_v: [f64; 2],
    /// Per-dimension uniform ranges for the initial FoM state.
    pub x0: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSection {
    pub duration: f64,
    pub dt: f64,
    /// Starts for constant estimation are sampled from this box.
    pub x0: Vec<[f64; 2]>,
    pub n_samples: usize,
    pub residual_tol: f64,
}

impl Default for CertificateSection {
    fn default() -> Self {
        Self {
            duration: 5.0,
            dt: default_dt(),
            x0: Vec::new(),
            n_samples: 40,
            residual_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Per-dimension [min, max, count]; count is rounded to an integer.
    pub axes: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub x0: Vec<f64>,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Report threshold on the sup-distance between optimized and learned
    /// trajectories; informational only.
    pub max_sup_distance: Option<f64>,
}

/// A loaded scenario with all defaults resolved.
pub struct Scenario {
    pub file: ScenarioFile,
}

impl Scenario {
    pub fn load(path: &Path, seed_override: &Option<u64>, out_override: &Option<PathBuf>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut file: ScenarioFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            file.seed = *seed;
        }
        if let Some(out) = out_override {
            file.out = out.clone();
        }
        let scenario = Self { file };
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<()> {
        let f = &self.file;
        if f.system.family != "double-integrator" {
            return Err(Error::Config(format!(
                "unknown system family '{}'",
                f.system.family
            )));
        }
        if f.sim.x0.len() != 2 * f.system.n {
            return Err(Error::Config(format!(
                "sim.x0 has length {}, expected {}",
                f.sim.x0.len(),
                2 * f.system.n
            )));
        }
        match f.barrier.kind.as_str() {
            "halfspace" => {
                if f.system.n != 1 {
                    return Err(Error::Config(
                        "halfspace barrier expects a scalar RoM (n = 1)".into(),
                    ));
                }
            }
            "obstacles" => {
                if f.barrier.obstacles.is_empty() {
                    return Err(Error::Config("obstacle barrier needs obstacles".into()));
                }
                for (i, o) in f.barrier.obstacles.iter().enumerate() {
                    if o.c.len() != f.system.n {
                        return Err(Error::Config(format!(
                            "obstacle {i} center has length {}, expected {}",
                            o.c.len(),
                            f.system.n
                        )));
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown barrier kind '{other}'"))),
        }
        match f.nominal.kind.as_str() {
            "constant" => {
                if f.nominal.value.len() != f.system.n {
                    return Err(Error::Config(format!(
                        "constant controller value has length {}, expected {}",
                        f.nominal.value.len(),
                        f.system.n
                    )));
                }
            }
            "saturated-proportional" => {
                if !(f.nominal.k_p > 0.0 && f.nominal.v_max > 0.0) {
                    return Err(Error::Config(
                        "saturated-proportional controller needs k_p > 0 and v_max > 0".into(),
                    ));
                }
            }
            other => return Err(Error::Config(format!("unknown controller kind '{other}'"))),
        }
        match f.filter.mode.as_str() {
            "nominal" | "constant" | "optimized" | "realtime" => {}
            "learned" => {
                let path = f.filter.model.as_ref().ok_or_else(|| {
                    Error::Config("learned filter mode needs filter.model".into())
                })?;
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "model file {} does not exist",
                        path.display()
                    )));
                }
            }
            other => return Err(Error::Config(format!("unknown filter mode '{other}'"))),
        }
        match f.predictor.violation_rate.as_str() {
            "alpha" | "alpha-x" => {}
            other => {
                return Err(Error::Config(format!(
                    "predictor.violation_rate must be 'alpha' or 'alpha-x', got '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// TOML with every default made explicit, for provenance copies.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(&self.file).expect("resolved scenario serializes")
    }

    pub fn build_system(&self) -> Result<LayeredSystem> {
        make_double_integrator(self.file.system.n, self.file.system.k_v)
    }

    pub fn build_barrier(&self) -> Result<BarrierSpec> {
        let b = &self.file.barrier;
        match b.kind.as_str() {
            "halfspace" => halfspace_barrier(b.alpha, b.alpha_x),
            "obstacles" => {
                let centers = b
                    .obstacles
                    .iter()
                    .map(|o| DVector::from_row_slice(&o.c))
                    .collect();
                let radii = b.obstacles.iter().map(|o| o.r).collect();
                obstacle_barrier(ObstacleField::new(centers, radii)?, b.alpha, b.alpha_x)
            }
            other => Err(Error::Config(format!("unknown barrier kind '{other}'"))),
        }
    }

    pub fn build_controller(&self) -> Result<Controller> {
        let n = &self.file.nominal;
        match n.kind.as_str() {
            "constant" => Ok(constant_controller(DVector::from_row_slice(&n.value))),
            "saturated-proportional" => Ok(saturated_proportional(n.k_p, n.v_max)),
            other => Err(Error::Config(format!("unknown controller kind '{other}'"))),
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        let p = &self.file.predictor;
        let rate = match p.violation_rate.as_str() {
            "alpha-x" => self.file.barrier.alpha_x,
            _ => self.file.barrier.alpha,
        };
        PredictorConfig {
            horizon_t: p.horizon_t,
            eta: p.eta,
            max_iters: p.max_iters,
            dt: p.dt,
            tol: p.tol,
            delta_cap: p.delta_cap,
            violation_rate: rate,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self
            .file
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("scenario has no [train] section".into()))?;
        Ok(TrainConfig {
            sigma: t.sigma,
            eta_j: t.eta_j,
            eta_decay: t.eta_decay,
            n_epochs: t.n_epochs,
            n_rollouts: t.n_rollouts,
            rollout_t: t.rollout_t,
            dt: t.dt,
            violation_rate: self.file.barrier.alpha,
            window: t.window,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            fit_passes: t.fit_passes,
            hidden: t.hidden.clone(),
            seed: self.file.seed,
            delta_max: t.delta_max,
            randomization: SystemDistribution {
                rom_dim: self.file.system.n,
                k_v_range: (t.randomization.k_v[0], t.randomization.k_v[1]),
                x0_ranges: t.randomization.x0.iter().map(|r| (r[0], r[1])).collect(),
            },
        })
    }

    pub fn certificate_config(&self) -> CertificateConfig {
        CertificateConfig {
            duration: self.file.certificate.duration,
            dt: self.file.certificate.dt,
            ..CertificateConfig::default()
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        let section = self
            .file
            .grid
            .as_ref()
            .ok_or_else(|| Error::Config("scenario has no [grid] section".into()))?;
        Ok(Grid {
            axes: section
                .axes
                .iter()
                .map(|a| GridAxis {
                    min: a[0],
                    max: a[1],
                    count: a[2].round() as usize,
                })
                .collect(),
        })
    }

    pub fn x0(&self) -> FomState {
        FomState(DVector::from_row_slice(&self.file.sim.x0))
    }
}
