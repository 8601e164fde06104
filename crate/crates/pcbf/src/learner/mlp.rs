//! Dense network realizing the nonnegative buffer delta_theta(x): tanh
//! hidden layers and a softplus output map, with manual backpropagation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub sigma: f64,
    pub delta_max: f64,
}

/// The buffer network. `layer_sizes` runs input..output (output is 1);
/// weight matrices are `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaModel {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
    pub meta: TrainingMeta,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DeltaModel {
    /// Seeded uniform Xavier initialization.
    pub fn init(input_dim: usize, hidden: &[usize], meta: TrainingMeta) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("model input dimension must be >= 1".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be >= 1".into()));
        }
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input_dim);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);
        let mut rng = ChaCha20Rng::seed_from_u64(meta.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let fan_in = layer_sizes[l];
            let fan_out = layer_sizes[l + 1];
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-scale..scale)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            activation: Activation::Tanh,
            output_transform: OutputTransform::Softplus,
            meta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// delta_theta(x) >= 0 by the softplus output map.
    pub fn forward(&self, x: &DVector<f64>) -> f64 {
        self.forward_cached(x).output
    }

    pub(crate) fn forward_cached(&self, x: &DVector<f64>) -> ForwardCache {
        debug_assert_eq!(x.len(), self.input_dim());
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(last + 1);
        activations.push(x.clone());
        for l in 0..last {
            let s = &self.weights[l] * activations.last().unwrap() + &self.biases[l];
            activations.push(s.map(f64::tanh));
        }
        let pre = (&self.weights[last] * activations.last().unwrap() + &self.biases[last])[0];
        ForwardCache {
            output: softplus(pre),
            pre_output: pre,
            activations,
        }
    }

    /// Accumulate d(upstream * output)/d(theta) into `grads`.
    pub(crate) fn backward(&self, cache: &ForwardCache, upstream: f64, grads: &mut Grads) {
        let last = self.num_layers() - 1;
        // Through the output map.
        let mut delta = DVector::from_element(1, upstream * sigmoid(cache.pre_output));
        for l in (0..=last).rev() {
            let a_prev = &cache.activations[l];
            grads.weights[l] += &delta * a_prev.transpose();
            grads.biases[l] += &delta;
            if l > 0 {
                let back = self.weights[l].transpose() * &delta;
                // tanh'(s) = 1 - a^2 with a the cached activation.
                delta = back.zip_map(&cache.activations[l], |g, a| g * (1.0 - a * a));
            }
        }
    }
}

pub(crate) struct ForwardCache {
    pub output: f64,
    pub pre_output: f64,
    pub activations: Vec<DVector<f64>>,
}

pub(crate) struct Grads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &DeltaModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn reset(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }
}

/// On-disk JSON layout.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    layer_sizes: Vec<usize>,
    activation: Activation,
    output_transform: OutputTransform,
    /// Per layer, row-major: weights[l][row][col].
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    training_meta: TrainingMeta,
}

pub fn model_to_json(model: &DeltaModel) -> String {
    let file = ModelFile {
        layer_sizes: model.layer_sizes.clone(),
        activation: model.activation,
        output_transform: model.output_transform,
        weights: model
            .weights
            .iter()
            .map(|w| {
                (0..w.nrows())
                    .map(|r| w.row(r).iter().cloned().collect())
                    .collect()
            })
            .collect(),
        biases: model.biases.iter().map(|b| b.iter().cloned().collect()).collect(),
        training_meta: model.meta,
    };
    serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
}

pub fn model_from_json(text: &str) -> Result<DeltaModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model JSON: {e}")))?;
    let n_layers = file.layer_sizes.len();
    if n_layers < 2 || *file.layer_sizes.last().unwrap() != 1 {
        return Err(Error::Format(
            "layer_sizes must run input..1 with at least two entries".into(),
        ));
    }
    if file.weights.len() != n_layers - 1 || file.biases.len() != n_layers - 1 {
        return Err(Error::Format("layer count mismatch".into()));
    }
    let mut weights = Vec::with_capacity(n_layers - 1);
    let mut biases = Vec::with_capacity(n_layers - 1);
    for l in 0..n_layers - 1 {
        let rows = file.layer_sizes[l + 1];
        let cols = file.layer_sizes[l];
        let wl = &file.weights[l];
        if wl.len() != rows || wl.iter().any(|r| r.len() != cols) {
            return Err(Error::Format(format!("weight matrix {l} has wrong shape")));
        }
        let flat: Vec<f64> = wl.iter().flatten().cloned().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("weight matrix {l} has non-finite entries")));
        }
        weights.push(DMatrix::from_row_slice(rows, cols, &flat));
        if file.biases[l].len() != rows {
            return Err(Error::Format(format!("bias vector {l} has wrong length")));
        }
        if file.biases[l].iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("bias vector {l} has non-finite entries")));
        }
        biases.push(DVector::from_row_slice(&file.biases[l]));
    }
    Ok(DeltaModel {
        layer_sizes: file.layer_sizes,
        weights,
        biases,
        activation: file.activation,
        output_transform: file.output_transform,
        meta: file.training_meta,
    })
}

pub fn save_model<P: AsRef<Path>>(model: &DeltaModel, path: P) -> Result<()> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<DeltaModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TrainingMeta {
        TrainingMeta {
            seed: 7,
            sigma: 0.9,
            delta_max: 5.0,
        }
    }

    #[test]
    fn output_is_nonnegative() {
        let model = DeltaModel::init(3, &[16, 16], meta()).unwrap();
        let mut s = 99u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 33) as f64 / (1u64 << 31) as f64) * 20.0 - 10.0
        };
        for _ in 0..500 {
            let x = DVector::from_fn(3, |_, _| next());
            assert!(model.forward(&x) >= 0.0);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = DeltaModel::init(2, &[8], meta()).unwrap();
        let b = DeltaModel::init(2, &[8], meta()).unwrap();
        assert_eq!(a, b);
        let c = DeltaModel::init(
            2,
            &[8],
            TrainingMeta {
                seed: 8,
                ..meta()
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let model = DeltaModel::init(4, &[8, 8], meta()).unwrap();
        let text = model_to_json(&model);
        let back = model_from_json(&text).unwrap();
        assert_eq!(model, back);
        let x = DVector::from_row_slice(&[0.1, -2.0, 3.7, 0.0]);
        assert_eq!(model.forward(&x).to_bits(), back.forward(&x).to_bits());
    }

    #[test]
    fn corrupt_model_is_a_format_error() {
        assert!(matches!(
            model_from_json("{\"nope\": 1}"),
            Err(Error::Format(_))
        ));
        let model = DeltaModel::init(2, &[4], meta()).unwrap();
        let mut text = model_to_json(&model);
        // Break a shape: change a declared layer size.
        text = text.replace("\"layer_sizes\": [\n    2,", "\"layer_sizes\": [\n    3,");
        assert!(matches!(model_from_json(&text), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = DeltaModel::init(2, &[4], meta()).unwrap();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
    }
}
