//! The learnable network.
//!
//! A shared ReLU trunk maps each proposal feature to `h_i`. A saliency branch
//! (hidden ReLU layer, scalar sigmoid) predicts `P_i`, and `g_i = P_i * h_i`
//! feeds two linear streams: a softmax over classes per proposal and a softmax
//! over proposals per class. Their elementwise product is the score matrix Φ
//! and its row sums are the image-level scores τ.
//!
//! All arithmetic is `f64`; checkpoints store `f32`.

mod backward;
mod checkpoint;
mod forward;
pub mod gradcheck;
mod loss;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, LossGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{forward, ForwardTrace};
pub use loss::{
    loss_image_classification, loss_seed_classification, loss_seed_saliency, objective,
    LossBreakdown,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub trunk_widths: Vec<usize>,
    pub saliency_hidden: usize,
    pub num_classes: usize,
    /// Lower clamp for log arguments.
    pub epsilon: f64,
    /// Weight of the seed classification loss (λ1).
    pub lambda_seed_cls: f64,
    /// Weight of the seed saliency loss (λ2).
    pub lambda_seed_sal: f64,
    /// L2 weight (λ3); biases are not regularized.
    pub lambda_l2: f64,
    /// When false, P ≡ 1 and the saliency branch is bypassed.
    pub saliency_branch: bool,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            trunk_widths: vec![128, 128],
            saliency_hidden: 32,
            num_classes,
            epsilon: 1e-8,
            lambda_seed_cls: 0.1,
            lambda_seed_sal: 1.0,
            lambda_l2: 5e-4,
            saliency_branch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.num_classes == 0 {
            return bad("feature_dim and num_classes must be at least 1".into());
        }
        if self.saliency_hidden == 0 || self.trunk_widths.contains(&0) {
            return bad(format!(
                "layer widths must be at least 1 (trunk {:?}, saliency {})",
                self.trunk_widths, self.saliency_hidden
            ));
        }
        for (name, l) in [
            ("lambda1", self.lambda_seed_cls),
            ("lambda2", self.lambda_seed_sal),
            ("lambda3", self.lambda_l2),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {l}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return bad(format!(
                "epsilon must lie in (0, 1e-3), got {}",
                self.epsilon
            ));
        }
        Ok(())
    }

    /// Output width of the trunk.
    pub fn trunk_out(&self) -> usize {
        self.trunk_widths
            .last()
            .copied()
            .unwrap_or(self.feature_dim)
    }
}

/// Fully connected layer, `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// One tensor of a [`Network`] in declaration order.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
    pub is_weight: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub is_weight: bool,
}

/// A full set of layer tensors. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub trunk: Vec<Dense>,
    pub saliency_hidden: Dense,
    pub saliency_out: Dense,
    pub cls: Dense,
    pub det: Dense,
}

impl Network {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut trunk = Vec::with_capacity(cfg.trunk_widths.len());
        let mut fan_in = cfg.feature_dim;
        for &w in &cfg.trunk_widths {
            trunk.push(Dense::zeros(w, fan_in));
            fan_in = w;
        }
        Self {
            trunk,
            saliency_hidden: Dense::zeros(cfg.saliency_hidden, fan_in),
            saliency_out: Dense::zeros(1, cfg.saliency_hidden),
            cls: Dense::zeros(cfg.num_classes, fan_in),
            det: Dense::zeros(cfg.num_classes, fan_in),
        }
    }

    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(k, d)| (format!("trunk.{k}"), d))
            .collect();
        out.push(("saliency.hidden".into(), &self.saliency_hidden));
        out.push(("saliency.out".into(), &self.saliency_out));
        out.push(("cls".into(), &self.cls));
        out.push(("det".into(), &self.det));
        out
    }

    fn layers_mut(&mut self) -> Vec<(String, &mut Dense)> {
        let mut out: Vec<(String, &mut Dense)> = self
            .trunk
            .iter_mut()
            .enumerate()
            .map(|(k, d)| (format!("trunk.{k}"), d))
            .collect();
        out.push(("saliency.hidden".into(), &mut self.saliency_hidden));
        out.push(("saliency.out".into(), &mut self.saliency_out));
        out.push(("cls".into(), &mut self.cls));
        out.push(("det".into(), &mut self.det));
        out
    }

    /// Weight then bias for every layer, trunk first, then saliency, cls, det.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.layers()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    TensorRef {
                        name: format!("{name}.weight"),
                        shape: d.weight.shape().to_vec(),
                        values: d.weight.as_slice().expect("standard layout"),
                        is_weight: true,
                    },
                    TensorRef {
                        name: format!("{name}.bias"),
                        shape: d.bias.shape().to_vec(),
                        values: d.bias.as_slice().expect("standard layout"),
                        is_weight: false,
                    },
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(name, d)| {
                let Dense { weight, bias } = d;
                [
                    TensorMut {
                        name: format!("{name}.weight"),
                        values: weight.as_slice_mut().expect("standard layout"),
                        is_weight: true,
                    },
                    TensorMut {
                        name: format!("{name}.bias"),
                        values: bias.as_slice_mut().expect("standard layout"),
                        is_weight: false,
                    },
                ]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    /// Sum of squared weights, biases excluded.
    pub fn weight_norm_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.is_weight)
            .flat_map(|t| t.values.iter())
            .map(|w| w * w)
            .sum()
    }

    /// Squared norm of the weights that receive gradient under `cfg`.
    pub fn regularized_norm_sq(&self, cfg: &ModelConfig) -> f64 {
        self.tensors()
            .iter()
            .filter(|t| t.is_weight && (cfg.saliency_branch || !t.name.starts_with("saliency")))
            .flat_map(|t| t.values.iter())
            .map(|w| w * w)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

/// Weights, momentum buffers and the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub net: Network,
    pub velocity: Network,
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and momentum zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::zeros(config);
    for (_, layer) in net.layers_mut() {
        let fan_in = layer.weight.ncols();
        let scale = 1.0 / (fan_in as f64).sqrt();
        layer
            .weight
            .mapv_inplace(|_| rng.random_range(-scale..scale));
    }
    Ok(ModelParams {
        config: config.clone(),
        velocity: Network::zeros(config),
        net,
    })
}

impl ModelParams {
    /// All-zero weights and biases.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            net: Network::zeros(config),
            velocity: Network::zeros(config),
        })
    }

    pub fn forward(&self, features: &Array2<f64>) -> Result<ForwardTrace> {
        forward(&self.net, &self.config, features)
    }
}
