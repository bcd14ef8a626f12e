//! End-to-end SGD with momentum over a dataset, one image per step.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{init_params, objective, LossBreakdown, ModelConfig, ModelParams, Network};
use crate::seeds::{self, SeedAssignment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Last epoch (1-based) trained with `lr_phase1`.
    pub phase_boundary: usize,
    pub momentum: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub sigma: f64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    /// Drops both seed losses (λ1 = λ2 = 0).
    pub disable_seed_losses: bool,
    /// Bypasses the saliency branch (P ≡ 1) and its loss.
    pub disable_saliency_subnet: bool,
    /// Std-dev of Gaussian noise added to features each step; 0 disables.
    pub feature_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr_phase1: 1e-5,
            lr_phase2: 1e-6,
            phase_boundary: 10,
            momentum: 0.9,
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 5e-4,
            sigma: seeds::DEFAULT_SIGMA,
            shuffle_seed: 0,
            init_seed: 0,
            disable_seed_losses: false,
            disable_saliency_subnet: false,
            feature_jitter: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {l}"));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.feature_jitter >= 0.0 && self.feature_jitter.is_finite()) {
            return bad(format!(
                "feature jitter must be non-negative, got {}",
                self.feature_jitter
            ));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.phase_boundary {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    /// The model config actually trained: loss weights and ablation flags applied.
    pub fn effective_model(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.lambda_seed_cls = self.lambda1;
        cfg.lambda_seed_sal = self.lambda2;
        cfg.lambda_l2 = self.lambda3;
        if self.disable_seed_losses {
            cfg.lambda_seed_cls = 0.0;
            cfg.lambda_seed_sal = 0.0;
        }
        if self.disable_saliency_subnet {
            cfg.saliency_branch = false;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<PathBuf>,
}

/// Training stopped early; `last_good` holds the parameters before the failing step.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TrainError {
    #[source]
    pub source: Error,
    pub last_good: Option<Box<ModelParams>>,
    pub log: TrainLog,
}

impl From<Error> for TrainError {
    fn from(source: Error) -> Self {
        Self {
            source,
            last_good: None,
            log: TrainLog::default(),
        }
    }
}

/// Seeds and negatives per image id. Independent of the network weights.
pub fn precompute_assignments(
    dataset: &Dataset,
    sigma: f64,
) -> Result<BTreeMap<String, SeedAssignment>> {
    dataset
        .records
        .par_iter()
        .map(|r| seeds::assign(r, sigma).map(|a| (r.id.clone(), a)))
        .collect()
}

/// `v ← μ·v + g; w ← w − lr·v`. Rejects non-finite gradients before touching `params`.
pub fn sgd_step(params: &mut ModelParams, grads: &Network, lr: f64, momentum: f64) -> Result<()> {
    let shapes_match = params
        .net
        .tensors()
        .iter()
        .zip(grads.tensors())
        .all(|(a, b)| a.shape == b.shape)
        && params.net.tensors().len() == grads.tensors().len();
    if !shapes_match {
        return Err(Error::Shape(
            "gradient shapes do not match parameters".into(),
        ));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let ModelParams { net, velocity, .. } = params;
    for ((w, v), g) in net
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grads.tensors())
    {
        for ((wi, vi), gi) in w.values.iter_mut().zip(v.values.iter_mut()).zip(g.values) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Initializes from `train_cfg.init_seed` and trains.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> std::result::Result<(ModelParams, TrainLog), TrainError> {
    train_cfg.validate()?;
    let cfg = train_cfg.effective_model(model_cfg);
    let params = init_params(&cfg, train_cfg.init_seed)?;
    train_from(dataset, params, train_cfg)
}

/// Trains existing parameters. Loss weights and ablation flags come from `train_cfg`.
pub fn train_from(
    dataset: &Dataset,
    mut params: ModelParams,
    train_cfg: &TrainConfig,
) -> std::result::Result<(ModelParams, TrainLog), TrainError> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()).into());
    }
    params.config = train_cfg.effective_model(&params.config);
    params.config.validate()?;
    if params.config.feature_dim != dataset.feature_dim()
        || params.config.num_classes != dataset.num_classes()
    {
        return Err(Error::Shape(format!(
            "model expects D={} C={}, dataset has D={} C={}",
            params.config.feature_dim,
            params.config.num_classes,
            dataset.feature_dim(),
            dataset.num_classes()
        ))
        .into());
    }

    let assignments = precompute_assignments(dataset, train_cfg.sigma)?;
    let features: Vec<Array2<f64>> = dataset
        .records
        .iter()
        .map(|r| r.features.to_array())
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.shuffle_seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(train_cfg.shuffle_seed ^ 0x6a09_e667_f3bc_c908);
    let jitter = (train_cfg.feature_jitter > 0.0)
        .then(|| Normal::new(0.0, train_cfg.feature_jitter).expect("validated"));
    let mut log = TrainLog::default();

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        let lr = train_cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for &k in &order {
            let record = &dataset.records[k];
            let x = match &jitter {
                Some(dist) => features[k].mapv(|v| v + dist.sample(&mut jitter_rng)),
                None => features[k].clone(),
            };
            let step = objective(
                &params.net,
                &params.config,
                &x,
                &record.labels,
                Some(&assignments[&record.id]),
            )
            .and_then(|(loss, grads, _)| {
                if !loss.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        loss: loss.total,
                    });
                }
                sgd_step(&mut params, &grads, lr, train_cfg.momentum)?;
                Ok(loss)
            });
            let loss = match step {
                Ok(loss) => loss,
                Err(source) => {
                    let source = match source {
                        Error::NonFinite(_) => Error::Diverged {
                            epoch,
                            loss: f64::NAN,
                        },
                        other => other,
                    };
                    return Err(TrainError {
                        source,
                        last_good: Some(Box::new(params)),
                        log,
                    });
                }
            };
            sum.l_ic += loss.l_ic;
            sum.l_sc += loss.l_sc;
            sum.l_ss += loss.l_ss;
            sum.l_reg += loss.l_reg;
            sum.total += loss.total;
        }
        let n = dataset.len() as f64;
        let mean = LossBreakdown {
            l_ic: sum.l_ic / n,
            l_sc: sum.l_sc / n,
            l_ss: sum.l_ss / n,
            l_reg: sum.l_reg / n,
            total: sum.total / n,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.1e} total {:.4} ic {:.4} sc {:.4} ss {:.4}",
            mean.total,
            mean.l_ic,
            mean.l_sc,
            mean.l_ss
        );
        log.epochs.push(EpochLog {
            epoch,
            lr,
            mean,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, SynthConfig};

    fn tiny_model(d: usize, c: usize) -> ModelConfig {
        ModelConfig {
            trunk_widths: vec![8],
            saliency_hidden: 4,
            ..ModelConfig::new(d, c)
        }
    }

    #[test]
    fn schedule_defaults() {
        let t = TrainConfig::default();
        for e in 1..=10 {
            assert_eq!(t.learning_rate(e), 1e-5);
        }
        for e in 11..=20 {
            assert_eq!(t.learning_rate(e), 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_phase1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let cfg = tiny_model(3, 2);
        let mut p = init_params(&cfg, 1).unwrap();
        let before = p.net.clone();
        let mut g = Network::zeros(&cfg);
        g.cls.weight.fill(0.5);
        sgd_step(&mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p.net.cls.weight, &before.cls.weight - 0.05);
        assert_eq!(p.net.det, before.det);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = tiny_model(3, 2);
        let mut p = init_params(&cfg, 1).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &Network::zeros(&cfg), 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let cfg = tiny_model(3, 2);
        let mut p = init_params(&cfg, 1).unwrap();
        let before = p.clone();
        let mut g = Network::zeros(&cfg);
        g.det.bias[0] = f64::NAN;
        assert!(sgd_step(&mut p, &g, 0.1, 0.9).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn heavy_ball_on_quadratic() {
        // f(w) = w^2 / 2, gradient w
        let cfg = ModelConfig {
            trunk_widths: vec![],
            saliency_hidden: 1,
            ..ModelConfig::new(1, 1)
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.net.cls.bias[0] = 1.0;
        let mut converged_at = None;
        for step in 1..=200 {
            let mut g = Network::zeros(&cfg);
            g.cls.bias[0] = p.net.cls.bias[0];
            sgd_step(&mut p, &g, 0.1, 0.9).unwrap();
            if p.net.cls.bias[0].abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(p.net.cls.bias[0].abs() < 1e-3, "w = {}", p.net.cls.bias[0]);
        assert!(converged_at.is_some());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let ds = generate_synthetic(&SynthConfig {
            num_images: 4,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let tc = TrainConfig {
            epochs: 1,
            lr_phase1: 0.0,
            lr_phase2: 0.0,
            ..Default::default()
        };
        let mc = tiny_model(ds.feature_dim(), ds.num_classes());
        let init = init_params(&tc.effective_model(&mc), tc.init_seed).unwrap();
        let (trained, log) = train(&ds, &mc, &tc).unwrap();
        assert_eq!(trained.net, init.net);
        assert_eq!(log.epochs.len(), 1);
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = generate_synthetic(&SynthConfig {
            num_images: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let err = train(&ds, &tiny_model(16, 4), &TrainConfig::default()).unwrap_err();
        assert!(err.source.is_validation());
    }

    #[test]
    fn divergence_keeps_last_good_params() {
        let ds = generate_synthetic(&SynthConfig {
            num_images: 3,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let tc = TrainConfig {
            epochs: 3,
            lr_phase1: 1e300,
            momentum: 0.0,
            ..Default::default()
        };
        let err = train(&ds, &tiny_model(16, 4), &tc).unwrap_err();
        assert!(
            matches!(err.source, Error::Diverged { .. }),
            "{}",
            err.source
        );
        let last = err.last_good.expect("last good params");
        assert!(last.net.all_finite());
    }

    #[test]
    fn precompute_matches_per_image_calls() {
        let ds = generate_synthetic(&SynthConfig {
            num_images: 6,
            noise_amplitude: 0.0,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap();
        let all = precompute_assignments(&ds, 1e3).unwrap();
        assert_eq!(all, precompute_assignments(&ds, 1e3).unwrap());
        for r in &ds.records {
            assert_eq!(all[&r.id], seeds::assign(r, 1e3).unwrap());
        }
    }
}
