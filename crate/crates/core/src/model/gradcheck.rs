//! Central finite-difference check of the analytic gradient of the full
//! per-image objective (image loss, both seed losses, L2).
//!
//! The numerical side only calls [`forward`](super::forward) and the loss
//! functions, so it is independent of the backward pass it checks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{init_params, objective, ModelConfig, Network};
use crate::error::Result;
use crate::seeds::SeedAssignment;
use crate::types::LabelVector;

/// Denominator floor of the relative error. Central differences in `f64` with
/// a 1e-5 step carry ~1e-10 absolute error, so entries far below this floor
/// are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;
/// Instances are resampled while any ReLU pre-activation is closer than this to 0.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub step: f64,
    pub seed: u64,
    pub trunk_widths: Vec<usize>,
    pub saliency_hidden: usize,
    pub class_choices: Vec<usize>,
    pub proposal_choices: Vec<usize>,
    pub dim_choices: Vec<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-5,
            seed: 0,
            trunk_widths: vec![8, 6],
            saliency_hidden: 5,
            class_choices: vec![2, 5],
            proposal_choices: vec![1, 3, 8],
            dim_choices: vec![4, 16],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceReport {
    pub num_classes: usize,
    pub num_proposals: usize,
    pub feature_dim: usize,
    pub saliency_branch: bool,
    pub max_rel_error: f64,
    pub worst_tensor: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub parameters_checked: usize,
    pub instances: Vec<InstanceReport>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// One random problem: a network, its inputs and supervision.
pub struct Instance {
    pub config: ModelConfig,
    pub net: Network,
    pub features: Array2<f64>,
    pub labels: LabelVector,
    pub assignment: SeedAssignment,
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    gc: &GradCheckConfig,
    classes: usize,
    proposals: usize,
    dim: usize,
    saliency_branch: bool,
) -> Result<Instance> {
    let config = ModelConfig {
        trunk_widths: gc.trunk_widths.clone(),
        saliency_hidden: gc.saliency_hidden,
        saliency_branch,
        ..ModelConfig::new(dim, classes)
    };
    for _ in 0..1000 {
        let mut params = init_params(&config, rng.random())?;
        for t in params.net.tensors_mut() {
            if !t.is_weight {
                for v in t.values.iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let features =
            Array2::from_shape_fn((proposals, dim), |_| StandardNormal.sample(&mut *rng));
        let trace = params.forward(&features)?;
        let near_kink = trace
            .trunk_pre
            .iter()
            .chain(saliency_branch.then_some(&trace.saliency_pre))
            .flat_map(|z| z.iter())
            .any(|z| z.abs() < KINK_MARGIN);
        if near_kink {
            continue;
        }
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(rng);
        let n_pos = rng.random_range(1..=classes);
        let mut positives = order[..n_pos].to_vec();
        positives.sort_unstable();
        let labels = LabelVector::from_positives(classes, &positives);
        let seeds: Vec<usize> = positives
            .iter()
            .map(|_| rng.random_range(0..proposals))
            .collect();
        let mut free: Vec<usize> = (0..proposals).filter(|i| !seeds.contains(i)).collect();
        free.shuffle(rng);
        free.truncate(positives.len());
        let assignment = SeedAssignment {
            classes: positives,
            seeds,
            seed_scores: Vec::new(),
            negatives: free,
        };
        return Ok(Instance {
            config,
            net: params.net,
            features,
            labels,
            assignment,
        });
    }
    Err(crate::error::Error::Config(
        "could not sample an instance away from ReLU kinks".into(),
    ))
}

fn total_loss(inst: &Instance, net: &Network) -> Result<f64> {
    Ok(objective(
        net,
        &inst.config,
        &inst.features,
        &inst.labels,
        Some(&inst.assignment),
    )?
    .0
    .total)
}

/// Central differences of the total loss w.r.t. every parameter.
pub fn numerical_gradient(inst: &Instance, step: f64) -> Result<Network> {
    let mut grad = Network::zeros(&inst.config);
    let mut probe = inst.net.clone();
    let sizes: Vec<usize> = inst.net.tensors().iter().map(|t| t.values.len()).collect();
    for (ti, &size) in sizes.iter().enumerate() {
        for j in 0..size {
            let orig = probe.tensors()[ti].values[j];
            probe.tensors_mut()[ti].values[j] = orig + step;
            let plus = total_loss(inst, &probe)?;
            probe.tensors_mut()[ti].values[j] = orig - step;
            let minus = total_loss(inst, &probe)?;
            probe.tensors_mut()[ti].values[j] = orig;
            grad.tensors_mut()[ti].values[j] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Max relative error per instance and overall.
pub fn check_instance(inst: &Instance, step: f64) -> Result<(f64, String, usize)> {
    let (_, analytic, _) = objective(
        &inst.net,
        &inst.config,
        &inst.features,
        &inst.labels,
        Some(&inst.assignment),
    )?;
    let numeric = numerical_gradient(inst, step)?;
    let mut worst = (0.0, String::new());
    let mut count = 0;
    for (a, n) in analytic.tensors().iter().zip(numeric.tensors()) {
        for (&x, &y) in a.values.iter().zip(n.values) {
            count += 1;
            let e = relative_error(x, y);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), a.name.clone());
            }
        }
    }
    Ok((worst.0, worst.1, count))
}

pub fn run(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        parameters_checked: 0,
        instances: Vec::with_capacity(gc.instances),
    };
    let combos: Vec<(usize, usize, usize)> = gc
        .class_choices
        .iter()
        .flat_map(|&c| {
            gc.proposal_choices
                .iter()
                .flat_map(move |&n| gc.dim_choices.iter().map(move |&d| (c, n, d)))
        })
        .collect();
    for k in 0..gc.instances {
        let (c, n, d) = combos[k % combos.len()];
        // every fourth instance runs with the saliency branch bypassed
        let branch = k % 4 != 3;
        let inst = random_instance(&mut rng, gc, c, n, d, branch)?;
        let (err, tensor, count) = check_instance(&inst, gc.step)?;
        report.parameters_checked += count;
        if err > report.max_rel_error || report.worst_tensor.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_tensor = tensor.clone();
        }
        report.instances.push(InstanceReport {
            num_classes: c,
            num_proposals: n,
            feature_dim: d,
            saliency_branch: branch,
            max_rel_error: err,
            worst_tensor: tensor,
        });
    }
    Ok(report)
}
