use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{backward, forward, ForwardTrace, LossGrads, ModelConfig, Network};
use crate::error::Result;
use crate::seeds::SeedAssignment;
use crate::types::LabelVector;

/// Per-image loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ic: f64,
    pub l_sc: f64,
    pub l_ss: f64,
    /// Squared weight norm (biases and frozen layers excluded), unweighted.
    pub l_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_ic: f64, l_sc: f64, l_ss: f64, l_reg: f64, cfg: &ModelConfig) -> Self {
        let total = l_ic
            + cfg.lambda_seed_cls * l_sc
            + (cfg.lambda_seed_sal / 2.0) * l_ss
            + (cfg.lambda_l2 / 2.0) * l_reg;
        Self {
            l_ic,
            l_sc,
            l_ss,
            l_reg,
            total,
        }
    }
}

/// `-Σ_{c∈T} log max(Φ(c, seed_c), ε)` and its gradient w.r.t. Φ.
pub fn loss_seed_classification(
    phi: ArrayView2<f64>,
    assignment: &SeedAssignment,
    epsilon: f64,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(phi.raw_dim());
    let mut loss = 0.0;
    for (&c, &i) in assignment.classes.iter().zip(&assignment.seeds) {
        let v = phi[(c, i)];
        if v > epsilon {
            loss -= v.ln();
            grad[(c, i)] -= 1.0 / v;
        } else {
            loss -= epsilon.ln();
        }
    }
    (loss, grad)
}

/// `Σ_{i∈Λs} (P_i - Q_i)^2` and its gradient w.r.t. P.
pub fn loss_seed_saliency(p: ArrayView1<f64>, assignment: &SeedAssignment) -> (f64, Array1<f64>) {
    let mut grad = Array1::zeros(p.len());
    let mut loss = 0.0;
    for (i, q) in assignment
        .sample_indices()
        .into_iter()
        .zip(assignment.targets())
    {
        let r = p[i] - q;
        loss += r * r;
        grad[i] += 2.0 * r;
    }
    (loss, grad)
}

/// Binary log loss on image scores: `-Σ_c log clamp(y_c(τ_c - ½) + ½, ε, 1)`.
pub fn loss_image_classification(
    tau: ArrayView1<f64>,
    labels: &LabelVector,
    epsilon: f64,
) -> (f64, Array1<f64>) {
    let mut grad = Array1::zeros(tau.len());
    let mut loss = 0.0;
    for (c, &y) in labels.values().iter().enumerate() {
        let y = f64::from(y);
        let arg = y * (tau[c] - 0.5) + 0.5;
        if arg > epsilon {
            let arg = arg.min(1.0);
            loss -= arg.ln();
            grad[c] = -y / arg;
        } else {
            loss -= epsilon.ln();
        }
    }
    (loss, grad)
}

/// Forward, all loss terms and the full parameter gradient for one image.
///
/// Without an assignment only the image-level and L2 terms contribute.
pub fn objective(
    net: &Network,
    cfg: &ModelConfig,
    features: &Array2<f64>,
    labels: &LabelVector,
    assignment: Option<&SeedAssignment>,
) -> Result<(LossBreakdown, Network, ForwardTrace)> {
    let trace = forward(net, cfg, features)?;
    let (l_ic, d_tau) = loss_image_classification(trace.tau.view(), labels, cfg.epsilon);
    let mut d_phi = Array2::zeros(trace.phi.raw_dim());
    let mut d_p = Array1::zeros(trace.num_proposals());
    let (mut l_sc, mut l_ss) = (0.0, 0.0);
    if let Some(a) = assignment {
        let (l, g) = loss_seed_classification(trace.phi.view(), a, cfg.epsilon);
        l_sc = l;
        d_phi.scaled_add(cfg.lambda_seed_cls, &g);
        if cfg.saliency_branch {
            let (l, g) = loss_seed_saliency(trace.p.view(), a);
            l_ss = l;
            d_p.scaled_add(cfg.lambda_seed_sal / 2.0, &g);
        }
    }
    let breakdown = LossBreakdown::combine(l_ic, l_sc, l_ss, net.regularized_norm_sq(cfg), cfg);
    let grads = backward(net, cfg, &trace, &LossGrads { d_phi, d_tau, d_p })?;
    Ok((breakdown, grads, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn assignment(classes: Vec<usize>, seeds: Vec<usize>, negatives: Vec<usize>) -> SeedAssignment {
        SeedAssignment {
            seed_scores: vec![],
            classes,
            seeds,
            negatives,
        }
    }

    #[test]
    fn seed_classification_examples() {
        let a = assignment(vec![0, 2], vec![1, 0], vec![]);
        let phi = array![[0.0, 1.0], [0.3, 0.0], [1.0, 0.0]];
        assert_eq!(loss_seed_classification(phi.view(), &a, 1e-8).0, 0.0);
        let phi = array![[0.0, 0.5], [0.3, 0.0], [0.5, 0.0]];
        let (l, g) = loss_seed_classification(phi.view(), &a, 1e-8);
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, array![[0.0, -2.0], [0.0, 0.0], [-2.0, 0.0]]);
    }

    #[test]
    fn seed_classification_clamps() {
        let a = assignment(vec![0], vec![0], vec![]);
        let (l, g) = loss_seed_classification(array![[0.0]].view(), &a, 1e-8);
        assert!((l + 1e-8f64.ln()).abs() < 1e-12);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn seed_saliency_examples() {
        let a = assignment(vec![1], vec![0], vec![1]);
        let (l, _) = loss_seed_saliency(array![1.0, 0.0].view(), &a);
        assert_eq!(l, 0.0);
        let (l, g) = loss_seed_saliency(array![0.5, 0.5].view(), &a);
        assert_eq!(l, 0.5);
        assert_eq!(g, array![-1.0, 1.0]);
    }

    #[test]
    fn image_classification_examples() {
        let labels = LabelVector::new(vec![1, -1]).unwrap();
        let (l, _) = loss_image_classification(array![1.0, 0.0].view(), &labels, 1e-8);
        assert_eq!(l, 0.0);
        let (l, g) = loss_image_classification(array![0.5, 0.5].view(), &labels, 1e-8);
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, array![-2.0, 2.0]);
        let (l, g) = loss_image_classification(array![0.0, 1.0].view(), &labels, 1e-8);
        assert!((l + 2.0 * 1e-8f64.ln()).abs() < 1e-9);
        assert_eq!(g, array![0.0, 0.0]);
    }

    #[test]
    fn breakdown_identity() {
        let cfg = ModelConfig::new(2, 2);
        let b = LossBreakdown::combine(0.7, 1.3, 0.4, 12.0, &cfg);
        assert_eq!(b.total, 0.7 + 0.1 * 1.3 + 0.5 * 0.4 + 2.5e-4 * 12.0);
    }
}
