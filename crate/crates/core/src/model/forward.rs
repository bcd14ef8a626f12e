use ndarray::{Array1, Array2, Axis};

use super::{ModelConfig, Network};
use crate::error::{Error, Result};

const SOFTMAX_SUM_TOL: f64 = 1e-6;

/// Cached activations of one forward pass over `N` proposals.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `N × D` input.
    pub input: Array2<f64>,
    /// Pre-activations of each trunk layer.
    pub trunk_pre: Vec<Array2<f64>>,
    /// ReLU outputs of each trunk layer.
    pub trunk_act: Vec<Array2<f64>>,
    pub saliency_pre: Array2<f64>,
    pub saliency_act: Array2<f64>,
    pub saliency_logit: Array1<f64>,
    /// Category-free saliency in `[0, 1]`, length `N`. All ones when the branch is off.
    pub p: Array1<f64>,
    /// `g_i = P_i * h_i`, `N × W`.
    pub weighted: Array2<f64>,
    /// Softmax over classes per proposal, `C × N`.
    pub cls_softmax: Array2<f64>,
    /// Softmax over proposals per class, `C × N`.
    pub det_softmax: Array2<f64>,
    /// `C × N` elementwise product of the two streams.
    pub phi: Array2<f64>,
    /// Row sums of `phi`, clamped to `[0, 1]`.
    pub tau: Array1<f64>,
}

impl ForwardTrace {
    /// Trunk output `h`.
    pub fn trunk_out(&self) -> &Array2<f64> {
        self.trunk_act.last().unwrap_or(&self.input)
    }

    pub fn num_proposals(&self) -> usize {
        self.input.nrows()
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(x: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    x.dot(&weight.t()) + bias
}

fn check_finite(name: &str, values: &Array2<f64>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Softmax along `axis` with max subtraction.
fn softmax(scores: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = scores.clone();
    for mut lane in out.lanes_mut(axis) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    out
}

pub fn forward(net: &Network, cfg: &ModelConfig, features: &Array2<f64>) -> Result<ForwardTrace> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Shape("forward needs at least one proposal".into()));
    }
    if features.ncols() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            cfg.feature_dim
        )));
    }
    check_finite("input features", features)?;

    let mut trunk_pre = Vec::with_capacity(net.trunk.len());
    let mut trunk_act: Vec<Array2<f64>> = Vec::with_capacity(net.trunk.len());
    for (k, layer) in net.trunk.iter().enumerate() {
        let x = trunk_act.last().unwrap_or(features);
        let z = affine(x, &layer.weight, &layer.bias);
        check_finite(&format!("trunk layer {k}"), &z)?;
        trunk_act.push(relu(&z));
        trunk_pre.push(z);
    }
    let h = trunk_act.last().unwrap_or(features);

    let (saliency_pre, saliency_act, saliency_logit, p) = if cfg.saliency_branch {
        let z = affine(h, &net.saliency_hidden.weight, &net.saliency_hidden.bias);
        check_finite("saliency hidden layer", &z)?;
        let a = relu(&z);
        let logit = affine(&a, &net.saliency_out.weight, &net.saliency_out.bias)
            .column(0)
            .to_owned();
        if logit.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("saliency output layer".into()));
        }
        let p = logit.mapv(sigmoid);
        (z, a, logit, p)
    } else {
        (
            Array2::zeros((n, cfg.saliency_hidden)),
            Array2::zeros((n, cfg.saliency_hidden)),
            Array1::zeros(n),
            Array1::ones(n),
        )
    };

    let weighted = h * &p.view().insert_axis(Axis(1));
    let cls_scores = affine(&weighted, &net.cls.weight, &net.cls.bias).reversed_axes();
    check_finite("classification stream", &cls_scores)?;
    let det_scores = affine(&weighted, &net.det.weight, &net.det.bias).reversed_axes();
    check_finite("detection stream", &det_scores)?;

    let cls_softmax = softmax(&cls_scores, Axis(0));
    let det_softmax = softmax(&det_scores, Axis(1));
    let phi = &cls_softmax * &det_softmax;
    let tau = phi.sum_axis(Axis(1)).mapv(|t| t.clamp(0.0, 1.0));

    let trace = ForwardTrace {
        input: features.clone(),
        trunk_pre,
        trunk_act,
        saliency_pre,
        saliency_act,
        saliency_logit,
        p,
        weighted,
        cls_softmax,
        det_softmax,
        phi,
        tau,
    };
    check_invariants(&trace)?;
    Ok(trace)
}

fn check_invariants(t: &ForwardTrace) -> Result<()> {
    let in_unit = |v: &f64| (0.0..=1.0).contains(v);
    if !t.p.iter().all(in_unit) {
        return Err(Error::NonFinite("saliency prediction outside [0,1]".into()));
    }
    if !t.phi.iter().all(in_unit) {
        return Err(Error::NonFinite("score matrix entry outside [0,1]".into()));
    }
    for s in t.cls_softmax.sum_axis(Axis(0)) {
        if (s - 1.0).abs() > SOFTMAX_SUM_TOL {
            return Err(Error::NonFinite(format!(
                "classification softmax column sums to {s}"
            )));
        }
    }
    for s in t.det_softmax.sum_axis(Axis(1)) {
        if (s - 1.0).abs() > SOFTMAX_SUM_TOL {
            return Err(Error::NonFinite(format!(
                "detection softmax row sums to {s}"
            )));
        }
    }
    Ok(())
}
