use ndarray::{Array1, Array2, Axis};

use super::{ForwardTrace, ModelConfig, Network};
use crate::error::{Error, Result};

/// Upstream gradients of the weighted per-image loss.
#[derive(Debug, Clone)]
pub struct LossGrads {
    /// `C × N`, w.r.t. Φ.
    pub d_phi: Array2<f64>,
    /// Length `C`, w.r.t. τ. Broadcast over proposals since τ_c = Σ_i Φ(c,i).
    pub d_tau: Array1<f64>,
    /// Length `N`, w.r.t. P.
    pub d_p: Array1<f64>,
}

fn relu_mask(pre: &Array2<f64>, upstream: Array2<f64>) -> Array2<f64> {
    let mut out = upstream;
    ndarray::Zip::from(&mut out).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    out
}

/// Reverse-mode gradient of the per-image objective, including `λ3·W` on weights.
pub fn backward(
    net: &Network,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    grads: &LossGrads,
) -> Result<Network> {
    let (c, n) = trace.phi.dim();
    if grads.d_phi.dim() != (c, n) || grads.d_tau.len() != c || grads.d_p.len() != n {
        return Err(Error::Shape(format!(
            "loss gradients ({:?}, {}, {}) do not match trace (C={c}, N={n})",
            grads.d_phi.dim(),
            grads.d_tau.len(),
            grads.d_p.len()
        )));
    }
    if trace.weighted.ncols() != net.cls.weight.ncols() {
        return Err(Error::Shape(
            "trace was produced by a different network".into(),
        ));
    }
    let mut out = Network::zeros(cfg);

    let d_phi = &grads.d_phi + &grads.d_tau.view().insert_axis(Axis(1));
    let a = &trace.cls_softmax;
    let b = &trace.det_softmax;
    let d_a = &d_phi * b;
    let d_b = &d_phi * a;

    // softmax over classes (axis 0) and over proposals (axis 1)
    let col_dot = (a * &d_a).sum_axis(Axis(0));
    let d_cls = a * &(&d_a - &col_dot.insert_axis(Axis(0)));
    let row_dot = (b * &d_b).sum_axis(Axis(1));
    let d_det = b * &(&d_b - &row_dot.insert_axis(Axis(1)));

    let g = &trace.weighted;
    out.cls.weight = d_cls.dot(g);
    out.cls.bias = d_cls.sum_axis(Axis(1));
    out.det.weight = d_det.dot(g);
    out.det.bias = d_det.sum_axis(Axis(1));
    let d_g = d_cls.t().dot(&net.cls.weight) + d_det.t().dot(&net.det.weight);

    let h = trace.trunk_out();
    let mut d_h = if cfg.saliency_branch {
        let p = &trace.p;
        let d_p = (&d_g * h).sum_axis(Axis(1)) + &grads.d_p;
        let d_logit = &d_p * &p.mapv(|v| v * (1.0 - v));
        out.saliency_out.weight = d_logit.view().insert_axis(Axis(0)).dot(&trace.saliency_act);
        out.saliency_out.bias = Array1::from_elem(1, d_logit.sum());
        let d_act = d_logit
            .view()
            .insert_axis(Axis(1))
            .dot(&net.saliency_out.weight);
        let d_pre = relu_mask(&trace.saliency_pre, d_act);
        out.saliency_hidden.weight = d_pre.t().dot(h);
        out.saliency_hidden.bias = d_pre.sum_axis(Axis(0));
        &d_g * &p.view().insert_axis(Axis(1)) + d_pre.dot(&net.saliency_hidden.weight)
    } else {
        d_g
    };

    for k in (0..net.trunk.len()).rev() {
        let d_pre = relu_mask(&trace.trunk_pre[k], d_h);
        let below = if k == 0 {
            &trace.input
        } else {
            &trace.trunk_act[k - 1]
        };
        out.trunk[k].weight = d_pre.t().dot(below);
        out.trunk[k].bias = d_pre.sum_axis(Axis(0));
        d_h = d_pre.dot(&net.trunk[k].weight);
    }

    if cfg.lambda_l2 > 0.0 {
        let frozen_saliency = !cfg.saliency_branch;
        for (g, w) in out.tensors_mut().into_iter().zip(net.tensors()) {
            if !g.is_weight || (frozen_saliency && g.name.starts_with("saliency")) {
                continue;
            }
            for (gv, wv) in g.values.iter_mut().zip(w.values) {
                *gv += cfg.lambda_l2 * wv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use ndarray::array;

    #[test]
    fn zero_upstream_leaves_only_l2() {
        let cfg = ModelConfig {
            trunk_widths: vec![5],
            saliency_hidden: 3,
            ..ModelConfig::new(4, 2)
        };
        let p = init_params(&cfg, 1).unwrap();
        let x = array![
            [0.1, 0.2, 0.3, 0.4],
            [1.0, -1.0, 0.5, 0.0],
            [0.0, 0.0, 2.0, 1.0]
        ];
        let t = p.forward(&x).unwrap();
        let zero = LossGrads {
            d_phi: Array2::zeros((2, 3)),
            d_tau: Array1::zeros(2),
            d_p: Array1::zeros(3),
        };
        let g = backward(&p.net, &cfg, &t, &zero).unwrap();
        for (gt, wt) in g.tensors().iter().zip(p.net.tensors()) {
            for (gv, wv) in gt.values.iter().zip(wt.values) {
                let expected = if gt.is_weight {
                    cfg.lambda_l2 * wv
                } else {
                    0.0
                };
                assert_eq!(*gv, expected, "{}", gt.name);
            }
        }
        let bad = LossGrads {
            d_phi: Array2::zeros((3, 3)),
            ..zero
        };
        assert!(matches!(
            backward(&p.net, &cfg, &t, &bad),
            Err(Error::Shape(_))
        ));
    }
}
