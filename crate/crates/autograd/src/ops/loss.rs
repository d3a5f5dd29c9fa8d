use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Row-wise log-softmax of a `[rows, k]` buffer.
pub fn log_softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
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

impl Graph {
    /// `sum_i weights[i] * CE(logits[i], targets[i])` for `logits: [rows, k]`.
    /// Rows with zero weight contribute nothing, including to the gradient.
    pub fn cross_entropy_weighted(&self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let (value, logp) = {
            let lv = self.value(logits);
            let k = lv.last_dim();
            let rows = lv.numel() / k;
            assert_eq!(targets.len(), rows, "cross_entropy: one target per row");
            assert_eq!(weights.len(), rows, "cross_entropy: one weight per row");
            let logp = log_softmax_rows(lv.data(), k);
            let mut loss = 0.0;
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                assert!(t < k, "target {t} out of range for {k} classes");
                if w != 0.0 {
                    loss -= w * logp[r * k + t];
                }
            }
            (Tensor::scalar(loss), logp)
        };
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.custom(
            &[logits],
            value,
            Box::new(move |ctx| {
                let k = ctx.inputs[0].last_dim();
                let up = ctx.grad.item();
                let mut g = vec![0.0; logp.len()];
                for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        g[r * k + j] = up * w * logp[r * k + j].exp();
                    }
                    g[r * k + t] -= up * w;
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    /// Mean cross-entropy over all rows.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let n = targets.len().max(1) as f64;
        self.cross_entropy_weighted(logits, targets, &vec![1.0 / n; targets.len()])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels` in `[0, 1]`.
    pub fn bce_with_logits(&self, logits: Var, labels: &[f64]) -> Var {
        let value = {
            let lv = self.value(logits);
            assert_eq!(lv.numel(), labels.len(), "bce: one label per logit");
            let n = labels.len() as f64;
            let s: f64 = lv.data().iter().zip(labels).map(|(&z, &y)| softplus(z) - y * z).sum();
            Tensor::scalar(s / n)
        };
        let labels = labels.to_vec();
        self.custom(
            &[logits],
            value,
            Box::new(move |ctx| {
                let n = labels.len() as f64;
                let up = ctx.grad.item();
                let g: Vec<f64> =
                    ctx.inputs[0].data().iter().zip(&labels).map(|(&z, &y)| up * (sigmoid(z) - y) / n).collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape(), g))]
            }),
        )
    }
}
