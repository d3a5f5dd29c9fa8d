//! Connectionist temporal classification: the forward-backward loss as a
//! graph op, and greedy best-path decoding.

use strata_autograd::{log_softmax_rows, Graph, Tensor, Var};

use super::vocab::BLANK;
use crate::{Error, Result};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames a target needs: its length plus one blank between each pair of
/// equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `lp` (`[frames, k]`, row-major), and its gradient with respect to the
/// pre-softmax logits.
pub fn ctc_nll(lp: &[f64], k: usize, target: &[usize]) -> (f64, Vec<f64>) {
    let frames = lp.len() / k;
    let ext: Vec<usize> = std::iter::once(BLANK).chain(target.iter().flat_map(|&t| [t, BLANK])).collect();
    let s = ext.len();
    let ninf = f64::NEG_INFINITY;
    if frames == 0 || frames < min_frames(target) {
        return (f64::INFINITY, vec![0.0; lp.len()]);
    }
    let skip = |i: usize| i >= 2 && ext[i] != BLANK && ext[i] != ext[i - 2];
    let mut alpha = vec![ninf; frames * s];
    alpha[0] = lp[ext[0]];
    if s > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for i in 0..s {
            let mut a = alpha[(t - 1) * s + i];
            if i >= 1 {
                a = log_add(a, alpha[(t - 1) * s + i - 1]);
            }
            if skip(i) {
                a = log_add(a, alpha[(t - 1) * s + i - 2]);
            }
            alpha[t * s + i] = a + lp[t * k + ext[i]];
        }
    }
    let mut beta = vec![ninf; frames * s];
    let last = frames - 1;
    beta[last * s + s - 1] = lp[last * k + ext[s - 1]];
    if s > 1 {
        beta[last * s + s - 2] = lp[last * k + ext[s - 2]];
    }
    for t in (0..last).rev() {
        for i in 0..s {
            let mut b = beta[(t + 1) * s + i];
            if i + 1 < s {
                b = log_add(b, beta[(t + 1) * s + i + 1]);
            }
            if i + 2 < s && ext[i + 2] != BLANK && ext[i + 2] != ext[i] {
                b = log_add(b, beta[(t + 1) * s + i + 2]);
            }
            beta[t * s + i] = b + lp[t * k + ext[i]];
        }
    }
    let mut log_p = alpha[last * s + s - 1];
    if s > 1 {
        log_p = log_add(log_p, alpha[last * s + s - 2]);
    }
    // d(-log p)/d logit = softmax - occupancy / p
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    for t in 0..frames {
        let mut occ = vec![ninf; k];
        for i in 0..s {
            occ[ext[i]] = log_add(occ[ext[i]], alpha[t * s + i] + beta[t * s + i]);
        }
        for c in 0..k {
            if occ[c] > ninf {
                grad[t * k + c] -= (occ[c] - lp[t * k + c] - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}

/// Mean CTC negative log-likelihood of `logits: [B, frames, k]`. Fails when
/// a target holds the blank, an out-of-range id, or needs more frames than
/// the sequence has.
pub fn ctc_loss(g: &Graph, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let sh = g.shape(logits);
    let (b, frames, k) = (sh[0], sh[1], sh[2]);
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for {b} sequences", targets.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(b * frames * k);
    {
        let lv = g.value(logits);
        for (bi, tgt) in targets.iter().enumerate() {
            if tgt.iter().any(|&t| t >= k || t == BLANK) {
                return Err(Error::OutOfRange(format!("target {tgt:?} for {k} classes")));
            }
            let lp = log_softmax_rows(&lv.data()[bi * frames * k..(bi + 1) * frames * k], k);
            let (nll, gr) = ctc_nll(&lp, k, tgt);
            if !nll.is_finite() {
                return Err(Error::InvalidTrials(format!(
                    "target of {} tokens needs {} frames, have {frames}",
                    tgt.len(),
                    min_frames(tgt)
                )));
            }
            total += nll;
            grads.extend(gr);
        }
    }
    let scale = 1.0 / b as f64;
    let grad = Tensor::new(&[b, frames, k], grads);
    Ok(g.custom(
        &[logits],
        Tensor::scalar(total * scale),
        Box::new(move |ctx| {
            let go = ctx.grad.item() * scale;
            vec![Some(grad.map(|v| v * go))]
        }),
    ))
}

/// Best path: per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(logits: &[f64], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.chunks(k) {
        let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        if Some(arg) != prev && arg != BLANK {
            out.push(arg);
        }
        prev = Some(arg);
    }
    out
}
