//! Contrastive and mask losses with analytic gradients.

use crate::img::{MaskImage, ScalarImage};

/// InfoNCE for one positive pair against a set of negatives:
/// `-log( exp(q.k+) / (exp(q.k+) + sum_j exp(q.k_j)) )`, computed with
/// log-sum-exp stabilization. Similarity is the raw dot product.
pub fn infonce_loss(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>]) -> f64 {
    let pos = dot(q, k_pos);
    let mut logits = Vec::with_capacity(1 + k_negs.len());
    logits.push(pos);
    for k in k_negs {
        logits.push(dot(q, k));
    }
    log_sum_exp(&logits) - pos
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// Batched InfoNCE: `n` positives sharing one negative set, as used in
/// training (query feature per sampled pixel, key features for the pixel's
/// surface coordinate and for shared uniformly drawn surface points).
pub struct InfoNceBatch {
    pub n: usize,
    pub d: usize,
    pub n_neg: usize,
    /// Mean loss over positives.
    pub loss: f64,
    pub d_query: Vec<f64>,  // n x d
    pub d_k_pos: Vec<f64>,  // n x d
    pub d_k_negs: Vec<f64>, // n_neg x d
}

impl InfoNceBatch {
    /// `queries` and `k_pos` are `n x d`; `k_negs` is `n_neg x d`.
    /// `temperature` scales logits as `dot / temperature`.
    pub fn compute(queries: &[f64], k_pos: &[f64], k_negs: &[f64], d: usize, temperature: f64) -> Self {
        let n = queries.len() / d;
        let n_neg = k_negs.len() / d;
        let inv_t = 1.0 / temperature;
        let mut loss = 0.0;
        let mut d_query = vec![0.0; n * d];
        let mut d_k_pos = vec![0.0; n * d];
        let mut d_k_negs = vec![0.0; n_neg * d];

        let mut logits = vec![0.0; 1 + n_neg];
        for s in 0..n {
            let q = &queries[s * d..(s + 1) * d];
            let kp = &k_pos[s * d..(s + 1) * d];
            logits[0] = dot(q, kp) * inv_t;
            for j in 0..n_neg {
                logits[1 + j] = dot(q, &k_negs[j * d..(j + 1) * d]) * inv_t;
            }
            let lse = log_sum_exp(&logits);
            loss += lse - logits[0];

            // Softmax probabilities; dL/dlogit_j = p_j - [j == positive].
            let scale = inv_t / n as f64;
            let p0 = (logits[0] - lse).exp();
            let g0 = (p0 - 1.0) * scale;
            for c in 0..d {
                d_query[s * d + c] += g0 * kp[c];
                d_k_pos[s * d + c] += g0 * q[c];
            }
            for j in 0..n_neg {
                let pj = (logits[1 + j] - lse).exp();
                let gj = pj * scale;
                let kn = &k_negs[j * d..(j + 1) * d];
                for c in 0..d {
                    d_query[s * d + c] += gj * kn[c];
                    d_k_negs[j * d + c] += gj * q[c];
                }
            }
        }
        InfoNceBatch {
            n,
            d,
            n_neg,
            loss: loss / n as f64,
            d_query,
            d_k_pos,
            d_k_negs,
        }
    }
}

/// Mean binary cross-entropy between a probability map and a binary mask.
/// Probabilities are clamped away from 0/1 for finiteness.
pub fn mask_loss(probs: &ScalarImage, gt: &MaskImage) -> f64 {
    assert!(probs.same_shape(gt), "mask_loss: shape mismatch");
    let eps = 1e-12;
    let mut acc = 0.0;
    for (p, &m) in probs.data.iter().zip(gt.data.iter()) {
        let p = (*p as f64).clamp(eps, 1.0 - eps);
        acc -= if m { p.ln() } else { (1.0 - p).ln() };
    }
    acc / probs.data.len() as f64
}

/// BCE evaluated from logits, with the per-pixel gradient
/// `dL/dz = (sigmoid(z) - y) / n`. Numerically stable for large |z|.
pub(crate) fn mask_loss_with_logits(logits: &[f64], gt: &MaskImage) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), gt.data.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &m)) in logits.iter().zip(gt.data.iter()).enumerate() {
        let y = if m { 1.0 } else { 0.0 };
        loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        grad[i] = (super::sigmoid(z) - y) / n;
    }
    (loss / n, grad)
}
