//! Central-finite-difference verification of the hand-written backward
//! passes.

use crate::geometry::Pt3;
use crate::img::{MaskImage, RgbImage};

use super::loss::{mask_loss_with_logits, InfoNceBatch};
use super::{KeyField, QueryNet};

/// Compares analytic gradients against central differences.
///
/// `eval` must return the loss and the full analytic gradient at the given
/// parameters. Returns the maximum relative error over all parameters,
/// with the difference scaled by `max(|g_analytic|, |g_numeric|, 1e-4)` so
/// near-zero gradients are compared absolutely.
pub fn grad_check<F>(params: &mut [f64], mut eval: F, eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = eval(params);
    assert_eq!(analytic.len(), params.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + eps;
        let (lp, _) = eval(params);
        params[i] = saved - eps;
        let (lm, _) = eval(params);
        params[i] = saved;
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// KeyField gradients on one InfoNCE instance (fixed queries, positives
/// and negatives evaluated through the field).
pub fn grad_check_keyfield_infonce(
    key: &mut KeyField,
    pos_points: &[Pt3],
    neg_points: &[Pt3],
    queries: &[f64],
    eps: f64,
) -> f64 {
    let d = key.d();
    let pos_n = super::normalize_points(&key.norm_box, pos_points).expect("positives in box");
    let neg_n = super::normalize_points(&key.norm_box, neg_points).expect("negatives in box");
    let queries = queries.to_vec();

    let dims = key.dims.clone();
    let omega0 = key.omega0;
    let norm_box = key.norm_box;
    let seed = key.seed;
    let eval = move |params: &[f64]| {
        let mut field = KeyField::with_dims(dims.clone(), omega0, norm_box, seed).unwrap();
        field.params.copy_from_slice(params);
        let (kp, tape_p) = field.forward(&pos_n);
        let (kn, tape_n) = field.forward(&neg_n);
        let batch = InfoNceBatch::compute(&queries, &kp, &kn, d, 1.0);
        let mut grads = vec![0.0; params.len()];
        field.backward(&tape_p, &batch.d_k_pos, &mut grads);
        field.backward(&tape_n, &batch.d_k_negs, &mut grads);
        (batch.loss, grads)
    };
    let mut params = key.params.clone();
    grad_check(&mut params, eval, eps)
}

/// QueryNet gradients on the mask cross-entropy.
pub fn grad_check_querynet_mask(
    net: &mut QueryNet,
    image: &RgbImage,
    gt: &MaskImage,
    eps: f64,
) -> f64 {
    let hidden = net.hidden;
    let d = net.d;
    let resolution = net.resolution;
    let seed = net.seed;
    let image = image.clone();
    let gt = gt.clone();
    let eval = move |params: &[f64]| {
        let mut n = QueryNet::new(hidden, d, resolution, seed).unwrap();
        n.params.copy_from_slice(params);
        let (features, logits, tape) = n.forward(&image).unwrap();
        let (loss, dlogits) = mask_loss_with_logits(&logits, &gt);
        let mut grads = vec![0.0; params.len()];
        let dfeatures = vec![0.0; features.data.len()];
        n.backward(&tape, &dfeatures, &dlogits, &mut grads);
        (loss, grads)
    };
    let mut params = net.params.clone();
    grad_check(&mut params, eval, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, OrientedBox, Vec3};
    use rand::Rng;

    fn unit_box() -> OrientedBox {
        OrientedBox {
            center: Pt3::origin(),
            axes: Mat3::identity(),
            half_extents: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    #[test]
    fn keyfield_infonce_gradients() {
        let mut key = KeyField::new(6, 12, 2, 30.0, unit_box(), 7).unwrap();
        let mut rng = crate::rng::stream(2, b"gc-kf");
        let pos: Vec<Pt3> = (0..5)
            .map(|_| {
                Pt3::new(
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                )
            })
            .collect();
        let neg: Vec<Pt3> = (0..7)
            .map(|_| {
                Pt3::new(
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                )
            })
            .collect();
        let queries: Vec<f64> = (0..5 * 6).map(|_| rng.random::<f64>() - 0.5).collect();
        let err = grad_check_keyfield_infonce(&mut key, &pos, &neg, &queries, 1e-4);
        assert!(err <= 1e-3, "max rel error {err}");
    }

    #[test]
    fn querynet_mask_gradients() {
        let mut net = QueryNet::new(4, 4, 8, 3).unwrap();
        let mut rng = crate::rng::stream(5, b"gc-qn");
        let mut img = RgbImage::filled(8, 8, [0.0; 3]);
        for p in img.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        let mut gt = MaskImage::filled(8, 8, false);
        for m in gt.data.iter_mut() {
            *m = rng.random::<f64>() < 0.4;
        }
        let err = grad_check_querynet_mask(&mut net, &img, &gt, 1e-4);
        assert!(err <= 1e-3, "max rel error {err}");
    }

    #[test]
    fn frozen_parameter_has_zero_gradient() {
        // The mask loss ignores the feature channels, so feature-only
        // weights of the last 1x1 conv must get exactly zero gradient.
        let net = QueryNet::new(4, 4, 8, 3).unwrap();
        let mut rng = crate::rng::stream(6, b"gc-zero");
        let mut img = RgbImage::filled(8, 8, [0.0; 3]);
        for p in img.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        let gt = MaskImage::filled(8, 8, true);
        let (_, logits, tape) = net.forward(&img).unwrap();
        let (_, dlogits) = mask_loss_with_logits(&logits, &gt);
        let mut grads = vec![0.0; net.params.len()];
        net.backward(&tape, &vec![0.0; 8 * 8 * 4], &dlogits, &mut grads);
        // conv3 weight block: rows for the d feature channels come first.
        let conv12: usize = 4 * 3 * 9 + 4 + 4 * 4 * 9 + 4;
        let feat_rows = &grads[conv12..conv12 + 4 * 4]; // d rows x hidden cols
        assert!(feat_rows.iter().all(|&g| g == 0.0));
    }
}
