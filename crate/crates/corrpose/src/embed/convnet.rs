//! Convolutional query network.
//!
//! Fully convolutional, stride 1, zero padding: 3x3 (rgb -> hidden), ReLU,
//! 3x3 (hidden -> hidden), ReLU, 1x1 (hidden -> d + 1). The last channel
//! is the object-mask logit; the first `d` are the query feature.

use rand::Rng;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::img::{RgbImage, ScalarImage};

#[derive(Debug, Clone)]
pub struct QueryNet {
    pub hidden: usize,
    pub d: usize,
    /// Training resolution; evaluation rejects other sizes.
    pub resolution: usize,
    pub seed: u64,
    /// conv1 (W,b), conv2 (W,b), conv3 (W,b) concatenated; weights are
    /// `[out][in][ky][kx]` row-major.
    pub params: Vec<f64>,
}

/// Intermediate activations (channel-major planes) kept for backward.
pub struct QueryTape {
    width: usize,
    height: usize,
    input: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
}

struct LayerDims {
    in_c: usize,
    out_c: usize,
    k: usize,
}

impl QueryNet {
    pub fn new(hidden: usize, d: usize, resolution: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || d < 2 {
            return Err(Error::invalid("query net", "hidden >= 1 and d >= 2 required"));
        }
        let dims = Self::layer_dims_for(hidden, d);
        let count: usize = dims
            .iter()
            .map(|l| l.out_c * l.in_c * l.k * l.k + l.out_c)
            .sum();
        let mut net = Self {
            hidden,
            d,
            resolution,
            seed,
            params: vec![0.0; count],
        };
        net.init_params();
        Ok(net)
    }

    fn layer_dims_for(hidden: usize, d: usize) -> [LayerDims; 3] {
        [
            LayerDims {
                in_c: 3,
                out_c: hidden,
                k: 3,
            },
            LayerDims {
                in_c: hidden,
                out_c: hidden,
                k: 3,
            },
            LayerDims {
                in_c: hidden,
                out_c: d + 1,
                k: 1,
            },
        ]
    }

    fn layer_dims(&self) -> [LayerDims; 3] {
        Self::layer_dims_for(self.hidden, self.d)
    }

    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let dims = self.layer_dims();
        let mut offset = 0;
        for d in dims.iter().take(l) {
            offset += d.out_c * d.in_c * d.k * d.k + d.out_c;
        }
        let w = dims[l].out_c * dims[l].in_c * dims[l].k * dims[l].k;
        (offset..offset + w, offset + w..offset + w + dims[l].out_c)
    }

    /// He-style uniform initialization.
    fn init_params(&mut self) {
        let mut rng = crate::rng::stream(self.seed, b"querynet-init");
        for l in 0..3 {
            let dims = self.layer_dims();
            let fan_in = dims[l].in_c * dims[l].k * dims[l].k;
            let bound = (6.0 / fan_in as f64).sqrt();
            let (wr, br) = self.layer_ranges(l);
            for i in wr {
                self.params[i] = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
            for i in br {
                self.params[i] = 0.0;
            }
        }
    }

    /// Image (pixel-major `[0,1]` RGB) to channel-major f64 planes.
    fn to_planes(image: &RgbImage) -> Vec<f64> {
        let (w, h) = (image.width, image.height);
        let mut out = vec![0.0; 3 * w * h];
        for c in 0..3 {
            for i in 0..w * h {
                out[c * w * h + i] = image.data[i][c] as f64;
            }
        }
        out
    }

    /// Returns the per-pixel feature map, the mask logits (row-major, f64
    /// so losses and gradient checks see the exact forward values), and
    /// the tape for [`Self::backward`].
    pub fn forward(&self, image: &RgbImage) -> Result<(FeatureMap, Vec<f64>, QueryTape)> {
        if self.resolution != 0 && (image.width != self.resolution || image.height != self.resolution) {
            return Err(Error::ResolutionMismatch {
                got_w: image.width,
                got_h: image.height,
                want_w: self.resolution,
                want_h: self.resolution,
            });
        }
        let (w, h) = (image.width, image.height);
        let input = Self::to_planes(image);

        let z1 = self.conv_forward(0, &input, w, h);
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let z2 = self.conv_forward(1, &a1, w, h);
        let a2: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
        let z3 = self.conv_forward(2, &a2, w, h);

        let mut features = FeatureMap::zeros(w, h, self.d);
        for c in 0..self.d {
            let plane = &z3[c * w * h..(c + 1) * w * h];
            for i in 0..w * h {
                features.data[i * self.d + c] = plane[i];
            }
        }
        let logits = z3[self.d * w * h..(self.d + 1) * w * h].to_vec();
        Ok((
            features,
            logits,
            QueryTape {
                width: w,
                height: h,
                input,
                z1,
                z2,
            },
        ))
    }

    fn conv_forward(&self, layer: usize, input: &[f64], w: usize, h: usize) -> Vec<f64> {
        let dims = self.layer_dims();
        let LayerDims { in_c, out_c, k } = dims[layer];
        let (wr, br) = self.layer_ranges(layer);
        let weights = &self.params[wr];
        let biases = &self.params[br];
        let pad = (k / 2) as i64;
        let mut out = vec![0.0; out_c * w * h];
        for oc in 0..out_c {
            let plane = &mut out[oc * w * h..(oc + 1) * w * h];
            plane.fill(biases[oc]);
            for ic in 0..in_c {
                let src = &input[ic * w * h..(ic + 1) * w * h];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = weights[((oc * in_c + ic) * k + ky) * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let dy = ky as i64 - pad;
                        let dx = kx as i64 - pad;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as i64 - dy).min(h as i64)) as usize;
                        for y in y0..y1 {
                            let sy = (y as i64 + dy) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = ((w as i64 - dx).min(w as i64)) as usize;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as i64 + dx) as usize
                                ..sy * w + (x1 as i64 + dx) as usize];
                            for (d, s) in dst.iter_mut().zip(srow.iter()) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn conv_backward(
        &self,
        layer: usize,
        input: &[f64],
        dout: &[f64],
        w: usize,
        h: usize,
        grads: &mut [f64],
        din: Option<&mut Vec<f64>>,
    ) {
        let dims = self.layer_dims();
        let LayerDims { in_c, out_c, k } = dims[layer];
        let (wr, br) = self.layer_ranges(layer);
        let pad = (k / 2) as i64;

        for oc in 0..out_c {
            let dplane = &dout[oc * w * h..(oc + 1) * w * h];
            grads[br.start + oc] += dplane.iter().sum::<f64>();
            for ic in 0..in_c {
                let src = &input[ic * w * h..(ic + 1) * w * h];
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as i64 - pad;
                        let dx = kx as i64 - pad;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as i64 - dy).min(h as i64)) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as i64 + dy) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = ((w as i64 - dx).min(w as i64)) as usize;
                            let drow = &dplane[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as i64 + dx) as usize
                                ..sy * w + (x1 as i64 + dx) as usize];
                            for (d, s) in drow.iter().zip(srow.iter()) {
                                acc += d * s;
                            }
                        }
                        grads[wr.start + ((oc * in_c + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }

        if let Some(din) = din {
            din.clear();
            din.resize(in_c * w * h, 0.0);
            let weights = &self.params[wr];
            for oc in 0..out_c {
                let dplane = &dout[oc * w * h..(oc + 1) * w * h];
                for ic in 0..in_c {
                    let dst = &mut din[ic * w * h..(ic + 1) * w * h];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = weights[((oc * in_c + ic) * k + ky) * k + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            let dy = ky as i64 - pad;
                            let dx = kx as i64 - pad;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ((h as i64 - dy).min(h as i64)) as usize;
                            for y in y0..y1 {
                                let sy = (y as i64 + dy) as usize;
                                let x0 = (-dx).max(0) as usize;
                                let x1 = ((w as i64 - dx).min(w as i64)) as usize;
                                let drow = &dplane[y * w + x0..y * w + x1];
                                let dst_row = &mut dst[sy * w + (x0 as i64 + dx) as usize
                                    ..sy * w + (x1 as i64 + dx) as usize];
                                for (dsti, d) in dst_row.iter_mut().zip(drow.iter()) {
                                    *dsti += wgt * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Backward pass. `dfeatures` is pixel-major `n x d` like [`FeatureMap`],
    /// `dlogits` dense per pixel; both in `dL/d(output)` form.
    pub fn backward(
        &self,
        tape: &QueryTape,
        dfeatures: &[f64],
        dlogits: &[f64],
        grads: &mut [f64],
    ) {
        let (w, h) = (tape.width, tape.height);
        let out_c = self.d + 1;
        // Assemble channel-major gradient of the final pre-activation.
        let mut dz3 = vec![0.0; out_c * w * h];
        for c in 0..self.d {
            let plane = &mut dz3[c * w * h..(c + 1) * w * h];
            for i in 0..w * h {
                plane[i] = dfeatures[i * self.d + c];
            }
        }
        dz3[self.d * w * h..].copy_from_slice(dlogits);

        let a2: Vec<f64> = tape.z2.iter().map(|&v| v.max(0.0)).collect();
        let a1: Vec<f64> = tape.z1.iter().map(|&v| v.max(0.0)).collect();

        let mut da2 = Vec::new();
        self.conv_backward(2, &a2, &dz3, w, h, grads, Some(&mut da2));
        for (d, &z) in da2.iter_mut().zip(tape.z2.iter()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let mut da1 = Vec::new();
        self.conv_backward(1, &a1, &da2, w, h, grads, Some(&mut da1));
        for (d, &z) in da1.iter_mut().zip(tape.z1.iter()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        self.conv_backward(0, &tape.input, &da1, w, h, grads, None);
    }
}

/// Feature map and mask probabilities for an image at the training
/// resolution.
pub fn query_eval(net: &QueryNet, image: &RgbImage) -> Result<(FeatureMap, ScalarImage)> {
    let (features, logits, _) = net.forward(image)?;
    let probs = ScalarImage {
        width: features.width,
        height: features.height,
        data: logits.iter().map(|&z| super::sigmoid(z) as f32).collect(),
    };
    Ok((features, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Finite-difference probe of one conv layer: loss = sum(c .* out).
    #[test]
    fn conv_layer_gradients_match_finite_differences() {
        use rand::Rng;
        let net = QueryNet::new(2, 2, 0, 9).unwrap();
        let (w, h) = (4, 3);
        let mut rng = crate::rng::stream(11, b"conv-probe");
        for layer in 0..3 {
            let dims = net.layer_dims();
            let in_c = dims[layer].in_c;
            let out_c = dims[layer].out_c;
            let input: Vec<f64> = (0..in_c * w * h).map(|_| rng.random::<f64>() - 0.5).collect();
            let probe: Vec<f64> = (0..out_c * w * h).map(|_| rng.random::<f64>() - 0.5).collect();

            let mut grads = vec![0.0; net.params.len()];
            let mut din = Vec::new();
            net.conv_backward(layer, &input, &probe, w, h, &mut grads, Some(&mut din));

            let loss = |net: &QueryNet, input: &[f64]| -> f64 {
                let out = net.conv_forward(layer, input, w, h);
                out.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
            };
            let eps = 1e-6;
            // All parameters of this layer.
            let (wr, br) = net.layer_ranges(layer);
            let mut pert = net.clone();
            for i in wr.start..br.end {
                let s = pert.params[i];
                pert.params[i] = s + eps;
                let lp = loss(&pert, &input);
                pert.params[i] = s - eps;
                let lm = loss(&pert, &input);
                pert.params[i] = s;
                let gn = (lp - lm) / (2.0 * eps);
                assert!(
                    (grads[i] - gn).abs() < 1e-7,
                    "layer {layer} param {i}: analytic {} numeric {gn}",
                    grads[i]
                );
            }
            // Input gradient.
            let mut input_p = input.clone();
            for i in 0..input.len() {
                let s = input_p[i];
                input_p[i] = s + eps;
                let lp = loss(&net, &input_p);
                input_p[i] = s - eps;
                let lm = loss(&net, &input_p);
                input_p[i] = s;
                let gn = (lp - lm) / (2.0 * eps);
                assert!(
                    (din[i] - gn).abs() < 1e-7,
                    "layer {layer} input {i}: analytic {} numeric {gn}",
                    din[i]
                );
            }
        }
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, b"qn-img");
        let mut img = RgbImage::filled(w, h, [0.0; 3]);
        for p in img.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        img
    }

    #[test]
    fn zero_net_gives_half_probability() {
        let mut net = QueryNet::new(8, 4, 16, 1).unwrap();
        for p in net.params.iter_mut() {
            *p = 0.0;
        }
        let (features, probs) = query_eval(&net, &noise_image(16, 16, 2)).unwrap();
        assert!(features.data.iter().all(|&v| v == 0.0));
        assert!(probs.data.iter().all(|&p| (p - 0.5).abs() < 1e-7));
    }

    #[test]
    fn deterministic_and_shape() {
        let net = QueryNet::new(8, 6, 24, 5).unwrap();
        let img = noise_image(24, 24, 3);
        let (f1, p1) = query_eval(&net, &img).unwrap();
        let (f2, p2) = query_eval(&net, &img).unwrap();
        assert_eq!(f1.data, f2.data);
        assert_eq!(p1.data, p2.data);
        assert_eq!((f1.width, f1.height, f1.d), (24, 24, 6));
        assert!(p1.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn resolution_mismatch() {
        let net = QueryNet::new(4, 4, 32, 0).unwrap();
        assert!(matches!(
            query_eval(&net, &noise_image(16, 16, 0)),
            Err(Error::ResolutionMismatch { .. })
        ));
    }
}
