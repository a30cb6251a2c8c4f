//! Sinusoidal coordinate field (key network).
//!
//! MLP over box-normalized 3D coordinates with sine activations; the first
//! layer's pre-activation is scaled by `omega0`. The forward pass records a
//! tape so gradients flow to every weight and bias.

use rand::Rng;

use super::{normalize_points, KeyModel};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Pt3};

#[derive(Debug, Clone)]
pub struct KeyField {
    /// Layer widths, `[3, hidden.., d]`.
    pub dims: Vec<usize>,
    pub omega0: f64,
    pub norm_box: OrientedBox,
    pub seed: u64,
    /// Concatenated `(W, b)` per layer, row-major weights.
    pub params: Vec<f64>,
}

/// Activations recorded by [`KeyField::forward`]: the input batch and each
/// layer's pre-activation.
pub struct KeyTape {
    n: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

impl KeyField {
    pub fn new(d: usize, hidden: usize, hidden_layers: usize, omega0: f64, norm_box: OrientedBox, seed: u64) -> Result<Self> {
        let mut dims = vec![3];
        dims.extend(std::iter::repeat(hidden).take(hidden_layers));
        dims.push(d);
        Self::with_dims(dims, omega0, norm_box, seed)
    }

    pub fn with_dims(dims: Vec<usize>, omega0: f64, norm_box: OrientedBox, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims[0] != 3 {
            return Err(Error::invalid("key field", "dims must be [3, .., d]"));
        }
        let d = *dims.last().unwrap();
        if d < 2 {
            return Err(Error::invalid("key field", "feature dim must be >= 2"));
        }
        let count: usize = (1..dims.len()).map(|i| dims[i] * dims[i - 1] + dims[i]).sum();
        let mut field = Self {
            dims,
            omega0,
            norm_box,
            seed,
            params: vec![0.0; count],
        };
        field.init_params();
        Ok(field)
    }

    /// Sine-network initialization: first layer uniform in `1/fan_in`,
    /// later layers uniform in `sqrt(6/fan_in)`.
    fn init_params(&mut self) {
        let mut rng = crate::rng::stream(self.seed, b"keyfield-init");
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let fan_in = self.dims[l];
            let bound = if l == 0 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let (wr, br) = self.layer_ranges(l);
            for i in wr {
                self.params[i] = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            for i in br {
                self.params[i] = (rng.random::<f64>() * 2.0 - 1.0) * b_bound;
            }
        }
    }

    pub fn d(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut offset = 0;
        for i in 0..l {
            offset += self.dims[i + 1] * self.dims[i] + self.dims[i + 1];
        }
        let w = self.dims[l + 1] * self.dims[l];
        (offset..offset + w, offset + w..offset + w + self.dims[l + 1])
    }

    fn omega(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.omega0
        } else {
            1.0
        }
    }

    /// Forward pass over box-normalized inputs (`n x 3` flattened),
    /// returning `n x d` features and the tape for [`Self::backward`].
    pub fn forward(&self, normalized: &[f64]) -> (Vec<f64>, KeyTape) {
        let n = normalized.len() / 3;
        let layers = self.layer_count();
        let mut pre = Vec::with_capacity(layers);
        let mut h = normalized.to_vec();
        for l in 0..layers {
            let (wr, br) = self.layer_ranges(l);
            let w = &self.params[wr];
            let b = &self.params[br];
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let mut z = vec![0.0; n * dout];
            for s in 0..n {
                let hin = &h[s * din..(s + 1) * din];
                let zo = &mut z[s * dout..(s + 1) * dout];
                for o in 0..dout {
                    let row = &w[o * din..(o + 1) * din];
                    let mut acc = b[o];
                    for i in 0..din {
                        acc += row[i] * hin[i];
                    }
                    zo[o] = acc;
                }
            }
            let last = l == layers - 1;
            if last {
                let input = normalized.to_vec();
                pre.push(z.clone());
                return (
                    z,
                    KeyTape {
                        n,
                        input,
                        pre,
                    },
                );
            }
            let om = self.omega(l);
            h = z.iter().map(|&v| (om * v).sin()).collect();
            pre.push(z);
        }
        unreachable!("loop returns on the last layer");
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/doutput`
    /// (`n x d` flattened, matching the tape).
    pub fn backward(&self, tape: &KeyTape, dldy: &[f64], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let layers = self.layer_count();
        let n = tape.n;
        // Reconstruct each layer's input activations from the tape.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers);
        inputs.push(tape.input.clone());
        for l in 0..layers - 1 {
            let om = self.omega(l);
            inputs.push(tape.pre[l].iter().map(|&v| (om * v).sin()).collect());
        }

        let mut dz = dldy.to_vec(); // gradient w.r.t. the current layer's pre-activation
        for l in (0..layers).rev() {
            let (wr, br) = self.layer_ranges(l);
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let hin = &inputs[l];
            // Weight and bias gradients.
            for s in 0..n {
                let dzo = &dz[s * dout..(s + 1) * dout];
                let hi = &hin[s * din..(s + 1) * din];
                for o in 0..dout {
                    let g = dzo[o];
                    let wrow = wr.start + o * din;
                    for i in 0..din {
                        grads[wrow + i] += g * hi[i];
                    }
                    grads[br.start + o] += g;
                }
            }
            if l == 0 {
                break;
            }
            // Gradient w.r.t. this layer's input, then through the sine.
            let w = &self.params[wr];
            let om = self.omega(l - 1);
            let prev_pre = &tape.pre[l - 1];
            let mut dprev = vec![0.0; n * din];
            for s in 0..n {
                let dzo = &dz[s * dout..(s + 1) * dout];
                let dp = &mut dprev[s * din..(s + 1) * din];
                for o in 0..dout {
                    let g = dzo[o];
                    let row = &w[o * din..(o + 1) * din];
                    for i in 0..din {
                        dp[i] += g * row[i];
                    }
                }
            }
            for (dv, &z) in dprev.iter_mut().zip(prev_pre.iter()) {
                *dv *= om * (om * z).cos();
            }
            dz = dprev;
        }
    }
}

impl KeyModel for KeyField {
    fn dim(&self) -> usize {
        self.d()
    }

    fn norm_box(&self) -> &OrientedBox {
        &self.norm_box
    }

    fn eval(&self, pts: &[Pt3]) -> Result<Vec<f64>> {
        let normalized = normalize_points(&self.norm_box, pts)?;
        Ok(self.forward(&normalized).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, Vec3};

    fn unit_box() -> OrientedBox {
        OrientedBox {
            center: Pt3::origin(),
            axes: Mat3::identity(),
            half_extents: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    #[test]
    fn deterministic_and_batched() {
        let f = KeyField::new(8, 16, 2, 30.0, unit_box(), 3).unwrap();
        let pts: Vec<Pt3> = (0..5)
            .map(|i| Pt3::new(0.1 * i as f64, -0.2, 0.3))
            .collect();
        let batch = f.eval(&pts).unwrap();
        let again = f.eval(&pts).unwrap();
        assert_eq!(batch, again);
        for (i, p) in pts.iter().enumerate() {
            let single = f.eval(std::slice::from_ref(p)).unwrap();
            for j in 0..8 {
                assert!((single[j] - batch[i * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut f = KeyField::new(4, 8, 1, 30.0, unit_box(), 0).unwrap();
        for p in f.params.iter_mut() {
            *p = 0.0;
        }
        // Set the output bias to a marker.
        let last = f.layer_count() - 1;
        let (_, br) = f.layer_ranges(last);
        for (k, i) in br.enumerate() {
            f.params[i] = k as f64 + 1.0;
        }
        let y = f.eval(&[Pt3::new(0.3, -0.4, 0.9), Pt3::origin()]).unwrap();
        assert_eq!(&y[0..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&y[4..8], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn out_of_box_errors() {
        let f = KeyField::new(4, 8, 1, 30.0, unit_box(), 0).unwrap();
        assert!(matches!(
            f.eval(&[Pt3::new(1.5, 0.0, 0.0)]),
            Err(Error::OutOfBox(_))
        ));
    }

    #[test]
    fn finite_everywhere_in_box() {
        let f = KeyField::new(12, 32, 2, 30.0, unit_box(), 9).unwrap();
        let mut rng = crate::rng::stream(1, b"kf-fin");
        use rand::Rng;
        let pts: Vec<Pt3> = (0..500)
            .map(|_| {
                Pt3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        let y = f.eval(&pts).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
