//! Small fully connected network with SiLU hidden activations and a linear
//! output layer. Parameters live in one flat vector, layer by layer, each
//! layer stored as its row-major `out x in` weight matrix followed by the bias.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer values kept from a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// `inputs[k]` is the input of layer `k`; the last entry is the output.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activation values of the hidden layers.
    pub pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * math::sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = math::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Xavier-uniform hidden layers; the output layer starts at zero so a
    /// fresh network predicts exactly zero.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config("network needs at least an input and an output layer of positive width".into()));
        }
        let mut params = Vec::with_capacity(param_count(widths));
        let layers = widths.len() - 1;
        for (k, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            for _ in 0..fan_in * fan_out {
                if k + 1 == layers {
                    params.push(0.0);
                } else {
                    params.push((rng.random::<f64>() * 2.0 - 1.0) * limit);
                }
            }
            params.extend(core::iter::repeat(0.0).take(fan_out));
        }
        Ok(Mlp { widths: widths.to_vec(), params })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { what: "network parameters", expected, actual: params.len() });
        }
        Ok(Mlp { widths: widths.to_vec(), params })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn forward(&self, input: &[f64]) -> MlpTrace {
        debug_assert_eq!(input.len(), self.input_width());
        let layers = self.widths.len() - 1;
        let mut trace = MlpTrace {
            activations: Vec::with_capacity(layers + 1),
            pre: Vec::with_capacity(layers.saturating_sub(1)),
        };
        trace.activations.push(input.to_vec());
        let mut offset = 0;
        for k in 0..layers {
            let (n_in, n_out) = (self.widths[k], self.widths[k + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let x = trace.activations.last().unwrap();
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            if k + 1 < layers {
                let h = z.iter().map(|&v| silu(v)).collect();
                trace.pre.push(z);
                trace.activations.push(h);
            } else {
                trace.activations.push(z);
            }
        }
        trace
    }

    /// Accumulates parameter gradients into `d_params` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], d_params: &mut [f64]) -> Vec<f64> {
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = d_out.to_vec();
        for k in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[k], self.widths[k + 1]);
            if k + 1 < layers {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[k]) {
                    *d *= silu_grad(z);
                }
            }
            let x = &trace.activations[k];
            let base = offsets[k];
            let w = &self.params[base..base + n_in * n_out];
            {
                let (dw, db) = d_params[base..base + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let g = delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for (dwi, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *dwi += g * xi;
                    }
                }
            }
            let mut d_x = vec![0.0; n_in];
            for o in 0..n_out {
                let g = delta[o];
                if g == 0.0 {
                    continue;
                }
                for (dxi, wi) in d_x.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *dxi += g * wi;
                }
            }
            delta = d_x;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn fresh_network_outputs_exact_zero() {
        let mlp = Mlp::new(&[7, 16, 16, 10], &mut stream_rng(1, Stream::FaceField)).unwrap();
        let out = mlp.forward(&[0.3, -1.0, 2.0, 0.0, 5.0, -0.2, 0.9]);
        assert!(out.output().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
    }

    #[test]
    fn parameter_count() {
        assert_eq!(param_count(&[146, 64, 64, 64, 10]), 146 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 10 + 10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(3, Stream::FaceField);
        let widths = [5, 8, 6, 3];
        let mut mlp = Mlp::new(&widths, &mut rng).unwrap();
        for p in mlp.params.iter_mut() {
            *p += rng.random::<f64>() - 0.5;
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let wout = [0.3, -1.1, 0.7];
        let loss = |m: &Mlp, x: &[f64]| m.forward(x).output().iter().zip(&wout).map(|(a, b)| a * b).sum::<f64>();
        let trace = mlp.forward(&x);
        let mut dp = vec![0.0; mlp.params.len()];
        let dx = mlp.backward(&trace, &wout, &mut dp);
        let h = 1e-6;
        for i in 0..mlp.params.len() {
            let mut a = mlp.clone();
            let mut b = mlp.clone();
            a.params[i] += h;
            b.params[i] -= h;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - dp[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", dp[i]);
        }
        for i in 0..5 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&mlp, &a) - loss(&mlp, &b)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}
