//! Slope-restricted MLP controller.
//!
//! `u(x) = W_o z_N`, `z_l = σ(W_l z_{l-1} + b_l)`, `z_0 = x`, with the smooth
//! leaky activation `σ(s) = αs + (1−α)·softplus(s)` whose slope lies in
//! `(α, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Mat;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth leaky activation.
pub fn act(x: f64, alpha: f64) -> f64 {
    alpha * x + (1.0 - alpha) * softplus(x)
}

/// Derivative of [`act`]; always in `[alpha, 1]`.
pub fn act_slope(x: f64, alpha: f64) -> f64 {
    alpha + (1.0 - alpha) * sigmoid(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "W")]
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Controller parameters. JSON layout: `{"alpha", "layers": [{"W", "b"}], "Wo"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub alpha: f64,
    pub layers: Vec<Layer>,
    #[serde(rename = "Wo")]
    pub wo: Mat,
}

/// Gradients with the same shapes as the trainable parts of [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
    pub wo: Mat,
}

/// Pre- and post-activations of one evaluation, reused by the Jacobian and
/// backprop passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpParams {
    /// Random network with layer sizes `[n, h_1, ..., h_N, m]`, weights
    /// uniform in `±1/√fan_in`, biases zero.
    pub fn random(sizes: &[usize], alpha: f64, seed: u64) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::InvalidArgument(
                "need input, at least one hidden, and output size".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let s = 1.0 / (cols as f64).sqrt();
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect(),
            )
            .expect("sized")
        };
        let hidden = &sizes[1..sizes.len() - 1];
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = sizes[0];
        for &h in hidden {
            layers.push(Layer {
                w: uniform(h, fan_in),
                b: vec![0.0; h],
            });
            fan_in = h;
        }
        let wo = uniform(sizes[sizes.len() - 1], fan_in);
        let p = Self { alpha, layers, wo };
        p.validate()?;
        Ok(p)
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize], alpha: f64) -> Result<Self> {
        let mut p = Self::random(sizes, alpha, 0)?;
        p.set_flat(&vec![0.0; p.num_params()])?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("at least one hidden layer".into()));
        }
        let mut width = self.layers[0].w.cols();
        for (i, l) in self.layers.iter().enumerate() {
            if l.w.cols() != width || l.b.len() != l.w.rows() {
                return dim_err(format!("layer {} shapes do not chain", i + 1));
            }
            width = l.w.rows();
        }
        if self.wo.cols() != width {
            return dim_err("output weight does not match last hidden width");
        }
        if !self.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("controller parameters".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.wo.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Lower slope bound `a`.
    pub fn slope_lo(&self) -> f64 {
        self.alpha
    }

    /// Upper slope bound `b`.
    pub fn slope_hi(&self) -> f64 {
        1.0
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.as_slice().len() + l.b.len())
            .sum::<usize>()
            + self.wo.as_slice().len()
    }

    /// Flat parameter vector: for each layer `W` (row-major) then `b`, then `W_o`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(l.w.as_slice());
            v.extend_from_slice(&l.b);
        }
        v.extend_from_slice(self.wo.as_slice());
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return dim_err("flat parameter length");
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.as_slice().len();
            l.w.as_mut_slice().copy_from_slice(&v[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&v[off..off + nb]);
            off += nb;
        }
        self.wo.as_mut_slice().copy_from_slice(&v[off..]);
        Ok(())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return dim_err(format!(
                "controller expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = Vec::with_capacity(self.depth());
        let mut z = x.to_vec();
        for l in &self.layers {
            let mut s = l.w.matvec(&z)?;
            s.iter_mut().zip(&l.b).for_each(|(v, b)| *v += b);
            z = s.iter().map(|&v| act(v, self.alpha)).collect();
            pre.push(s);
            post.push(z.clone());
        }
        let output = self.wo.matvec(&z)?;
        Ok(ForwardCache {
            input: x.to_vec(),
            pre,
            post,
            output,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Exact `∂u/∂x = W_o J_N W_N ⋯ J_1 W_1` with `J_l = diag(σ'(pre_l))`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Mat> {
        let cache = self.forward_cached(x)?;
        Ok(self.jacobian_from_cache(&cache))
    }

    pub fn jacobian_from_cache(&self, cache: &ForwardCache) -> Mat {
        let mut acc = self.wo.clone();
        for (l, s) in self.layers.iter().zip(&cache.pre).rev() {
            for j in 0..acc.cols() {
                let d = act_slope(s[j], self.alpha);
                for i in 0..acc.rows() {
                    acc[(i, j)] *= d;
                }
            }
            acc = acc.matmul(&l.w).expect("validated shapes");
        }
        acc
    }

    /// Reverse-mode gradient of `cotᵀ u(x)` with respect to every parameter.
    pub fn backprop(&self, x: &[f64], cot: &[f64]) -> Result<MlpGrads> {
        if cot.len() != self.output_dim() {
            return dim_err("cotangent length must equal controller output dimension");
        }
        let cache = self.forward_cached(x)?;
        let mut grads = MlpGrads::zeros_like(self);
        let last = cache.post.last().expect("depth >= 1");
        for i in 0..self.wo.rows() {
            for j in 0..self.wo.cols() {
                grads.wo[(i, j)] = cot[i] * last[j];
            }
        }
        let mut delta = self.wo.tmatvec(cot)?;
        for k in (0..self.depth()).rev() {
            for (d, &s) in delta.iter_mut().zip(&cache.pre[k]) {
                *d *= act_slope(s, self.alpha);
            }
            let input = if k == 0 {
                &cache.input
            } else {
                &cache.post[k - 1]
            };
            let g = &mut grads.layers[k];
            for i in 0..g.w.rows() {
                for j in 0..g.w.cols() {
                    g.w[(i, j)] = delta[i] * input[j];
                }
                g.b[i] = delta[i];
            }
            if k > 0 {
                delta = self.layers[k].w.tmatvec(&delta)?;
            }
        }
        Ok(grads)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Layer {
                    w: Mat::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            wo: Mat::zeros(p.wo.rows(), p.wo.cols()),
        }
    }

    /// Same ordering as [`MlpParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.w.as_slice());
            v.extend_from_slice(&l.b);
        }
        v.extend_from_slice(self.wo.as_slice());
        v
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w = &a.w + &b.w.scale(s);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += s * y);
        }
        self.wo = &self.wo + &other.wo.scale(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye_net(alpha: f64) -> MlpParams {
        MlpParams {
            alpha,
            layers: vec![Layer {
                w: Mat::identity(2),
                b: vec![0.0; 2],
            }],
            wo: Mat::identity(2),
        }
    }

    #[test]
    fn activation_values() {
        assert!((act(0.0, 0.3) - 0.7 * 2f64.ln()).abs() < 1e-15);
        assert!((act_slope(0.0, 0.3) - 0.65).abs() < 1e-15);
        assert!((act(100.0, 0.3) - 100.0).abs() < 1e-10);
        assert!(act(-1e4, 0.3).is_finite());
        assert!((act(-100.0, 0.3) - (-30.0)).abs() < 1e-10);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 8, 8, 2], 0.3).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_network_at_origin() {
        let u = eye_net(0.3).forward(&[0.0, 0.0]).unwrap();
        for v in u {
            assert!((v - 0.7 * 2f64.ln()).abs() < 1e-15);
            assert!((v - 0.48520).abs() < 1e-5);
        }
    }

    #[test]
    fn jacobian_at_zero_preactivation() {
        let p = eye_net(0.3);
        let j = p.input_jacobian(&[0.0, 0.0]).unwrap();
        assert!((&j - &Mat::identity(2).scale(0.65)).max_abs() < 1e-15);

        // biases cancel σ(0) so that every pre-activation is zero at x = 0
        let mut deep = MlpParams::zeros(&[2, 2, 2, 2, 2], 0.3).unwrap();
        let w = Mat::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]);
        for (k, l) in deep.layers.iter_mut().enumerate() {
            l.w = w.clone();
            if k > 0 {
                let z = act(0.0, 0.3);
                l.b = w.matvec(&[z, z]).unwrap().iter().map(|v| -v).collect();
            }
        }
        deep.wo = Mat::from_rows(&[[0.5, -1.0], [2.0, 1.0]]);
        let j = deep.input_jacobian(&[0.0, 0.0]).unwrap();
        let want = (&(&(&deep.wo * &w) * &w) * &w).scale(0.65f64.powi(3));
        assert!((&j - &want).max_abs() < 1e-14);

        let mut w1 = deep.clone();
        w1.layers[0].w = Mat::zeros(2, 2);
        assert_eq!(w1.input_jacobian(&[0.3, -0.1]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let p = eye_net(0.3);
        assert!(p.forward(&[1.0]).is_err());
        assert!(p.backprop(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn scalar_backprop_matches_chain_rule() {
        let (w1, b1, wo, alpha, x) = (0.7, -0.2, 1.3, 0.25, 0.9);
        let p = MlpParams {
            alpha,
            layers: vec![Layer {
                w: Mat::from_rows(&[[w1]]),
                b: vec![b1],
            }],
            wo: Mat::from_rows(&[[wo]]),
        };
        let g = p.backprop(&[x], &[1.0]).unwrap();
        let s = w1 * x + b1;
        let ds = alpha + (1.0 - alpha) / (1.0 + (-s).exp());
        assert!((g.wo[(0, 0)] - act(s, alpha)).abs() < 1e-15);
        assert!((g.layers[0].w[(0, 0)] - wo * ds * x).abs() < 1e-15);
        assert!((g.layers[0].b[0] - wo * ds).abs() < 1e-15);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let p = MlpParams::random(&[2, 5, 1], 0.3, 1).unwrap();
        let g = p.backprop(&[0.4, 0.1], &[0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let p = MlpParams::random(&[3, 7, 4, 2], 0.2, 9).unwrap();
        let q = MlpParams::from_json(&p.to_json().unwrap()).unwrap();
        let (a, b) = (p.flat(), q.flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(p.alpha.to_bits(), q.alpha.to_bits());
    }

    #[test]
    fn json_layout() {
        let v: serde_json::Value = serde_json::from_str(&eye_net(0.3).to_json().unwrap()).unwrap();
        assert!(v.get("alpha").is_some());
        assert!(v["layers"][0].get("W").is_some());
        assert!(v["layers"][0].get("b").is_some());
        assert!(v.get("Wo").is_some());
        assert!(MlpParams::from_json(r#"{"alpha": 1.5, "layers": [], "Wo": []}"#).is_err());
    }
}
