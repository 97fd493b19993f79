//! Fully connected tanh networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector so optimizers, checkpoints and
//! finite-difference checks can treat every network the same way. Layer `l`
//! stores its weights row-major (`out × in`) followed by its biases.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "network needs an input and an output layer");
        Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] }
    }

    /// Uniform Glorot initialization with zero biases; the last layer's
    /// weights are additionally scaled by `out_scale` (0 gives a network
    /// whose initial output is exactly zero).
    pub fn init<R: Rng>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let n_layers = sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == n_layers { out_scale } else { 1.0 };
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = scale * dist.sample(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Cache {
        assert_eq!(x.len(), self.sizes[0], "input width");
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &acts[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|z| *z = z.tanh());
            }
            acts.push(out);
            offset += n_in * n_out + n_out;
        }
        Cache { acts }
    }

    /// Accumulates `d(dout · output)/dparams` into `grad` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        assert_eq!(dout.len(), self.output_dim(), "output gradient width");
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dout.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < n_layers {
                // tanh' = 1 - tanh²
                for (d, a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let off = offsets[l];
            let input = &cache.acts[l];
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad[row + i] += delta[o] * input[i];
                    d_in[i] += delta[o] * self.params[row + i];
                }
                grad[off + n_in * n_out + o] += delta[o];
            }
            delta = d_in;
        }
        delta
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 1]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]), vec![0.0]);
        assert_eq!(net.n_params(), 3 * 4 + 4 + 4 + 1);
    }

    #[test]
    fn zero_output_scale_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::init(&[3, 16, 16, 1], 0.0, &mut rng);
        assert_eq!(net.forward(&[0.3, 0.1, -0.7]), vec![0.0]);
        assert!(net.params.iter().any(|&p| p != 0.0));
    }

    #[test]
    fn hand_computed_forward() {
        // one hidden unit: y = 2 tanh(0.5 x + 0.1) - 1
        let net = Mlp { sizes: vec![1, 1, 1], params: vec![0.5, 0.1, 2.0, -1.0] };
        let x: f64 = 0.8;
        let expected = 2.0 * (0.5 * x + 0.1).tanh() - 1.0;
        assert!((net.forward(&[x])[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::init(&[4, 8, 8, 2], 1.0, &mut rng);
        let x = [0.3, -0.2, 0.9, -1.1];
        let dout = [0.7, -1.3];
        let f = |n: &Mlp, x: &[f64]| n.forward(x).iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>();
        let cache = net.forward_cached(&x);
        let mut grad = vec![0.0; net.n_params()];
        let d_in = net.backward(&cache, &dout, &mut grad);
        let h = 1e-6;
        for k in 0..net.n_params() {
            let mut p = net.clone();
            p.params[k] += h;
            let up = f(&p, &x);
            p.params[k] -= 2.0 * h;
            let down = f(&p, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-7 * fd.abs().max(1.0), "param {k}");
        }
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let up = f(&net, &xp);
            xp[i] -= 2.0 * h;
            let down = f(&net, &xp);
            assert!(((up - down) / (2.0 * h) - d_in[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(1, 0.05);
        let mut p = vec![4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.5)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
