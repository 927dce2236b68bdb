use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DBAGT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub input: usize,
    /// Width of both trunk layers.
    pub hidden: usize,
    pub actions: usize,
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wv: usize,
    bv: usize,
    wa: usize,
    ba: usize,
    total: usize,
}

impl NetDims {
    fn layout(&self) -> Layout {
        let (i, h, a) = (self.input, self.hidden, self.actions);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wv = b2 + h;
        let bv = wv + h;
        let wa = bv + 1;
        let ba = wa + a * h;
        Layout { w1, b1, w2, b2, wv, bv, wa, ba, total: ba + a }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// Two-layer ReLU trunk feeding a scalar value head and a per-action
/// advantage head, combined as `Q = V + A - mean(A)`.
///
/// Parameters live in one flat `f64` vector so that optimizers and
/// checkpoints treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelingQNet {
    dims: NetDims,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub value: f64,
    pub advantages: Vec<f64>,
    pub q: Vec<f64>,
}

fn dense(w: &[f64], b: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            let row = &w[j * n_in..(j + 1) * n_in];
            let z = bj + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if relu {
                z.max(0.0)
            } else {
                z
            }
        })
        .collect()
}

impl DuelingQNet {
    /// He-uniform weights and zero biases from a seeded generator.
    pub fn new(dims: NetDims, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let l = dims.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |block: &mut [f64], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in block {
                *w = rng.random_range(-bound..bound);
            }
        };
        fill(&mut net.params[l.w1..l.b1], dims.input);
        fill(&mut net.params[l.w2..l.b2], dims.hidden);
        fill(&mut net.params[l.wv..l.bv], dims.hidden);
        fill(&mut net.params[l.wa..l.ba], dims.hidden);
        Ok(net)
    }

    pub fn zeros(dims: NetDims) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.actions == 0 {
            return invalid(format!("network dimensions must be positive, got {dims:?}"));
        }
        Ok(Self { dims, params: vec![0.0; dims.num_params()] })
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable view of the advantage-head biases.
    pub fn advantage_bias_mut(&mut self) -> &mut [f64] {
        let l = self.dims.layout();
        &mut self.params[l.ba..l.total]
    }

    pub fn forward(&self, state: &[f64]) -> Result<Activations> {
        if state.len() != self.dims.input {
            return invalid(format!("state has {} entries, network expects {}", state.len(), self.dims.input));
        }
        let l = self.dims.layout();
        let p = &self.params;
        let h1 = dense(&p[l.w1..l.b1], &p[l.b1..l.w2], state, true);
        let h2 = dense(&p[l.w2..l.b2], &p[l.b2..l.wv], &h1, true);
        let value = dense(&p[l.wv..l.bv], &p[l.bv..l.wa], &h2, false)[0];
        let advantages = dense(&p[l.wa..l.ba], &p[l.ba..l.total], &h2, false);
        let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
        let q = advantages.iter().map(|a| value + a - mean).collect();
        Ok(Activations { h1, h2, value, advantages, q })
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(state)?.q)
    }

    /// Adds `d(loss)/d(params)` to `grad`, given the state, its activations,
    /// and `d(loss)/dQ`.
    pub fn accumulate_gradient(&self, state: &[f64], acts: &Activations, dq: &[f64], grad: &mut [f64]) {
        let (i_n, h_n, a_n) = (self.dims.input, self.dims.hidden, self.dims.actions);
        let l = self.dims.layout();
        let p = &self.params;
        debug_assert_eq!(dq.len(), a_n);

        // Through Q = V + A - mean(A).
        let dq_sum: f64 = dq.iter().sum();
        let dv = dq_sum;
        let da: Vec<f64> = dq.iter().map(|g| g - dq_sum / a_n as f64).collect();

        let mut dh2 = vec![0.0; h_n];
        grad[l.bv] += dv;
        for j in 0..h_n {
            grad[l.wv + j] += dv * acts.h2[j];
            dh2[j] += dv * p[l.wv + j];
        }
        for (k, &g) in da.iter().enumerate() {
            grad[l.ba + k] += g;
            let row = l.wa + k * h_n;
            for j in 0..h_n {
                grad[row + j] += g * acts.h2[j];
                dh2[j] += g * p[row + j];
            }
        }

        let mut dh1 = vec![0.0; h_n];
        for j in 0..h_n {
            if acts.h2[j] <= 0.0 {
                continue;
            }
            let g = dh2[j];
            grad[l.b2 + j] += g;
            let row = l.w2 + j * h_n;
            for m in 0..h_n {
                grad[row + m] += g * acts.h1[m];
                dh1[m] += g * p[row + m];
            }
        }

        for j in 0..h_n {
            if acts.h1[j] <= 0.0 {
                continue;
            }
            let g = dh1[j];
            grad[l.b1 + j] += g;
            let row = l.w1 + j * i_n;
            for m in 0..i_n {
                grad[row + m] += g * state[m];
            }
        }
    }

    /// `DBAGT1 | u64 config hash | u32 input, hidden, actions | f64 params`,
    /// all little-endian.
    pub fn write_checkpoint(&self, mut out: impl Write, config_hash: u64) -> Result<()> {
        let mut buf = Vec::with_capacity(6 + 8 + 12 + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&config_hash.to_le_bytes());
        for d in [self.dims.input, self.dims.hidden, self.dims.actions] {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for w in &self.params {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Returns the network and the config hash it was saved with.
    pub fn read_checkpoint(mut input: impl Read) -> Result<(Self, u64)> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let header = 6 + 8 + 12;
        if bytes.len() < header || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an agent checkpoint".into()));
        }
        let hash = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let dim = |k: usize| u32::from_le_bytes(bytes[14 + 4 * k..18 + 4 * k].try_into().unwrap()) as usize;
        let dims = NetDims { input: dim(0), hidden: dim(1), actions: dim(2) };
        let mut net = Self::zeros(dims).map_err(|e| Error::Format(e.to_string()))?;
        let body = &bytes[header..];
        if body.len() != 8 * net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} weight bytes, dimensions need {}",
                body.len(),
                8 * net.params.len()
            )));
        }
        for (w, chunk) in net.params.iter_mut().zip(body.chunks_exact(8)) {
            *w = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok((net, hash))
    }
}

/// Adam with the usual defaults (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DuelingQNet {
        DuelingQNet::new(NetDims { input: 5, hidden: 7, actions: 4 }, 11).unwrap()
    }

    #[test]
    fn zero_weights_give_equal_q() {
        let net = DuelingQNet::zeros(NetDims { input: 3, hidden: 4, actions: 6 }).unwrap();
        let q = net.q_values(&[0.3, -1.0, 2.0]).unwrap();
        assert!(q.iter().all(|&v| v == q[0]));
    }

    #[test]
    fn dueling_identity_under_advantage_shift() {
        let mut net = small();
        let s = [0.1, -0.4, 0.9, 0.0, 0.5];
        let before = net.q_values(&s).unwrap();
        for b in net.advantage_bias_mut() {
            *b += 5.0;
        }
        let after = net.q_values(&s).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_scalar_loop_forward() {
        let net = small();
        let d = net.dims();
        let s = [0.2, 0.7, -0.3, 1.1, -0.8];
        let p = net.params();
        // Independent walk over the documented parameter order.
        let mut at = 0;
        let mut layer = |x: &[f64], n_out: usize, relu: bool| {
            let w = &p[at..at + n_out * x.len()];
            at += n_out * x.len();
            let b = &p[at..at + n_out];
            at += n_out;
            let mut y = vec![0.0; n_out];
            for j in 0..n_out {
                let mut z = b[j];
                for k in 0..x.len() {
                    z += w[j * x.len() + k] * x[k];
                }
                y[j] = if relu && z < 0.0 { 0.0 } else { z };
            }
            y
        };
        let h1 = layer(&s, d.hidden, true);
        let h2 = layer(&h1, d.hidden, true);
        let v = layer(&h2, 1, false)[0];
        let a = layer(&h2, d.actions, false);
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let q = net.q_values(&s).unwrap();
        for k in 0..d.actions {
            assert!((q[k] - (v + a[k] - mean)).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_length_rejected() {
        assert!(matches!(small().q_values(&[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = small();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf, 0xdead_beef_0123_4567).unwrap();
        assert_eq!(&buf[..6], b"DBAGT1");
        let (back, hash) = DuelingQNet::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(hash, 0xdead_beef_0123_4567);
        assert_eq!(back.dims(), net.dims());
        assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(DuelingQNet::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
