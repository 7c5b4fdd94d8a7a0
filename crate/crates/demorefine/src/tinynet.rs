//! Feed-forward network with exact reverse-mode gradients and Adam.
//!
//! Hidden layers use tanh; the output layer is linear. Everything runs in
//! double precision so gradient checks against central differences are tight
//! and checkpoint round trips are bit-exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network needs at least an input and an output width")]
    TooFewLayers,
    #[error("timestep embedding dim must be even and positive, got {0}")]
    OddEmbeddingDim(usize),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DMDF";
const CHECKPOINT_VERSION: u32 = 1;

/// Fully-connected network. Weights are row-major `out x in` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Intermediates from a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Post-activation output of every layer; the last entry is the linear
    /// network output.
    activations: Vec<Vec<f64>>,
}

/// Parameter gradients (and the input gradient) matching an `Mlp`'s shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Gradients {
        Gradients {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            input: vec![0.0; net.widths[0]],
        }
    }

    /// Accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for x in w.iter_mut() {
                *x *= factor;
            }
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }
}

impl Mlp {
    /// Seeded Xavier-uniform initialization: each layer drawn from
    /// `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn new(widths: &[usize], seed: u64) -> Result<Mlp, NetError> {
        if widths.len() < 2 {
            return Err(NetError::TooFewLayers);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { widths: widths.to_vec(), weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        (0..self.widths.len() - 1)
            .map(|l| self.widths[l + 1] * (self.widths[l] + 1))
            .sum()
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass; returns the output and the cache needed by `backward`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len());
        let mut cur = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let in_dim = self.widths[l];
            let out_dim = self.widths[l + 1];
            let mut out = vec![0.0; out_dim];
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(&cur) {
                    acc += wi * xi;
                }
                out[o] = if l < last { acc.tanh() } else { acc };
            }
            activations.push(out.clone());
            cur = out;
        }
        let cache = ForwardCache { input: x.to_vec(), activations };
        Ok((cur, cache))
    }

    /// Exact reverse-mode gradients of the scalar loss whose output gradient
    /// is `dl_dy`, for all parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, dl_dy: &[f64]) -> Result<Gradients, NetError> {
        if dl_dy.len() != self.output_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.output_dim(),
                got: dl_dy.len(),
            });
        }
        if cache.activations.len() != self.weights.len()
            || cache.input.len() != self.input_dim()
        {
            return Err(NetError::DimensionMismatch {
                expected: self.weights.len(),
                got: cache.activations.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        // delta = dL/dz for the current layer (output layer is linear).
        let mut delta = dl_dy.to_vec();
        for l in (0..self.weights.len()).rev() {
            let in_dim = self.widths[l];
            let prev: &[f64] = if l == 0 { &cache.input } else { &cache.activations[l - 1] };
            let dw = &mut grads.weights[l];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                for (slot, p) in row.iter_mut().zip(prev) {
                    *slot += d * p;
                }
                grads.biases[l][o] += d;
            }
            // Propagate to the previous layer's output.
            let mut prev_delta = vec![0.0; in_dim];
            let w = &self.weights[l];
            for (o, d) in delta.iter().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                for (slot, wi) in prev_delta.iter_mut().zip(row) {
                    *slot += d * wi;
                }
            }
            if l > 0 {
                // Previous layer is tanh; its stored activation a gives
                // tanh'(z) = 1 - a^2.
                for (slot, a) in prev_delta.iter_mut().zip(&cache.activations[l - 1]) {
                    *slot *= 1.0 - a * a;
                }
            }
            delta = prev_delta;
        }
        grads.input = delta;
        Ok(grads)
    }

    /// Writes the self-describing binary checkpoint (magic "DMDF").
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut buf = Vec::with_capacity(16 + self.param_count() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            buf.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in b {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mlp, NetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], NetError> {
            if *off + n > bytes.len() {
                return Err(NetError::Format("truncated checkpoint".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != CHECKPOINT_MAGIC {
            return Err(NetError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Format(format!("unsupported version {version}")));
        }
        let n_widths = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if n_widths < 2 {
            return Err(NetError::Format("width list too short".into()));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..n_widths - 1 {
            let count = widths[l] * widths[l + 1];
            let mut w = Vec::with_capacity(count);
            for _ in 0..count {
                w.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            let mut b = Vec::with_capacity(widths[l + 1]);
            for _ in 0..widths[l + 1] {
                b.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            weights.push(w);
            biases.push(b);
        }
        if off != bytes.len() {
            return Err(NetError::Format("trailing bytes".into()));
        }
        Ok(Mlp { widths, weights, biases })
    }
}

/// Adam accumulators and hyperparameters for one `Mlp`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        AdamState {
            m_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    state_step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(state_step as i32);
    let bc2 = 1.0 - beta2.powi(state_step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam step with bias correction, applied in place.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<(), NetError> {
    if grads.weights.len() != net.weights.len() {
        return Err(NetError::DimensionMismatch {
            expected: net.weights.len(),
            got: grads.weights.len(),
        });
    }
    state.step += 1;
    for l in 0..net.weights.len() {
        if grads.weights[l].len() != net.weights[l].len() {
            return Err(NetError::DimensionMismatch {
                expected: net.weights[l].len(),
                got: grads.weights[l].len(),
            });
        }
        adam_update(
            &mut net.weights[l],
            &grads.weights[l],
            &mut state.m_weights[l],
            &mut state.v_weights[l],
            state.step,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
        );
        adam_update(
            &mut net.biases[l],
            &grads.biases[l],
            &mut state.m_biases[l],
            &mut state.v_biases[l],
            state.step,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
        );
    }
    Ok(())
}

/// Sinusoidal embedding of a (possibly fractional) position. `sin` features
/// come first, then `cos`, at geometrically spaced frequencies.
pub fn position_embedding(pos: f64, dim: usize) -> Result<Vec<f64>, NetError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(NetError::OddEmbeddingDim(dim));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / half as f64 } else { 0.0 };
        let freq = 10_000.0_f64.powf(-exponent);
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    Ok(out)
}

/// Embedding of a diffusion step index; validates `s <= max_steps`.
pub fn timestep_embedding(s: usize, dim: usize, max_steps: usize) -> Result<Vec<f64>, NetError> {
    if s > max_steps {
        return Err(NetError::DimensionMismatch { expected: max_steps, got: s });
    }
    position_embedding(s as f64, dim)
}
