//! Parameterized building blocks. Each layer registers its tensors in a
//! [`ParamStore`] at construction and records onto a [`Graph`] at forward time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::kernels::matmul;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Affine map `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(vec![fan_in, fan_out], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(vec![fan_out], bound, rng));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Graph-free forward pass on `rows` row-major inputs.
    pub fn eval(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = matmul(x, store.get(self.weight).data(), rows, self.fan_in, self.fan_out);
        let b = store.get(self.bias).data();
        for row in out.chunks_mut(self.fan_out) {
            row.iter_mut().zip(b).for_each(|(o, c)| *o += c);
        }
        out
    }
}

/// ReLU multilayer perceptron; the last layer is linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.input_dim() {
            return Err(Error::shape(format!(
                "MLP expects [n, {}], got {:?}",
                self.input_dim(),
                g.shape(x)
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Graph-free forward pass on `rows` row-major inputs.
    pub fn eval(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        self.eval_from(store, x, rows, 0)
    }

    /// Forward pass starting at layer `first`, whose input is `x`.
    pub fn eval_from(&self, store: &ParamStore, x: &[f64], rows: usize, first: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate().skip(first) {
            h = layer.eval(store, &h, rows);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::new(vec![dim], vec![1.0; dim]).unwrap());
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Multi-head causal self-attention with output projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub max_len: usize,
}

impl CausalSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must divide into heads");
        CausalSelfAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            max_len,
        }
    }

    /// `x` is `[batch*seq, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, seq: usize) -> Result<Var> {
        if seq > self.max_len {
            return Err(Error::invalid(format!(
                "sequence of {seq} tokens exceeds context of {}",
                self.max_len
            )));
        }
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let a = g.causal_attention(q, k, v, batch, seq, self.heads)?;
        self.output.forward(g, store, a)
    }
}

/// Pre-norm decoder block: attention and a 4x-wide MLP, both residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        TransformerBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: CausalSelfAttention::new(store, &format!("{name}.attn"), dim, heads, max_len, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, 4 * dim, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, batch, seq)?;
        let x = g.add(x, a)?;
        let h = self.ln_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn init_within_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(0).rng();
        let l = Linear::new(&mut store, "l", 16, 4, &mut rng);
        let bound = 0.25;
        assert!(store.get(l.weight).data().iter().all(|w| w.abs() <= bound));
        assert!(store.get(l.bias).data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(0).rng();
        let mlp = Mlp::new(&mut store, "m", &[3, 8, 2], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(mlp.forward(&mut g, &store, x).is_err());
    }

    #[test]
    fn overlong_sequence_rejected() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(0).rng();
        let attn = CausalSelfAttention::new(&mut store, "a", 4, 2, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(vec![4, 4], vec![0.1; 16]).unwrap();
        assert!(matches!(
            attn.forward(&mut g, &store, x, 1, 4),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn causal_mask_is_bitwise() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(5).rng();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 6, &mut rng);
        let base: Vec<f64> = (0..6 * 8).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect();
        let run = |tokens: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(vec![6, 8], tokens.to_vec()).unwrap();
            let y = block.forward(&mut g, &store, x, 1, 6).unwrap();
            g.value(y).to_vec()
        };
        let out = run(&base);
        for t in 0..5 {
            let mut perturbed = base.clone();
            for v in &mut perturbed[(t + 1) * 8..] {
                *v += 3.7;
            }
            let out2 = run(&perturbed);
            for i in 0..(t + 1) * 8 {
                assert_eq!(out[i].to_bits(), out2[i].to_bits(), "position {t}");
            }
        }
    }
}
