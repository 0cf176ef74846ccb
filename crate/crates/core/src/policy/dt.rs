use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::PolicyArch;
use super::PolicyConfig;
use crate::nn::{Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, TransformerBlock, Var};
use crate::Result;

/// One timestep of a sequence-model context.
#[derive(Debug, Clone, PartialEq)]
pub struct DtStep {
    pub s: Vec<f64>,
    pub g: Vec<f64>,
    /// Q value of the step; ignored by OCBC models.
    pub q: f64,
    /// `None` for the slot being predicted.
    pub a: Option<usize>,
}

/// Causal transformer over interleaved per-step tokens `⟨s, g, Q, a⟩`,
/// omitting `g` without goal conditioning and `Q` for OCBC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DtNet {
    embed_s: Linear,
    embed_g: Option<Linear>,
    embed_q: Option<Linear>,
    embed_a: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    q_head: Option<Linear>,
    a_head: Linear,
    pub context: usize,
    dim: usize,
}

/// Flattened, normalized inputs for a padded batch of sequences.
pub(crate) struct DtInputs {
    pub batch: usize,
    pub steps: usize,
    pub s: Vec<f64>,
    pub g: Vec<f64>,
    pub q: Vec<f64>,
    pub a: Vec<f64>,
}

impl DtNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, arch: &PolicyArch, cfg: &PolicyConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let uses_q = cfg.variant.uses_q();
        let k = 2 + usize::from(arch.goal_dim > 0) + usize::from(uses_q);
        let embed_s = Linear::new(store, "dt.embed_s", arch.obs_dim, d, rng);
        let embed_g = (arch.goal_dim > 0).then(|| Linear::new(store, "dt.embed_g", arch.goal_dim, d, rng));
        let embed_q = uses_q.then(|| Linear::new(store, "dt.embed_q", 1, d, rng));
        let embed_a = Linear::new(store, "dt.embed_a", arch.n_actions, d, rng);
        let pos = store.add("dt.pos", Tensor::uniform(vec![cfg.context, d], 0.1, rng));
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("dt.block{i}"), d, cfg.heads, cfg.context * k, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "dt.ln_f", d);
        let q_head = uses_q.then(|| Linear::new(store, "dt.q_head", d, 1, rng));
        let a_head = Linear::new(store, "dt.a_head", d, arch.n_actions, rng);
        DtNet {
            embed_s,
            embed_g,
            embed_q,
            embed_a,
            pos,
            blocks,
            ln_f,
            q_head,
            a_head,
            context: cfg.context,
            dim: d,
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        2 + usize::from(self.embed_g.is_some()) + usize::from(self.embed_q.is_some())
    }

    /// Q predictions `[batch*steps, 1]` read at the token before `Q`, and
    /// action scores `[batch*steps, n_actions]` read at the token before `a`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inp: &DtInputs) -> Result<(Option<Var>, Var)> {
        let rows = inp.batch * inp.steps;
        let d = self.dim;
        let k = self.tokens_per_step();
        let idx: Vec<usize> = (0..rows).map(|i| i % inp.steps).collect();
        let table = g.param(store, self.pos);
        let pos = g.gather_rows(table, &idx)?;

        let mut tokens = Vec::with_capacity(k);
        let s = g.constant(vec![rows, self.embed_s.fan_in], inp.s.clone())?;
        tokens.push(self.embed_s.forward(g, store, s)?);
        if let Some(e) = &self.embed_g {
            let x = g.constant(vec![rows, e.fan_in], inp.g.clone())?;
            tokens.push(e.forward(g, store, x)?);
        }
        if let Some(e) = &self.embed_q {
            let x = g.constant(vec![rows, 1], inp.q.clone())?;
            tokens.push(e.forward(g, store, x)?);
        }
        let a = g.constant(vec![rows, self.embed_a.fan_in], inp.a.clone())?;
        tokens.push(self.embed_a.forward(g, store, a)?);
        for t in tokens.iter_mut() {
            *t = g.add(*t, pos)?;
        }
        let x = g.concat_cols(&tokens)?;
        let mut x = g.reshape(x, vec![rows * k, d])?;
        for block in &self.blocks {
            x = block.forward(g, store, x, inp.batch, inp.steps * k)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        let y = g.reshape(x, vec![rows, k * d])?;

        let a_src = k - 2;
        let a_feat = g.slice_cols(y, a_src * d, (a_src + 1) * d)?;
        let scores = self.a_head.forward(g, store, a_feat)?;
        let q_out = match &self.q_head {
            Some(head) => {
                let q_src = usize::from(self.embed_g.is_some());
                let feat = g.slice_cols(y, q_src * d, (q_src + 1) * d)?;
                Some(head.forward(g, store, feat)?)
            }
            None => None,
        };
        Ok((q_out, scores))
    }
}
