use std::collections::HashMap;

use super::ModelConfig;
use crate::data::Batch;
use crate::numerics::{AttnLayout, Grads, ParamStore, Scalar, Tape, Var};
use crate::{MtpError, Result};

/// One forward pass recorded on a fresh tape, binding parameters lazily.
pub struct Forward<'a, T: Scalar = f32> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore<T>,
    pub tape: Tape<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore<T>) -> Self {
        Forward {
            cfg,
            params,
            tape: Tape::new(),
            bound: HashMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?;
        let v = self
            .tape
            .leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn layout(&self, batch: &Batch) -> AttnLayout {
        AttnLayout {
            batch: batch.rows,
            seq: batch.seq,
            n_heads: self.cfg.n_heads,
            key_valid: batch.attn_mask.clone(),
        }
    }

    /// Token plus learned absolute position embeddings.
    pub fn embed(&mut self, batch: &Batch) -> Result<Var> {
        if batch.seq > self.cfg.max_seq {
            return Err(MtpError::Overlong {
                len: batch.seq,
                max: self.cfg.max_seq,
            });
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch.rows).flat_map(|_| 0..batch.seq).collect();
        let tok = self.param("embed.tok")?;
        let pos = self.param("embed.pos")?;
        let te = self.tape.embedding(tok, &ids)?;
        let pe = self.tape.embedding(pos, &positions)?;
        self.tape.add(te, pe)
    }

    /// `x @ W + b`, plus `(1/rank) * x @ A^T @ B^T` when adapters exist.
    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w, false, false)?;
        let mut y = self.tape.add_row(y, b)?;
        let a_name = format!("{prefix}.lora_a");
        if self.params.contains(&a_name) {
            let a = self.param(&a_name)?;
            let bm = self.param(&format!("{prefix}.lora_b"))?;
            let rank = self.tape.shape(a)[0];
            let down = self.tape.matmul(x, a, false, true)?;
            let up = self.tape.matmul(down, bm, false, true)?;
            let delta = self.tape.scale(up, 1.0 / rank as f64)?;
            y = self.tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// Pre-norm transformer block whose parameters live under `prefix`.
    pub fn block(&mut self, prefix: &str, x: Var, layout: &AttnLayout) -> Result<Var> {
        let eps = self.cfg.ln_eps;
        let g1 = self.param(&format!("{prefix}.ln1.gain"))?;
        let b1 = self.param(&format!("{prefix}.ln1.bias"))?;
        let a = self.tape.layer_norm(x, g1, b1, eps)?;
        let q = self.linear(&format!("{prefix}.attn.q"), a)?;
        let k = self.linear(&format!("{prefix}.attn.k"), a)?;
        let v = self.linear(&format!("{prefix}.attn.v"), a)?;
        let att = self.tape.attention(q, k, v, layout)?;
        let o = self.linear(&format!("{prefix}.attn.o"), att)?;
        let x = self.tape.add(x, o)?;
        let g2 = self.param(&format!("{prefix}.ln2.gain"))?;
        let b2 = self.param(&format!("{prefix}.ln2.bias"))?;
        let m = self.tape.layer_norm(x, g2, b2, eps)?;
        let f = self.linear(&format!("{prefix}.mlp.fc"), m)?;
        let f = self.tape.gelu(f)?;
        let p = self.linear(&format!("{prefix}.mlp.proj"), f)?;
        self.tape.add(x, p)
    }

    /// Shared unembedding: final layer norm then `W_u`, giving logits.
    pub fn unembed(&mut self, x: Var) -> Result<Var> {
        let g = self.param("unembed.ln.gain")?;
        let b = self.param("unembed.ln.bias")?;
        let w = self.param("unembed.weight")?;
        let n = self.tape.layer_norm(x, g, b, self.cfg.ln_eps)?;
        self.tape.matmul(n, w, false, true)
    }

    /// Embedding followed by base layers `0..n`; returns every layer output.
    pub fn layers(&mut self, batch: &Batch, n: usize) -> Result<Vec<Var>> {
        let layout = self.layout(batch);
        let mut x = self.embed(batch)?;
        let mut outs = Vec::with_capacity(n);
        for l in 0..n {
            x = self.block(&layer_prefix(l), x, &layout)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Gradients of every bound trainable parameter.
    pub fn grads(&self) -> Grads<T> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("layers.{l}")
}

/// Next-token targets and loss mask for a batch: position `t` predicts
/// `ids[t + offset]`, counted only if every token in `t+1 ..= t+offset`
/// belongs to the target span.
pub fn shifted_targets(batch: &Batch, offset: usize) -> (Vec<usize>, Vec<bool>) {
    let n = batch.rows * batch.seq;
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for r in 0..batch.rows {
        for t in 0..batch.seq {
            let i = r * batch.seq + t;
            if t + offset >= batch.seq {
                continue;
            }
            let all_target = (1..=offset).all(|j| batch.loss_mask[i + j] == 1);
            if all_target {
                targets[i] = batch.ids[i + offset] as usize;
                mask[i] = true;
            }
        }
    }
    (targets, mask)
}
