//! MTP heads on a frozen NTP backbone.
//!
//! The backbone is the base model minus its final block. Each of the `N`
//! heads is one transformer block (head 1 starts as a copy of the base
//! model's final block, the others are freshly initialized) followed by the
//! shared, frozen unembedding. With weighted hidden states (WHS) a head reads
//! `Σ_ℓ softmax(w/T)_ℓ · Z^ℓ` over backbone layers instead of `Z^{L-1}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Batch;
use crate::model::{
    attach_adapters_to, block_param_suffixes, init_block, is_adapter, layer_prefix,
    read_container, write_container, Checkpoint, Forward, ModelConfig,
};
use crate::numerics::{prob_dist_from_logits, streams, ParamStore, RngRecord, Scalar, Tensor, Var};
use crate::{MtpError, ProbDist, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtpConfig {
    pub n_heads: usize,
    pub whs: bool,
    pub temperature: f64,
    /// Initial value of every layer weight when `whs` is on.
    pub whs_init: f64,
}

impl Default for MtpConfig {
    fn default() -> Self {
        MtpConfig {
            n_heads: 2,
            whs: false,
            temperature: 0.1,
            whs_init: 0.1,
        }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(MtpError::InvalidConfig("need at least one head".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(MtpError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn head_prefix(n: usize) -> String {
    format!("head.{n}")
}

pub fn whs_name(n: usize) -> String {
    format!("head.{n}.whs_weights")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Backbone + heads + shared unembedding in one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct MtpModel {
    /// Configuration of the base model; backbone depth is `n_layers - 1`.
    pub config: ModelConfig,
    pub mtp: MtpConfig,
    pub params: ParamStore,
    pub rng: RngRecord,
    pub pretrain_lr: Option<f64>,
}

/// Builds an MTP model from a base checkpoint. The result is in heads-only
/// mode: backbone and unembedding frozen, heads trainable.
pub fn init_mtp(base: &Checkpoint, cfg: &MtpConfig, seed: u64) -> Result<MtpModel> {
    cfg.validate()?;
    let l = base.config.n_layers;
    if l < 2 {
        return Err(MtpError::InvalidConfig(format!("base has {l} layers, need >= 2")));
    }
    if base.params.names().any(|n| is_adapter(n)) {
        return Err(MtpError::InvalidConfig(
            "base checkpoint carries adapters; merge or drop them first".into(),
        ));
    }
    let last = layer_prefix(l - 1);
    let mut params = ParamStore::new();
    for (name, t) in base.params.iter() {
        if let Some(rest) = name.strip_prefix(&format!("{last}.")) {
            params.insert(format!("{}.{rest}", head_prefix(1)), t.clone());
        } else {
            params.insert(name.clone(), t.clone());
        }
    }
    let rng_record = RngRecord::new(seed, streams::HEAD_INIT);
    let mut rng = rng_record.rng();
    for n in 2..=cfg.n_heads {
        init_block(&base.config, &head_prefix(n), &mut rng, &mut params);
    }
    if cfg.whs {
        for n in 1..=cfg.n_heads {
            params.insert(
                whs_name(n),
                Tensor::filled(vec![l - 1], cfg.whs_init as f32).with_grad(true),
            );
        }
    }
    let mut config = base.config.clone();
    config.adapter_rank = 0;
    let mut m = MtpModel {
        config,
        mtp: cfg.clone(),
        params,
        rng: rng_record,
        pretrain_lr: base.pretrain_lr,
    };
    m.set_heads_only();
    Ok(m)
}

impl MtpModel {
    pub fn backbone_depth(&self) -> usize {
        self.config.n_layers - 1
    }

    /// Layers traversed by any head: backbone plus its own block.
    pub fn depth_per_head(&self) -> usize {
        self.backbone_depth() + 1
    }

    /// Freezes backbone and unembedding; heads (and WHS weights) trainable.
    pub fn set_heads_only(&mut self) {
        self.params.set_trainable(false, |_| true);
        self.params.set_trainable(true, is_head_param);
    }

    /// Joint mode: rank-`rank` adapters on every backbone q/k/v projection,
    /// heads fully trainable, everything else frozen.
    pub fn prepare_joint(&mut self, rank: usize, seed: u64) -> Result<()> {
        let prefixes: Vec<String> = (0..self.backbone_depth()).map(layer_prefix).collect();
        attach_adapters_to(&mut self.params, &self.config, &prefixes, rank, seed)?;
        self.config.adapter_rank = rank;
        self.params.set_trainable(false, |_| true);
        self.params
            .set_trainable(true, |n| is_head_param(n) || is_adapter(n));
        Ok(())
    }

    /// Names frozen in the current mode.
    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| !t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Replaces every `head.*` tensor with the one from `warm`.
    pub fn load_heads_from(&mut self, warm: &MtpModel) -> Result<()> {
        if warm.mtp.n_heads != self.mtp.n_heads || warm.config.hidden != self.config.hidden {
            return Err(MtpError::InvalidConfig(
                "warmup heads do not match this model's head layout".into(),
            ));
        }
        for (name, t) in warm.params.iter().filter(|(n, _)| is_head_param(n)) {
            let dst = self.params.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(MtpError::shape("load_heads_from", name.as_str()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn whs_weights(&self, n: usize) -> Option<&[f32]> {
        self.params.get(&whs_name(n)).ok().map(|t| t.data())
    }

    pub fn header(&self) -> Value {
        json!({
            "kind": "mtp",
            "model": self.config,
            "mtp": self.mtp,
            "rng": self.rng,
            "pretrain_lr": self.pretrain_lr,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_container(&mut buf, &self.header(), &self.params)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = read_container(bytes)?;
        Self::from_parts(&header, params)
    }

    pub fn from_parts(header: &Value, params: ParamStore) -> Result<Self> {
        if header.get("kind").and_then(Value::as_str) != Some("mtp") {
            return Err(MtpError::Format("not an MTP checkpoint".into()));
        }
        let m = MtpModel {
            config: serde_json::from_value(header["model"].clone())?,
            mtp: serde_json::from_value(header["mtp"].clone())?,
            rng: serde_json::from_value(header["rng"].clone())?,
            pretrain_lr: serde_json::from_value(header["pretrain_lr"].clone())?,
            params,
        };
        m.check_params()?;
        Ok(m)
    }

    fn check_params(&self) -> Result<()> {
        let mut expected = vec!["embed.tok", "embed.pos", "unembed.ln.gain", "unembed.ln.bias", "unembed.weight"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let mut blocks: Vec<String> = (0..self.backbone_depth()).map(layer_prefix).collect();
        blocks.extend((1..=self.mtp.n_heads).map(head_prefix));
        for b in &blocks {
            expected.extend(block_param_suffixes().iter().map(|s| format!("{b}.{s}")));
        }
        if self.config.adapter_rank > 0 {
            for l in 0..self.backbone_depth() {
                for p in ["q", "k", "v"] {
                    expected.push(format!("{}.attn.{p}.lora_a", layer_prefix(l)));
                    expected.push(format!("{}.attn.{p}.lora_b", layer_prefix(l)));
                }
            }
        }
        if self.mtp.whs {
            expected.extend((1..=self.mtp.n_heads).map(whs_name));
        }
        expected.sort();
        let actual: Vec<String> = self.params.names().cloned().collect();
        if expected != actual {
            return Err(MtpError::Format("MTP parameter set does not match its config".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Per-head logits `[rows * seq, vocab]` for a batch.
    pub fn head_logits(&self, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        let mut fwd = Forward::new(&self.config, &self.params);
        let heads = build_heads(&mut fwd, &self.mtp, batch)?;
        Ok(heads.iter().map(|&v| fwd.tape.value(v).to_vec()).collect())
    }
}

/// Records the backbone once and every head's logits on `fwd`'s tape.
pub fn build_heads<T: Scalar>(fwd: &mut Forward<'_, T>, mtp: &MtpConfig, batch: &Batch) -> Result<Vec<Var>> {
    let depth = fwd.config().n_layers - 1;
    let layout = fwd.layout(batch);
    let backbone = fwd.layers(batch, depth)?;
    let top = *backbone.last().expect("backbone depth >= 1");
    let mut logits = Vec::with_capacity(mtp.n_heads);
    for n in 1..=mtp.n_heads {
        let input = if mtp.whs {
            let w = fwd.param(&whs_name(n))?;
            let scaled = fwd.tape.scale(w, 1.0 / mtp.temperature)?;
            let mix = fwd.tape.softmax(scaled)?;
            fwd.tape.weighted_sum(mix, &backbone)?
        } else {
            top
        };
        let h = fwd.block(&head_prefix(n), input, &layout)?;
        logits.push(fwd.unembed(h)?);
    }
    Ok(logits)
}

/// One distribution per head for the token `n` steps past the end of `ids`.
pub fn mtp_forward(m: &MtpModel, ids: &[u32]) -> Result<Vec<ProbDist>> {
    if ids.is_empty() {
        return Err(MtpError::shape("mtp_forward", "empty context"));
    }
    let logits = m.head_logits(&Batch::single(ids))?;
    let v = m.config.vocab_size;
    logits
        .iter()
        .map(|l| prob_dist_from_logits(&l[l.len() - v..]))
        .collect()
}

/// `Σ_ℓ softmax(weights / temperature)_ℓ · layers[ℓ]`, elementwise over
/// same-shaped layer outputs.
pub fn whs_combine(layers: &[&[f32]], weights: &[f32], temperature: f64) -> Result<Vec<f32>> {
    if layers.len() != weights.len() || layers.is_empty() {
        return Err(MtpError::shape(
            "whs_combine",
            format!("{} layers vs {} weights", layers.len(), weights.len()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(MtpError::InvalidConfig(format!("temperature {temperature}")));
    }
    let mut tape = crate::numerics::Tape::<f32>::new();
    let w = tape.leaf(vec![weights.len()], weights.to_vec(), false)?;
    let n = layers[0].len();
    let inputs = layers
        .iter()
        .map(|z| tape.leaf(vec![n], z.to_vec(), false))
        .collect::<Result<Vec<_>>>()?;
    let scaled = tape.scale(w, 1.0 / temperature)?;
    let mix = tape.softmax(scaled)?;
    let out = tape.weighted_sum(mix, &inputs)?;
    Ok(tape.value(out).to_vec())
}

/// Random initialization of a whole MTP model straight from a config, used
/// when no pretrained base exists (tests and smoke runs).
pub fn init_random(config: ModelConfig, mtp: &MtpConfig, seed: u64) -> Result<MtpModel> {
    let base = Checkpoint::init(config, seed)?;
    init_mtp(&base, mtp, seed.wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{is_unembedding, next_token_dist};

    fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            hidden: 16,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 16,
            ..Default::default()
        }
    }

    #[test]
    fn head_one_matches_base_at_init() {
        let base = Checkpoint::init(toy(), 1).unwrap();
        let m = init_mtp(&base, &MtpConfig::default(), 2).unwrap();
        for ids in [vec![1u32, 2, 3], vec![1, 5, 7, 9, 11, 4]] {
            let heads = mtp_forward(&m, &ids).unwrap();
            assert_eq!(heads.len(), 2);
            assert_eq!(heads[0], next_token_dist(&base, &ids).unwrap());
        }
    }

    #[test]
    fn depth_and_frozen_set() {
        let base = Checkpoint::init(toy(), 1).unwrap();
        let m = init_mtp(&base, &MtpConfig::default(), 2).unwrap();
        assert_eq!(m.depth_per_head(), base.config.n_layers);
        let frozen = m.frozen_names();
        assert!(frozen.iter().all(|n| !is_head_param(n)));
        assert!(frozen.iter().any(|n| is_unembedding(n)));
        assert!(frozen.iter().any(|n| n.starts_with("layers.")));
        assert!(frozen.iter().any(|n| n.starts_with("embed.")));
        assert!(!frozen.iter().any(|n| n.starts_with("layers.2")));
    }

    #[test]
    fn same_seed_same_model() {
        let base = Checkpoint::init(toy(), 1).unwrap();
        let cfg = MtpConfig { n_heads: 3, whs: true, ..Default::default() };
        assert_eq!(init_mtp(&base, &cfg, 4).unwrap(), init_mtp(&base, &cfg, 4).unwrap());
        assert_ne!(init_mtp(&base, &cfg, 4).unwrap(), init_mtp(&base, &cfg, 5).unwrap());
    }

    #[test]
    fn whs_uniform_weights_average_layers() {
        let a = [1.0f32, 2.0, 3.0];
        let b = [3.0f32, 0.0, -3.0];
        let out = whs_combine(&[&a, &b], &[0.1, 0.1], 0.1).unwrap();
        assert_eq!(out, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn whs_shift_invariance() {
        let a = [1.0f32, -2.0];
        let b = [0.5f32, 4.0];
        let c = [2.0f32, 2.0];
        let x = whs_combine(&[&a, &b, &c], &[0.1, 0.3, -0.2], 0.1).unwrap();
        let y = whs_combine(&[&a, &b, &c], &[1.1, 1.3, 0.8], 0.1).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-5);
        }
        assert!(whs_combine(&[&a, &b], &[0.1], 0.1).is_err());
        assert!(whs_combine(&[&a], &[0.1], 0.0).is_err());
    }

    #[test]
    fn mtp_checkpoint_round_trip() {
        let base = Checkpoint::init(toy(), 1).unwrap();
        let mut m = init_mtp(&base, &MtpConfig { whs: true, ..Default::default() }, 2).unwrap();
        m.prepare_joint(2, 3).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = MtpModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn joint_mode_preserves_outputs_and_trains_adapters() {
        let base = Checkpoint::init(toy(), 1).unwrap();
        let mut m = init_mtp(&base, &MtpConfig::default(), 2).unwrap();
        let ids = [1u32, 4, 5, 6];
        let before = mtp_forward(&m, &ids).unwrap();
        m.prepare_joint(4, 7).unwrap();
        assert_eq!(mtp_forward(&m, &ids).unwrap(), before);
        let trainable = m.params.trainable_names();
        assert!(trainable.iter().all(|n| is_head_param(n) || is_adapter(n)));
        assert!(trainable.iter().any(|n| is_adapter(n)));
        assert!(!trainable.iter().any(|n| is_unembedding(n)));
    }

    #[test]
    fn base_with_adapters_rejected() {
        let mut base = Checkpoint::init(toy(), 1).unwrap();
        base.attach_adapters(2, 0).unwrap();
        assert!(init_mtp(&base, &MtpConfig::default(), 2).is_err());
        let mut two = toy();
        two.n_layers = 2;
        assert!(init_mtp(&Checkpoint::init(two, 0).unwrap(), &MtpConfig { n_heads: 0, ..Default::default() }, 0).is_err());
    }
}
