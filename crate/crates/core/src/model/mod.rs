//! Decoder-only transformer: embeddings, pre-norm blocks, the shared
//! unembedding, low-rank adapters and the checkpoint format.

mod container;
mod forward;

use std::cell::Cell;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use container::{read_container, write_container, FORMAT_VERSION, MAGIC};
pub use forward::{layer_prefix, shifted_targets, Forward};

use crate::data::Batch;
use crate::numerics::{prob_dist_from_logits, seeded, streams, Grads, ParamStore, RngRecord, Scalar, Tensor};
use crate::{MtpError, ProbDist, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub mlp_ratio: usize,
    /// 0 means no adapters.
    pub adapter_rank: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden: 64,
            n_heads: 4,
            vocab_size: 64,
            max_seq: 64,
            mlp_ratio: 4,
            adapter_rank: 0,
            init_std: 0.02,
            ln_eps: crate::numerics::LAYER_NORM_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MtpError::InvalidConfig(m));
        if self.n_layers < 2 {
            return bad(format!("n_layers {} < 2", self.n_layers));
        }
        if self.n_heads == 0 || self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return bad(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.vocab_size < 2 || self.max_seq == 0 || self.mlp_ratio == 0 {
            return bad("vocab_size, max_seq and mlp_ratio must be positive".into());
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return bad("init_std and ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }
}

fn gaussian(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data").with_grad(true)
}

/// Fresh parameters of one transformer block under `prefix`.
pub fn init_block(cfg: &ModelConfig, prefix: &str, rng: &mut impl Rng, params: &mut ParamStore) {
    let h = cfg.hidden;
    let f = cfg.mlp_hidden();
    let std = cfg.init_std;
    for ln in ["ln1", "ln2"] {
        params.insert(format!("{prefix}.{ln}.gain"), Tensor::filled(vec![h], 1.0).with_grad(true));
        params.insert(format!("{prefix}.{ln}.bias"), Tensor::zeros(vec![h]).with_grad(true));
    }
    for (name, din, dout) in [
        ("attn.q", h, h),
        ("attn.k", h, h),
        ("attn.v", h, h),
        ("attn.o", h, h),
        ("mlp.fc", h, f),
        ("mlp.proj", f, h),
    ] {
        params.insert(format!("{prefix}.{name}.weight"), gaussian(vec![din, dout], std, rng));
        params.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(vec![dout]).with_grad(true));
    }
}

/// Names of all tensors of the block under `prefix`, adapters excluded.
pub fn block_param_suffixes() -> Vec<String> {
    let mut v: Vec<String> = ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for lin in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc", "mlp.proj"] {
        v.push(format!("{lin}.weight"));
        v.push(format!("{lin}.bias"));
    }
    v
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

pub fn is_unembedding(name: &str) -> bool {
    name.starts_with("unembed.")
}

/// Per-layer hidden states `Z^1..Z^L` of one sequence, each `[seq, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub seq: usize,
    pub hidden: usize,
    /// Indexed by layer (0-based); layers not retained are empty.
    layers: Vec<Vec<f32>>,
}

impl HiddenStates {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output of layer `l` (1-based), if retained.
    pub fn layer(&self, l: usize) -> Option<&[f32]> {
        self.layers
            .get(l.checked_sub(1)?)
            .filter(|v| !v.is_empty())
            .map(Vec::as_slice)
    }

    pub fn position(&self, l: usize, t: usize) -> Option<&[f32]> {
        self.layer(l)
            .filter(|_| t < self.seq)
            .map(|z| &z[t * self.hidden..(t + 1) * self.hidden])
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|x| x.is_finite())
    }
}

/// Base model weights plus the metadata needed to replay and extend them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub rng: RngRecord,
    /// Learning rate the model was pretrained with; finetuning defaults to half.
    pub pretrain_lr: Option<f64>,
}

impl Checkpoint {
    /// Standard initialization: N(0, init_std) matrices and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng_record = RngRecord::new(seed, streams::MODEL_INIT);
        let mut rng = rng_record.rng();
        let mut params = ParamStore::new();
        let (h, v) = (config.hidden, config.vocab_size);
        params.insert("embed.tok", gaussian(vec![v, h], config.init_std, &mut rng));
        params.insert("embed.pos", gaussian(vec![config.max_seq, h], config.init_std, &mut rng));
        for l in 0..config.n_layers {
            init_block(&config, &layer_prefix(l), &mut rng, &mut params);
        }
        params.insert("unembed.ln.gain", Tensor::filled(vec![h], 1.0).with_grad(true));
        params.insert("unembed.ln.bias", Tensor::zeros(vec![h]).with_grad(true));
        params.insert("unembed.weight", gaussian(vec![v, h], config.init_std, &mut rng));
        let mut ck = Checkpoint {
            config,
            params,
            rng: rng_record,
            pretrain_lr: None,
        };
        if ck.config.adapter_rank > 0 {
            let rank = ck.config.adapter_rank;
            ck.config.adapter_rank = 0;
            ck.attach_adapters(rank, seed)?;
        }
        Ok(ck)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Adds `lora_a` (Gaussian, std 1/sqrt(in)) and `lora_b` (zeros) to every
    /// q/k/v projection of base layers `0..n_layers` and freezes everything
    /// else. The effective weight becomes `W + (1/rank) B A`.
    pub fn attach_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        let layers: Vec<String> = (0..self.config.n_layers).map(layer_prefix).collect();
        attach_adapters_to(&mut self.params, &self.config, &layers, rank, seed)?;
        self.params.set_trainable(false, |n| !is_adapter(n));
        self.config.adapter_rank = rank;
        Ok(())
    }

    pub fn header(&self) -> Value {
        json!({
            "kind": "base",
            "model": self.config,
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
        if header.get("kind").and_then(Value::as_str) != Some("base") {
            return Err(MtpError::Format("not a base-model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(header["model"].clone())?;
        let rng: RngRecord = serde_json::from_value(header["rng"].clone())?;
        let pretrain_lr = serde_json::from_value(header["pretrain_lr"].clone())?;
        let ck = Checkpoint {
            config,
            params,
            rng,
            pretrain_lr,
        };
        ck.check_params()?;
        Ok(ck)
    }

    /// Every config-implied tensor present exactly once, nothing extra.
    pub fn check_params(&self) -> Result<()> {
        let mut expected = vec![
            "embed.tok".to_string(),
            "embed.pos".to_string(),
            "unembed.ln.gain".to_string(),
            "unembed.ln.bias".to_string(),
            "unembed.weight".to_string(),
        ];
        for l in 0..self.config.n_layers {
            let p = layer_prefix(l);
            expected.extend(block_param_suffixes().iter().map(|s| format!("{p}.{s}")));
            if self.config.adapter_rank > 0 {
                for proj in ["q", "k", "v"] {
                    expected.push(format!("{p}.attn.{proj}.lora_a"));
                    expected.push(format!("{p}.attn.{proj}.lora_b"));
                }
            }
        }
        expected.sort();
        let actual: Vec<String> = self.params.names().cloned().collect();
        if expected != actual {
            let missing: Vec<_> = expected.iter().filter(|n| !actual.contains(n)).collect();
            let extra: Vec<_> = actual.iter().filter(|n| !expected.contains(n)).collect();
            return Err(MtpError::Format(format!(
                "parameter set mismatch; missing {missing:?}, unexpected {extra:?}"
            )));
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

    /// Logits at every position of every row, `[rows * seq, vocab]`.
    pub fn logits(&self, batch: &Batch) -> Result<Vec<f32>> {
        let mut fwd = Forward::new(&self.config, &self.params);
        let outs = fwd.layers(batch, self.config.n_layers)?;
        let logits = fwd.unembed(*outs.last().expect("n_layers >= 2"))?;
        Ok(fwd.tape.value(logits).to_vec())
    }
}

/// Attaches adapters to q/k/v of every block listed in `prefixes`.
pub fn attach_adapters_to(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    prefixes: &[String],
    rank: usize,
    seed: u64,
) -> Result<()> {
    if rank == 0 {
        return Err(MtpError::InvalidConfig("adapter rank must be >= 1".into()));
    }
    if params.names().any(|n| is_adapter(n)) {
        return Err(MtpError::AdaptersAttached);
    }
    let h = cfg.hidden;
    let mut rng = seeded(seed, streams::ADAPTER_INIT);
    for p in prefixes {
        for proj in ["q", "k", "v"] {
            let base = format!("{p}.attn.{proj}");
            params.get(&format!("{base}.weight"))?;
            params.insert(
                format!("{base}.lora_a"),
                gaussian(vec![rank, h], 1.0 / (h as f64).sqrt(), &mut rng),
            );
            params.insert(format!("{base}.lora_b"), Tensor::zeros(vec![h, rank]).with_grad(true));
        }
    }
    Ok(())
}

/// Runs the base model on one sequence.
pub fn forward_hidden(ck: &Checkpoint, ids: &[u32], return_all_layers: bool) -> Result<HiddenStates> {
    let batch = Batch::single(ids);
    let mut fwd = Forward::new(&ck.config, &ck.params);
    let outs = fwd.layers(&batch, ck.config.n_layers)?;
    let last = outs.len() - 1;
    let layers = outs
        .iter()
        .enumerate()
        .map(|(l, &v)| {
            if return_all_layers || l == last {
                fwd.tape.value(v).to_vec()
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(HiddenStates {
        seq: ids.len(),
        hidden: ck.config.hidden,
        layers,
    })
}

/// Applies the shared unembedding (layer norm + `W_u`) to rows of `z`.
pub fn unembed(ck: &Checkpoint, z: &[f32]) -> Result<Vec<f32>> {
    let h = ck.config.hidden;
    if z.is_empty() || z.len() % h != 0 {
        return Err(MtpError::shape("unembed", format!("{} values for hidden {h}", z.len())));
    }
    let mut fwd = Forward::new(&ck.config, &ck.params);
    let x = fwd.tape.leaf(vec![z.len() / h, h], z.to_vec(), false)?;
    let l = fwd.unembed(x)?;
    Ok(fwd.tape.value(l).to_vec())
}

/// p(x_{t+1} | ids) at the last position.
pub fn next_token_dist(ck: &Checkpoint, ids: &[u32]) -> Result<ProbDist> {
    if ids.is_empty() {
        return Err(MtpError::shape("next_token_dist", "empty context"));
    }
    let logits = ck.logits(&Batch::single(ids))?;
    let v = ck.config.vocab_size;
    prob_dist_from_logits(&logits[logits.len() - v..])
}

/// NTP loss on a batch's target spans, optionally with gradients.
pub fn ntp_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    batch: &Batch,
    with_grads: bool,
) -> Result<(f64, Grads<T>)> {
    let mut fwd = Forward::new(cfg, params);
    let outs = fwd.layers(batch, cfg.n_layers)?;
    let logits = fwd.unembed(*outs.last().expect("n_layers >= 2"))?;
    let (targets, mask) = shifted_targets(batch, 1);
    let (loss, _) = fwd.tape.cross_entropy(logits, &targets, &mask)?;
    let value = fwd.tape.value(loss)[0].as_f64();
    if !with_grads {
        return Ok((value, Grads::new()));
    }
    fwd.tape.backward(loss)?;
    Ok((value, fwd.grads()))
}

/// Anything that yields next-token distributions for a set of contexts.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;

    /// One distribution per context. Implementations may batch
    /// equal-length contexts, but results must equal one-at-a-time calls.
    fn next_dists(&self, contexts: &[Vec<u32>]) -> Result<Vec<ProbDist>>;
}

impl NextTokenModel for Checkpoint {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_dists(&self, contexts: &[Vec<u32>]) -> Result<Vec<ProbDist>> {
        let v = self.config.vocab_size;
        let mut out: Vec<Option<ProbDist>> = vec![None; contexts.len()];
        // group equal lengths so each group is one padded-free batch
        let mut order: Vec<usize> = (0..contexts.len()).collect();
        order.sort_by_key(|&i| (contexts[i].len(), i));
        for group in order.chunk_by(|&a, &b| contexts[a].len() == contexts[b].len()) {
            let rows: Vec<Vec<u32>> = group.iter().map(|&i| contexts[i].clone()).collect();
            let batch = Batch::stacked(&rows)?;
            let logits = self.logits(&batch)?;
            let seq = batch.seq;
            for (r, &i) in group.iter().enumerate() {
                let at = (r * seq + seq - 1) * v;
                out[i] = Some(prob_dist_from_logits(&logits[at..at + v])?);
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every context assigned")).collect())
    }
}

/// Counts how many sequences a wrapped model was run on.
pub struct ForwardCounter<'a, M: ?Sized> {
    inner: &'a M,
    count: Cell<u64>,
}

impl<'a, M: NextTokenModel + ?Sized> ForwardCounter<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        ForwardCounter {
            inner,
            count: Cell::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.get()
    }

    pub fn reset(&self) {
        self.count.set(0);
    }
}

impl<M: NextTokenModel + ?Sized> NextTokenModel for ForwardCounter<'_, M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_dists(&self, contexts: &[Vec<u32>]) -> Result<Vec<ProbDist>> {
        self.count.set(self.count.get() + contexts.len() as u64);
        self.inner.next_dists(contexts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 16,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_layers: 1, ..toy() }.validate().is_err());
        assert!(ModelConfig { n_heads: 3, ..toy() }.validate().is_err());
        assert!(toy().validate().is_ok());
    }

    #[test]
    fn causality_is_bitwise() {
        let ck = Checkpoint::init(toy(), 3).unwrap();
        let a = [1u32, 3, 5, 7, 9, 2];
        let mut b = a;
        b[4] = 11;
        let ha = forward_hidden(&ck, &a, true).unwrap();
        let hb = forward_hidden(&ck, &b, true).unwrap();
        for l in 1..=2 {
            for t in 0..4 {
                assert_eq!(ha.position(l, t), hb.position(l, t));
            }
            assert_ne!(ha.position(l, 4), hb.position(l, 4));
        }
    }

    #[test]
    fn prefix_property() {
        let ck = Checkpoint::init(toy(), 4).unwrap();
        let ids = [1u32, 3, 5, 7, 9, 2, 4];
        let full = forward_hidden(&ck, &ids, true).unwrap();
        let pre = forward_hidden(&ck, &ids[..4], true).unwrap();
        for l in 1..=2 {
            for t in 0..4 {
                let x = full.position(l, t).unwrap();
                let y = pre.position(l, t).unwrap();
                for (a, b) in x.iter().zip(y) {
                    assert!((a - b).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn overlong_input_rejected() {
        let ck = Checkpoint::init(toy(), 1).unwrap();
        let ids = vec![1u32; 17];
        assert!(matches!(forward_hidden(&ck, &ids, false), Err(MtpError::Overlong { .. })));
    }

    #[test]
    fn only_last_layer_retained_on_request() {
        let ck = Checkpoint::init(toy(), 1).unwrap();
        let h = forward_hidden(&ck, &[1, 2, 3], false).unwrap();
        assert!(h.layer(1).is_none());
        assert!(h.layer(2).is_some());
        assert_eq!(h.n_layers(), 2);
    }

    #[test]
    fn unembed_of_zero_vector_is_bias_projection() {
        let ck = Checkpoint::init(toy(), 2).unwrap();
        // layer norm of a zero row is exactly the bias, which is zero at init
        let logits = unembed(&ck, &[0.0; 16]).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
        let z: Vec<f32> = (0..32).map(|i| (i % 16) as f32 * 0.1).collect();
        let two = unembed(&ck, &z).unwrap();
        assert_eq!(&two[..12], &two[12..]);
        let p = prob_dist_from_logits(&two[..12]).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(unembed(&ck, &[0.0; 15]).is_err());
    }

    #[test]
    fn init_is_near_uniform() {
        for seed in 0..3 {
            let ck = Checkpoint::init(ModelConfig { vocab_size: 64, ..toy() }, seed).unwrap();
            let p = next_token_dist(&ck, &[1, 3, 4, 5]).unwrap();
            let h: f64 = -p.probs().iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            let uniform = 64f64.ln();
            assert!((h - uniform).abs() < 0.2 * uniform, "entropy {h}");
        }
    }

    #[test]
    fn adapters_preserve_outputs_bitwise() {
        let mut ck = Checkpoint::init(toy(), 5).unwrap();
        let ids = [1u32, 4, 6, 8, 3];
        let before = ck.logits(&Batch::single(&ids)).unwrap();
        ck.attach_adapters(4, 9).unwrap();
        let after = ck.logits(&Batch::single(&ids)).unwrap();
        assert_eq!(before, after);
        assert!(matches!(ck.attach_adapters(4, 9), Err(MtpError::AdaptersAttached)));
        // rank * (in + out) per adapted matrix, 3 matrices per layer
        assert_eq!(ck.params.trainable_count(), 2 * 3 * 4 * (16 + 16));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut ck = Checkpoint::init(toy(), 6).unwrap();
        ck.pretrain_lr = Some(3e-3);
        ck.attach_adapters(2, 1).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let ids = [1u32, 2, 3];
        assert_eq!(
            back.logits(&Batch::single(&ids)).unwrap(),
            ck.logits(&Batch::single(&ids)).unwrap()
        );
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let ck = Checkpoint::init(toy(), 6).unwrap();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let good = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn batched_next_dists_equal_sequential() {
        let ck = Checkpoint::init(toy(), 8).unwrap();
        let ctxs = vec![vec![1u32, 2, 3], vec![1, 5, 6], vec![1, 7], vec![1, 2, 9]];
        let batched = ck.next_dists(&ctxs).unwrap();
        for (c, p) in ctxs.iter().zip(&batched) {
            assert_eq!(&next_token_dist(&ck, c).unwrap(), p);
        }
        let counter = ForwardCounter::new(&ck);
        counter.next_dists(&ctxs).unwrap();
        assert_eq!(counter.count(), 4);
    }
}
