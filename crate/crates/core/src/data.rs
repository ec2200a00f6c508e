//! Synthetic corpora standing in for a translation dataset and for
//! open-ended text, plus batching and the line-delimited record format.
//!
//! Translation sequences are rendered as `BOS TRANSLATE <src> SEP <tgt>`
//! where the target is a per-token substitution cipher of the source. The
//! `ambiguity` knob replaces each target token by a random alternative with
//! that probability, moving the task from deterministic towards open-ended.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{seeded, streams};
use crate::{MtpError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const TRANSLATE: u32 = 3;
const N_SPECIAL: usize = 4;

pub const MAX_VOCAB: usize = 256;

/// Token strings and their contiguous ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials followed by a source alphabet `s00..` and a target alphabet
    /// `t00..` of equal size.
    pub fn standard(size: usize) -> Result<Self> {
        if !(N_SPECIAL + 4..=MAX_VOCAB).contains(&size) {
            return Err(MtpError::InvalidConfig(format!(
                "vocab size {size} outside {}..={MAX_VOCAB}",
                N_SPECIAL + 4
            )));
        }
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<sep>", "<translate>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let alpha = (size - N_SPECIAL) / 2;
        tokens.extend((0..alpha).map(|i| format!("s{i:02}")));
        tokens.extend((0..alpha).map(|i| format!("t{i:02}")));
        // odd leftover slot, never produced by the generators
        tokens.extend((tokens.len()..size).map(|i| format!("<unused{i}>")));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn alphabet_size(&self) -> usize {
        (self.tokens.len() - N_SPECIAL) / 2
    }

    pub fn source_ids(&self) -> std::ops::Range<u32> {
        let a = self.alphabet_size() as u32;
        N_SPECIAL as u32..N_SPECIAL as u32 + a
    }

    pub fn target_ids(&self) -> std::ops::Range<u32> {
        let a = self.alphabet_size() as u32;
        N_SPECIAL as u32 + a..N_SPECIAL as u32 + 2 * a
    }

    /// All non-special ids usable as content.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        N_SPECIAL as u32..N_SPECIAL as u32 + 2 * self.alphabet_size() as u32
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One training or evaluation sequence. The target span is always the
/// suffix of `ids`; `loss_mask` is 1 exactly there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencePair {
    pub ids: Vec<u32>,
    #[serde(rename = "mask")]
    pub loss_mask: Vec<u8>,
    #[serde(skip)]
    pub target_len: usize,
}

impl SequencePair {
    pub fn new(ids: Vec<u32>, target_len: usize) -> Result<Self> {
        if target_len > ids.len() {
            return Err(MtpError::InvalidConfig(format!(
                "target_len {target_len} exceeds sequence length {}",
                ids.len()
            )));
        }
        let start = ids.len() - target_len;
        let loss_mask = (0..ids.len()).map(|i| u8::from(i >= start)).collect();
        Ok(SequencePair {
            ids,
            loss_mask,
            target_len,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_start(&self) -> usize {
        self.ids.len() - self.target_len
    }

    pub fn target(&self) -> &[u32] {
        &self.ids[self.target_start()..]
    }

    fn validate(&mut self) -> Result<()> {
        if self.ids.len() != self.loss_mask.len() {
            return Err(MtpError::Format(format!(
                "ids/mask length {} vs {}",
                self.ids.len(),
                self.loss_mask.len()
            )));
        }
        self.target_len = self.loss_mask.iter().filter(|&&m| m == 1).count();
        let start = self.ids.len() - self.target_len;
        let suffix_ok = self
            .loss_mask
            .iter()
            .enumerate()
            .all(|(i, &m)| m == u8::from(i >= start));
        if !suffix_ok {
            return Err(MtpError::Format("loss mask must be a 0/1 suffix".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Translation,
    OpenEnded,
}

/// Everything that determines a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub min_target_len: usize,
    pub seed: u64,
    /// Per-token probability that the target deviates from the cipher.
    pub ambiguity: f64,
    pub vocab_size: usize,
    pub src_len_min: usize,
    pub src_len_max: usize,
    /// Seed of the cipher (translation) or transition table (open-ended):
    /// the "language", shared across corpora that differ only in `seed`.
    pub cipher_seed: u64,
    /// Content length of open-ended sequences.
    pub open_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            task: TaskKind::Translation,
            n_train: 16000,
            n_eval: 50,
            min_target_len: 20,
            seed: 0,
            ambiguity: 0.0,
            vocab_size: 64,
            src_len_min: 24,
            src_len_max: 24,
            cipher_seed: 0,
            open_len: 200,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MtpError::InvalidConfig(m));
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("n_train and n_eval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad(format!("ambiguity {} outside [0, 1]", self.ambiguity));
        }
        Vocab::standard(self.vocab_size)?;
        match self.task {
            TaskKind::Translation => {
                if self.src_len_min == 0 || self.src_len_min > self.src_len_max {
                    return bad(format!(
                        "source length range {}..={} is empty",
                        self.src_len_min, self.src_len_max
                    ));
                }
                if self.src_len_max < self.min_target_len {
                    return bad(format!(
                        "src_len_max {} cannot satisfy min_target_len {}",
                        self.src_len_max, self.min_target_len
                    ));
                }
            }
            TaskKind::OpenEnded => {
                if self.open_len / 2 < self.min_target_len || self.open_len < 4 {
                    return bad(format!(
                        "open_len {} too short for min_target_len {}",
                        self.open_len, self.min_target_len
                    ));
                }
            }
        }
        Ok(())
    }

    /// Longest sequence this spec can produce.
    pub fn max_len(&self) -> usize {
        match self.task {
            TaskKind::Translation => 3 + 2 * self.src_len_max,
            TaskKind::OpenEnded => 1 + self.open_len,
        }
    }
}

/// Order-2 Markov chain over content tokens: each context pair has a
/// preferred successor taken with probability `1 - ambiguity`, otherwise
/// the successor is uniform.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    content: Vec<u32>,
    preferred: Vec<u32>,
    ambiguity: f64,
}

impl MarkovChain {
    pub fn new(vocab: &Vocab, ambiguity: f64, seed: u64) -> Self {
        let content: Vec<u32> = vocab.content_ids().collect();
        let n = content.len();
        let mut rng = seeded(seed, streams::MARKOV);
        let preferred = (0..n * n)
            .map(|_| content[rng.random_range(0..n)])
            .collect();
        MarkovChain {
            content,
            preferred,
            ambiguity,
        }
    }

    fn slot(&self, id: u32) -> usize {
        (id - self.content[0]) as usize
    }

    pub fn next_dist(&self, a: u32, b: u32) -> Vec<f64> {
        let n = self.content.len();
        let mut p = vec![self.ambiguity / n as f64; n];
        let pref = self.preferred[self.slot(a) * n + self.slot(b)];
        p[self.slot(pref)] += 1.0 - self.ambiguity;
        p
    }

    fn sample(&self, a: u32, b: u32, rng: &mut impl Rng) -> u32 {
        if rng.random::<f64>() < self.ambiguity {
            self.content[rng.random_range(0..self.content.len())]
        } else {
            let n = self.content.len();
            self.preferred[self.slot(a) * n + self.slot(b)]
        }
    }
}

/// Stateless sequence generator for one [`CorpusSpec`].
#[derive(Debug, Clone)]
pub struct Generator {
    spec: CorpusSpec,
    vocab: Vocab,
    cipher: Vec<u32>,
    chain: MarkovChain,
}

impl Generator {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = Vocab::standard(spec.vocab_size)?;
        let mut cipher: Vec<u32> = vocab.target_ids().collect();
        cipher.shuffle(&mut seeded(spec.cipher_seed, streams::CIPHER));
        let chain = MarkovChain::new(&vocab, spec.ambiguity, spec.cipher_seed);
        Ok(Generator {
            spec: spec.clone(),
            vocab,
            cipher,
            chain,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    /// The deterministic source→target substitution.
    pub fn encipher(&self, src: u32) -> u32 {
        self.cipher[(src - self.vocab.source_ids().start) as usize]
    }

    /// Renders a translation pair for an explicit source string.
    pub fn translate(&self, source: &[u32], rng: &mut impl Rng) -> Result<SequencePair> {
        let srcs = self.vocab.source_ids();
        if let Some(&bad) = source.iter().find(|id| !srcs.contains(id)) {
            return Err(MtpError::OutOfRange {
                what: "source token",
                detail: format!("{bad}"),
            });
        }
        let tgt_range = self.vocab.target_ids();
        let alpha = self.vocab.alphabet_size() as u32;
        let mut ids = Vec::with_capacity(3 + 2 * source.len());
        ids.extend([BOS, TRANSLATE]);
        ids.extend_from_slice(source);
        ids.push(SEP);
        for &s in source {
            let clean = self.encipher(s);
            let tok = if self.spec.ambiguity > 0.0 && rng.random::<f64>() < self.spec.ambiguity {
                // uniform over the other target tokens
                let k = rng.random_range(0..alpha - 1);
                let alt = tgt_range.start + k;
                if alt >= clean {
                    alt + 1
                } else {
                    alt
                }
            } else {
                clean
            };
            ids.push(tok);
        }
        SequencePair::new(ids, source.len())
    }

    /// A random translation pair; eval pairs honor `min_target_len`.
    pub fn translation_pair(&self, rng: &mut impl Rng, for_eval: bool) -> Result<SequencePair> {
        let lo = if for_eval {
            self.spec.src_len_min.max(self.spec.min_target_len)
        } else {
            self.spec.src_len_min
        };
        let len = rng.random_range(lo..=self.spec.src_len_max);
        let srcs = self.vocab.source_ids();
        let source: Vec<u32> = (0..len).map(|_| rng.random_range(srcs.clone())).collect();
        self.translate(&source, rng)
    }

    /// `BOS` followed by `open_len` chain tokens; the target span is the
    /// second half.
    pub fn open_ended(&self, rng: &mut impl Rng) -> Result<SequencePair> {
        let content = &self.chain.content;
        let mut ids = vec![BOS];
        for _ in 0..2 {
            ids.push(content[rng.random_range(0..content.len())]);
        }
        while ids.len() < self.spec.open_len + 1 {
            let n = ids.len();
            let next = self.chain.sample(ids[n - 2], ids[n - 1], rng);
            ids.push(next);
        }
        SequencePair::new(ids, self.spec.open_len / 2)
    }

    pub fn pair(&self, rng: &mut impl Rng, for_eval: bool) -> Result<SequencePair> {
        match self.spec.task {
            TaskKind::Translation => self.translation_pair(rng, for_eval),
            TaskKind::OpenEnded => self.open_ended(rng),
        }
    }
}

pub fn gen_translation_pair(spec: &CorpusSpec, rng: &mut impl Rng) -> Result<SequencePair> {
    Generator::new(spec)?.translation_pair(rng, false)
}

pub fn gen_open_ended(spec: &CorpusSpec, rng: &mut impl Rng) -> Result<SequencePair> {
    Generator::new(spec)?.open_ended(rng)
}

/// Train and eval splits generated from one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<SequencePair>,
    pub eval: Vec<SequencePair>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        let g = Generator::new(spec)?;
        let mut rng = seeded(spec.seed, streams::CORPUS_TRAIN);
        let train = (0..spec.n_train)
            .map(|_| g.pair(&mut rng, false))
            .collect::<Result<_>>()?;
        let mut rng = seeded(spec.seed, streams::CORPUS_EVAL);
        let eval = (0..spec.n_eval)
            .map(|_| g.pair(&mut rng, true))
            .collect::<Result<_>>()?;
        Ok(Corpus { train, eval })
    }

    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.eval)
            .map(SequencePair::len)
            .max()
            .unwrap_or(0)
    }
}

/// Writes one `{"ids":[...],"mask":[...]}` record per line.
pub fn write_jsonl(pairs: &[SequencePair], mut w: impl Write) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<SequencePair>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: SequencePair = serde_json::from_str(&line)
            .map_err(|e| MtpError::Format(format!("record {}: {e}", i + 1)))?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

/// A right-padded block of sequences laid out row-major `[rows, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    /// False on padding; attention never reads these keys.
    pub attn_mask: Vec<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SequencePair], pad_to: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(MtpError::DegenerateBatch("no sequences".into()));
        }
        let mut b = Batch {
            rows: pairs.len(),
            seq: pad_to,
            ids: vec![PAD; pairs.len() * pad_to],
            loss_mask: vec![0; pairs.len() * pad_to],
            attn_mask: vec![false; pairs.len() * pad_to],
        };
        for (r, p) in pairs.iter().enumerate() {
            if p.len() > pad_to {
                return Err(MtpError::Overlong {
                    len: p.len(),
                    max: pad_to,
                });
            }
            let at = r * pad_to;
            b.ids[at..at + p.len()].copy_from_slice(&p.ids);
            b.loss_mask[at..at + p.len()].copy_from_slice(&p.loss_mask);
            b.attn_mask[at..at + p.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok(b)
    }

    /// A single unpadded row.
    pub fn single(ids: &[u32]) -> Self {
        Batch {
            rows: 1,
            seq: ids.len(),
            ids: ids.to_vec(),
            loss_mask: vec![0; ids.len()],
            attn_mask: vec![true; ids.len()],
        }
    }

    /// Same-length rows without padding.
    pub fn stacked(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).unwrap_or(0);
        if seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(MtpError::shape("batch", "rows must share a non-zero length"));
        }
        Ok(Batch {
            rows: rows.len(),
            seq,
            ids: rows.concat(),
            loss_mask: vec![0; rows.len() * seq],
            attn_mask: vec![true; rows.len() * seq],
        })
    }
}

/// Chunks `pairs` into batches of `batch_size`, each padded to `pad_to`.
pub fn batch(pairs: &[SequencePair], batch_size: usize, pad_to: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(MtpError::InvalidConfig("batch_size must be >= 1".into()));
    }
    pairs
        .chunks(batch_size)
        .map(|c| Batch::from_pairs(&c.iter().collect::<Vec<_>>(), pad_to))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec::default()
    }

    #[test]
    fn vocab_is_bijective() {
        let v = Vocab::standard(64).unwrap();
        for id in 0..64u32 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        assert!(Vocab::standard(300).is_err());
        assert_eq!(v.source_ids().len(), 30);
        assert_eq!(v.target_ids().end, 64);
    }

    #[test]
    fn deterministic_cipher_translation() {
        let g = Generator::new(&spec()).unwrap();
        let src = [4, 5, 6];
        let mut rng = seeded(1, 0);
        let p = g.translate(&src, &mut rng).unwrap();
        let want: Vec<u32> = src.iter().map(|&s| g.encipher(s)).collect();
        assert_eq!(p.target(), &want[..]);
        assert_eq!(&p.ids[..2], &[BOS, TRANSLATE]);
        assert_eq!(p.ids[5], SEP);
        assert_eq!(p.loss_mask, vec![0, 0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(p.loss_mask.iter().map(|&m| m as usize).sum::<usize>(), p.target_len);
    }

    #[test]
    fn same_seed_same_pair() {
        let s = spec();
        let a = gen_translation_pair(&s, &mut seeded(3, 0)).unwrap();
        let b = gen_translation_pair(&s, &mut seeded(3, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ambiguity_flip_rate() {
        let s = CorpusSpec {
            ambiguity: 0.5,
            ..spec()
        };
        let g = Generator::new(&s).unwrap();
        let mut rng = seeded(11, 0);
        let (mut flips, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let p = g.translation_pair(&mut rng, false).unwrap();
            let n = p.target_len;
            let src = &p.ids[2..2 + n];
            for (&s, &t) in src.iter().zip(p.target()) {
                total += 1;
                flips += usize::from(g.encipher(s) != t);
                assert!(g.vocab().target_ids().contains(&t));
            }
        }
        let rate = flips as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.02, "flip rate {rate}");
    }

    #[test]
    fn eval_pairs_meet_min_target_len() {
        let s = CorpusSpec {
            src_len_min: 5,
            n_eval: 200,
            n_train: 10,
            ..spec()
        };
        let c = Corpus::generate(&s).unwrap();
        assert!(c.eval.iter().all(|p| p.target_len >= s.min_target_len));
        assert!(c.train.iter().any(|p| p.target_len < s.min_target_len));
    }

    #[test]
    fn corpus_is_reproducible() {
        let s = CorpusSpec {
            n_train: 20,
            n_eval: 5,
            ..spec()
        };
        assert_eq!(Corpus::generate(&s).unwrap(), Corpus::generate(&s).unwrap());
        let other = CorpusSpec { seed: 1, ..s.clone() };
        assert_ne!(Corpus::generate(&s).unwrap(), Corpus::generate(&other).unwrap());
    }

    #[test]
    fn open_ended_fixed_seed_and_mask() {
        let s = CorpusSpec {
            task: TaskKind::OpenEnded,
            ambiguity: 0.3,
            ..spec()
        };
        let a = gen_open_ended(&s, &mut seeded(5, 0)).unwrap();
        let b = gen_open_ended(&s, &mut seeded(5, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 201);
        assert_eq!(a.target_len, 100);
        assert!(a.loss_mask[101..].iter().all(|&m| m == 1));
        assert!(a.loss_mask[..101].iter().all(|&m| m == 0));
    }

    #[test]
    fn uniform_chain_has_uniform_unigrams() {
        let s = CorpusSpec {
            task: TaskKind::OpenEnded,
            ambiguity: 1.0,
            ..spec()
        };
        let g = Generator::new(&s).unwrap();
        let mut rng = seeded(9, 0);
        let k = g.vocab().content_ids().len();
        let mut counts = vec![0usize; k];
        let mut n = 0usize;
        for _ in 0..300 {
            let p = g.open_ended(&mut rng).unwrap();
            for &t in &p.ids[1..] {
                counts[(t - 4) as usize] += 1;
                n += 1;
            }
        }
        let expect = n as f64 / k as f64;
        let sigma = (n as f64 * (1.0 / k as f64) * (1.0 - 1.0 / k as f64)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 3.5 * sigma, "{c} vs {expect} ± {sigma}");
        }
    }

    #[test]
    fn near_deterministic_chain_has_low_conditional_entropy() {
        let s = CorpusSpec {
            task: TaskKind::OpenEnded,
            ambiguity: 0.01,
            ..spec()
        };
        let g = Generator::new(&s).unwrap();
        let mut rng = seeded(2, 0);
        let mut counts: HashMap<(u32, u32), HashMap<u32, usize>> = HashMap::new();
        for _ in 0..200 {
            let p = g.open_ended(&mut rng).unwrap();
            for w in p.ids[1..].windows(3) {
                *counts.entry((w[0], w[1])).or_default().entry(w[2]).or_default() += 1;
            }
        }
        let total: usize = counts.values().flat_map(|m| m.values()).sum();
        let mut h = 0.0;
        for succ in counts.values() {
            let n: usize = succ.values().sum();
            for &c in succ.values() {
                let p = c as f64 / n as f64;
                h -= (c as f64 / total as f64) * p.ln();
            }
        }
        assert!(h < 0.2, "conditional entropy {h}");
    }

    #[test]
    fn batching_pads_right_and_masks() {
        let a = SequencePair::new(vec![1, 3, 4, 2, 40], 1).unwrap();
        let b = SequencePair::new(vec![1, 3, 4, 5, 6, 2, 40, 41], 2).unwrap();
        let out = batch(&[a.clone(), b], 2, 8).unwrap();
        assert_eq!(out.len(), 1);
        let bt = &out[0];
        assert_eq!(&bt.ids[5..8], &[PAD, PAD, PAD]);
        assert_eq!(&bt.attn_mask[..8], &[true, true, true, true, true, false, false, false]);
        assert!(bt.loss_mask[5..8].iter().all(|&m| m == 0));
        let single = batch(&[a.clone()], 1, a.len()).unwrap();
        assert!(single[0].attn_mask.iter().all(|&m| m));
        assert!(matches!(batch(&[a], 1, 4), Err(MtpError::Overlong { .. })));
    }

    #[test]
    fn jsonl_round_trip_and_format() {
        let a = SequencePair::new(vec![1, 3, 4, 2, 40], 1).unwrap();
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&a), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"ids\":[1,3,4,2,40],\"mask\":[0,0,0,0,1]}\n"
        );
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![a]);
        assert!(read_jsonl(&b"{\"ids\":[1,2],\"mask\":[1,0]}\n"[..]).is_err());
    }
}
