//! Logit-lens diagnostics: what each layer would predict if the shared
//! unembedding were applied to it, how far that is from the final
//! prediction, and how peaked the predictions are.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Batch, SequencePair};
use crate::marginal::candidate_set;
use crate::model::{forward_hidden, unembed, Checkpoint, Forward};
use crate::numerics::prob_dist_from_logits;
use crate::{MtpError, ProbDist, Result};

/// Probability floor applied before taking logs in [`kl`].
pub const KL_FLOOR: f64 = 1e-12;

/// `σ(f_u(z^ℓ))` at the last position of `ids`, for `1 <= layer <= L-1`.
pub fn intermediate_dist(ck: &Checkpoint, ids: &[u32], layer: usize) -> Result<ProbDist> {
    let l = ck.config.n_layers;
    if layer == 0 || layer >= l {
        return Err(MtpError::OutOfRange {
            what: "probe layer",
            detail: format!("{layer} not in 1..={}", l - 1),
        });
    }
    let hs = forward_hidden(ck, ids, true)?;
    let z = hs.position(layer, ids.len() - 1).expect("all layers retained");
    prob_dist_from_logits(&unembed(ck, z)?)
}

/// `KL(p || q)` in nats, both sides floored at [`KL_FLOOR`] and
/// renormalized so the result is always finite.
pub fn kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MtpError::shape("kl", format!("{} vs {}", p.len(), q.len())));
    }
    let floor = |d: &ProbDist| {
        let v: Vec<f64> = d.probs().iter().map(|&x| x.max(KL_FLOOR)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p, q) = (floor(p), floor(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(d: &ProbDist) -> f64 {
    -d.probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Size of the top-p candidate set, the same set marginalization uses.
pub fn top_p_count(d: &ProbDist, p: f64) -> usize {
    candidate_set(d, p).len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeMetric {
    /// `KL(p_ℓ || p_final)`.
    Kl,
    Entropy,
    TopPCount { p: f64 },
}

impl ProbeMetric {
    pub fn label(&self) -> String {
        match self {
            ProbeMetric::Kl => "kl".into(),
            ProbeMetric::Entropy => "entropy".into(),
            ProbeMetric::TopPCount { p } => format!("top_{p}_count"),
        }
    }
}

/// One value per backbone layer `ℓ = 1..L-1`, averaged over target-span
/// positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub metric: ProbeMetric,
    pub n_layers: usize,
    pub values: Vec<f64>,
    pub n_positions: usize,
}

impl LayerProfile {
    pub fn layer_frac(&self, l: usize) -> f64 {
        l as f64 / self.values.len() as f64
    }

    /// `layer_frac,metric,value`, one row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_frac,metric,value\n");
        let label = self.metric.label();
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{:.6},{label},{v:.9}\n", self.layer_frac(i + 1)));
        }
        out
    }

    pub fn sidecar(&self, corpus_id: &str, extra: Value) -> Value {
        json!({
            "metric": self.metric,
            "n_layers": self.n_layers,
            "rows": self.values.len(),
            "n_positions": self.n_positions,
            "corpus": corpus_id,
            "extra": extra,
        })
    }
}

/// Context positions whose next token lies in the target span.
fn span_positions(pair: &SequencePair) -> std::ops::Range<usize> {
    let start = pair.target_start().max(1);
    start - 1..pair.ids.len() - 1
}

/// Per-layer distributions at every target-span position of `pair`:
/// `out[ℓ-1][i]` for `ℓ = 1..=L`, the last entry being the model output.
fn layer_dists(ck: &Checkpoint, pair: &SequencePair) -> Result<Vec<Vec<ProbDist>>> {
    let l = ck.config.n_layers;
    let v = ck.config.vocab_size;
    let batch = Batch::single(&pair.ids);
    let mut fwd = Forward::new(&ck.config, &ck.params);
    let outs = fwd.layers(&batch, l)?;
    let positions = span_positions(pair);
    let mut all = Vec::with_capacity(l);
    for z in outs {
        let logits = fwd.unembed(z)?;
        let vals = fwd.tape.value(logits);
        all.push(
            positions
                .clone()
                .map(|t| prob_dist_from_logits(&vals[t * v..(t + 1) * v]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(all)
}

/// Mean of `metric` per backbone layer over every target-span position.
pub fn layer_profile(ck: &Checkpoint, pairs: &[SequencePair], metric: ProbeMetric) -> Result<LayerProfile> {
    let l = ck.config.n_layers;
    let mut sums = vec![0.0; l - 1];
    let mut n = 0usize;
    for pair in pairs {
        let dists = layer_dists(ck, pair)?;
        let last = &dists[l - 1];
        for (layer, row) in dists[..l - 1].iter().enumerate() {
            for (i, d) in row.iter().enumerate() {
                sums[layer] += match metric {
                    ProbeMetric::Kl => kl(d, &last[i])?,
                    ProbeMetric::Entropy => entropy(d),
                    ProbeMetric::TopPCount { p } => top_p_count(d, p) as f64,
                };
            }
        }
        n += last.len();
    }
    if n == 0 {
        return Err(MtpError::EmptyEval("no target positions to probe".into()));
    }
    Ok(LayerProfile {
        metric,
        n_layers: l,
        values: sums.into_iter().map(|s| s / n as f64).collect(),
        n_positions: n,
    })
}

/// Mean `KL(p_ℓ || p_final)` per backbone layer.
pub fn kl_profile(ck: &Checkpoint, pairs: &[SequencePair]) -> Result<LayerProfile> {
    layer_profile(ck, pairs, ProbeMetric::Kl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEntropy {
    pub sequence: usize,
    pub position: usize,
    pub entropy: f64,
    pub top_p_count: usize,
}

/// Entropy and top-p count of the model output at every target position.
pub fn entropy_profile(ck: &Checkpoint, pairs: &[SequencePair], p: f64) -> Result<Vec<PositionEntropy>> {
    let v = ck.config.vocab_size;
    let mut out = Vec::new();
    for (s, pair) in pairs.iter().enumerate() {
        let logits = ck.logits(&Batch::single(&pair.ids))?;
        for t in span_positions(pair) {
            let d = prob_dist_from_logits(&logits[t * v..(t + 1) * v])?;
            out.push(PositionEntropy {
                sequence: s,
                position: t,
                entropy: entropy(&d),
                top_p_count: top_p_count(&d, p),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanSummary {
    pub mean_entropy: f64,
    pub mean_top_p_count: f64,
    pub n_positions: usize,
}

pub fn summarize(rows: &[PositionEntropy]) -> Result<SpanSummary> {
    if rows.is_empty() {
        return Err(MtpError::EmptyEval("no target positions".into()));
    }
    let n = rows.len() as f64;
    Ok(SpanSummary {
        mean_entropy: rows.iter().map(|r| r.entropy).sum::<f64>() / n,
        mean_top_p_count: rows.iter().map(|r| r.top_p_count as f64).sum::<f64>() / n,
        n_positions: rows.len(),
    })
}

pub fn entropy_csv(rows: &[PositionEntropy]) -> String {
    let mut out = String::from("sequence,position,entropy,top_p_count\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.9},{}\n", r.sequence, r.position, r.entropy, r.top_p_count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{next_token_dist, ModelConfig};

    fn toy() -> Checkpoint {
        Checkpoint::init(
            ModelConfig {
                n_layers: 3,
                hidden: 16,
                n_heads: 2,
                vocab_size: 12,
                max_seq: 16,
                init_std: 0.3,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn kl_basics() {
        let p = ProbDist::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let q = ProbDist::point_mass(3, 0);
        let v = kl(&p, &q).unwrap();
        assert!(v.is_finite() && v > 20.0);
        let two = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let skew = ProbDist::new(vec![0.9, 0.1]).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl(&two, &skew).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn entropy_and_counts() {
        assert!((entropy(&ProbDist::uniform(64)) - 64f64.ln()).abs() < 1e-9);
        assert_eq!(entropy(&ProbDist::point_mass(8, 3)), 0.0);
        assert_eq!(top_p_count(&ProbDist::uniform(64), 0.99), 64);
        assert_eq!(top_p_count(&ProbDist::point_mass(64, 9), 0.3), 1);
        let d = ProbDist::new(vec![0.7, 0.25, 0.04, 0.005, 0.005]).unwrap();
        assert_eq!(top_p_count(&d, 0.9), 2);
    }

    #[test]
    fn penultimate_layer_then_last_block_is_the_output() {
        let ck = toy();
        let ids = [1u32, 5, 6, 7, 2, 9];
        let hs = forward_hidden(&ck, &ids, true).unwrap();
        let mut fwd = Forward::new(&ck.config, &ck.params);
        let z = fwd.tape.leaf(vec![ids.len(), 16], hs.layer(2).unwrap().to_vec(), false).unwrap();
        let layout = crate::numerics::AttnLayout::dense(1, ids.len(), 2);
        let top = fwd.block("layers.2", z, &layout).unwrap();
        let logits = fwd.unembed(top).unwrap();
        let vals = fwd.tape.value(logits);
        let d = prob_dist_from_logits(&vals[vals.len() - 12..]).unwrap();
        assert_eq!(d, next_token_dist(&ck, &ids).unwrap());
        assert!(intermediate_dist(&ck, &ids, 0).is_err());
        assert!(intermediate_dist(&ck, &ids, 3).is_err());
        let a = intermediate_dist(&ck, &ids, 1).unwrap();
        let b = intermediate_dist(&ck, &ids, 2).unwrap();
        assert!(a.total_variation(&b) > 0.0);
    }

    #[test]
    fn profile_shape_and_csv() {
        let ck = toy();
        let pair = SequencePair::new(vec![1, 3, 4, 5, 2, 8, 9, 10], 3).unwrap();
        let prof = kl_profile(&ck, &[pair.clone()]).unwrap();
        assert_eq!(prof.values.len(), 2);
        assert_eq!(prof.n_positions, 3);
        assert!(prof.values.iter().all(|&v| v >= 0.0));
        let csv = prof.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("1.000000,kl,"));
        let ent = entropy_profile(&ck, &[pair], 0.99).unwrap();
        assert_eq!(ent.len(), 3);
        assert!(ent.iter().all(|r| r.entropy <= 12f64.ln() + 1e-9));
        assert!(kl_profile(&ck, &[]).is_err());
    }
}
