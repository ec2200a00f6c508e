//! Top-k accuracy of next and second token predictions over the tail of
//! each reference target, with teacher-forced contexts.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, SequencePair};
use crate::marginal::{marginal_pair, MarginalSpec};
use crate::model::{Checkpoint, NextTokenModel};
use crate::mtp::MtpModel;
use crate::numerics::prob_dist_from_logits;
use crate::{MtpError, ProbDist, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Marginal,
    MtpHeads,
    BaseNtp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Evaluate at most this many pairs, in corpus order; 0 means all.
    pub n_eval_sequences: usize,
    pub tokens_per_sequence: usize,
    pub top_k: usize,
    pub predictor: PredictorKind,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_eval_sequences: 50,
            tokens_per_sequence: 20,
            top_k: 5,
            predictor: PredictorKind::Marginal,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.tokens_per_sequence == 0 {
            return Err(MtpError::InvalidConfig(
                "top_k and tokens_per_sequence must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Context end positions `t` scored for `pair`: both `t+1` and `t+2` lie in
/// the target span, and only the last `n` such positions are kept. `None`
/// when the target is too short to supply `n` of them.
pub fn eval_positions(pair: &SequencePair, n: usize) -> Option<RangeInclusive<usize>> {
    let len = pair.ids.len();
    if n == 0 || pair.target_len < n + 1 || len < n + 2 {
        return None;
    }
    let last = len - 3;
    Some(last + 1 - n..=last)
}

/// True iff `token` is among the `k` most probable entries, ties ranked by
/// ascending id.
pub fn top_k_hit(dist: &ProbDist, token: usize, k: usize) -> bool {
    dist.ranked().iter().take(k).any(|&i| i == token)
}

/// What produces the two distributions at each evaluated position.
pub enum Predictor<'a> {
    Marginal(&'a dyn NextTokenModel, MarginalSpec),
    MtpHeads(&'a MtpModel),
    BaseNtp(&'a Checkpoint),
}

impl Predictor<'_> {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Marginal(..) => PredictorKind::Marginal,
            Predictor::MtpHeads(_) => PredictorKind::MtpHeads,
            Predictor::BaseNtp(_) => PredictorKind::BaseNtp,
        }
    }

    /// Next and (when available) second token distributions at every
    /// position of `window`.
    fn predict(
        &self,
        pair: &SequencePair,
        window: RangeInclusive<usize>,
    ) -> Result<Vec<(ProbDist, Option<ProbDist>)>> {
        match self {
            Predictor::Marginal(model, spec) => window
                .map(|t| {
                    let (n, s) = marginal_pair(*model, &pair.ids[..=t], spec)?;
                    Ok((n, Some(s)))
                })
                .collect(),
            Predictor::MtpHeads(m) => {
                let heads = m.head_logits(&Batch::single(&pair.ids))?;
                let v = m.config.vocab_size;
                window
                    .map(|t| {
                        let at = |h: &Vec<f32>| prob_dist_from_logits(&h[t * v..(t + 1) * v]);
                        let second = heads.get(1).map(at).transpose()?;
                        Ok((at(&heads[0])?, second))
                    })
                    .collect()
            }
            Predictor::BaseNtp(ck) => {
                let logits = ck.logits(&Batch::single(&pair.ids))?;
                let v = ck.config.vocab_size;
                window
                    .map(|t| Ok((prob_dist_from_logits(&logits[t * v..(t + 1) * v])?, None)))
                    .collect()
            }
        }
    }
}

/// One scored position, for the debugging detail stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRecord {
    pub sequence: usize,
    pub position: usize,
    pub predictor: PredictorKind,
    pub next_hit: bool,
    pub second_hit: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: PredictorKind,
    pub top_k: usize,
    pub next_top5: f64,
    pub second_top5: Option<f64>,
    pub n_positions: usize,
    pub n_sequences: usize,
}

/// Scores `predictor` over the evaluation windows of `pairs`.
pub fn evaluate(
    predictor: &Predictor<'_>,
    pairs: &[SequencePair],
    spec: &EvalSpec,
) -> Result<(EvalReport, Vec<PositionRecord>)> {
    spec.validate()?;
    let take = if spec.n_eval_sequences == 0 {
        pairs.len()
    } else {
        spec.n_eval_sequences.min(pairs.len())
    };
    let mut records = Vec::new();
    let mut n_sequences = 0;
    for (s, pair) in pairs[..take].iter().enumerate() {
        let Some(window) = eval_positions(pair, spec.tokens_per_sequence) else {
            continue;
        };
        n_sequences += 1;
        let preds = predictor.predict(pair, window.clone())?;
        for (t, (next, second)) in window.zip(preds) {
            records.push(PositionRecord {
                sequence: s,
                position: t,
                predictor: predictor.kind(),
                next_hit: top_k_hit(&next, pair.ids[t + 1] as usize, spec.top_k),
                second_hit: second.map(|d| top_k_hit(&d, pair.ids[t + 2] as usize, spec.top_k)),
            });
        }
    }
    if records.is_empty() {
        return Err(MtpError::EmptyEval(format!(
            "no pair among {take} has a target of at least {} tokens",
            spec.tokens_per_sequence + 1
        )));
    }
    let n = records.len() as f64;
    let next = records.iter().filter(|r| r.next_hit).count() as f64 / n;
    let second = if records.iter().all(|r| r.second_hit.is_some()) {
        Some(records.iter().filter(|r| r.second_hit == Some(true)).count() as f64 / n)
    } else {
        None
    };
    Ok((
        EvalReport {
            predictor: predictor.kind(),
            top_k: spec.top_k,
            next_top5: next,
            second_top5: second,
            n_positions: records.len(),
            n_sequences,
        },
        records,
    ))
}

/// Rows of the strategy matrix with the stage directory each is read from.
pub const MATRIX_ROWS: [(&str, &str); 7] = [
    ("baseline", "baseline"),
    ("heads_only", "heads_only"),
    ("vanilla", "joint_vanilla"),
    ("warmup", "joint_warmup"),
    ("diff_lr", "joint_diff_lr"),
    ("warmup+diff_lr", "joint_warmup_diff_lr"),
    ("diff_lr+whs", "joint_diff_lr_whs"),
];

pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub strategy: String,
    pub next_top5: Option<f64>,
    pub second_top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingFlags {
    pub baseline_ge_best_joint: Option<bool>,
    pub best_joint_ge_heads_only: Option<bool>,
    pub every_joint_gt_heads_only: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub model: String,
    pub rows: Vec<MatrixRow>,
    pub flags: OrderingFlags,
}

impl MatrixReport {
    /// Builds the report from second-token scores keyed by row label.
    pub fn from_rows(model: &str, rows: Vec<MatrixRow>, tolerance: f64) -> Self {
        let second: BTreeMap<&str, Option<f64>> = rows
            .iter()
            .map(|r| (r.strategy.as_str(), r.second_top5))
            .collect();
        let get = |k: &str| second.get(k).copied().flatten();
        let joint: Vec<f64> = MATRIX_ROWS[2..].iter().filter_map(|(k, _)| get(k)).collect();
        let best = joint.iter().copied().reduce(f64::max);
        let base = get("baseline");
        let heads = get("heads_only");
        let flags = OrderingFlags {
            baseline_ge_best_joint: base.zip(best).map(|(b, j)| b - j >= -tolerance),
            best_joint_ge_heads_only: best.zip(heads).map(|(j, h)| j - h >= -tolerance),
            every_joint_gt_heads_only: heads
                .filter(|_| !joint.is_empty())
                .map(|h| joint.iter().all(|&j| j > h)),
        };
        MatrixReport {
            model: model.to_string(),
            rows,
            flags,
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("model,strategy,next_top5,second_top5\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.model,
                r.strategy,
                fmt(r.next_top5),
                fmt(r.second_top5)
            ));
        }
        out
    }
}

/// Collects `<run_dir>/<stage>/eval.json` for every matrix row. Missing
/// stages yield rows with empty values.
pub fn report_matrix(run_dir: &Path, model: &str, tolerance: f64) -> Result<MatrixReport> {
    let mut rows = Vec::with_capacity(MATRIX_ROWS.len());
    for (label, stage) in MATRIX_ROWS {
        let path = run_dir.join(stage).join(EVAL_FILE);
        let row = if path.exists() {
            let r: EvalReport = serde_json::from_slice(&std::fs::read(&path)?)?;
            MatrixRow {
                strategy: label.to_string(),
                next_top5: Some(r.next_top5),
                second_top5: r.second_top5,
            }
        } else {
            MatrixRow {
                strategy: label.to_string(),
                next_top5: None,
                second_top5: None,
            }
        };
        rows.push(row);
    }
    Ok(MatrixReport::from_rows(model, rows, tolerance))
}

/// Published top-5 (next, second) accuracies per model size, kept as a
/// reference for the ordering the toy runs are compared against.
pub const REFERENCE_TOP5: [(&str, [(&str, f64, f64); 7]); 4] = [
    (
        "410m",
        [
            ("baseline", 0.827, 0.682),
            ("heads_only", 0.798, 0.500),
            ("vanilla", 0.742, 0.538),
            ("warmup", 0.766, 0.566),
            ("diff_lr", 0.759, 0.562),
            ("warmup+diff_lr", 0.755, 0.572),
            ("diff_lr+whs", 0.765, 0.590),
        ],
    ),
    (
        "1b",
        [
            ("baseline", 0.847, 0.730),
            ("heads_only", 0.816, 0.590),
            ("vanilla", 0.812, 0.603),
            ("warmup", 0.810, 0.621),
            ("diff_lr", 0.809, 0.618),
            ("warmup+diff_lr", 0.812, 0.615),
            ("diff_lr+whs", 0.807, 0.623),
        ],
    ),
    (
        "1.4b",
        [
            ("baseline", 0.866, 0.760),
            ("heads_only", 0.845, 0.573),
            ("vanilla", 0.825, 0.608),
            ("warmup", 0.838, 0.620),
            ("diff_lr", 0.829, 0.629),
            ("warmup+diff_lr", 0.844, 0.633),
            ("diff_lr+whs", 0.831, 0.642),
        ],
    ),
    (
        "2.8b",
        [
            ("baseline", 0.881, 0.777),
            ("heads_only", 0.856, 0.607),
            ("vanilla", 0.828, 0.645),
            ("warmup", 0.839, 0.650),
            ("diff_lr", 0.836, 0.667),
            ("warmup+diff_lr", 0.835, 0.654),
            ("diff_lr+whs", 0.833, 0.659),
        ],
    ),
];

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(target_len: usize) -> SequencePair {
        let mut ids = vec![1, 3, 4, 4, 2];
        ids.extend((0..target_len).map(|i| 10 + i as u32));
        SequencePair::new(ids, target_len).unwrap()
    }

    #[test]
    fn hits_follow_rank_and_ties() {
        assert!(top_k_hit(&ProbDist::point_mass(4, 2), 2, 1));
        let u = ProbDist::uniform(64);
        assert!((0..64).all(|t| top_k_hit(&u, t, 5) == (t < 5)));
        let mut p = vec![0.0; 10];
        for (i, v) in [0.3, 0.2, 0.15, 0.12, 0.11, 0.07, 0.05].iter().enumerate() {
            p[i + 3] = *v;
        }
        let d = ProbDist::new(p).unwrap();
        assert!(!top_k_hit(&d, 8, 5));
        assert!(top_k_hit(&d, 7, 5));
    }

    #[test]
    fn window_is_tail_of_target() {
        let p = pair(25);
        let w = eval_positions(&p, 20).unwrap();
        assert_eq!(w.clone().count(), 20);
        assert_eq!(*w.end() + 2, p.ids.len() - 1);
        assert!(*w.start() + 1 >= p.target_start());
        assert!(eval_positions(&pair(21), 20).is_some());
        assert!(eval_positions(&pair(20), 20).is_none());
    }

    #[test]
    fn matrix_flags() {
        let row = |s: &str, v: f64| MatrixRow {
            strategy: s.into(),
            next_top5: Some(0.9),
            second_top5: Some(v),
        };
        let rows = vec![
            row("baseline", 0.68),
            row("heads_only", 0.50),
            row("vanilla", 0.54),
            row("diff_lr+whs", 0.69),
        ];
        let r = MatrixReport::from_rows("toy", rows, 0.02);
        assert_eq!(r.flags.baseline_ge_best_joint, Some(true));
        assert_eq!(r.flags.best_joint_ge_heads_only, Some(true));
        assert_eq!(r.flags.every_joint_gt_heads_only, Some(true));
        let only = MatrixReport::from_rows("toy", vec![row("baseline", 0.6)], 0.02);
        assert_eq!(only.flags.baseline_ge_best_joint, None);
        assert_eq!(only.to_csv().lines().count(), 2);
    }

    #[test]
    fn reference_ordering_holds_for_smallest_model() {
        let (_, rows) = REFERENCE_TOP5[0];
        let rows = rows
            .iter()
            .map(|&(s, n, v)| MatrixRow {
                strategy: s.into(),
                next_top5: Some(n),
                second_top5: Some(v),
            })
            .collect();
        let r = MatrixReport::from_rows("410m", rows, 0.0);
        assert_eq!(r.flags.baseline_ge_best_joint, Some(true));
        assert_eq!(r.flags.every_joint_gt_heads_only, Some(true));
    }
}
