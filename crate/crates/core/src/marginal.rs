//! Multi-token prediction from a plain next-token model by marginalizing
//! over the intermediate tokens.
//!
//! `p(x_{t+2} | ctx) = Σ_y p(x_{t+2} | ctx, y) · p(y | ctx)`. The exact sum
//! costs `|V|` conditional passes; the truncated variant only visits the
//! top-p candidate set of `p(y | ctx)` and renormalizes its weights.

use serde::{Deserialize, Serialize};

use crate::data::SequencePair;
use crate::eval::eval_positions;
use crate::model::NextTokenModel;
use crate::{MtpError, ProbDist, Result};

/// Largest vocabulary for which the exact mixture is attempted.
pub const MAX_EXACT_VOCAB: usize = 256;
/// Upper bound on intermediate sequences `|V|^(K-1)` in exact mode.
pub const EXACT_BUDGET: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginalSpec {
    pub k: usize,
    pub top_p: f64,
    pub renormalize: bool,
}

impl Default for MarginalSpec {
    fn default() -> Self {
        MarginalSpec {
            k: 2,
            top_p: 0.99,
            renormalize: true,
        }
    }
}

impl MarginalSpec {
    pub fn exact(k: usize) -> Self {
        MarginalSpec {
            k,
            top_p: 1.0,
            renormalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.k) {
            return Err(MtpError::InvalidConfig(format!("k = {} not in 2..=3", self.k)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(MtpError::InvalidConfig(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        Ok(())
    }

    pub fn is_exact(&self) -> bool {
        self.top_p >= 1.0
    }
}

/// The smallest prefix of tokens, ranked by descending probability with
/// ties broken by ascending id, whose cumulative mass reaches `p`. The token
/// that crosses the threshold is included. `p >= 1` keeps every token.
pub fn candidate_set(dist: &ProbDist, p: f64) -> Vec<usize> {
    let ranked = dist.ranked();
    if p >= 1.0 {
        return ranked;
    }
    let probs = dist.probs();
    let mut cum = 0.0;
    let mut out = Vec::new();
    for id in ranked {
        out.push(id);
        cum += probs[id];
        if cum >= p {
            break;
        }
    }
    out
}

/// Mixture weights over intermediate tokens in ascending id order. Exact
/// mode uses every token with its raw probability.
fn mixture_weights(next: &ProbDist, spec: &MarginalSpec) -> Vec<(usize, f64)> {
    let probs = next.probs();
    if spec.is_exact() {
        return probs.iter().copied().enumerate().collect();
    }
    let mut set = candidate_set(next, spec.top_p);
    set.sort_unstable();
    let mass: f64 = set.iter().map(|&y| probs[y]).sum();
    let scale = if spec.renormalize { 1.0 / mass } else { 1.0 };
    set.into_iter().map(|y| (y, probs[y] * scale)).collect()
}

fn extend(ids: &[u32], y: usize) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.extend_from_slice(ids);
    v.push(y as u32);
    v
}

/// Distribution of the token `depth` steps ahead given `next = p(· | ids)`.
fn mixture_at_depth<M: NextTokenModel + ?Sized>(
    model: &M,
    ids: &[u32],
    next: &ProbDist,
    depth: usize,
    spec: &MarginalSpec,
) -> Result<Vec<f64>> {
    if depth == 1 {
        return Ok(next.probs().to_vec());
    }
    let weights = mixture_weights(next, spec);
    let contexts: Vec<Vec<u32>> = weights.iter().map(|&(y, _)| extend(ids, y)).collect();
    let children = model.next_dists(&contexts)?;
    let mut out = vec![0.0; next.len()];
    for ((&(_, w), ctx), child) in weights.iter().zip(&contexts).zip(&children) {
        let inner = mixture_at_depth(model, ctx, child, depth - 1, spec)?;
        for (o, q) in out.iter_mut().zip(&inner) {
            *o += w * q;
        }
    }
    Ok(out)
}

fn next_dist<M: NextTokenModel + ?Sized>(model: &M, ids: &[u32]) -> Result<ProbDist> {
    if ids.is_empty() {
        return Err(MtpError::shape("marginal", "empty context"));
    }
    Ok(model.next_dists(&[ids.to_vec()])?.remove(0))
}

fn check_exact_vocab(v: usize) -> Result<()> {
    if v > MAX_EXACT_VOCAB {
        return Err(MtpError::VocabTooLarge(v));
    }
    Ok(())
}

/// Exact `p(x_{t+2} | ids)` over the full vocabulary, no renormalization.
pub fn second_token_exact<M: NextTokenModel + ?Sized>(model: &M, ids: &[u32]) -> Result<ProbDist> {
    check_exact_vocab(model.vocab_size())?;
    let next = next_dist(model, ids)?;
    ProbDist::new(mixture_at_depth(model, ids, &next, 2, &MarginalSpec::exact(2))?)
}

/// Raw truncated mixture. Sums to 1 when `spec.renormalize` is set,
/// otherwise to the candidate set's mass.
pub fn truncated_mixture<M: NextTokenModel + ?Sized>(
    model: &M,
    ids: &[u32],
    spec: &MarginalSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.is_exact() {
        check_exact_vocab(model.vocab_size())?;
    }
    let next = next_dist(model, ids)?;
    mixture_at_depth(model, ids, &next, 2, spec)
}

/// Top-p truncated `p(x_{t+2} | ids)`. With `top_p = 1` this is the exact
/// mixture, bit for bit.
pub fn second_token_truncated<M: NextTokenModel + ?Sized>(
    model: &M,
    ids: &[u32],
    spec: &MarginalSpec,
) -> Result<ProbDist> {
    if !spec.renormalize {
        return Err(MtpError::InvalidConfig(
            "an unrenormalized truncated mixture is not a distribution; use truncated_mixture".into(),
        ));
    }
    ProbDist::new(truncated_mixture(model, ids, spec)?)
}

/// Next and second token distributions for one context, costing `|S| + 1`
/// sequence passes.
pub fn marginal_pair<M: NextTokenModel + ?Sized>(
    model: &M,
    ids: &[u32],
    spec: &MarginalSpec,
) -> Result<(ProbDist, ProbDist)> {
    spec.validate()?;
    if !spec.renormalize {
        return Err(MtpError::InvalidConfig("marginal evaluation needs renormalize".into()));
    }
    if spec.is_exact() {
        check_exact_vocab(model.vocab_size())?;
    }
    let next = next_dist(model, ids)?;
    let second = ProbDist::new(mixture_at_depth(model, ids, &next, 2, spec)?)?;
    Ok((next, second))
}

/// `p(X_{t+1..t+K} = query | ids)` under conditional independence of the
/// future tokens: the product of each position's marginal at its query
/// token. Each marginal is truncated per level according to `spec`.
pub fn k_token_joint<M: NextTokenModel + ?Sized>(
    model: &M,
    ids: &[u32],
    spec: &MarginalSpec,
    query: &[u32],
) -> Result<f64> {
    spec.validate()?;
    if query.len() != spec.k {
        return Err(MtpError::shape(
            "k_token_joint",
            format!("query has {} tokens, spec.k = {}", query.len(), spec.k),
        ));
    }
    let v = model.vocab_size();
    if let Some(&bad) = query.iter().find(|&&q| q as usize >= v) {
        return Err(MtpError::OutOfRange {
            what: "query token",
            detail: format!("{bad} >= {v}"),
        });
    }
    if spec.is_exact() {
        let seqs = (1..spec.k).try_fold(1usize, |acc, _| acc.checked_mul(v));
        match seqs {
            Some(n) if n <= EXACT_BUDGET => {}
            _ => return Err(MtpError::BudgetExceeded(v.saturating_pow(spec.k as u32 - 1))),
        }
        check_exact_vocab(v)?;
    }
    let next = next_dist(model, ids)?;
    let mut prob = 1.0;
    for (depth, &q) in (1..=spec.k).zip(query) {
        prob *= mixture_at_depth(model, ids, &next, depth, spec)?[q as usize];
    }
    Ok(prob)
}

/// Next and marginal second-token distributions at one evaluated position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDists {
    pub sequence: usize,
    /// Index of the last context token.
    pub position: usize,
    pub next: ProbDist,
    pub second: ProbDist,
}

/// Teacher-forced marginal predictions over the evaluation window of every
/// qualifying pair.
pub fn top5_marginal_eval<M: NextTokenModel + ?Sized>(
    model: &M,
    pairs: &[SequencePair],
    spec: &MarginalSpec,
    tokens_per_sequence: usize,
) -> Result<Vec<PositionDists>> {
    let mut out = Vec::new();
    for (s, pair) in pairs.iter().enumerate() {
        let Some(window) = eval_positions(pair, tokens_per_sequence) else {
            continue;
        };
        for t in window {
            let (next, second) = marginal_pair(model, &pair.ids[..=t], spec)?;
            out.push(PositionDists {
                sequence: s,
                position: t,
                next,
                second,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ForwardCounter;

    /// Conditionals given by a closure of the context.
    struct Table<F: Fn(&[u32]) -> Vec<f64>> {
        v: usize,
        f: F,
    }

    impl<F: Fn(&[u32]) -> Vec<f64>> NextTokenModel for Table<F> {
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn next_dists(&self, contexts: &[Vec<u32>]) -> Result<Vec<ProbDist>> {
            contexts.iter().map(|c| ProbDist::new((self.f)(c))).collect()
        }
    }

    // tokens a=0, b=1, c=2
    fn abc() -> Table<impl Fn(&[u32]) -> Vec<f64>> {
        Table {
            v: 3,
            f: |ctx: &[u32]| match ctx.last() {
                Some(9) | None => vec![0.6, 0.4, 0.0],
                Some(0) => vec![0.05, 0.05, 0.9],
                Some(1) => vec![0.4, 0.4, 0.2],
                _ => vec![1.0 / 3.0; 3],
            },
        }
    }

    #[test]
    fn two_token_vocab_example() {
        let m = abc();
        let d = second_token_exact(&m, &[9]).unwrap();
        assert!((d.probs()[2] - 0.62).abs() < 1e-12);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_reduces_to_conditional() {
        let m = Table {
            v: 3,
            f: |ctx: &[u32]| match ctx.last() {
                Some(9) => vec![0.0, 1.0, 0.0],
                _ => vec![0.2, 0.3, 0.5],
            },
        };
        let d = second_token_exact(&m, &[9]).unwrap();
        assert_eq!(d.probs(), &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn prefix_rule_example() {
        let d = ProbDist::new(vec![0.7, 0.25, 0.04, 0.005, 0.005]).unwrap();
        assert_eq!(candidate_set(&d, 0.99), vec![0, 1, 2]);
        assert_eq!(candidate_set(&d, 0.9), vec![0, 1]);
        let w = mixture_weights(&d, &MarginalSpec::default());
        let expect = [0.7 / 0.99, 0.25 / 0.99, 0.04 / 0.99];
        for ((_, got), want) in w.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(candidate_set(&ProbDist::point_mass(5, 3), 0.5), vec![3]);
        assert_eq!(candidate_set(&ProbDist::uniform(64), 0.99).len(), 64);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let d = ProbDist::new(vec![0.1, 0.3, 0.3, 0.3]).unwrap();
        assert_eq!(candidate_set(&d, 0.5), vec![1, 2]);
    }

    #[test]
    fn full_top_p_is_exact_bitwise() {
        let m = abc();
        let exact = second_token_exact(&m, &[9]).unwrap();
        let t = second_token_truncated(&m, &[9], &MarginalSpec::exact(2)).unwrap();
        assert_eq!(exact, t);
    }

    #[test]
    fn unrenormalized_mixture_keeps_candidate_mass() {
        let m = abc();
        let spec = MarginalSpec {
            top_p: 0.5,
            renormalize: false,
            ..Default::default()
        };
        let raw = truncated_mixture(&m, &[9], &spec).unwrap();
        assert!((raw.iter().sum::<f64>() - 0.6).abs() < 1e-12);
        assert!(second_token_truncated(&m, &[9], &spec).is_err());
    }

    #[test]
    fn pass_count_is_candidates_plus_one() {
        let m = abc();
        let counter = ForwardCounter::new(&m);
        let spec = MarginalSpec {
            top_p: 0.5,
            ..Default::default()
        };
        marginal_pair(&counter, &[9], &spec).unwrap();
        assert_eq!(counter.count(), 2);
        counter.reset();
        second_token_exact(&counter, &[9]).unwrap();
        assert_eq!(counter.count(), 4);
    }

    #[test]
    fn deterministic_model_joint_is_zero_or_one() {
        // greedy rollout from 9 is 0 -> 2 -> 1
        let m = Table {
            v: 10,
            f: |ctx: &[u32]| {
                let mut p = vec![0.0; 10];
                let next = match ctx.last() {
                    Some(9) => 0,
                    Some(0) => 2,
                    _ => 1,
                };
                p[next] = 1.0;
                p
            },
        };
        let spec = MarginalSpec::exact(3);
        assert_eq!(k_token_joint(&m, &[9], &spec, &[0, 2, 1]).unwrap(), 1.0);
        assert_eq!(k_token_joint(&m, &[9], &spec, &[0, 2, 2]).unwrap(), 0.0);
        let two = MarginalSpec::exact(2);
        assert_eq!(k_token_joint(&m, &[9], &two, &[0, 2]).unwrap(), 1.0);
        assert!(k_token_joint(&m, &[9], &two, &[0, 2, 1]).is_err());
    }

    #[test]
    fn budget_and_vocab_limits() {
        let big = Table {
            v: 300,
            f: |_: &[u32]| vec![1.0 / 300.0; 300],
        };
        assert!(matches!(second_token_exact(&big, &[1]), Err(MtpError::VocabTooLarge(300))));
        assert!(matches!(
            k_token_joint(&big, &[1], &MarginalSpec::exact(3), &[0, 0, 0]),
            Err(MtpError::BudgetExceeded(90_000))
        ));
        // truncation lifts the exact-mode limits
        let spec = MarginalSpec { k: 3, top_p: 0.01, renormalize: true };
        let p = k_token_joint(&big, &[1], &spec, &[0, 0, 0]).unwrap();
        assert!((p - (1.0f64 / 300.0).powi(3)).abs() < 1e-15);
    }
}
