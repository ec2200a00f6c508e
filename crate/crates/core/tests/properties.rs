//! Property tests for distributions, truncation and marginalization.
//!
//! Marginal properties run against a table model whose next-token
//! distribution is a fixed pseudo-random function of the context, so the
//! brute-force oracles stay cheap.

use mtplab::data::Batch;
use mtplab::eval::top_k_hit;
use mtplab::marginal::{
    candidate_set, k_token_joint, marginal_pair, second_token_exact, second_token_truncated, truncated_mixture,
    MarginalSpec,
};
use mtplab::model::{next_token_dist, Checkpoint, ModelConfig, NextTokenModel};
use mtplab::mtp::{init_mtp, mtp_forward, whs_combine, MtpConfig};
use mtplab::numerics::prob_dist_from_logits;
use mtplab::probes::top_p_count;
use mtplab::{ProbDist, Result};
use proptest::prelude::*;

/// Next-token distributions hashed from the context; `sharpness` controls
/// how peaked they are.
struct TableModel {
    vocab: usize,
    sharpness: f64,
}

impl TableModel {
    fn dist(&self, ctx: &[u32]) -> ProbDist {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in ctx {
            h = (h ^ t as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let logits: Vec<f64> = (0..self.vocab)
            .map(|i| {
                let mut x = h ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                x ^= x >> 31;
                x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
                x ^= x >> 29;
                self.sharpness * ((x >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect();
        prob_dist_from_logits(&logits).unwrap()
    }
}

impl NextTokenModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_dists(&self, contexts: &[Vec<u32>]) -> Result<Vec<ProbDist>> {
        Ok(contexts.iter().map(|c| self.dist(c)).collect())
    }
}

fn with(ctx: &[u32], y: usize) -> Vec<u32> {
    let mut v = ctx.to_vec();
    v.push(y as u32);
    v
}

fn brute_second(m: &TableModel, ctx: &[u32]) -> Vec<f64> {
    let p1 = m.dist(ctx);
    let mut out = vec![0.0; m.vocab];
    for (y, &w) in p1.probs().iter().enumerate() {
        for (o, q) in out.iter_mut().zip(m.dist(&with(ctx, y)).probs()) {
            *o += w * q;
        }
    }
    out
}

fn dist_strategy(max_v: usize) -> impl Strategy<Value = ProbDist> {
    prop::collection::vec(0u32..6, 2..=max_v).prop_map(|w| {
        // small integer weights make ties common
        let w: Vec<f64> = w.iter().map(|&x| x as f64 + 0.0).collect();
        if w.iter().all(|&x| x == 0.0) {
            ProbDist::uniform(w.len())
        } else {
            ProbDist::normalized(w).unwrap()
        }
    })
}

fn context() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..12, 1..8)
}

fn tiny_model(seed: u64) -> Checkpoint {
    Checkpoint::init(
        ModelConfig {
            n_layers: 3,
            hidden: 16,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 16,
            init_std: 0.4,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_yields_a_distribution(logits in prop::collection::vec(-80.0f64..80.0, 1..100)) {
        let d = prob_dist_from_logits(&logits).unwrap();
        let total: f64 = d.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(logits[d.argmax()], top);
    }

    #[test]
    fn candidate_set_is_the_minimal_crossing_prefix(d in dist_strategy(20), p in 0.05f64..0.999) {
        let set = candidate_set(&d, p);
        let probs = d.probs();
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        let before: f64 = set[..set.len() - 1].iter().map(|&i| probs[i]).sum();
        prop_assert!(mass >= p - 1e-12 || set.len() == d.len());
        prop_assert!(before < p);
        prop_assert_eq!(set.len(), top_p_count(&d, p));
        for w in set.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(probs[a] > probs[b] || (probs[a] == probs[b] && a < b));
        }
        // nothing outside the set outranks its last member
        let last = *set.last().unwrap();
        for i in (0..d.len()).filter(|i| !set.contains(i)) {
            prop_assert!(probs[i] < probs[last] || (probs[i] == probs[last] && i > last));
        }
    }

    #[test]
    fn top_k_hit_counts_strictly_better_tokens(d in dist_strategy(20), k in 1usize..8, seed in 0usize..1000) {
        let token = seed % d.len();
        let probs = d.probs();
        let ahead = (0..d.len())
            .filter(|&i| probs[i] > probs[token] || (probs[i] == probs[token] && i < token))
            .count();
        prop_assert_eq!(top_k_hit(&d, token, k), ahead < k);
    }

    #[test]
    fn exact_marginal_matches_enumeration(ctx in context(), sharp in 0.5f64..12.0) {
        let m = TableModel { vocab: 12, sharpness: sharp };
        let got = second_token_exact(&m, &ctx).unwrap();
        for (a, b) in got.probs().iter().zip(brute_second(&m, &ctx)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncation_error_is_bounded_by_dropped_mass(ctx in context(), sharp in 0.5f64..12.0, p in 0.3f64..0.999) {
        let m = TableModel { vocab: 12, sharpness: sharp };
        let exact = second_token_exact(&m, &ctx).unwrap();
        let spec = MarginalSpec { top_p: p, ..Default::default() };
        let trunc = second_token_truncated(&m, &ctx, &spec).unwrap();
        let dropped = 1.0 - candidate_set(&m.dist(&ctx), p).iter().map(|&i| m.dist(&ctx).probs()[i]).sum::<f64>();
        prop_assert!(trunc.total_variation(&exact) <= dropped + 1e-12);
        prop_assert!(dropped <= 1.0 - p + 1e-12);
        // without renormalization every entry is a lower bound on the exact one
        let raw = truncated_mixture(&m, &ctx, &MarginalSpec { renormalize: false, ..spec }).unwrap();
        for (r, e) in raw.iter().zip(exact.probs()) {
            prop_assert!(*r <= e + 1e-12);
        }
    }

    #[test]
    fn refining_top_p_never_loses_mass(ctx in context(), sharp in 0.5f64..12.0, p in 0.1f64..0.9, dp in 0.0f64..0.1) {
        let m = TableModel { vocab: 12, sharpness: sharp };
        let raw = |top_p: f64| {
            truncated_mixture(&m, &ctx, &MarginalSpec { top_p, renormalize: false, ..Default::default() }).unwrap()
        };
        let (coarse, fine) = (raw(p), raw(p + dp));
        for (c, f) in coarse.iter().zip(&fine) {
            prop_assert!(*c <= f + 1e-15);
        }
    }

    #[test]
    fn three_token_joint_is_a_product_of_marginals(ctx in context(), q in prop::array::uniform3(0u32..12)) {
        let m = TableModel { vocab: 12, sharpness: 4.0 };
        let got = k_token_joint(&m, &ctx, &MarginalSpec::exact(3), &q).unwrap();
        let p1 = m.dist(&ctx);
        let p2 = brute_second(&m, &ctx);
        let mut p3 = 0.0;
        for y in 0..12 {
            let c = with(&ctx, y);
            p3 += p1.probs()[y] * brute_second(&m, &c)[q[2] as usize];
        }
        let want = p1.probs()[q[0] as usize] * p2[q[1] as usize] * p3;
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300);
    }

    #[test]
    fn marginal_pair_agrees_with_its_parts(ctx in context(), p in 0.5f64..1.0) {
        let m = TableModel { vocab: 12, sharpness: 6.0 };
        let spec = MarginalSpec { top_p: p, ..Default::default() };
        let (next, second) = marginal_pair(&m, &ctx, &spec).unwrap();
        prop_assert_eq!(next, m.dist(&ctx));
        prop_assert_eq!(second, second_token_truncated(&m, &ctx, &spec).unwrap());
    }

    #[test]
    fn whs_at_low_temperature_selects_the_largest_weight(
        layers in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 6), 2..5),
        pick in 0usize..5,
    ) {
        let pick = pick % layers.len();
        let weights: Vec<f32> = (0..layers.len()).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
        let refs: Vec<&[f32]> = layers.iter().map(|l| l.as_slice()).collect();
        let out = whs_combine(&refs, &weights, 1e-3).unwrap();
        prop_assert_eq!(out, layers[pick].clone());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batched_next_dists_equal_one_at_a_time(
        seed in 0u64..100,
        ctxs in prop::collection::vec(prop::collection::vec(0u32..12, 1..6), 1..8),
    ) {
        let ck = tiny_model(seed);
        let batched = ck.next_dists(&ctxs).unwrap();
        for (c, d) in ctxs.iter().zip(&batched) {
            prop_assert_eq!(d, &next_token_dist(&ck, c).unwrap());
        }
    }

    #[test]
    fn perturbing_head_two_leaves_head_one_alone(seed in 0u64..100, ctx in context(), scale in 0.1f32..2.0) {
        let base = tiny_model(seed);
        let m = init_mtp(&base, &MtpConfig::default(), seed).unwrap();
        let mut moved = m.clone();
        for (name, t) in moved.params.iter_mut() {
            if name.starts_with("head.2.") {
                t.data_mut().iter_mut().for_each(|x| *x += scale);
            }
        }
        let (a, b) = (mtp_forward(&m, &ctx).unwrap(), mtp_forward(&moved, &ctx).unwrap());
        prop_assert_eq!(&a[0], &b[0]);
        prop_assert!(a[1] != b[1]);
    }

    #[test]
    fn padding_does_not_change_logits(seed in 0u64..100, ctx in context(), pad in 1usize..5) {
        let ck = tiny_model(seed);
        let plain = ck.logits(&Batch::single(&ctx)).unwrap();
        let pair = mtplab::data::SequencePair::new(with(&ctx, 0), 1).unwrap();
        let padded = ck.logits(&Batch::from_pairs(&[&pair], pair.len() + pad).unwrap()).unwrap();
        let v = ck.config.vocab_size;
        for (a, b) in plain.iter().zip(&padded[..ctx.len() * v]) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }
}
