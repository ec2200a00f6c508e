//! Analytic gradients against central finite differences.
//!
//! The oracle evaluates the loss in f64 so truncation and rounding error
//! stay far below the tolerance even for small gradient entries.

use mtplab::data::{Batch, Corpus, CorpusSpec};
use mtplab::model::{is_adapter, ntp_loss, Checkpoint, ModelConfig};
use mtplab::mtp::{init_mtp, MtpConfig};
use mtplab::numerics::{Grads, ParamStore};
use mtplab::train::mtp_objective;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
// below this magnitude the comparison is effectively absolute
const FLOOR: f64 = 1e-5;

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        hidden: 16,
        n_heads: 2,
        vocab_size: 64,
        max_seq: 64,
        ..Default::default()
    }
}

fn toy_batch(seed: u64) -> Batch {
    let spec = CorpusSpec {
        n_train: 2,
        n_eval: 1,
        seed,
        ambiguity: 0.3,
        ..Default::default()
    };
    let c = Corpus::generate(&spec).unwrap();
    let pairs: Vec<_> = c.train.iter().collect();
    let pad = pairs.iter().map(|p| p.len()).max().unwrap() + 2;
    Batch::from_pairs(&pairs, pad).unwrap()
}

/// Largest relative error over `per_tensor` random coordinates of every
/// tensor that has an analytic gradient.
fn max_rel_error(
    params: &ParamStore<f64>,
    analytic: &Grads<f64>,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, g) in analytic {
        let n = g.len();
        let idx: Vec<usize> = (0..n).collect();
        let picks: Vec<usize> = idx.choose_multiple(&mut rng, per_tensor.min(n)).copied().collect();
        for i in picks {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + H;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - H;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = g[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            assert!(rel.is_finite(), "{name}[{i}]: analytic {a} numeric {numeric}");
            worst = worst.max(rel);
        }
    }
    worst
}

fn jitter_adapters(params: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for (name, t) in params.iter_mut() {
        if is_adapter(name) {
            for x in t.data_mut() {
                *x = rng.random_range(-0.2..0.2);
            }
        }
    }
}

#[test]
fn ntp_loss_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let cfg = toy_config();
        let ck = Checkpoint::init(cfg.clone(), seed).unwrap();
        let mut params = ck.params.cast::<f64>();
        params.set_trainable(true, |_| true);
        let batch = toy_batch(seed);
        let (_, grads) = ntp_loss(&cfg, &params, &batch, true).unwrap();
        assert_eq!(grads.len(), params.len());
        let err = max_rel_error(&params, &grads, 6, seed, |p| ntp_loss(&cfg, p, &batch, false).unwrap().0);
        assert!(err <= TOL, "seed {seed}: max rel error {err}");
    }
}

#[test]
fn mtp_objective_with_whs_and_adapters_matches_finite_differences() {
    for seed in 0..3u64 {
        let cfg = toy_config();
        let base = Checkpoint::init(cfg.clone(), seed).unwrap();
        let mtp = MtpConfig {
            n_heads: 3,
            whs: true,
            temperature: 0.5,
            ..Default::default()
        };
        let mut m = init_mtp(&base, &mtp, seed).unwrap();
        m.prepare_joint(2, seed).unwrap();
        let mut params = m.params.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        jitter_adapters(&mut params, &mut rng);
        params.set_trainable(true, |_| true);
        let batch = toy_batch(seed + 10);
        let run = |p: &ParamStore<f64>, g: bool| mtp_objective(&m.config, &m.mtp, p, &batch, false, g).unwrap();
        let grads = run(&params, true).grads;
        let err = max_rel_error(&params, &grads, 4, seed, |p| run(p, false).total);
        assert!(err <= TOL, "seed {seed}: max rel error {err}");
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let cfg = toy_config();
    let base = Checkpoint::init(cfg, 1).unwrap();
    let mut m = init_mtp(&base, &MtpConfig::default(), 1).unwrap();
    m.prepare_joint(2, 1).unwrap();
    let batch = toy_batch(3);
    let out = mtp_objective(&m.config, &m.mtp, &m.params, &batch, true, true).unwrap();
    let trainable = m.params.trainable_names();
    let got: Vec<String> = out.grads.keys().cloned().collect();
    assert_eq!(got, trainable);
}
