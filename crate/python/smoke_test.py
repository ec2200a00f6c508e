"""Smoke test for the mtplab_py extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`
or `maturin develop -m crates/python/Cargo.toml`, then run this script.
"""

import json
import math

import mtplab_py as m


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    spec = {"n_train": 64, "n_eval": 4, "vocab_size": 24, "src_len_min": 6,
            "src_len_max": 6, "min_target_len": 6}
    train, evals = m.gen_corpus(json.dumps(spec))
    assert len(train) == 64 and len(evals) == 4
    again, _ = m.gen_corpus(json.dumps(spec))
    assert again == train, "corpus generation is not deterministic"

    uniform = [1.0 / 24] * 24
    assert close(m.entropy_of(uniform), math.log(24))
    assert m.top_p_count_of([0.0, 1.0, 0.0], 0.99) == 1
    assert m.top_p_set([0.7, 0.25, 0.04, 0.005, 0.005], 0.9) == [0, 1]

    cfg = {"n_layers": 3, "hidden": 16, "n_heads": 2, "vocab_size": 24, "max_seq": 24}
    model = m.Model(json.dumps(cfg), seed=1)
    plan = {"base_lr": 1e-2, "batch_size": 8, "epochs": 4}
    losses = model.pretrain(train, json.dumps(plan))
    assert losses[-1] < losses[0], "pretraining did not reduce the loss"

    ids, _ = evals[0]
    ctx = ids[: len(ids) - 3]
    nxt = model.next_token(ctx)
    assert close(sum(nxt), 1.0, 1e-6)
    exact = model.second_token_exact(ctx)
    full = model.second_token(ctx, top_p=1.0)
    assert full == exact, "top_p=1 marginal differs from exact"
    trunc = model.second_token(ctx, top_p=0.99)
    tv = 0.5 * sum(abs(a - b) for a, b in zip(trunc, exact))
    assert tv <= 2 * (1 - 0.99) + 1e-9

    kl = model.kl_profile(evals)
    assert len(kl) == model.n_layers - 1 and all(k >= 0 for k in kl)
    print("smoke test passed: final loss %.4f, KL profile %s" % (losses[-1], ["%.3f" % k for k in kl]))


if __name__ == "__main__":
    main()
