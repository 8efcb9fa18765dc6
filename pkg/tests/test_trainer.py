import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dyckprobe import dyck_gen, nn_core as nc, stack_oracle, trainer as tr
from dyckprobe.nn_core import ModelParams


@pytest.fixture(scope="module")
def small():
    sentences = dyck_gen.sample_corpus(dyck_gen.GrammarConfig(n=20, seed=1), 60)
    return tr.EncodedCorpus.from_sentences(sentences)


def quick_cfg(**kw):
    base = dict(hidden_units=4, epochs=2, batch_schedule=((0, 8), (1, 16)), curriculum_length=10, seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


def params_equal(a, b):
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.items(), b.items()))


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_signed_lr():
    p = ModelParams.zeros(2)
    g = p.zeros_like()
    g.dec_b[...] = 3.7
    g.W_ih[0, 1] = -0.02
    new, st_ = tr.adam_step(p, g, tr.AdamState.like(p), lr=0.01)
    assert new.dec_b == pytest.approx(-0.01, rel=1e-6)
    assert new.W_ih[0, 1] == pytest.approx(0.01, rel=1e-5)
    assert st_.t == 1
    assert np.all(new.W_ih.ravel()[[0, 2, 3]] == 0)


def test_adam_zero_gradient_keeps_params():
    rng = np.random.default_rng(0)
    p = ModelParams.init(3, rng)
    st_ = tr.AdamState.like(p)
    q = p
    for _ in range(20):
        q, st_ = tr.adam_step(q, p.zeros_like(), st_)
    assert params_equal(p, q)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1e-1))
def test_adam_matches_reference(seed, lr):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(3, rng)
    ref = oracles.RefAdam(lr=lr)
    ref_params = dict(p.items())
    st_ = tr.AdamState.like(p)
    for _ in range(15):
        g = ModelParams(**{k: rng.standard_normal(v.shape) for k, v in p.items()})
        p, st_ = tr.adam_step(p, g, st_, lr=lr)
        ref_params = ref.step(ref_params, dict(g.items()))
    for k, v in p.items():
        np.testing.assert_allclose(v, ref_params[k], rtol=0, atol=1e-10)
    assert all((v >= 0).all() for _, v in st_.v.items())


def test_adam_skips_non_finite_gradient():
    p = ModelParams.init(2, np.random.default_rng(1))
    g = p.zeros_like()
    g.b_o[0] = np.nan
    st0 = tr.AdamState.like(p)
    q, st1 = tr.adam_step(p, g, st0)
    assert q is p and st1.t == 0 and st1.skipped == 1


def test_adam_does_not_mutate_inputs():
    rng = np.random.default_rng(2)
    p = ModelParams.init(2, rng)
    g = ModelParams(**{k: rng.standard_normal(v.shape) for k, v in p.items()})
    p0, g0 = p.copy(), g.copy()
    st_ = tr.AdamState.like(p)
    tr.adam_step(p, g, st_)
    assert params_equal(p, p0) and params_equal(g, g0) and st_.t == 0


def test_clip_global_norm():
    g = ModelParams.zeros(2)
    g.dec_w[:] = [3.0, 4.0]
    clipped, norm = tr.clip_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose(clipped.dec_w, [0.6, 0.8])
    same, _ = tr.clip_global_norm(g, 10.0)
    assert same is g
    assert tr.clip_global_norm(g, None)[0] is g


# ---------------------------------------------------------------------------
# config and data


@pytest.mark.parametrize("kw", [{"batch_schedule": ((0, 64), (1, 32))}, {"batch_schedule": ((1, 32),)},
                                {"split_fraction": 1.0}, {"split_fraction": 0.0}, {"hidden_units": 0},
                                {"curriculum_length": 7}])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        tr.TrainConfig(**kw)


def test_batch_schedule_lookup():
    cfg = tr.TrainConfig()
    assert [cfg.batch_size(e) for e in range(7)] == [32, 64, 128, 256, 512, 512, 512]


def test_split_is_a_partition():
    sentences = [f"{i}" for i in range(101)]
    a, b = tr.split_corpus(sentences, 0.5, seed=4)
    assert len(a) == 50 or len(a) == 51
    assert sorted(a + b, key=int) == sentences
    assert tr.split_corpus(sentences, 0.5, seed=4) == (a, b)
    assert tr.split_corpus(sentences, 0.5, seed=5) != (a, b)


def test_select_keeps_table_consistent(small):
    sub = small.select([5, 1, 9])
    ref = tr.EncodedCorpus.from_sentences([small.sentences[i] for i in (5, 1, 9)])
    for col in ("sentence", "pos", "start", "target", "distance", "embedded_depth"):
        assert np.array_equal(getattr(sub.table, col), getattr(ref.table, col))


def test_batched_loss_equals_sum_of_instances(small):
    """Whole-sentence batches with a loss mask give the mean of per-instance gradients."""
    rng = np.random.default_rng(7)
    p = ModelParams.init(3, rng)
    data = small.select(np.arange(4))
    y, w = tr._loss_targets(data, data.table)
    fw = nc.forward_batch(p, data.codes[:, :-1])
    n_inst = w.sum()
    dlogits = (nc.sigmoid(fw.logits) - y.T) * w.T / n_inst
    batched = nc.backward_batch(p, fw, dlogits)
    total = p.zeros_like()
    for s, k, t in zip(data.table.sentence, data.table.pos, data.table.target):
        g = nc.backward(p, data.sentences[s][:k], int(t))
        for name, arr in total.items():
            arr += getattr(g, name) / n_inst
    for (name, a), (_, b) in zip(batched.items(), total.items()):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14, err_msg=name)


# ---------------------------------------------------------------------------
# evaluation


def test_zero_model_predicts_square(small):
    rep = tr.evaluate(ModelParams.zeros(3), small)
    assert rep.errors == int(small.table.target.sum())
    assert 0.4 < rep.error_rate < 0.6


def test_oracle_predictions_have_zero_error(small):
    rep = tr.report_from_predictions(small.table.target, small.table)
    assert rep.errors == 0 and rep.error_rate == 0.0


def test_predictions_use_the_prefix_only(small):
    p = ModelParams.init(4, np.random.default_rng(3))
    pred = tr.instance_predictions(p, small)
    for i in range(0, len(small.table), 37):
        s, k = small.table.sentence[i], small.table.pos[i]
        prob = nc.decode(p, nc.encode(p, small.sentences[s][:k]))
        assert pred[i] == int(prob > 0.5)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=300), st.integers(0, 1000))
def test_bucket_decomposition(bits, seed):
    sentences = dyck_gen.sample_corpus(dyck_gen.GrammarConfig(n=12, seed=seed), 30)
    table = stack_oracle.instance_table(sentences)
    pred = np.resize(np.asarray(bits), len(table))
    rep = tr.report_from_predictions(pred, table)
    for buckets in (rep.by_distance, rep.by_depth):
        assert sum(c for c, _ in buckets.values()) == rep.count
        assert sum(e for _, e in buckets.values()) == rep.errors
    weighted = sum(c * r for (c, _), r in zip(rep.by_distance.values(), rep.distance_rates().values()))
    assert weighted / rep.count == pytest.approx(rep.error_rate)


def test_evaluate_empty_raises(small):
    with pytest.raises(ValueError):
        tr.evaluate(ModelParams.zeros(2), small, small.table.subset(np.zeros(len(small.table), bool)))


# ---------------------------------------------------------------------------
# training loop


def test_fit_is_reproducible_and_logs_phases(small):
    p1, h1 = tr.fit(small, small, quick_cfg())
    p2, h2 = tr.fit(small, small, quick_cfg())
    assert params_equal(p1, p2)
    strip = [{k: v for k, v in r.items() if k != "wall_time"} for r in h1]
    assert strip == [{k: v for k, v in r.items() if k != "wall_time"} for r in h2]
    assert [r["phase"] for r in h1] == ["curriculum", "main", "main"]
    assert [r["batch_size"] for r in h1] == [8, 8, 16]
    assert {"epoch", "phase", "batch_size", "train_error", "test_error", "wall_time", "seed"} <= set(h1[0])


def test_fit_seed_changes_result(small):
    p1, _ = tr.fit(small, None, quick_cfg(seed=1))
    p2, _ = tr.fit(small, None, quick_cfg(seed=2))
    assert not params_equal(p1, p2)


def test_fit_respects_instance_selection(small):
    """Instances outside the selection carry no gradient: a selection of nothing is refused."""
    with pytest.raises(ValueError):
        tr.fit(small, None, quick_cfg(), select=lambda t: np.zeros(len(t), bool))
    _, hist = tr.fit(small, None, quick_cfg(), select=lambda t: t.distance == 2)
    assert all(np.isfinite(r["train_loss"]) for r in hist)


def test_fit_learns_something():
    sentences = dyck_gen.sample_corpus(dyck_gen.GrammarConfig(n=30, seed=2), 400)
    train, test = tr.split_corpus(sentences)
    a, b = tr.EncodedCorpus.from_sentences(train), tr.EncodedCorpus.from_sentences(test)
    p, hist = tr.fit(a, b, tr.TrainConfig(hidden_units=8, lr=1e-2, epochs=8, curriculum_length=10))
    assert hist[-1]["test_error"] < 0.25


def test_divergence_returns_last_finite_params(small, monkeypatch):
    calls = {"n": 0}
    real = tr._run_epoch

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("loss became nan")
        return real(*args)

    monkeypatch.setattr(tr, "_run_epoch", flaky)
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.fit(small, None, quick_cfg())
    assert info.value.params.all_finite()
    assert len(info.value.history) == 1


def test_plateau_stops_early(small):
    _, hist = tr.fit(small, small, quick_cfg(epochs=30, plateau_patience=1, lr=0.0))
    assert len([r for r in hist if r["phase"] == "main"]) == 2


def test_train_splits_and_reports():
    sentences = dyck_gen.sample_corpus(dyck_gen.GrammarConfig(n=16, seed=5), 40)
    p, hist = tr.train(sentences, quick_cfg(epochs=1))
    assert hist[-1]["test_error"] is not None
    assert p.hidden_units == 4


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="best of 7 configurations reaches 0.043, not < 0.01; see the decision ledger")
def test_overfits_micro_corpus():
    """100 sentences of length 100, H=16, 200 epochs: training loss should fall below 0.01."""
    sentences = dyck_gen.sample_corpus(dyck_gen.GrammarConfig(n=100, seed=3), 100)
    data = tr.EncodedCorpus.from_sentences(sentences)
    cfg = tr.TrainConfig(hidden_units=16, lr=1e-2, epochs=200, curriculum_fraction=0, batch_schedule=((0, 2),))
    _, hist = tr.fit(data, None, cfg)
    assert min(r["train_loss"] for r in hist) < 0.01
