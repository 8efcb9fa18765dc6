import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dyckprobe import nn_core as nc
from dyckprobe.nn_core import EncoderState, ModelParams


def rand_params(H, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(H, rng)
    for _, a in p.items():
        a[...] = a + scale * 0.3 * rng.standard_normal(a.shape)
    return p


def as_dict(p):
    return dict(p.items())


def rel_error(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def gradient_check(H, prefix, target, seed, eps=1e-5):
    p = rand_params(H, seed)
    analytic = nc.backward(p, prefix, target)
    codes = nc.encode_chars(prefix)
    d = as_dict(p)
    # the loss is evaluated in extended precision so the quotient's rounding noise stays far below 1e-5
    numeric = oracles.central_difference(lambda: oracles.ref_loss(d, codes, target, np.longdouble), d, eps=eps)
    return max(float(rel_error(getattr(analytic, k), numeric[k].astype(np.float64)).max()) for k in numeric)


def random_prefix(rng, length):
    return "".join(rng.choice(list("[]{}"), size=length))


def test_param_shapes():
    p = ModelParams.init(7, np.random.default_rng(0))
    p.check()
    assert p.embedding.shape == (4, 5)
    assert p.W_ih.shape == (7, 7) and p.W_ix.shape == (7, 5)
    assert p.dec_w.shape == (7,) and p.dec_b.shape == ()
    assert np.all(p.b_f == 1.0) and np.all(p.b_i == 0.0)
    assert np.abs(p.W_ih).max() <= 1 / np.sqrt(7)


def test_check_rejects_bad_shape():
    p = ModelParams.zeros(3)
    p.W_oh = np.zeros((3, 4))
    with pytest.raises(nc.ShapeError):
        p.check()


def test_zero_params_give_zero_state():
    p = ModelParams.zeros(4)
    s = nc.lstm_step(p, np.arange(5.0), nc.zero_state(p))
    assert np.all(s.h == 0) and np.all(s.c == 0)
    s = nc.encode(p, "{")
    assert np.all(s.h == 0) and np.all(s.c == 0)


def test_saturated_gates():
    p = ModelParams.zeros(3)
    p.b_i[:] = 50.0
    p.b_c[:] = 50.0
    s = nc.lstm_step(p, np.zeros(5), nc.zero_state(p))
    assert np.allclose(s.c, 1.0)


def test_step_shape_errors():
    p = ModelParams.zeros(3)
    with pytest.raises(nc.ShapeError):
        nc.lstm_step(p, np.zeros(4), nc.zero_state(p))
    with pytest.raises(nc.ShapeError):
        nc.lstm_step(p, np.zeros(5), EncoderState(np.zeros(2), np.zeros(3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1), st.text(alphabet="[]{}", min_size=1, max_size=15))
def test_encode_matches_reference(H, seed, prefix):
    p = rand_params(H, seed)
    h, c = oracles.ref_lstm_encode(as_dict(p), nc.encode_chars(prefix))
    s = nc.encode(p, prefix)
    np.testing.assert_allclose(s.h, h, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.c, c, rtol=0, atol=1e-12)
    z = float(p.dec_w @ h + p.dec_b)
    assert abs(nc.decode(p, s) - oracles.ref_sigmoid(z)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.text(alphabet="[]{}", min_size=1, max_size=10),
       st.sampled_from("[]{}"))
def test_encode_is_a_fold(H, seed, prefix, ch):
    p = rand_params(H, seed)
    step = nc.lstm_step(p, p.embedding[nc.CODE[ch]], nc.encode(p, prefix))
    full = nc.encode(p, prefix + ch)
    np.testing.assert_allclose(full.h, step.h, atol=1e-14)
    np.testing.assert_allclose(full.c, step.c, atol=1e-14)


def test_encode_rejects_empty():
    with pytest.raises(ValueError):
        nc.encode(ModelParams.zeros(2), "")
    with pytest.raises(ValueError):
        nc.backward(ModelParams.zeros(2), "", 0)


def test_forward_is_pure_and_deterministic():
    p = rand_params(5, 3)
    before = p.copy()
    a = nc.encode(p, "{[{}[[]")
    b = nc.encode(p, "{[{}[[]")
    nc.backward(p, "{[{}[[]", 1)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.c, b.c)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(p.items(), before.items()))


def test_decode_limits():
    p = ModelParams.zeros(3)
    assert nc.decode(p, nc.zero_state(p)) == 0.5
    p.dec_b[...] = 40.0
    assert nc.decode(p, nc.zero_state(p)) == pytest.approx(1.0)


@given(st.floats(-700, 700), st.sampled_from([0.0, 1.0]))
def test_bce_is_finite_and_nonnegative(z, y):
    v = nc.bce_from_logits(np.array(z), y)
    assert np.isfinite(v) and v >= 0


@pytest.mark.parametrize("case", range(50))
def test_gradient_check(case):
    rng = np.random.default_rng(1000 + case)
    H = int(rng.integers(1, 9))
    prefix = random_prefix(rng, int(rng.integers(1, 13)))
    assert gradient_check(H, prefix, int(rng.integers(0, 2)), 2000 + case) < 1e-5


def test_gradient_vanishes_at_saturated_target():
    p = rand_params(3, 0)
    p.dec_w[:] = 0.0
    p.dec_b[...] = 800.0  # p == 1 in float64
    g = nc.backward(p, "[{", 1)
    assert all(np.all(v == 0) for _, v in g.items())


def test_batch_gradient_is_linear():
    p = rand_params(4, 1)
    codes = nc.encode_chars("[{}[{")[None, :]
    fw1 = nc.forward_batch(p, codes)
    d1 = np.zeros_like(fw1.logits)
    d1[-1, 0] = 0.3
    g1 = nc.backward_batch(p, fw1, d1)
    fw2 = nc.forward_batch(p, np.repeat(codes, 2, axis=0))
    d2 = np.zeros_like(fw2.logits)
    d2[-1, :] = 0.3
    g2 = nc.backward_batch(p, fw2, d2)
    for (_, a), (_, b) in zip(g1.items(), g2.items()):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)


def test_float32_mode_runs():
    p = rand_params(4, 2).astype(np.float32)
    s = nc.encode(p, "[[{}")
    assert s.h.dtype == np.float32
    assert p.dtype == np.float32


def test_encode_corpus_rejects():
    with pytest.raises(ValueError):
        nc.encode_corpus(["[]", "[][]"])
    with pytest.raises(ValueError):
        nc.encode_corpus(["[x"])
    assert nc.encode_corpus(["[]{}"]).tolist() == [[0, 1, 2, 3]]


def test_checkpoint_round_trip(tmp_path):
    p = rand_params(6, 9)
    nc.save_checkpoint(p, tmp_path / "a.npz", seed=42, extra={"note": "x"})
    q, header = nc.load_checkpoint(tmp_path / "a.npz")
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(p.items(), q.items()))
    assert header["seed"] == 42 and header["hidden_units"] == 6
    assert header["layout"] == list(nc.PARAM_ORDER)
    assert header["precision"] == "float64"
    assert header["label_convention"] == "y=1 curly, y=0 square"
    nc.save_checkpoint(p, tmp_path / "b.npz", seed=42, extra={"note": "x"})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_checkpoint_detects_corruption(tmp_path):
    import json
    import zipfile

    p = rand_params(3, 1)
    path = tmp_path / "c.npz"
    nc.save_checkpoint(p, path)
    # rewrite one array with a perturbed value but keep the original header
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    arrays["W_ih"] = arrays["W_ih"] + 1e-3
    bad = tmp_path / "bad.npz"
    np.savez(bad, **arrays)
    with pytest.raises(ValueError, match="checksum"):
        nc.load_checkpoint(bad)
    header = json.loads(str(arrays["__header__"]))
    header["version"] = 99
    arrays["__header__"] = np.array(json.dumps(header))
    np.savez(bad, **arrays)
    with pytest.raises(ValueError, match="version"):
        nc.load_checkpoint(bad)
    del arrays["dec_w"]
    header["version"] = 1
    arrays["__header__"] = np.array(json.dumps(header))
    np.savez(bad, **arrays)
    with pytest.raises(ValueError, match="missing"):
        nc.load_checkpoint(bad)
    assert zipfile.is_zipfile(path)


def test_states_stay_finite_under_long_random_walk():
    """10,000 clipped random updates keep parameters and states finite."""
    from dyckprobe import trainer

    rng = np.random.default_rng(0)
    p = rand_params(4, 0)
    adam = trainer.AdamState.like(p)
    codes = rng.integers(0, 4, size=(8, 12))
    for step in range(10_000):
        fw = nc.forward_batch(p, codes)
        g = nc.backward_batch(p, fw, rng.standard_normal(fw.logits.shape) * 100)
        g, _ = trainer.clip_global_norm(g, 5.0)
        p, adam = trainer.adam_step(p, g, adam, lr=1e-2)
        if step % 1000 == 0:
            codes = rng.integers(0, 4, size=(8, 12))
    assert p.all_finite()
    fw = nc.forward_batch(p, codes)
    assert np.isfinite(fw.cache.hs).all() and np.isfinite(fw.cache.cs).all()
