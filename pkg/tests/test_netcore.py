import numpy as np
import pytest

from compseg.errors import DataError, DimensionError
from compseg.netcore import (BN_EPS, PARAM_ORDER, ModelConfig, SegModel, backward, differentiate, forward,
                             load_checkpoint, save_checkpoint)

from oracles import random_model


def central_difference(f, arr, i, h=1e-6):
    flat = arr.reshape(-1)
    orig = flat[i]
    flat[i] = orig + h
    lp = f()
    flat[i] = orig - h
    lm = f()
    flat[i] = orig
    return (lp - lm) / (2 * h)


def test_zero_network():
    model = SegModel(ModelConfig(5, 3, hidden=6, seed=0)).zero_()
    feats = np.random.default_rng(0).standard_normal((2, 4, 4, 5))
    out = forward(model, feats, "eval")
    assert np.all(out.logits == 0.0)
    # all-zero branch: s = 0 everywhere so beta = sigmoid(0)
    assert np.allclose(out.beta, 0.5)
    out_t = forward(model, feats, "train", rng=np.random.default_rng(0))
    assert np.allclose(out_t.beta, 0.5)


def test_eval_is_deterministic(rng):
    model = random_model(rng, D=4, K=3)
    feats = rng.standard_normal((2, 5, 5, 4))
    a = forward(model, feats, "eval")
    b = forward(model, feats, "eval")
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.beta.tobytes() == b.beta.tobytes()


def test_single_image_input_is_batched(rng):
    model = random_model(rng)
    feats = rng.standard_normal((5, 5, 4))
    assert np.array_equal(forward(model, feats).logits, forward(model, feats[None]).logits)


def test_bad_feature_dim(rng):
    model = random_model(rng, D=4)
    with pytest.raises(DimensionError):
        forward(model, rng.standard_normal((1, 3, 3, 5)))


def test_dropout_zero_train_matches_eval_with_batch_stats(rng):
    model = random_model(rng, D=4, K=3)
    feats = rng.standard_normal((2, 5, 5, 4))
    tr = forward(model, feats, "train", rng=np.random.default_rng(0), update_stats=False)
    z = tr.hidden.reshape(-1, model.cfg.hidden) @ model.params["branch.w1"]
    frozen = model.copy()
    frozen.buffers["branch.running_mean"] = z.mean(axis=0)
    frozen.buffers["branch.running_var"] = z.var(axis=0)
    ev = forward(frozen, feats, "eval")
    assert np.array_equal(tr.logits, ev.logits)
    assert np.allclose(tr.beta, ev.beta, atol=1e-12)


def test_batchnorm_normalizes_in_train_mode(rng):
    model = random_model(rng, D=4, K=3)
    out = forward(model, rng.standard_normal((3, 6, 6, 4)), "train", rng=rng, update_stats=False)
    xhat = out.cache["xhat"]
    var = xhat.var(axis=0)
    assert np.allclose(xhat.mean(axis=0), 0.0, atol=1e-10)
    # with eps the batch variance is v / (v + eps), not exactly one
    raw_var = 1.0 / out.cache["inv_std"] ** 2 - BN_EPS
    assert np.allclose(var, raw_var / (raw_var + BN_EPS), atol=1e-5)


def test_running_stats_update(rng):
    model = random_model(rng)
    before = model.buffers["branch.running_mean"].copy()
    forward(model, rng.standard_normal((1, 4, 4, 4)), "train", rng=rng, update_stats=False)
    assert np.array_equal(before, model.buffers["branch.running_mean"])
    forward(model, rng.standard_normal((1, 4, 4, 4)), "train", rng=rng)
    assert not np.array_equal(before, model.buffers["branch.running_mean"])


def test_beta_inside_unit_interval(rng):
    b = forward(random_model(rng), rng.standard_normal((2, 6, 6, 4))).beta
    assert np.all((b > 0) & (b < 1))
    # extreme inputs saturate to the closed interval in float64, never beyond
    b = forward(random_model(rng, scale=3.0), rng.standard_normal((2, 6, 6, 4)) * 5).beta
    assert np.all((b >= 0) & (b <= 1))


def test_constant_loss_has_zero_gradient(rng):
    model = random_model(rng)
    feats = rng.standard_normal((1, 4, 4, 4))
    _, grads = differentiate(model, feats, lambda l, b, h: (3.0, np.zeros_like(l), np.zeros_like(b), None))
    assert all(np.all(g == 0) for g in grads.values())


def test_cross_entropy_logit_gradient_identity(rng):
    """d CE / d logits = softmax - onehot, checked against finite differences."""
    l = rng.standard_normal(5)
    y = 2

    def ce():
        return -(l[y] - np.log(np.exp(l).sum()))

    p = np.exp(l) / np.exp(l).sum()
    analytic = p - np.eye(5)[y]
    fd = np.array([central_difference(ce, l, i) for i in range(5)])
    assert np.allclose(analytic, fd, atol=1e-8)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_backward_matches_finite_differences(rng, mode):
    model = random_model(rng, D=3, K=3, hidden=4, branch_width=5)
    feats = rng.standard_normal((2, 4, 4, 3))
    wl = rng.standard_normal((2, 4, 4, 3))
    wb = rng.standard_normal((2, 4, 4))
    wh = rng.standard_normal((2, 4, 4, 4))

    def loss_fn(l, b, h):
        return (np.sum(wl * l ** 2) + np.sum(wb * b) + np.sum(wh * h), 2 * wl * l, wb, wh)

    def value():
        out = forward(model, feats, mode, rng=None, update_stats=False)
        return loss_fn(out.logits, out.beta, out.hidden)[0]

    _, grads = differentiate(model, feats, loss_fn, mode=mode)
    for name in PARAM_ORDER:
        p = model.params[name]
        for i in range(0, p.size, max(1, p.size // 7)):
            fd = central_difference(value, p, i)
            assert abs(grads[name].reshape(-1)[i] - fd) <= 1e-5 * max(1.0, abs(fd)), (name, i)


def test_backward_shapes(rng):
    model = random_model(rng)
    out = forward(model, rng.standard_normal((1, 3, 3, 4)), "train", rng=rng)
    grads = backward(model, out.cache, dlogits=np.ones_like(out.logits))
    assert set(grads) == set(PARAM_ORDER)
    for k in PARAM_ORDER:
        assert grads[k].shape == model.params[k].shape


def test_init_is_seeded():
    a = SegModel(ModelConfig(4, 3, seed=5))
    b = SegModel(ModelConfig(4, 3, seed=5))
    c = SegModel(ModelConfig(4, 3, seed=6))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in PARAM_ORDER)
    assert not np.array_equal(a.params["trunk.w1"], c.params["trunk.w1"])


def test_checkpoint_roundtrip(tmp_path, rng):
    model = random_model(rng, dropout=0.1)
    model.buffers["branch.running_mean"][:] = rng.standard_normal(model.cfg.branch_width)
    B = rng.standard_normal((4, 4))
    save_checkpoint(tmp_path / "m.ckpt", model, {"compensation.matrix": B})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    for k in PARAM_ORDER:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    assert back.buffers["branch.running_mean"].tobytes() == model.buffers["branch.running_mean"].tobytes()
    assert np.array_equal(extra["compensation.matrix"], B)


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_checkpoint_corruption(tmp_path, rng, damage):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, random_model(rng))
    raw = path.read_bytes()
    raw = {"magic": b"XXXXXXXX" + raw[8:], "truncate": raw[:-16], "trailing": raw + b"\0" * 8}[damage]
    path.write_bytes(raw)
    with pytest.raises(DataError):
        load_checkpoint(path)
