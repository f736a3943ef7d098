import math

import numpy as np
import pytest

from compseg.baselines import (DropoutEnsemble, TransitionHead, c_model_forward, column_softmax,
                               default_diagonal_logit, mc_dropout_predict, s_model_forward, transition_predict)
from compseg.errors import ConfigError
from compseg.netcore import ModelConfig, SegModel
from compseg.trainer import TrainConfig, method_config, train
from compseg.synthgrid import SceneConfig, generate_dataset

from oracles import random_model


def test_column_softmax_columns_sum_to_one(rng):
    T = column_softmax(rng.standard_normal((3, 5, 5)) * 10)
    assert np.allclose(T.sum(axis=-2), 1.0, atol=1e-12)
    assert T.min() >= 0


def test_s_model_examples():
    head = TransitionHead("s_model", 2, params={"raw": np.array([[1.0, 0.0], [0.0, 0.0]])})
    e = math.e / (math.e + 1)
    assert np.allclose(head.transitions(), [[e, 0.5], [1 - e, 0.5]], atol=1e-15)
    pbar = s_model_forward(head, np.array([1.0, 0.0]))
    assert np.allclose(pbar, [0.7311, 0.2689], atol=5e-5)

    near_id = TransitionHead("s_model", 3, params={"raw": 20.0 * np.eye(3)})
    p = np.array([0.2, 0.5, 0.3])
    assert np.allclose(s_model_forward(near_id, p), p, atol=1e-8)
    flat = TransitionHead("s_model", 3, params={"raw": np.ones((3, 3))})
    assert np.allclose(s_model_forward(flat, p), 1 / 3)


def test_c_model_examples(rng):
    head = TransitionHead("c_model", 2, hidden=3, seed=0)
    for v in head.params.values():
        v[...] = 0.0
    hid = rng.standard_normal((4, 3))
    assert np.allclose(c_model_forward(head, hid, np.array([[1.0, 0.0]] * 4)), 0.5)
    head.params["b2"][:] = [1.0, 0.0, 0.0, 0.0]   # reshapes to [[1, 0], [0, 0]]
    assert np.allclose(c_model_forward(head, hid[:1], np.array([[1.0, 0.0]])), [[0.7311, 0.2689]], atol=5e-5)

    head = TransitionHead("c_model", 3, hidden=3, seed=1)
    h = rng.standard_normal(3)
    T = head.transitions(np.stack([h, h]))
    assert np.array_equal(T[0], T[1])


def test_default_init_prefers_identity():
    d = default_diagonal_logit(4)
    T = TransitionHead("s_model", 4).transitions()
    assert np.allclose(np.diag(T), 0.9)
    assert d == pytest.approx(math.log(0.9 * 3 / 0.1))


def test_head_validation():
    with pytest.raises(ConfigError):
        TransitionHead("x_model", 3)
    with pytest.raises(ConfigError):
        TransitionHead("c_model", 3)
    with pytest.raises(ConfigError):
        DropoutEnsemble(rate=1.0)
    with pytest.raises(ConfigError):
        DropoutEnsemble(num_samples=0)


def test_transition_inference_drops_T():
    ds = generate_dataset(SceneConfig(height=8, width=8, feature_dim=4, num_classes=3, num_regions=4), 4)
    for kind in ("s_model", "c_model"):
        model, _, _, head = train(SegModel(ModelConfig(4, 3, hidden=6)), None, ds,
                                  method_config(kind, TrainConfig(steps=20, batch_size=2)))
        labels, p, pbar = transition_predict(model, head, ds.features, noisy=True)
        plain = SegModel(model.cfg, {k: v.copy() for k, v in model.params.items()},
                         {k: v.copy() for k, v in model.buffers.items()})
        from compseg.inference import predict
        ref, pref = predict(plain, ds.features)
        assert labels.tobytes() == ref.tobytes() and p.tobytes() == pref.tobytes()
        assert np.allclose(pbar.sum(axis=-1), 1.0)


def test_mc_dropout(rng):
    model = random_model(rng, dropout=0.25)
    feats = rng.standard_normal((2, 5, 5, 4))
    mean, var = mc_dropout_predict(model, feats, DropoutEnsemble(rate=0.0, num_samples=6))
    assert np.all(var == 0.0)
    mean1, var1 = mc_dropout_predict(model, feats, DropoutEnsemble(seed=3))
    mean2, var2 = mc_dropout_predict(model, feats, DropoutEnsemble(seed=3))
    assert mean1.tobytes() == mean2.tobytes() and var1.tobytes() == var2.tobytes()
    assert np.all(var1 >= 0) and var1.max() > 0
    assert np.allclose(mean1.sum(axis=-1), 1.0)


def test_mc_dropout_variance_matches_two_pass_formula(rng):
    model = random_model(rng)
    feats = rng.standard_normal((1, 4, 4, 4))
    ens = DropoutEnsemble(rate=0.3, num_samples=7, seed=1)
    from compseg.netcore import forward
    from compseg.compensation import plain_probabilities
    samples = np.stack([plain_probabilities(forward(model, feats, "eval", rng=np.random.default_rng([1, 31, s]),
                                                    dropout=0.3).logits) for s in range(7)])
    mean, var = mc_dropout_predict(model, feats, ens)
    assert np.allclose(mean, samples.mean(axis=0), atol=1e-14)
    assert np.allclose(var, samples.var(axis=0).mean(axis=-1), atol=1e-14)
