"""Reference methods: global/per-pixel transition matrices and MC dropout.

Transition heads map clean probabilities p to noisy ones ``T @ p`` with a
column-stochastic T. The loss is applied to the noisy output during training;
inference drops T and returns p.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .compensation import LossBreakdown, plain_probabilities
from .errors import ConfigError, DataError, DimensionError
from .netcore import SegModel, forward


def column_softmax(raw: np.ndarray) -> np.ndarray:
    """Softmax over the row axis (-2) so that every column sums to one."""
    z = np.exp(raw - raw.max(axis=-2, keepdims=True))
    return z / z.sum(axis=-2, keepdims=True)


def _column_softmax_backward(T: np.ndarray, dT: np.ndarray) -> np.ndarray:
    return T * (dT - (T * dT).sum(axis=-2, keepdims=True))


def default_diagonal_logit(num_classes: int, stay: float = 0.9) -> float:
    """Raw diagonal value giving T_jj = stay when off-diagonals are zero."""
    return math.log(stay * (num_classes - 1) / (1.0 - stay))


class TransitionHead:
    """s-model (one K x K matrix) or c-model (a branch predicting T per pixel)."""

    def __init__(self, kind: str, num_classes: int, hidden: int | None = None, width: int = 32,
                 seed: int = 0, diag_logit: float | None = None, params: dict | None = None):
        if kind not in ("s_model", "c_model"):
            raise ConfigError(f"unknown transition head {kind!r}")
        if kind == "c_model" and not hidden:
            raise ConfigError("c_model needs the hidden feature width")
        self.kind = kind
        self.num_classes = K = num_classes
        self.hidden = hidden
        self.width = width
        if params is not None:
            self.params = params
            return
        d = default_diagonal_logit(K) if diag_logit is None else diag_logit
        if kind == "s_model":
            self.params = {"raw": d * np.eye(K)}
        else:
            rng = np.random.default_rng([seed, 23])
            b1 = math.sqrt(6.0 / hidden)
            b2 = 0.1 * math.sqrt(6.0 / width)
            self.params = {
                "w1": rng.uniform(-b1, b1, (hidden, width)),
                "b1": np.zeros(width),
                "w2": rng.uniform(-b2, b2, (width, K * K)),
                "b2": (d * np.eye(K)).reshape(-1),
            }

    def copy(self) -> "TransitionHead":
        return TransitionHead(self.kind, self.num_classes, self.hidden, self.width,
                              params={k: v.copy() for k, v in self.params.items()})

    def raw_matrices(self, hidden: np.ndarray | None = None):
        """Raw (pre-softmax) matrices plus the cache needed for backward."""
        if self.kind == "s_model":
            return self.params["raw"], None
        if hidden is None:
            raise DimensionError("c_model needs hidden features")
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.shape[-1] != self.hidden:
            raise DimensionError(f"hidden width {hidden.shape[-1]} != branch input {self.hidden}")
        a = hidden @ self.params["w1"] + self.params["b1"]
        r = np.maximum(a, 0.0)
        out = r @ self.params["w2"] + self.params["b2"]
        K = self.num_classes
        if out.shape[-1] != K * K:
            raise DimensionError(f"branch emits {out.shape[-1]} values, expected {K * K}")
        return out.reshape(out.shape[:-1] + (K, K)), (hidden, a, r)

    def transitions(self, hidden: np.ndarray | None = None) -> np.ndarray:
        return column_softmax(self.raw_matrices(hidden)[0])


def s_model_forward(head: TransitionHead, p) -> np.ndarray:
    T = head.transitions()
    return np.einsum("ij,...j->...i", T, np.asarray(p, dtype=np.float64))


def c_model_forward(head: TransitionHead, hidden, p) -> np.ndarray:
    T = head.transitions(hidden)
    return np.einsum("...ij,...j->...i", T, np.asarray(p, dtype=np.float64))


def transition_predict(model: SegModel, head: TransitionHead, features, noisy: bool = False):
    """Inference for either transition model: T is dropped, labels come from p.

    With ``noisy=True`` the training-time output p_bar is returned as well.
    """
    out = forward(model, features, "eval")
    p = plain_probabilities(out.logits)
    labels = p.argmax(axis=-1).astype(np.uint8)
    if not noisy:
        return labels, p
    pbar = s_model_forward(head, p) if head.kind == "s_model" else c_model_forward(head, out.hidden, p)
    return labels, p, pbar


def transition_loss_and_grads(head: TransitionHead, logits: np.ndarray, hidden: np.ndarray | None,
                              labels: np.ndarray):
    """Cross-entropy on the noisy probabilities ``T p``.

    Returns ``(LossBreakdown, dlogits, dhidden, head_grads)``; ``dhidden`` is
    None for the s-model.
    """
    labels = np.asarray(labels).astype(np.int64)
    K = head.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"label values must lie in [0, {K})")
    npix = labels.size
    p = plain_probabilities(logits)
    raw, cache = head.raw_matrices(hidden)
    T = column_softmax(raw)
    if head.kind == "s_model":
        pbar = p @ T.T
    else:
        pbar = np.einsum("...ij,...j->...i", T, p)
    onehot = np.eye(K)[labels]
    picked = np.sum(pbar * onehot, axis=-1)
    ce = -np.sum(np.log(picked)) / npix

    dpbar = -onehot / picked[..., None] / npix
    if head.kind == "s_model":
        dp = dpbar @ T
        dT = dpbar.reshape(-1, K).T @ p.reshape(-1, K)
    else:
        dp = np.einsum("...ij,...i->...j", T, dpbar)
        dT = dpbar[..., :, None] * p[..., None, :]
    dlogits = p * (dp - np.sum(p * dp, axis=-1, keepdims=True))
    draw = _column_softmax_backward(T, dT)

    dhidden = None
    if head.kind == "s_model":
        grads = {"raw": draw}
    else:
        h, a, r = cache
        dout = draw.reshape(draw.shape[:-2] + (K * K,))
        lead = tuple(range(dout.ndim - 1))
        grads = {"w2": np.tensordot(r, dout, axes=(lead, lead)), "b2": dout.sum(axis=lead)}
        da = (dout @ head.params["w2"].T) * (a > 0)
        grads["w1"] = np.tensordot(h, da, axes=(lead, lead))
        grads["b1"] = da.sum(axis=lead)
        dhidden = da @ head.params["w1"].T
        grads = {k: grads[k] for k in ("w1", "b1", "w2", "b2")}
    return LossBreakdown(ce, ce, 0.0, 0.0), dlogits, dhidden, grads


@dataclass(frozen=True)
class DropoutEnsemble:
    rate: float = 0.25
    num_samples: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")


def mc_dropout_predict(model: SegModel, features: np.ndarray, ens: DropoutEnsemble):
    """Mean class probabilities over stochastic passes and a scalar variance map.

    Dropout stays active at ``ens.rate``; batchnorm uses running statistics.
    The per-pixel uncertainty is the class-mean of the per-class sample
    variance.
    """
    if ens.num_samples < 1:
        raise ConfigError("num_samples must be >= 1")
    first = None
    shift_sum = shift_sq = None
    for s in range(ens.num_samples):
        rng = np.random.default_rng([ens.seed, 31, s])
        out = forward(model, features, "eval", rng=rng, dropout=ens.rate)
        prob = plain_probabilities(out.logits)
        if first is None:
            first = prob
            shift_sum = np.zeros_like(prob)
            shift_sq = np.zeros_like(prob)
            continue
        d = prob - first
        shift_sum += d
        shift_sq += d * d
    n = ens.num_samples
    mean_shift = shift_sum / n
    mean = first + mean_shift
    var = np.maximum(shift_sq / n - mean_shift ** 2, 0.0)
    return mean, var.mean(axis=-1)
