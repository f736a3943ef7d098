"""Plain and bias-induced prediction.

Bias induction applies a hand-written matrix against the model's own relaxed
prediction q (soft probabilities or their one-hot argmax) in place of the
unknown ground truth: ``logits + beta * (B @ q)``. The learned compensation is
never used here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import netcore
from .compensation import plain_probabilities
from .errors import ConfigError, DataError


def predict(model, features) -> tuple[np.ndarray, np.ndarray]:
    """Argmax of the plain softmax (lowest index wins ties) and the probabilities."""
    out = netcore.forward(model, features, "eval")
    prob = plain_probabilities(out.logits)
    return prob.argmax(axis=-1).astype(np.uint8), prob


@dataclass
class InductionSpec:
    matrix: np.ndarray
    relaxation: str = "soft"
    beta_source: str = "branch"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ConfigError("induction matrix must be K x K")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("induction matrix has non-finite entries")
        if self.relaxation not in ("soft", "hard"):
            raise ConfigError("relaxation must be 'soft' or 'hard'")
        if self.beta_source not in ("branch", "one"):
            raise ConfigError("beta_source must be 'branch' or 'one'")

    @classmethod
    def from_triples(cls, num_classes: int, triples, **kw) -> "InductionSpec":
        B = np.zeros((num_classes, num_classes))
        for i, j, v in triples:
            if not (0 <= int(i) < num_classes and 0 <= int(j) < num_classes):
                raise ConfigError(f"induction entry ({i}, {j}) out of range")
            B[int(i), int(j)] = float(v)
        return cls(B, **kw)


def induced_logits(logits, beta, spec: InductionSpec) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    K = logits.shape[-1]
    if spec.matrix.shape != (K, K):
        raise DataError(f"induction matrix is {spec.matrix.shape}, model has K={K}")
    q = plain_probabilities(logits)
    if spec.relaxation == "hard":
        q = np.eye(K)[q.argmax(axis=-1)]
    b = np.ones(logits.shape[:-1]) if spec.beta_source == "one" else np.asarray(beta, dtype=np.float64)
    return logits + b[..., None] * (q @ spec.matrix.T)


def bias_induced_predict(model, features, spec: InductionSpec) -> np.ndarray:
    out = netcore.forward(model, features, "eval")
    prob = plain_probabilities(induced_logits(out.logits, out.beta, spec))
    return prob.argmax(axis=-1).astype(np.uint8)
