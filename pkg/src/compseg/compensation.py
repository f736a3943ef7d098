"""Compensation matrix, compensated softmax and the penalized training loss.

The matrix B is indexed ``B[i, gt]``: entry (i, gt) is added (scaled by the
pixel's beta) to the logit of class i at pixels annotated ``gt``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError


class CompensationMatrix:
    """Free parameters behind a constrained K x K matrix.

    ``free`` mode keeps K*K parameters, ``symmetric`` mode one per unordered
    pair so that mirrored entries share storage. With ``zero_diagonal`` (the
    default) the diagonal is masked to exactly zero.
    """

    def __init__(self, num_classes: int, mode: str = "free", zero_diagonal: bool = True, params=None):
        if num_classes < 2:
            raise ConfigError("compensation needs K >= 2")
        if mode not in ("free", "symmetric"):
            raise ConfigError(f"mode must be 'free' or 'symmetric', got {mode!r}")
        self.num_classes = num_classes
        self.mode = mode
        self.zero_diagonal = zero_diagonal
        K = num_classes
        if mode == "symmetric":
            self._rows, self._cols = np.triu_indices(K, k=1 if zero_diagonal else 0)
            shape = (len(self._rows),)
        else:
            shape = (K, K)
        self.params = np.zeros(shape) if params is None else np.array(params, dtype=np.float64).reshape(shape)

    def copy(self) -> "CompensationMatrix":
        return CompensationMatrix(self.num_classes, self.mode, self.zero_diagonal, self.params.copy())

    def materialize(self) -> np.ndarray:
        K = self.num_classes
        if self.mode == "symmetric":
            B = np.zeros((K, K))
            B[self._rows, self._cols] = self.params
            B[self._cols, self._rows] = self.params
            return B
        B = self.params.copy()
        if self.zero_diagonal:
            np.fill_diagonal(B, 0.0)
        return B

    def grad_to_params(self, dB: np.ndarray) -> np.ndarray:
        """Pull a gradient w.r.t. the materialized matrix back to the parameters."""
        if self.mode == "symmetric":
            g = dB[self._rows, self._cols] + dB[self._cols, self._rows]
            diag = self._rows == self._cols
            g[diag] = dB[self._rows[diag], self._cols[diag]]
            return g
        g = dB.copy()
        if self.zero_diagonal:
            np.fill_diagonal(g, 0.0)
        return g

    def set_matrix(self, B: np.ndarray) -> "CompensationMatrix":
        """Load parameters from a full matrix (upper triangle in symmetric mode)."""
        B = np.asarray(B, dtype=np.float64)
        if self.mode == "symmetric":
            self.params = B[self._rows, self._cols].copy()
        else:
            self.params = B.copy()
        return self


def as_matrix(B) -> np.ndarray:
    return B.materialize() if isinstance(B, CompensationMatrix) else np.asarray(B, dtype=np.float64)


def _check_finite(l):
    if not np.all(np.isfinite(l)):
        raise NumericError("non-finite logits")


def log_softmax(l: np.ndarray) -> np.ndarray:
    z = l - l.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def plain_probabilities(l) -> np.ndarray:
    """Softmax over the last axis, max-subtracted."""
    l = np.asarray(l, dtype=np.float64)
    _check_finite(l)
    z = np.exp(l - l.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def compensated_logits(l, B, beta, gt) -> np.ndarray:
    """l + beta * B[:, gt]; broadcasts over leading pixel axes."""
    Bm = as_matrix(B)
    gt = np.asarray(gt)
    K = Bm.shape[0]
    if gt.size and (gt.min() < 0 or gt.max() >= K):
        raise DataError(f"ground-truth class out of range [0, {K})")
    return np.asarray(l, dtype=np.float64) + np.asarray(beta, dtype=np.float64)[..., None] * Bm.T[gt]


def compensated_probabilities(l, B, beta, gt) -> np.ndarray:
    return plain_probabilities(compensated_logits(l, B, beta, gt))


@dataclass
class LossBreakdown:
    total: float
    cross_entropy_term: float
    lasso_term: float
    alpha: float


def loss_and_grads(logits: np.ndarray, betas: np.ndarray, labels: np.ndarray, B, alpha: float,
                   beta_source: str = "branch"):
    """Penalized compensated cross-entropy with its gradients.

    Returns ``(LossBreakdown, dlogits, dbeta, dB)`` where ``dB`` is w.r.t. the
    materialized matrix. ``B=None`` gives the plain cross-entropy. With
    ``beta_source='one'`` the branch is bypassed (beta fixed at 1, no dbeta).
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits)
    labels = np.asarray(labels).astype(np.int64)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"label values must lie in [0, {K})")
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    npix = labels.size
    onehot = np.eye(K)[labels]

    if B is None:
        lsm = log_softmax(logits)
        ce = -np.sum(lsm * onehot) / npix
        dlogits = (np.exp(lsm) - onehot) / npix
        return LossBreakdown(ce, ce, 0.0, alpha), dlogits, np.zeros(labels.shape), None

    Bm = as_matrix(B)
    if beta_source == "one":
        beta = np.ones(labels.shape)
    else:
        beta = np.asarray(betas, dtype=np.float64)
    col = Bm.T[labels]                              # (..., K): B[:, gt] per pixel
    lsm = log_softmax(logits + beta[..., None] * col)
    ce = -np.sum(lsm * onehot) / npix
    absum = np.abs(col).sum(axis=-1)
    lasso = alpha / K * np.sum(beta * absum) / npix
    total = ce + lasso

    dcomp = (np.exp(lsm) - onehot) / npix
    dlogits = dcomp
    dbeta = (dcomp * col).sum(axis=-1) + alpha / K * absum / npix
    dcol = beta[..., None] * dcomp + alpha / K / npix * beta[..., None] * np.sign(col)
    dB = np.zeros((K, K))
    # dB[:, g] accumulates dcol over pixels with label g
    np.add.at(dB.T, labels.reshape(-1), dcol.reshape(-1, K))
    if beta_source == "one":
        dbeta = np.zeros(labels.shape)
    return LossBreakdown(total, ce, lasso, alpha), dlogits, dbeta, dB


def training_loss(logits, betas, labels, B, alpha: float) -> LossBreakdown:
    return loss_and_grads(logits, betas, labels, B, alpha)[0]


def export_csv(path, B, class_names):
    """Class-labelled CSV, cell (i, j) = B[i, j] at 6 significant digits."""
    Bm = as_matrix(B)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(class_names))
        for name, row in zip(class_names, Bm):
            w.writerow([name] + [f"{v:.6g}" for v in row])


def read_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) != len(rows[0]):
        raise DataError(f"{path} is not a square class-labelled matrix")
    names = rows[0][1:]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), names
