"""Per-pixel error likelihood from the learned compensation.

For a pixel with logits l, the top-k classes C^k under the plain softmax are
treated as candidate annotations. Re-running the compensated softmax with each
candidate as ground truth shows how much the probability of the predicted
class o moves; the spread of that movement (sigma^2) times the plain model
uncertainty u = 1 - max p gives the error likelihood e = (sigma^2 * u)^phi.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from . import netcore
from .compensation import as_matrix, log_softmax, plain_probabilities
from .errors import ConfigError

DEFAULT_K = 5
MAP_KINDS = ("beta", "sigma2", "u", "e")


def top_k_classes(p, k: int) -> np.ndarray:
    """Indices of the k most probable classes, ties to the lower index; [..., 0] is the argmax."""
    p = np.asarray(p, dtype=np.float64)
    K = p.shape[-1]
    if not 1 <= k <= K:
        raise ConfigError(f"k must lie in [1, {K}], got {k}")
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def sigma_sq(l, B, beta, k: int) -> np.ndarray:
    """Variance of P(o) under compensation conditioned on each top-k class."""
    l = np.asarray(l, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    Bm = as_matrix(B)
    p = plain_probabilities(l)
    top = top_k_classes(p, k)
    o = top[..., :1]
    p_o = np.take_along_axis(p, o, axis=-1)                       # (..., 1)
    shifted = l[..., None, :] + beta[..., None, None] * Bm.T[top]  # (..., k, K)
    lsm = log_softmax(shifted)
    comp_o = np.exp(np.take_along_axis(lsm, np.broadcast_to(o[..., None], lsm.shape[:-1] + (1,)), axis=-1))[..., 0]
    return np.mean((comp_o - p_o) ** 2, axis=-1)


def model_uncertainty(l) -> np.ndarray:
    return 1.0 - plain_probabilities(l).max(axis=-1)


def error_likelihood(l, B, beta, k: int, phi: float = 1.0) -> np.ndarray:
    if not phi > 0:
        raise ConfigError(f"phi must be > 0, got {phi}")
    return (sigma_sq(l, B, beta, k) * model_uncertainty(l)) ** phi


def uncertainty_maps(model, B, features, k: int = DEFAULT_K, phi: float = 1.0) -> dict:
    """beta, sigma2, u and e maps for every pixel, network in eval mode.

    ``k`` is capped at the number of classes, so the default of 5 works for
    small label sets.
    """
    if not phi > 0:
        raise ConfigError(f"phi must be > 0, got {phi}")
    out = netcore.forward(model, features, "eval")
    k = min(k, model.num_classes)
    Bm = np.zeros((model.num_classes,) * 2) if B is None else as_matrix(B)
    s2 = sigma_sq(out.logits, Bm, out.beta, k)
    u = model_uncertainty(out.logits)
    return {"beta": out.beta, "sigma2": s2, "u": u, "e": (s2 * u) ** phi}


def k_sensitivity(model, B, dataset, ks) -> dict:
    """Mean |e(k) - e(K)| over all pixels for each k, with phi = 1."""
    K = model.num_classes
    for k in ks:
        if not 1 <= k <= K:
            raise ConfigError(f"k must lie in [1, {K}], got {k}")
    out = netcore.forward(model, dataset.features, "eval")
    Bm = np.zeros((K, K)) if B is None else as_matrix(B)
    ref = error_likelihood(out.logits, Bm, out.beta, K)
    return {int(k): float(np.mean(np.abs(error_likelihood(out.logits, Bm, out.beta, k) - ref))) for k in ks}


def write_pgm(path, values: np.ndarray):
    """8-bit binary PGM with value round(255 * clamp(v, 0, 1))."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError("PGM export takes a single (H, W) map")
    H, W = values.shape
    pix = np.round(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    W, H = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end():m.end() + W * H], dtype=np.uint8).reshape(H, W)


def map_filename(kind: str, phi: float, image_index: int) -> str:
    return f"{kind}_phi{phi:g}_img{image_index:04d}.pgm"
