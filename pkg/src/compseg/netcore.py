"""Toy per-pixel segmentation network with an uncertainty branch.

Layout, all convolutions channels-last on (N, H, W, C) arrays:

    trunk   pointwise D->hidden, ReLU, dropout
            3x3 (zero padded) hidden->hidden, ReLU, dropout    -> hidden features
    head    pointwise hidden->K                                -> logits
    branch  pointwise hidden->64 (no bias), batchnorm,
            pointwise 64->1, sigmoid                           -> beta in (0, 1)

Backward passes are derived by hand; ``tests/test_netcore.py`` audits them
against central differences.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, DimensionError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1

PARAM_ORDER = (
    "trunk.w1", "trunk.b1", "trunk.w2", "trunk.b2",
    "head.w", "head.b",
    "branch.w1", "branch.gamma", "branch.beta", "branch.w2", "branch.b2",
)
BUFFER_ORDER = ("branch.running_mean", "branch.running_var")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden: int = 16
    branch_width: int = 64
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.hidden, self.branch_width) < 1 or self.num_classes < 2:
            raise ConfigError(f"invalid model dimensions: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


class SegModel:
    def __init__(self, cfg: ModelConfig, params: dict | None = None, buffers: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else _init_params(cfg)
        self.buffers = buffers if buffers is not None else {
            "branch.running_mean": np.zeros(cfg.branch_width),
            "branch.running_var": np.ones(cfg.branch_width),
        }

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def copy(self) -> "SegModel":
        return SegModel(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def zero_(self) -> "SegModel":
        for v in self.params.values():
            v[...] = 0.0
        return self

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def _init_params(cfg: ModelConfig) -> dict:
    rng = np.random.default_rng([cfg.seed, 11])
    D, Hd, K, Bw = cfg.input_dim, cfg.hidden, cfg.num_classes, cfg.branch_width

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return {
        "trunk.w1": he((D, Hd), D),
        "trunk.b1": np.zeros(Hd),
        "trunk.w2": he((3, 3, Hd, Hd), 9 * Hd),
        "trunk.b2": np.zeros(Hd),
        "head.w": he((Hd, K), Hd),
        "head.b": np.zeros(K),
        "branch.w1": he((Hd, Bw), Hd),
        "branch.gamma": np.ones(Bw),
        "branch.beta": np.zeros(Bw),
        "branch.w2": he((Bw, 1), Bw),
        "branch.b2": np.zeros(1),
    }


class Forward(NamedTuple):
    logits: np.ndarray   # (N, H, W, K)
    beta: np.ndarray     # (N, H, W)
    hidden: np.ndarray   # (N, H, W, hidden), what the head sees
    cache: dict


def _im2col3(x: np.ndarray) -> np.ndarray:
    H, W = x.shape[1:3]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([pad[:, dy:dy + H, dx:dx + W, :] for dy in range(3) for dx in range(3)], axis=-1)


def _col2im3(cols: np.ndarray, C: int) -> np.ndarray:
    N, H, W, _ = cols.shape
    pad = np.zeros((N, H + 2, W + 2, C), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            pad[:, dy:dy + H, dx:dx + W, :] += cols[..., k * C:(k + 1) * C]
            k += 1
    return pad[:, 1:-1, 1:-1, :]


def _dropout_mask(rng, shape, rate):
    if rate <= 0.0:
        return None
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _require_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(f"non-finite value in {name} at index {tuple(int(i) for i in bad)}")


def forward(model: SegModel, features: np.ndarray, mode: str = "eval", rng=None,
            update_stats: bool = True, dropout: float | None = None) -> Forward:
    """Run the network on a (N, H, W, D) or (H, W, D) feature grid.

    In ``train`` mode dropout masks come from ``rng`` and batchnorm uses batch
    statistics (updating running stats unless ``update_stats`` is False).
    ``dropout`` overrides the model's rate, e.g. for MC sampling.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    p = model.params
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != model.cfg.input_dim:
        raise DimensionError(f"expected features (N, H, W, {model.cfg.input_dim}), got {np.shape(features)}")
    rate = model.cfg.dropout if dropout is None else dropout
    train = mode == "train"
    grid = x.shape[:3]
    M = grid[0] * grid[1] * grid[2]
    Hd = model.cfg.hidden

    # 2-D (pixels, channels) views keep every matmul on BLAS
    xf = x.reshape(M, -1)
    a1 = xf @ p["trunk.w1"] + p["trunk.b1"]
    h1 = np.maximum(a1, 0.0)
    m1 = _dropout_mask(rng, h1.shape, rate) if train or dropout else None
    h1d = h1 * m1 if m1 is not None else h1
    cols = _im2col3(h1d.reshape(grid + (Hd,))).reshape(M, 9 * Hd)
    a2 = cols @ p["trunk.w2"].reshape(9 * Hd, Hd) + p["trunk.b2"]
    h2 = np.maximum(a2, 0.0)
    m2 = _dropout_mask(rng, h2.shape, rate) if train or dropout else None
    h2d = h2 * m2 if m2 is not None else h2

    logits = h2d @ p["head.w"] + p["head.b"]

    z = h2d @ p["branch.w1"]
    if train:
        mu = z.mean(axis=0)
        zc = z - mu
        var = np.mean(zc * zc, axis=0)
        if update_stats:
            unbiased = var * M / max(M - 1, 1)
            rm, rv = model.buffers["branch.running_mean"], model.buffers["branch.running_var"]
            rm *= 1.0 - BN_MOMENTUM
            rm += BN_MOMENTUM * mu
            rv *= 1.0 - BN_MOMENTUM
            rv += BN_MOMENTUM * unbiased
    else:
        mu = model.buffers["branch.running_mean"]
        var = model.buffers["branch.running_var"]
        zc = z - mu
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = zc * inv_std
    # the 1-channel conv after batchnorm folds gamma/beta into its weights
    w2 = p["branch.w2"][:, 0]
    s = xhat @ (p["branch.gamma"] * w2) + (p["branch.beta"] @ w2 + p["branch.b2"][0])
    beta = expit(s)

    _require_finite("logits", logits)
    _require_finite("beta", beta)
    cache = dict(x=xf, a1=a1, m1=m1, cols=cols, a2=a2, m2=m2, h2d=h2d,
                 xhat=xhat, inv_std=inv_std, beta=beta, train=train, grid=grid)
    K = model.num_classes
    return Forward(logits.reshape(grid + (K,)), beta.reshape(grid), h2d.reshape(grid + (Hd,)), cache)


def backward(model: SegModel, cache: dict, dlogits: np.ndarray | None = None,
             dbeta: np.ndarray | None = None, dhidden: np.ndarray | None = None) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``dlogits``, ``dbeta`` and ``dhidden`` are the upstream gradients of the
    loss w.r.t. the three forward outputs; missing ones count as zero.
    """
    p = model.params
    Hd = model.cfg.hidden
    h2d = cache["h2d"]
    M = h2d.shape[0]
    grads = {}

    if dlogits is not None:
        dl = dlogits.reshape(M, -1)
        dh2d = dl @ p["head.w"].T
        grads["head.w"] = h2d.T @ dl
        grads["head.b"] = dl.sum(axis=0)
    else:
        dh2d = np.zeros_like(h2d)
        grads["head.w"] = np.zeros_like(p["head.w"])
        grads["head.b"] = np.zeros_like(p["head.b"])

    if dbeta is not None:
        beta = cache["beta"]
        ds = dbeta.reshape(M) * beta * (1.0 - beta)
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        w2 = p["branch.w2"][:, 0]
        gamma = p["branch.gamma"]
        xs = xhat.T @ ds
        sds = ds.sum()
        grads["branch.w2"] = (gamma * xs + p["branch.beta"] * sds)[:, None]
        grads["branch.b2"] = np.array([sds])
        grads["branch.gamma"] = w2 * xs
        grads["branch.beta"] = w2 * sds
        c = w2 * gamma * inv_std
        if cache["train"]:
            dz = (ds[:, None] - sds / M - xhat * (xs / M)) * c
        else:
            dz = ds[:, None] * c
        grads["branch.w1"] = h2d.T @ dz
        dh2d += dz @ p["branch.w1"].T
    else:
        for k in ("branch.w1", "branch.gamma", "branch.beta", "branch.w2", "branch.b2"):
            grads[k] = np.zeros_like(p[k])

    if dhidden is not None:
        dh2d += dhidden.reshape(M, Hd)

    dh2 = dh2d * cache["m2"] if cache["m2"] is not None else dh2d
    da2 = dh2 * (cache["a2"] > 0)
    grads["trunk.w2"] = (cache["cols"].T @ da2).reshape(3, 3, Hd, Hd)
    grads["trunk.b2"] = da2.sum(axis=0)
    dcols = (da2 @ p["trunk.w2"].reshape(9 * Hd, Hd).T).reshape(cache["grid"] + (9 * Hd,))
    dh1d = _col2im3(dcols, Hd).reshape(M, Hd)
    dh1 = dh1d * cache["m1"] if cache["m1"] is not None else dh1d
    da1 = dh1 * (cache["a1"] > 0)
    grads["trunk.w1"] = cache["x"].T @ da1
    grads["trunk.b1"] = da1.sum(axis=0)
    return {k: grads[k] for k in PARAM_ORDER}


def differentiate(model: SegModel, features: np.ndarray, loss_fn: Callable, mode: str = "train",
                  rng=None, update_stats: bool = False):
    """Evaluate ``loss_fn`` on the network outputs and back-propagate.

    ``loss_fn(logits, beta, hidden)`` returns ``(loss, dlogits, dbeta, dhidden)``.
    Returns ``(loss, grads)`` with one gradient array per parameter.
    """
    out = forward(model, features, mode, rng, update_stats=update_stats)
    loss, dlogits, dbeta, dhidden = loss_fn(out.logits, out.beta, out.hidden)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss, backward(model, out.cache, dlogits, dbeta, dhidden)


def save_checkpoint(path, model: SegModel, extra: dict | None = None):
    """Binary checkpoint: magic, version, JSON header, float64 LE payload.

    ``extra`` maps names to arrays stored after the model (e.g. the
    compensation parameters); their shapes go into the header too.
    """
    extra = extra or {}
    arrays = [(k, model.params[k]) for k in PARAM_ORDER] + [(k, model.buffers[k]) for k in BUFFER_ORDER]
    arrays += [(k, np.asarray(v, dtype=np.float64)) for k, v in extra.items()]
    header = json.dumps({
        "config": asdict(model.cfg),
        "arrays": [[k, list(v.shape)] for k, v in arrays],
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for _, v in arrays:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SegModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a compseg checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise DataError(f"checkpoint truncated while reading {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    if offset != len(raw):
        raise DataError("trailing bytes after checkpoint payload")
    cfg = ModelConfig(**header["config"])
    model = SegModel(cfg, {k: arrays.pop(k) for k in PARAM_ORDER}, {k: arrays.pop(k) for k in BUFFER_ORDER})
    return model, arrays
