"""SGD training of the network, compensation matrix and transition heads."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import netcore
from .baselines import TransitionHead, transition_loss_and_grads
from .compensation import CompensationMatrix, LossBreakdown, loss_and_grads
from .errors import ConfigError, DataError, NumericError
from .netcore import SegModel

log = logging.getLogger(__name__)

METHODS = ("baseline", "ours", "ours_sym", "logcomp", "s_model", "c_model", "bnn")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    poly_decay_power: float = 0.9
    alpha: float = 0.01
    symmetric: bool = False
    compensation_enabled: bool = True
    seed: int = 0
    beta_source: str = "branch"
    zero_diagonal: bool = True
    transition: str | None = None
    eval_every: int = 0
    debug: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.beta_source not in ("branch", "one"):
            raise ConfigError("beta_source must be 'branch' or 'one'")
        if self.transition not in (None, "s_model", "c_model"):
            raise ConfigError(f"unknown transition head {self.transition!r}")
        if self.transition and self.compensation_enabled:
            raise ConfigError("transition heads and compensation are mutually exclusive")

    def lr_at(self, step: int) -> float:
        if self.poly_decay_power == 0:
            return self.lr
        return self.lr * (1.0 - step / self.steps) ** self.poly_decay_power


def method_config(method: str, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Training preset per method name.

    ``logcomp`` is plain compensation learning: no lasso, beta fixed at 1 and
    no diagonal or symmetry constraint. ``bnn`` trains like the baseline; its
    dropout lives in the model config.
    """
    base = base or TrainConfig()
    presets = {
        "baseline": dict(compensation_enabled=False, transition=None),
        "bnn": dict(compensation_enabled=False, transition=None),
        "ours": dict(compensation_enabled=True, symmetric=False, transition=None),
        "ours_sym": dict(compensation_enabled=True, symmetric=True, transition=None),
        "logcomp": dict(compensation_enabled=True, symmetric=False, alpha=0.0, beta_source="one",
                        zero_diagonal=False, transition=None),
        "s_model": dict(compensation_enabled=False, transition="s_model"),
        "c_model": dict(compensation_enabled=False, transition="c_model"),
    }
    if method not in presets:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    return replace(base, **{**presets[method], **overrides})


def make_compensation(cfg: TrainConfig, num_classes: int) -> CompensationMatrix | None:
    if not cfg.compensation_enabled:
        return None
    return CompensationMatrix(num_classes, "symmetric" if cfg.symmetric else "free", cfg.zero_diagonal)


def make_head(cfg: TrainConfig, model: SegModel) -> TransitionHead | None:
    if cfg.transition is None:
        return None
    return TransitionHead(cfg.transition, model.num_classes, hidden=model.cfg.hidden, seed=cfg.seed)


def objective(model: SegModel, B: CompensationMatrix | None, head: TransitionHead | None,
              features: np.ndarray, labels: np.ndarray, cfg: TrainConfig, rng=None,
              update_stats: bool = False):
    """One batch of the training objective: ``(LossBreakdown, grads)``.

    ``grads`` maps every trainable parameter name to its gradient; the
    compensation parameters appear as ``compensation`` and transition head
    parameters as ``transition.<name>``.
    """
    out = netcore.forward(model, features, "train", rng, update_stats=update_stats)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != out.logits.shape[:-1]:
        raise DataError(f"labels {labels.shape} do not match features {out.logits.shape[:-1]}")
    extra = {}
    if head is not None:
        hidden = out.hidden if head.kind == "c_model" else None
        loss, dlogits, dhidden, hgrads = transition_loss_and_grads(head, out.logits, hidden, labels)
        grads = netcore.backward(model, out.cache, dlogits, None, dhidden)
        extra = {f"transition.{k}": v for k, v in hgrads.items()}
    else:
        use_b = B if cfg.compensation_enabled else None
        loss, dlogits, dbeta, dB = loss_and_grads(out.logits, out.beta, labels, use_b, cfg.alpha,
                                                  cfg.beta_source)
        grads = netcore.backward(model, out.cache, dlogits, dbeta if use_b is not None else None)
        if use_b is not None:
            extra = {"compensation": B.grad_to_params(dB)}
    if not np.isfinite(loss.total):
        raise NumericError(f"non-finite loss {loss.total}")
    grads.update(extra)
    return loss, grads


def parameters(model: SegModel, B: CompensationMatrix | None, head: TransitionHead | None) -> dict:
    """Name -> array views of everything the optimizer updates."""
    params = dict(model.params)
    if B is not None:
        params["compensation"] = B.params
    if head is not None:
        params.update({f"transition.{k}": v for k, v in head.params.items()})
    return params


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "total", "ce", "lasso", "lr"])
            for step, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                w.writerow([step, repr(loss.total), repr(loss.cross_entropy_term), repr(loss.lasso_term), repr(lr)])

    def write_snapshots_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "miou", "acc_a", "mean_u"])
            for s in self.snapshots:
                w.writerow([s["step"], repr(s["miou"]), repr(s["acc_a"]), repr(s["mean_u"])])


def _check_constraints(B: CompensationMatrix, step: int):
    Bm = B.materialize()
    if B.zero_diagonal and np.any(np.diag(Bm) != 0.0):
        raise NumericError(f"step {step}: compensation diagonal left zero")
    if B.mode == "symmetric" and not np.array_equal(Bm, Bm.T):
        raise NumericError(f"step {step}: compensation matrix lost symmetry")


def train(model: SegModel, B: CompensationMatrix | None, dataset, cfg: TrainConfig,
          head: TransitionHead | None = None, eval_fn=None):
    """Optimize copies of ``model`` (and ``B``/``head``) on ``dataset``.

    Returns ``(model, B, history)`` or, when a transition head is trained,
    ``(model, B, history, head)``. ``eval_fn(model, B, step)`` may return a
    snapshot dict every ``cfg.eval_every`` steps.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if dataset.features.shape[-1] != model.cfg.input_dim:
        raise DataError("dataset feature dimension does not match the model")
    model = model.copy()
    if cfg.compensation_enabled:
        B = B.copy() if B is not None else make_compensation(cfg, model.num_classes)
    elif B is not None:
        B = B.copy()
        B.params[...] = 0.0
    if cfg.transition is not None:
        head = head.copy() if head is not None else make_head(cfg, model)
    else:
        head = None

    params = parameters(model, B if cfg.compensation_enabled else None, head)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    order_rng = np.random.default_rng([cfg.seed, 41])
    drop_rng = np.random.default_rng([cfg.seed, 43])
    feats = dataset.features
    labels = dataset.labels
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    perm, cursor = order_rng.permutation(n), 0
    history = TrainHistory()

    for step in range(cfg.steps):
        if cursor + bs > n:
            perm, cursor = order_rng.permutation(n), 0
        idx = np.sort(perm[cursor:cursor + bs])
        cursor += bs
        lr = cfg.lr_at(step)
        try:
            loss, grads = objective(model, B, head, feats[idx], labels[idx], cfg, drop_rng, update_stats=True)
        except NumericError as exc:
            diag = ", ".join(f"{k}: max|.|={np.max(np.abs(v)):.3g}" for k, v in params.items())
            raise NumericError(f"training diverged at step {step}: {exc} ({diag})") from exc
        for k, p in params.items():
            v = velocity[k]
            v *= cfg.momentum
            v += grads[k]
            p -= lr * v
        if B is not None and cfg.debug:
            _check_constraints(B, step)
        history.losses.append(loss)
        history.lrs.append(lr)
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            snap = eval_fn(model, B, step + 1)
            if snap:
                history.snapshots.append({"step": step + 1, **snap})
    if cfg.transition is not None:
        return model, B, history, head
    return model, B, history


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    failures: list
    checked: int

    @property
    def passed(self) -> bool:
        return not self.failures


def finite_difference_check(model: SegModel, B: CompensationMatrix | None, batch, tolerance: float = 1e-4,
                            cfg: TrainConfig | None = None, head: TransitionHead | None = None,
                            grad_hook=None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter entry.

    ``batch`` is ``(features, labels)``. Step ``h = 1e-4 * max(1, |theta|)``;
    relative error ``|g - fd| / max(1e-8, |fd|)``. ``grad_hook`` may rewrite
    the analytic gradients before comparison (negative controls).
    """
    feats, labels = batch
    feats = np.asarray(feats, dtype=np.float64)
    if cfg is None:
        cfg = TrainConfig(compensation_enabled=B is not None, symmetric=B is not None and B.mode == "symmetric")
    model = model.copy()
    B = B.copy() if B is not None else None
    head = head.copy() if head is not None else None

    def evaluate(need_grads=False):
        rng = np.random.default_rng([seed, 47])
        return objective(model, B, head, feats, labels, cfg, rng, update_stats=False)

    _, grads = evaluate(True)
    if grad_hook is not None:
        grads = grad_hook(grads)
    params = parameters(model, B if cfg.compensation_enabled else None, head)

    worst = (0.0, "", ())
    failures = []
    checked = 0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-4 * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = evaluate()[0].total
            flat[i] = orig - h
            lm = evaluate()[0].total
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(g[i] - fd) / max(1e-8, abs(fd))
            checked += 1
            index = tuple(int(j) for j in np.unravel_index(i, p.shape))
            if rel > worst[0]:
                worst = (rel, name, index)
            if rel > tolerance:
                failures.append((name, index, float(g[i]), float(fd), float(rel)))
    return GradCheckReport(worst[0], worst[1], worst[2], failures, checked)
