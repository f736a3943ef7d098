"""Experiment drivers: ambiguity recovery, error detection, noise robustness,
memorization, bias induction and k-sensitivity.

Every driver works per seed: the scene, the model init and the training
order all derive from that seed, so cells are independent and reproducible.
Results come back as lists of flat dict rows that ``write_rows_csv`` dumps.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import DropoutEnsemble, mc_dropout_predict
from .errors import ConfigError
from .inference import InductionSpec, induced_logits, predict
from .metrics import auc, correction_curve, oracle_curve, summarize
from .netcore import ModelConfig, SegModel, forward
from .synthgrid import SceneConfig, corrupt_dataset, generate_dataset, sample_pair_assignments
from .trainer import METHODS, TrainConfig, method_config, train
from .uncertainty import k_sensitivity, uncertainty_maps

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Splits:
    train: int = 32
    val: int = 16
    test: int = 16
    val_start: int = 500
    test_start: int = 1000

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 1:
            raise ConfigError("every split needs at least one image")
        if self.val_start < self.train or self.test_start < self.val_start + self.val:
            raise ConfigError("splits overlap: need train < val_start and val_start + val <= test_start")


@dataclass
class Trained:
    model: SegModel
    B: object
    history: object
    head: object = None


def make_splits(scene: SceneConfig, seed: int, splits: Splits):
    scene = replace(scene, seed=seed)
    return (generate_dataset(scene, splits.train),
            generate_dataset(scene, splits.val, start=splits.val_start),
            generate_dataset(scene, splits.test, start=splits.test_start))


def train_method(method: str, dataset, base: TrainConfig, seed: int, hidden: int = 16,
                 bnn_dropout: float = 0.25) -> Trained:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    dropout = bnn_dropout if method == "bnn" else 0.0
    model = SegModel(ModelConfig(dataset.features.shape[-1], dataset.num_classes, hidden=hidden,
                                 dropout=dropout, seed=seed))
    out = train(model, None, dataset, method_config(method, replace(base, seed=seed)))
    return Trained(*out)


def largest_offdiagonal(B: np.ndarray) -> tuple[int, int, float]:
    A = np.abs(np.asarray(B, dtype=np.float64)).copy()
    np.fill_diagonal(A, -1.0)
    i, j = np.unravel_index(int(np.argmax(A)), A.shape)
    return int(i), int(j), float(A[i, j])


def run_ambiguity_recovery(scene: SceneConfig, seeds, base: TrainConfig, pair=(0, 1),
                           splits: Splits = Splits(), hidden: int = 16) -> list[dict]:
    rows = []
    for seed in seeds:
        tr, _, _ = make_splits(scene, seed, splits)
        t = train_method("ours", tr, base, seed, hidden)
        i, j, v = largest_offdiagonal(t.B.materialize())
        rows.append({"seed": seed, "row": i, "col": j, "abs_b": v,
                     "hit": int({i, j} == set(pair))})
    return rows


def detection_aucs(model, B, test, seed: int, r_grid=None) -> dict:
    """AUC of the correction curve for each ranking on a held-out split."""
    pred, _ = predict(model, test.features)
    maps = uncertainty_maps(model, B, test.features)
    rng = np.random.default_rng([seed, 53])
    out = {f"auc_{k}": auc(correction_curve(pred, test.labels, maps[k], r_grid)) for k in ("e", "beta", "u")}
    out["auc_random"] = auc(correction_curve(pred, test.labels, rng.random(pred.shape), r_grid))
    out["auc_oracle"] = auc(oracle_curve(pred, test.labels, r_grid))
    out["acc_a"] = summarize(pred, test.labels, test.num_classes)["acc_a"]
    return out


def run_error_detection(scene: SceneConfig, seeds, base: TrainConfig, splits: Splits = Splits(),
                        hidden: int = 16, r_grid=None) -> list[dict]:
    rows = []
    for seed in seeds:
        tr, _, te = make_splits(scene, seed, splits)
        t = train_method("ours", tr, base, seed, hidden)
        rows.append({"seed": seed, **detection_aucs(t.model, t.B, te, seed, r_grid)})
    return rows


def run_noise_robustness(scene: SceneConfig, noise_levels, methods, seeds, base: TrainConfig,
                         noise_pairs, splits: Splits = Splits(), hidden: int = 16) -> list[dict]:
    """Train every method on dilation-corrupted labels, score mIoU on the clean test split."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
    rows = []
    for seed in seeds:
        tr, _, te = make_splits(scene, seed, splits)
        assignment = sample_pair_assignments(noise_pairs, len(tr), seed)
        for n in noise_levels:
            noisy = corrupt_dataset(tr, assignment, int(n))
            flipped = float(np.mean(noisy.labels != tr.labels))
            for method in methods:
                t = train_method(method, noisy, base, seed, hidden)
                pred, _ = predict(t.model, te.features)
                rows.append({"method": method, "n": int(n), "seed": seed, "flipped": flipped,
                             "miou": summarize(pred, te.labels, te.num_classes)["miou"]})
                log.info("noise n=%d seed=%d %s miou=%.4f", n, seed, method, rows[-1]["miou"])
    return rows


def mean_by(rows, keys, value) -> dict:
    """Seed-mean of ``value`` grouped by the tuple of ``keys``."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def run_memorization(scene: SceneConfig, seeds, base: TrainConfig, splits: Splits = Splits(),
                     hidden: int = 16) -> list[dict]:
    """Mean u_x from plain probabilities, with and without compensation during training."""
    rows = []
    for seed in seeds:
        tr, _, te = make_splits(scene, seed, splits)
        for method, comp in (("baseline", 0), ("ours", 1)):
            t = train_method(method, tr, base, seed, hidden)
            for split, ds in (("train", tr), ("test", te)):
                u = uncertainty_maps(t.model, None, ds.features)["u"]
                rows.append({"split": split, "compensation": comp, "seed": seed, "mean_u": float(u.mean())})
    return rows


def induced_scores(model, dataset, spec: InductionSpec, target: int) -> tuple[float, float]:
    out = forward(model, dataset.features, "eval")
    pred = induced_logits(out.logits, out.beta, spec).argmax(axis=-1)
    s = summarize(pred, dataset.labels, dataset.num_classes)
    return float(s["acc_c"][target]), float(s["acc_a"])


def tune_boost(model, val, target: int, boosts, max_acc_drop: float, relaxation="soft") -> float:
    """Largest gain in Acc_c(target) on ``val`` whose Acc_a drop stays within ``max_acc_drop``."""
    K = val.num_classes
    best_c, base_acc = induced_scores(model, val, InductionSpec(np.zeros((K, K)), relaxation), target)
    best = 0.0
    for v in boosts:
        c, a = induced_scores(model, val, InductionSpec.from_triples(K, [(target, target, v)],
                                                                     relaxation=relaxation), target)
        if base_acc - a <= max_acc_drop and c > best_c:
            best, best_c = float(v), c
    return best


def run_bias_induction(scene: SceneConfig, target: int, seeds, base: TrainConfig, boosts=None,
                       max_acc_drop: float = 0.005, relaxation: str = "soft", splits: Splits = Splits(),
                       hidden: int = 16) -> list[dict]:
    """Tune a diagonal boost for ``target`` on the validation split, report on the test split."""
    if not 0 <= target < scene.num_classes:
        raise ConfigError(f"target class {target} out of range")
    boosts = np.arange(0.25, 6.01, 0.25) if boosts is None else boosts
    K = scene.num_classes
    rows = []
    for seed in seeds:
        tr, va, te = make_splits(scene, seed, splits)
        t = train_method("ours", tr, base, seed, hidden)
        v = tune_boost(t.model, va, target, boosts, max_acc_drop, relaxation)
        c0, a0 = induced_scores(t.model, te, InductionSpec(np.zeros((K, K)), relaxation), target)
        c1, a1 = induced_scores(t.model, te, InductionSpec.from_triples(K, [(target, target, v)],
                                                                        relaxation=relaxation), target)
        rows.append({"seed": seed, "boost": v, "acc_c_before": c0, "acc_c_after": c1,
                     "acc_a_before": a0, "acc_a_after": a1})
    return rows


def run_k_sweep(model, B, dataset, ks) -> list[dict]:
    return [{"k": k, "mean_abs_delta_e": v} for k, v in k_sensitivity(model, B, dataset, ks).items()]


def run_mc_dropout_detection(model, test, ens: DropoutEnsemble, r_grid=None) -> float:
    pred, _ = predict(model, test.features)
    _, var = mc_dropout_predict(model, test.features, ens)
    return auc(correction_curve(pred, test.labels, var, r_grid))


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable config."""
    def default(o):
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, Path):
            return str(o)
        raise TypeError(f"cannot hash {type(o).__name__}")
    blob = json.dumps(obj, sort_keys=True, default=default).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir(root, subcommand: str, config, seed: int) -> Path:
    return Path(root) / subcommand / config_hash(config) / str(seed)


def write_rows_csv(path, rows, columns=None):
    if not rows:
        raise ConfigError("nothing to write")
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
