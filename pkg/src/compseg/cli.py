"""Command-line entry point: ``compseg <subcommand> CONFIG [options]``.

Every subcommand writes into ``<output_dir>/<subcommand>/<config-hash>/<seed>/``.
Files are produced in a scratch directory next to it and renamed into place
only after everything succeeded, so a failed run leaves nothing behind.

Exit codes: 0 success, 1 usage/config error, 2 data or I/O error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import compensation, experiments, metrics, uncertainty
from .baselines import DropoutEnsemble, mc_dropout_predict
from .compensation import CompensationMatrix
from .config import RunConfig, load_config
from .errors import CompsegError, ConfigError, DataError, NumericError
from .inference import InductionSpec, bias_induced_predict, predict
from .netcore import ModelConfig, SegModel, load_checkpoint, save_checkpoint
from .synthgrid import Dataset, generate_dataset, read_dataset, write_dataset, write_labels
from .trainer import GradCheckReport, finite_difference_check, make_head, method_config, train

log = logging.getLogger("compseg")

SUBCOMMANDS = ("generate", "train", "eval", "uncertainty", "correction", "noise-sweep", "bias-infer", "k-sweep")
GRADCHECK_IMAGES = 2
GRADCHECK_CROP = 4


@contextmanager
def staged_output(final: Path):
    """Yield a scratch directory that replaces ``final`` on success."""
    final = Path(final)
    created = []
    p = final.parent
    while not p.exists():
        created.append(p)
        p = p.parent
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}-", dir=final.parent))
    try:
        yield tmp
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        for d in created:
            try:
                d.rmdir()
            except OSError:
                break
        raise


def out_dir(cfg: RunConfig, sub: str, **extra) -> Path:
    return experiments.run_dir(cfg.output_dir, sub, {**cfg.identity(), **extra}, cfg.seed)


def write_config_copy(dest: Path, cfg: RunConfig):
    (dest / "config.toml").write_text(cfg.source)


# ---------------------------------------------------------------- data access

def dataset_split(cfg: RunConfig, split: str) -> Dataset:
    """A split either from ``dataset.path`` or generated from the scene config."""
    if cfg.dataset_path is not None:
        root = cfg.dataset_path
        ds = read_dataset(root / split if (root / split).is_dir() else root)
        if ds.num_classes != cfg.scene.num_classes:
            raise DataError(f"dataset at {root} has K={ds.num_classes}, config says {cfg.scene.num_classes}")
        return ds
    s = cfg.splits
    count, start = {"train": (s.train, 0), "val": (s.val, s.val_start), "test": (s.test, s.test_start)}[split]
    return generate_dataset(cfg.scene, count, start=start)


def load_trained(cfg: RunConfig):
    path = cfg.checkpoint
    if path is None:
        raise ConfigError("no checkpoint given: pass --checkpoint or set checkpoint in the config")
    path = Path(path)
    if path.is_dir():
        path = path / "model.ckpt"
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    model, extra = load_checkpoint(path)
    B = extra.get("compensation.matrix")
    return model, B


# ---------------------------------------------------------------- subcommands

def cmd_generate(cfg: RunConfig, args) -> Path:
    final = out_dir(cfg, "generate")
    with staged_output(final) as tmp:
        s = cfg.splits
        for name, count, start in (("train", s.train, 0), ("val", s.val, s.val_start), ("test", s.test, s.test_start)):
            write_dataset(tmp / name, generate_dataset(cfg.scene, count, start=start))
        write_config_copy(tmp, cfg)
    return final


def run_gradcheck(cfg: RunConfig, tc, model: SegModel, ds: Dataset) -> GradCheckReport:
    """Finite differences on a small crop of the first images."""
    c = GRADCHECK_CROP
    feats = ds.features[:GRADCHECK_IMAGES, :c, :c].astype(np.float64)
    labels = ds.labels[:GRADCHECK_IMAGES, :c, :c]
    B = CompensationMatrix(model.num_classes, "symmetric" if tc.symmetric else "free", tc.zero_diagonal) \
        if tc.compensation_enabled else None
    if B is not None:
        B.params[...] = np.random.default_rng([cfg.seed, 61]).normal(0, 0.5, B.params.shape)
    head = make_head(tc, model) if tc.transition else None
    return finite_difference_check(model, B, (feats, labels), cfg=tc, head=head, seed=cfg.seed)


def cmd_train(cfg: RunConfig, args) -> Path:
    tr = dataset_split(cfg, "train")
    tc = method_config(cfg.method, cfg.train)
    dropout = cfg.dropout if cfg.method != "bnn" or cfg.dropout > 0 else 0.25
    model = SegModel(ModelConfig(tr.features.shape[-1], tr.num_classes, hidden=cfg.hidden,
                                 dropout=dropout, seed=cfg.seed))
    if args.gradcheck:
        rep = run_gradcheck(cfg, tc, model, tr)
        log.info("gradcheck: %d entries, max rel error %.3g at %s%s",
                 rep.checked, rep.max_rel_error, rep.worst_param, rep.worst_index)
        if not rep.passed:
            raise NumericError(f"gradient check failed: {len(rep.failures)} entries above 1e-4, "
                               f"worst {rep.max_rel_error:.3g} at {rep.worst_param}{rep.worst_index}")
    out = train(model, None, tr, tc)
    model, B, history = out[:3]
    head = out[3] if len(out) > 3 else None

    final = out_dir(cfg, "train")
    with staged_output(final) as tmp:
        K = model.num_classes
        Bm = B.materialize() if B is not None else np.zeros((K, K))
        extra = {"compensation.matrix": Bm}
        if head is not None:
            extra.update({f"transition.{k}": v for k, v in head.params.items()})
        save_checkpoint(tmp / "model.ckpt", model, extra)
        history.write_csv(tmp / "history.csv")
        compensation.export_csv(tmp / "compensation.csv", Bm, tr.class_names)
        if head is not None and head.kind == "s_model":
            compensation.export_csv(tmp / "transition.csv", head.transitions(), tr.class_names)
        write_config_copy(tmp, cfg)
    return final


def _metric_rows(s, names):
    iou = metrics.class_iou(s["confusion"])
    return [{"class": n, "iou": float(iou[i]), "acc_c": float(s["acc_c"][i])} for i, n in enumerate(names)]


def cmd_eval(cfg: RunConfig, args) -> Path:
    model, _ = load_trained(cfg)
    te = dataset_split(cfg, args.split)
    pred, _ = predict(model, te.features)
    s = metrics.summarize(pred, te.labels, te.num_classes)
    u = uncertainty.uncertainty_maps(model, None, te.features)["u"]
    final = out_dir(cfg, "eval", split=args.split)
    with staged_output(final) as tmp:
        experiments.write_rows_csv(tmp / "metrics.csv", [{"split": args.split, "miou": s["miou"],
                                                          "acc_a": s["acc_a"], "mean_u": float(u.mean())}])
        experiments.write_rows_csv(tmp / "classes.csv", _metric_rows(s, te.class_names))
        metrics.write_matrix_csv(tmp / "confusion.csv", s["confusion"], te.class_names)
        write_labels(tmp / "predictions", pred, te.num_classes)
        write_config_copy(tmp, cfg)
    return final


def cmd_uncertainty(cfg: RunConfig, args) -> Path:
    model, B = load_trained(cfg)
    te = dataset_split(cfg, args.split)
    e = cfg.experiment
    maps = uncertainty.uncertainty_maps(model, B, te.features, k=e.k, phi=e.phi)
    final = out_dir(cfg, "uncertainty", split=args.split)
    with staged_output(final) as tmp:
        for kind in uncertainty.MAP_KINDS:
            for i in range(len(te)):
                uncertainty.write_pgm(tmp / uncertainty.map_filename(kind, e.phi, i), maps[kind][i])
        experiments.write_rows_csv(tmp / "summary.csv", [{"map": k, "mean": float(maps[k].mean()),
                                                          "max": float(maps[k].max())} for k in uncertainty.MAP_KINDS])
        write_config_copy(tmp, cfg)
    return final


def cmd_correction(cfg: RunConfig, args) -> Path:
    model, B = load_trained(cfg)
    te = dataset_split(cfg, args.split)
    e = cfg.experiment
    r = metrics.default_r_grid(e.r_stop, e.r_step)
    pred, _ = predict(model, te.features)
    maps = uncertainty.uncertainty_maps(model, B, te.features, k=e.k, phi=e.phi)
    rankings = {k: maps[k] for k in ("e", "beta", "u")}
    rankings["random"] = np.random.default_rng([cfg.seed, 53]).random(pred.shape)
    if args.mc_dropout:
        _, rankings["mc_dropout"] = mc_dropout_predict(model, te.features,
                                                       DropoutEnsemble(e.mc_rate, e.mc_samples, cfg.seed))
    curves = {k: metrics.correction_curve(pred, te.labels, v, r) for k, v in rankings.items()}
    curves["oracle"] = metrics.oracle_curve(pred, te.labels, r)
    final = out_dir(cfg, "correction", split=args.split, mc_dropout=args.mc_dropout)
    with staged_output(final) as tmp:
        rows = [{"r_area": float(x), **{k: float(c.acc[i]) for k, c in curves.items()}} for i, x in enumerate(r)]
        experiments.write_rows_csv(tmp / "curves.csv", rows)
        if abs(e.r_stop - 0.5) < 1e-12:
            experiments.write_rows_csv(tmp / "auc.csv", [{"ranking": k, "auc": metrics.auc(c)} for k, c in curves.items()])
        write_config_copy(tmp, cfg)
    return final


def cmd_noise_sweep(cfg: RunConfig, args) -> Path:
    e = cfg.experiment
    rows = experiments.run_noise_robustness(cfg.scene, e.noise_levels, e.methods, e.seeds, cfg.train,
                                            [tuple(p) for p in e.noise_pairs], cfg.splits, cfg.hidden)
    means = experiments.mean_by(rows, ("method", "n"), "miou")
    final = out_dir(cfg, "noise-sweep")
    with staged_output(final) as tmp:
        experiments.write_rows_csv(tmp / "runs.csv", rows)
        experiments.write_rows_csv(tmp / "noise.csv", [{"method": m, "n": n, "miou": v} for (m, n), v in means.items()])
        write_config_copy(tmp, cfg)
    return final


def cmd_bias_infer(cfg: RunConfig, args) -> Path:
    model, _ = load_trained(cfg)
    te = dataset_split(cfg, args.split)
    e = cfg.experiment
    spec = InductionSpec.from_triples(te.num_classes, e.induction, relaxation=e.relaxation,
                                      beta_source=e.induction_beta)
    base, _ = predict(model, te.features)
    pred = bias_induced_predict(model, te.features, spec)
    s0 = metrics.summarize(base, te.labels, te.num_classes)
    s1 = metrics.summarize(pred, te.labels, te.num_classes)
    rows = [{"class": n, "acc_c_before": float(s0["acc_c"][i]), "acc_c_after": float(s1["acc_c"][i])}
            for i, n in enumerate(te.class_names)]
    rows.append({"class": "all", "acc_c_before": s0["acc_a"], "acc_c_after": s1["acc_a"]})
    final = out_dir(cfg, "bias-infer", split=args.split)
    with staged_output(final) as tmp:
        experiments.write_rows_csv(tmp / "accuracy.csv", rows)
        compensation.export_csv(tmp / "induction.csv", spec.matrix, te.class_names)
        write_labels(tmp / "predictions", pred, te.num_classes)
        write_config_copy(tmp, cfg)
    return final


def cmd_k_sweep(cfg: RunConfig, args) -> Path:
    model, B = load_trained(cfg)
    te = dataset_split(cfg, args.split)
    K = model.num_classes
    ks = cfg.experiment.ks or tuple(range(1, K + 1))
    rows = experiments.run_k_sweep(model, B, te, ks)
    final = out_dir(cfg, "k-sweep", split=args.split)
    with staged_output(final) as tmp:
        experiments.write_rows_csv(tmp / "ksweep.csv", rows)
        write_config_copy(tmp, cfg)
    return final


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "uncertainty": cmd_uncertainty,
    "correction": cmd_correction, "noise-sweep": cmd_noise_sweep, "bias-infer": cmd_bias_infer,
    "k-sweep": cmd_k_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="compseg", description="Compensated segmentation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="run configuration (TOML)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output-dir", help="override the config output_dir")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "train":
            p.add_argument("--gradcheck", action="store_true",
                           help="check gradients by finite differences before training")
        if name in ("eval", "uncertainty", "correction", "bias-infer", "k-sweep"):
            p.add_argument("--checkpoint", help="model.ckpt or a train run directory")
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "correction":
            p.add_argument("--mc-dropout", action="store_true", help="also rank by MC-dropout variance")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be >= 0")
            cfg = cfg.with_seed(args.seed)
        if args.output_dir:
            cfg = replace(cfg, output_dir=Path(args.output_dir))
        if getattr(args, "checkpoint", None):
            cfg = replace(cfg, checkpoint=Path(args.checkpoint).resolve())
        final = COMMANDS[args.command](cfg, args)
    except CompsegError as exc:
        print(f"compseg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"compseg {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"compseg {args.command}: {exc}", file=sys.stderr)
        return NumericError.exit_code
    print(final)
    return 0


if __name__ == "__main__":
    sys.exit(main())
