"""Run configuration: a sectioned TOML file mapped onto the dataclass configs.

    seed = 0
    output_dir = "runs"
    method = "ours"

    [dataset]          # SceneConfig fields plus split sizes and an optional path
    num_classes = 4
    train_images = 32

    [train]            # TrainConfig fields plus hidden / dropout of the network
    steps = 1000

    [experiment]       # noise sweep, correction, induction and k-sweep settings
    noise_levels = [0, 2, 4]
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .experiments import Splits
from .synthgrid import SceneConfig
from .trainer import METHODS, TrainConfig

TOP_KEYS = {"seed", "output_dir", "method", "checkpoint"}
SECTIONS = {"dataset", "train", "experiment"}
SPLIT_KEYS = {"train_images": "train", "val_images": "val", "test_images": "test",
              "val_start": "val_start", "test_start": "test_start"}
MODEL_KEYS = {"hidden", "dropout"}


@dataclass(frozen=True)
class ExperimentConfig:
    noise_levels: tuple = (0, 2, 4)
    noise_pairs: tuple = ((0, 1),)
    methods: tuple = ("baseline", "ours", "ours_sym")
    seeds: tuple = (0, 1, 2)
    r_stop: float = 0.5
    r_step: float = 0.01
    induction: tuple = ()
    relaxation: str = "soft"
    induction_beta: str = "branch"
    ks: tuple = ()
    k: int = 5
    phi: float = 1.0
    mc_samples: int = 20
    mc_rate: float = 0.25

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} in experiment.methods; choose from {METHODS}")
        if any(int(n) < 0 for n in self.noise_levels):
            raise ConfigError("noise levels must be >= 0")
        if not (0 < self.r_step <= self.r_stop <= 1):
            raise ConfigError("need 0 < r_step <= r_stop <= 1")
        if not self.phi > 0 or self.k < 1:
            raise ConfigError("phi must be > 0 and k >= 1")
        for t in self.induction:
            if len(t) != 3:
                raise ConfigError("induction entries are [row, col, value] triples")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig
    splits: Splits
    train: TrainConfig
    experiment: ExperimentConfig
    method: str = "ours"
    seed: int = 0
    hidden: int = 16
    dropout: float = 0.0
    output_dir: Path = Path("runs")
    dataset_path: Path | None = None
    checkpoint: Path | None = None
    source: str = field(default="", compare=False)

    def identity(self) -> dict:
        """Everything that affects results, for hashing run directories."""
        d = {
            "scene": dataclasses.asdict(self.scene), "splits": dataclasses.asdict(self.splits),
            "train": dataclasses.asdict(self.train), "experiment": dataclasses.asdict(self.experiment),
            "method": self.method, "hidden": self.hidden, "dropout": self.dropout,
            "dataset_path": str(self.dataset_path) if self.dataset_path else None,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
        }
        d["train"].pop("seed")
        d["scene"].pop("seed")
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, scene=replace(self.scene, seed=seed), train=replace(self.train, seed=seed))


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _take(section: dict, cls, where: str, extra=()):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names - set(extra)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return {k: _tupleize(v) for k, v in section.items() if k in names}


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    base_dir = base_dir or Path(".")
    unknown = set(raw) - TOP_KEYS - SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for s in SECTIONS:
        if s in raw and not isinstance(raw[s], dict):
            raise ConfigError(f"[{s}] must be a section")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    method = raw.get("method", "ours")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")

    ds = dict(raw.get("dataset", {}))
    path = ds.pop("path", None)
    split_kw = {SPLIT_KEYS[k]: ds.pop(k) for k in list(ds) if k in SPLIT_KEYS}
    scene = SceneConfig(**{**_take(ds, SceneConfig, "dataset"), "seed": seed})
    scene.validate()

    tr = dict(raw.get("train", {}))
    model_kw = {k: tr.pop(k) for k in list(tr) if k in MODEL_KEYS}
    if "seed" in tr:
        raise ConfigError("set the seed at top level, not in [train]")
    train_cfg = TrainConfig(**{**_take(tr, TrainConfig, "train"), "seed": seed})

    exp = ExperimentConfig(**_take(raw.get("experiment", {}), ExperimentConfig, "experiment"))

    def resolve(p):
        return None if p is None else (Path(p) if Path(p).is_absolute() else base_dir / p)

    try:
        return RunConfig(scene=scene, splits=Splits(**split_kw), train=train_cfg, experiment=exp,
                         method=method, seed=seed, hidden=int(model_kw.get("hidden", 16)),
                         dropout=float(model_kw.get("dropout", 0.0)),
                         output_dir=resolve(raw.get("output_dir", "runs")),
                         dataset_path=resolve(path), checkpoint=resolve(raw.get("checkpoint")), source=text)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)
