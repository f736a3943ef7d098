"""Synthetic segmentation scenes, ambiguity label noise and dataset files.

Scenes are grids of contiguous class regions. Each class owns a unit-norm
prototype vector; designated class pairs get nearly parallel prototypes so the
classifier genuinely confuses them. Pixels near a region border blend the two
adjacent prototypes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

MAX_OTHER_COSINE = 0.3
MANIFEST_FORMAT = "compseg-dataset"

# RNG stream tags so prototypes, scenes and pair sampling never share state.
_STREAM_PROTOTYPES = 1
_STREAM_SCENE = 2
_STREAM_PAIRS = 3


@dataclass(frozen=True)
class SceneConfig:
    height: int = 16
    width: int = 16
    feature_dim: int = 8
    num_classes: int = 4
    num_regions: int = 6
    ambiguous_pairs: tuple[tuple[int, int], ...] = ()
    prototype_similarity: tuple[float, ...] = ()
    noise_std: float = 0.2
    boundary_mix_width: int = 1
    seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "ambiguous_pairs", tuple(tuple(int(c) for c in p) for p in self.ambiguous_pairs)
        )
        object.__setattr__(
            self, "prototype_similarity", tuple(float(s) for s in self.prototype_similarity)
        )
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        self.validate()

    def validate(self):
        K = self.num_classes
        if K < 2 or K > 255:
            raise ConfigError(f"num_classes must be in [2, 255], got {K}")
        if self.feature_dim < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("height, width and feature_dim must be positive")
        if self.num_regions < 1 or self.num_regions > self.height * self.width:
            raise ConfigError(f"num_regions must be in [1, H*W], got {self.num_regions}")
        if self.boundary_mix_width < 0:
            raise ConfigError("boundary_mix_width must be >= 0")
        if not math.isfinite(self.noise_std) or self.noise_std < 0:
            raise ConfigError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if len(self.ambiguous_pairs) != len(self.prototype_similarity):
            raise ConfigError("one prototype_similarity value is required per ambiguous pair")
        for pair, sim in zip(self.ambiguous_pairs, self.prototype_similarity):
            ClassPair(*pair).check(K)
            if not (math.isfinite(sim) and 0.0 <= sim <= 1.0):
                raise ConfigError(f"prototype_similarity must lie in [0, 1], got {sim}")
        if self.class_names is not None and len(self.class_names) != K:
            raise ConfigError("class_names must have num_classes entries")

    @property
    def names(self) -> tuple[str, ...]:
        return self.class_names or tuple(f"class{i}" for i in range(self.num_classes))


@dataclass(frozen=True)
class ClassPair:
    class_a: int
    class_b: int

    def __post_init__(self):
        if self.class_a == self.class_b:
            raise ConfigError(f"class pair needs two distinct classes, got ({self.class_a}, {self.class_b})")

    def check(self, num_classes: int):
        for c in (self.class_a, self.class_b):
            if not 0 <= c < num_classes:
                raise ConfigError(f"class {c} out of range for K={num_classes}")


@dataclass
class Dataset:
    """A stack of scenes. features: (N, H, W, D) float32, labels: (N, H, W) uint8."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int = 0
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.class_names:
            self.class_names = tuple(f"class{i}" for i in range(self.num_classes))
        if self.features.ndim != 4 or self.labels.ndim != 3:
            raise DataError("features must be (N, H, W, D) and labels (N, H, W)")
        if self.features.shape[:3] != self.labels.shape:
            raise DataError(f"feature grid {self.features.shape[:3]} does not match labels {self.labels.shape}")
        check_labels(self.labels, self.num_classes)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.seed, self.class_names)

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.features, labels, self.num_classes, self.seed, self.class_names)


def check_labels(labels: np.ndarray, num_classes: int):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label values must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]")


def class_prototypes(cfg: SceneConfig) -> np.ndarray:
    """Unit-norm prototypes, shape (K, D).

    Every class starts on its own orthonormal direction (so unrelated classes
    are orthogonal); for each ambiguous pair (a, b) the prototype of b is
    rotated towards a until their cosine equals the requested similarity.
    """
    K, D = cfg.num_classes, cfg.feature_dim
    rng = np.random.default_rng([cfg.seed, _STREAM_PROTOTYPES])
    if D >= K:
        q, _ = np.linalg.qr(rng.standard_normal((D, K)))
        protos = q.T.copy()
    else:
        protos = rng.standard_normal((K, D))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    for (a, b), sim in zip(cfg.ambiguous_pairs, cfg.prototype_similarity):
        base = protos[a]
        ortho = protos[b] - (protos[b] @ base) * base
        norm = np.linalg.norm(ortho)
        if norm < 1e-12:
            raise ConfigError(f"cannot place prototype of class {b} relative to {a}")
        protos[b] = sim * base + math.sqrt(max(0.0, 1.0 - sim * sim)) * ortho / norm
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    cos = protos @ protos.T
    designated = {frozenset(p) for p in cfg.ambiguous_pairs}
    for i in range(K):
        for j in range(i + 1, K):
            if frozenset((i, j)) not in designated and cos[i, j] > MAX_OTHER_COSINE + 1e-12:
                raise ConfigError(
                    f"prototypes {i} and {j} reach cosine {cos[i, j]:.3f} > {MAX_OTHER_COSINE}; "
                    "use feature_dim >= num_classes and avoid chaining ambiguous pairs"
                )
    return protos


def _grow_regions(rng: np.random.Generator, height: int, width: int, num_regions: int) -> np.ndarray:
    """Seeded multi-source region growth; returns a region id per pixel."""
    region = np.full((height, width), -1, dtype=np.int64)
    starts = rng.choice(height * width, size=num_regions, replace=False)
    frontier = []
    for r, flat in enumerate(starts):
        y, x = divmod(int(flat), width)
        region[y, x] = r
        frontier.append((y, x))
    while frontier:
        k = int(rng.integers(len(frontier)))
        frontier[k], frontier[-1] = frontier[-1], frontier[k]
        y, x = frontier.pop()
        r = region[y, x]
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < height and 0 <= nx < width and region[ny, nx] < 0:
                region[ny, nx] = r
                frontier.append((ny, nx))
    return region


def _nearest_other_class(labels: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Chebyshev distance from every pixel to the closest pixel of another class, and that class."""
    H, W = labels.shape
    dist = np.full((num_classes, H, W), np.iinfo(np.int64).max, dtype=np.int64)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            dist[c] = ndimage.distance_transform_cdt(~mask, metric="chessboard")
    own = labels.astype(np.int64)
    dist[own, np.arange(H)[:, None], np.arange(W)[None, :]] = np.iinfo(np.int64).max
    other = dist.argmin(axis=0)
    return np.take_along_axis(dist, other[None], axis=0)[0], other


def generate_scene(cfg: SceneConfig, image_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (features (H, W, D) float64, labels (H, W) uint8) for one image."""
    cfg.validate()
    H, W, K = cfg.height, cfg.width, cfg.num_classes
    protos = class_prototypes(cfg)
    rng = np.random.default_rng([cfg.seed, _STREAM_SCENE, int(image_index)])

    region = _grow_regions(rng, H, W, cfg.num_regions)
    region_class = np.arange(cfg.num_regions) % K
    rng.shuffle(region_class)
    labels = region_class[region].astype(np.uint8)

    own = np.ones((H, W))
    other = labels.astype(np.int64)
    w = cfg.boundary_mix_width
    if w > 0:
        dist, nearest = _nearest_other_class(labels, K)
        near = dist <= w
        own[near] = 0.5 + 0.5 * dist[near] / (w + 1)
        other[near] = nearest[near]
    feats = own[..., None] * protos[labels] + (1.0 - own)[..., None] * protos[other]
    if cfg.noise_std > 0:
        feats = feats + cfg.noise_std * rng.standard_normal(feats.shape)
    return feats, labels


def generate_dataset(cfg: SceneConfig, count: int, start: int = 0) -> Dataset:
    if count < 1:
        raise ConfigError("a dataset needs at least one image")
    scenes = [generate_scene(cfg, start + i) for i in range(count)]
    feats = np.stack([f for f, _ in scenes]).astype(np.float32)
    labels = np.stack([l for _, l in scenes])
    return Dataset(feats, labels, cfg.num_classes, cfg.seed, cfg.names)


def sample_pair_assignments(pairs, num_images: int, seed: int) -> np.ndarray:
    """Superior/inferior class per (image, pair).

    Returns an int array of shape (num_images, num_pairs, 2) holding
    (superior, inferior). The result is fixed once sampled.
    """
    pairs = [p if isinstance(p, ClassPair) else ClassPair(*p) for p in pairs]
    if not pairs:
        raise ConfigError("at least one class pair is required")
    rng = np.random.default_rng([int(seed), _STREAM_PAIRS])
    flip = rng.integers(0, 2, size=(num_images, len(pairs))).astype(bool)
    a = np.array([p.class_a for p in pairs])
    b = np.array([p.class_b for p in pairs])
    sup = np.where(flip, b, a)
    inf = np.where(flip, a, b)
    return np.stack([sup, inf], axis=-1)


def corrupt_labels(labels: np.ndarray, assignment: np.ndarray, n: int, num_classes: int | None = None) -> np.ndarray:
    """Dilate each superior class into its inferior partner by Chebyshev radius n.

    ``assignment`` is the (num_pairs, 2) slice of sample_pair_assignments for
    this image. All pairs are evaluated against the original grid; where two
    pairs relabel the same pixel the lower pair index wins.
    """
    if n < 0:
        raise ConfigError(f"noise radius must be >= 0, got {n}")
    labels = np.asarray(labels)
    if num_classes is not None:
        check_labels(labels, num_classes)
    out = labels.copy()
    if n == 0:
        return out
    footprint = np.ones((2 * n + 1, 2 * n + 1), dtype=bool)
    taken = np.zeros(labels.shape, dtype=bool)
    for sup, inf in np.asarray(assignment).reshape(-1, 2):
        if num_classes is not None:
            ClassPair(int(sup), int(inf)).check(num_classes)
        reach = ndimage.binary_dilation(labels == sup, structure=footprint)
        hit = reach & (labels == inf) & ~taken
        out[hit] = sup
        taken |= hit
    return out


def corrupt_dataset(ds: Dataset, assignments: np.ndarray, n: int) -> Dataset:
    labels = np.stack([corrupt_labels(ds.labels[i], assignments[i], n, ds.num_classes) for i in range(len(ds))])
    return ds.with_labels(labels)


def write_dataset(path, ds: Dataset):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    N, H, W, D = ds.features.shape
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "height": H,
        "width": W,
        "feature_dim": D,
        "num_classes": ds.num_classes,
        "image_count": N,
        "seed": int(ds.seed),
        "class_names": list(ds.class_names),
    }
    (path / "features.bin").write_bytes(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
    (path / "labels.bin").write_bytes(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest in {path}: {exc}") from exc
    keys = ("height", "width", "num_classes", "image_count")
    if not isinstance(manifest, dict) or any(not isinstance(manifest.get(k), int) or manifest[k] < 1 for k in keys):
        raise DataError(f"malformed manifest in {path}")
    return manifest


def read_dataset(path) -> Dataset:
    path = Path(path)
    m = read_manifest(path)
    N, H, W, K = m["image_count"], m["height"], m["width"], m["num_classes"]
    D = m.get("feature_dim")
    if not isinstance(D, int) or D < 1:
        raise DataError("manifest lacks a valid feature_dim")
    raw_f = (path / "features.bin").read_bytes()
    raw_l = (path / "labels.bin").read_bytes()
    if len(raw_f) != 4 * N * H * W * D:
        raise DataError(f"features.bin holds {len(raw_f)} bytes, manifest implies {4 * N * H * W * D}")
    if len(raw_l) != N * H * W:
        raise DataError(f"labels.bin holds {len(raw_l)} bytes, manifest implies {N * H * W}")
    feats = np.frombuffer(raw_f, dtype="<f4").reshape(N, H, W, D).astype(np.float32)
    labels = np.frombuffer(raw_l, dtype=np.uint8).reshape(N, H, W).copy()
    if not np.isfinite(feats).all():
        raise DataError("features.bin contains non-finite values")
    names = tuple(m.get("class_names") or ())
    return Dataset(feats, labels, K, int(m.get("seed", 0)), names)


def write_labels(path, labels: np.ndarray, num_classes: int, class_names=(), seed: int = 0):
    """Prediction export: labels.bin plus a manifest without features."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    check_labels(labels, num_classes)
    N, H, W = labels.shape
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "height": H,
        "width": W,
        "num_classes": num_classes,
        "image_count": N,
        "seed": int(seed),
        "class_names": list(class_names),
    }
    (path / "labels.bin").write_bytes(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_labels(path) -> np.ndarray:
    path = Path(path)
    m = read_manifest(path)
    N, H, W = m["image_count"], m["height"], m["width"]
    raw = (path / "labels.bin").read_bytes()
    if len(raw) != N * H * W:
        raise DataError(f"labels.bin holds {len(raw)} bytes, manifest implies {N * H * W}")
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(N, H, W).copy()
    check_labels(labels, m["num_classes"])
    return labels
