"""Seeded synthetic long-tailed datasets with open classes."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_TAG = "oltr-dataset/1"

MANY_SHOT_MIN = 101   # strictly more than 100
FEW_SHOT_MAX = 19     # strictly fewer than 20


@dataclass(frozen=True)
class LongTailProfile:
    kind: str = "exp"
    num_classes: int = 20
    n_max: int = 500
    param: float = 100.0  # imbalance ratio (exp) or rank-decay power (pareto)
    n_min: int = 1

    def validate(self):
        if self.kind not in ("exp", "pareto"):
            raise ValueError(f"profile kind must be 'exp' or 'pareto', got {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError(f"profile needs at least 2 classes, got {self.num_classes}")
        if not (self.n_max >= self.n_min >= 1):
            raise ValueError(f"profile bounds must satisfy n_max >= n_min >= 1, got {self.n_max}/{self.n_min}")
        if self.kind == "exp" and self.param < 1:
            raise ValueError(f"imbalance ratio must be >= 1, got {self.param}")
        if self.kind == "pareto" and self.param < 0:
            raise ValueError(f"pareto power must be >= 0, got {self.param}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_profile(profile: LongTailProfile) -> list[int]:
    """Class sizes n_1 >= n_2 >= ... >= n_C for a long-tailed profile."""
    profile.validate()
    c = profile.num_classes
    sizes = []
    for i in range(1, c + 1):
        if profile.kind == "exp":
            raw = profile.n_max * profile.param ** (-(i - 1) / (c - 1))
        else:
            raw = profile.n_max * i ** (-profile.param)
        sizes.append(min(profile.n_max, max(profile.n_min, _round_half_up(raw))))
    return sizes


@dataclass(frozen=True)
class ShotSplit:
    many: frozenset
    medium: frozenset
    few: frozenset

    def bucket(self, label) -> str:
        for name in ("many", "medium", "few"):
            if label in getattr(self, name):
                return name
        raise KeyError(f"label {label!r} is not in any shot split")

    def to_dict(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("many", "medium", "few")}


def split_by_shot(counts: dict) -> ShotSplit:
    """many: > 100 training samples, medium: 20..100, few: < 20."""
    many, medium, few = set(), set(), set()
    for label, n in counts.items():
        if n < 1:
            raise ValueError(f"class {label!r} has {n} training samples; need >= 1")
        if n >= MANY_SHOT_MIN:
            many.add(label)
        elif n <= FEW_SHOT_MAX:
            few.add(label)
        else:
            medium.add(label)
    return ShotSplit(frozenset(many), frozenset(medium), frozenset(few))


@dataclass
class Dataset:
    """Samples with dense known labels 0..K-1; open classes use labels >= K."""

    x: np.ndarray
    y: np.ndarray
    known_labels: tuple
    open_labels: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if set(self.known_labels) & set(self.open_labels):
            raise ValueError("known and open label sets overlap")

    def __len__(self):
        return len(self.y)

    @property
    def num_known(self) -> int:
        return len(self.known_labels)

    @property
    def counts(self) -> dict[int, int]:
        return {int(k): int(np.sum(self.y == k)) for k in (*self.known_labels, *self.open_labels)}

    def is_open(self) -> np.ndarray:
        return ~np.isin(self.y, self.known_labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.known_labels, self.open_labels, dict(self.meta))

    def shot_split(self) -> ShotSplit:
        counts = self.counts
        return split_by_shot({k: counts[k] for k in self.known_labels})


# ---------------------------------------------------------------------------
# gaussian mixture

@dataclass
class GaussianMixture:
    means: np.ndarray          # (K + Z) x d; rows >= K are open classes
    noise_sigma: float
    num_known: int

    def sample(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        noise = rng.normal(size=(n, self.means.shape[1])) * self.noise_sigma
        return self.means[label] + noise


def _sphere(rng, n, d, radius):
    v = rng.normal(size=(n, d))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def make_mixture(seed: int, dim: int, known: int, open_: int, mean_radius: float,
                 noise_sigma: float) -> GaussianMixture:
    if known < 1 or open_ < 1:
        raise ValueError("need at least one known and one open class")
    if dim < 2:
        raise ValueError(f"dimension must be >= 2, got {dim}")
    known_ss, open_ss = np.random.SeedSequence([seed, 0]).spawn(2)
    means = np.concatenate([
        _sphere(np.random.default_rng(known_ss), known, dim, mean_radius),
        _sphere(np.random.default_rng(open_ss), open_, dim, mean_radius),
    ])
    return GaussianMixture(means, noise_sigma, known)


def generate_gaussian_mixture(seed: int, dim: int, known: int, open_: int, profile: LongTailProfile,
                              open_count_per_class: int, mean_radius: float = 3.0,
                              noise_sigma: float = 1.0, test_per_class: int = 50):
    """Long-tailed train set and a balanced test set with open-class samples.

    Returns ``(train, test, mixture)``.
    """
    if profile.num_classes != known:
        raise ValueError(f"profile has {profile.num_classes} classes but {known} known classes requested")
    sizes = make_profile(profile)
    mixture = make_mixture(seed, dim, known, open_, mean_radius, noise_sigma)
    train_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    test_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    known_labels = tuple(range(known))
    open_labels = tuple(range(known, known + open_))
    meta = {"seed": seed, "profile": asdict(profile), "generator": "gaussian_mixture",
            "dim": dim, "mean_radius": mean_radius, "noise_sigma": noise_sigma}

    tx = np.concatenate([mixture.sample(k, n, train_rng) for k, n in enumerate(sizes)])
    ty = np.repeat(np.arange(known), sizes)
    train = Dataset(tx, ty, known_labels, open_labels, dict(meta))

    parts, labels = [], []
    for k in known_labels:
        parts.append(mixture.sample(k, test_per_class, test_rng))
        labels += [k] * test_per_class
    for k in open_labels:
        parts.append(mixture.sample(k, open_count_per_class, test_rng))
        labels += [k] * open_count_per_class
    test = Dataset(np.concatenate(parts), np.array(labels), known_labels, open_labels, dict(meta))
    return train, test, mixture


def generate_exploration_pools(mixture: GaussianMixture, seed: int, stage_classes: list[list[int]],
                               per_open_class: int, known_per_class: int) -> list[Dataset]:
    """One unlabeled pool per stage: samples of that stage's open classes mixed with known-class samples.

    Pools use their own RNG stream, disjoint from train and test draws.
    """
    k = mixture.num_known
    known_labels = tuple(range(k))
    open_labels = tuple(range(k, len(mixture.means)))
    pools = []
    for s, classes in enumerate(stage_classes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, s]))
        parts, labels = [], []
        for label in known_labels:
            parts.append(mixture.sample(label, known_per_class, rng))
            labels += [label] * known_per_class
        for label in classes:
            if label < k:
                raise ValueError(f"stage {s} lists known class {label} as open")
            parts.append(mixture.sample(label, per_open_class, rng))
            labels += [label] * per_open_class
        pools.append(Dataset(np.concatenate(parts), np.array(labels), known_labels, open_labels,
                             {"seed": seed, "stage": s}))
    return pools


# ---------------------------------------------------------------------------
# blob images

def _blob_classes(rng, n, side):
    margin = 3
    centers = rng.uniform(margin, side - 1 - margin, size=(n, 2))
    angles = rng.uniform(0, np.pi, size=n)
    return centers, angles


def _render(center, angle, side, jitter, rng, noise):
    cy, cx = center + jitter
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    width = side / 5.0
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    stripe = 0.5 * (1 + np.cos(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / 4.0))
    img = blob * (0.4 + 0.6 * stripe) + noise * rng.normal(size=(side, side))
    return np.clip(img, 0.0, 1.0)[None]


def generate_blob_images(seed: int, side: int, known: int, open_: int, profile: LongTailProfile,
                         open_count_per_class: int = 10, test_per_class: int = 10,
                         max_jitter: int = 2, noise: float = 0.05):
    """1 x side x side images; each class is a blob center plus stripe orientation.

    Returns ``(train, test)``.
    """
    if side < 8:
        raise ValueError(f"image side must be >= 8, got {side}")
    if profile.num_classes != known:
        raise ValueError(f"profile has {profile.num_classes} classes but {known} known classes requested")
    sizes = make_profile(profile)
    known_ss, open_ss, train_ss, test_ss = np.random.SeedSequence([seed, 10]).spawn(4)
    kc, ka = _blob_classes(np.random.default_rng(known_ss), known, side)
    oc, oa = _blob_classes(np.random.default_rng(open_ss), open_, side)
    centers, angles = np.concatenate([kc, oc]), np.concatenate([ka, oa])

    def draw(label, n, rng):
        jit = rng.integers(-max_jitter, max_jitter + 1, size=(n, 2))
        return [_render(centers[label], angles[label], side, jit[i], rng, noise) for i in range(n)]

    known_labels = tuple(range(known))
    open_labels = tuple(range(known, known + open_))
    meta = {"seed": seed, "profile": asdict(profile), "generator": "blob_images", "side": side,
            "centers": centers.tolist(), "angles": angles.tolist()}
    train_rng, test_rng = np.random.default_rng(train_ss), np.random.default_rng(test_ss)
    tx = [img for k, n in enumerate(sizes) for img in draw(k, n, train_rng)]
    train = Dataset(np.stack(tx), np.repeat(np.arange(known), sizes), known_labels, open_labels, dict(meta))
    ex, ey = [], []
    for label in known_labels:
        ex += draw(label, test_per_class, test_rng)
        ey += [label] * test_per_class
    for label in open_labels:
        ex += draw(label, open_count_per_class, test_rng)
        ey += [label] * open_count_per_class
    test = Dataset(np.stack(ex), np.array(ey), known_labels, open_labels, dict(meta))
    return train, test


# ---------------------------------------------------------------------------
# export / import

def save_dataset(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float32, row-major)."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    header = {
        "format": FORMAT_TAG,
        "shape": list(ds.x.shape),
        "dtype": "<f4",
        "blob": blob.name,
        "labels": [int(v) for v in ds.y],
        "known_labels": [int(v) for v in ds.known_labels],
        "open_labels": [int(v) for v in ds.open_labels],
        "counts": {str(k): v for k, v in ds.counts.items()},
        "splits": _safe_splits(ds),
        "seed": ds.meta.get("seed"),
        "profile": ds.meta.get("profile"),
        "meta": ds.meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(np.ascontiguousarray(ds.x, dtype="<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path.with_suffix(".json"), blob


def _safe_splits(ds):
    counts = ds.counts
    if all(counts[k] > 0 for k in ds.known_labels):
        return ds.shot_split().to_dict()
    return None


def load_dataset(path) -> Dataset:
    path = Path(path).with_suffix(".json")
    header = json.loads(path.read_text())
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: not an {FORMAT_TAG} header")
    shape = tuple(header["shape"])
    raw = (path.parent / header["blob"]).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: blob has {len(raw)} bytes, header implies {expected}")
    x = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return Dataset(x, np.array(header["labels"]), tuple(header["known_labels"]),
                   tuple(header["open_labels"]), header.get("meta", {}))
