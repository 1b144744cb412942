"""Datasets for the arena: synthetic blobs, CSV ingestion, splits, OOD sampling.

Ground truth f() is provenance based. A sample's true class is the label of
the dataset sample it was derived from; anything that is not within
``radius`` (L-inf) of some known sample has no class at all (``NO_CLASS``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NO_CLASS = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)
    centers: np.ndarray | None = None
    spread: float | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DataError(f"features {x.shape} and labels {y.shape} are not aligned")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError("features must lie in [0, 1]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        prov = dict(self.provenance)
        prov["indices"] = idx
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, prov,
                       self.centers, self.spread)

    def of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True)
class DisjointSplit:
    part_a: Dataset
    part_b: Dataset
    holdout: Dataset


def gen_blobs(seed: int, classes: int = 10, dim: int = 20, per_class: int = 600,
              spread: float = 0.08) -> Dataset:
    """Isotropic Gaussian blobs around seeded centers, clamped to [0, 1]^d."""
    if classes < 2 or dim < 2 or per_class < 1 or not spread > 0:
        raise DataError(f"invalid blob parameters C={classes} d={dim} n={per_class} sigma={spread}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.15, 0.85, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + rng.normal(0.0, spread, size=(len(labels), dim))
    np.clip(x, 0.0, 1.0, out=x)
    order = rng.permutation(len(labels))
    prov = {"kind": "blobs", "seed": seed, "classes": classes, "dim": dim,
            "per_class": per_class, "spread": spread}
    return Dataset(x[order], labels[order], classes, prov, centers, spread)


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(d)]:
        raise DataError(f"{path}: header must be f0,...,f{{d-1}},label")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 1:
            raise DataError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[:-1]]
            label = int(row[-1])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        for col, v in enumerate(vals):
            if not (0.0 <= v <= 1.0):
                raise DataError(f"{path}: line {lineno}, column f{col}: value {v} outside [0, 1]")
        feats.append(vals)
        labels.append(label)
    if not labels:
        raise DataError(f"{path}: no data rows")
    present = sorted(set(labels))
    if present != list(range(len(present))):
        raise DataError(f"{path}: labels must be dense in [0, C), got {present}")
    c = len(present)
    if len(labels) < c:
        raise DataError(f"{path}: fewer samples than classes")
    return Dataset(np.array(feats), np.array(labels), c, {"kind": "csv", "path": str(path)})


def split_disjoint(ds: Dataset, fractions=(0.45, 0.45, 0.10), seed: int = 0) -> DisjointSplit:
    """Seeded shuffle, then contiguous cuts into (part_a, part_b, holdout)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-12:
        raise DataError(f"invalid split fractions {fractions}")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions]
    if sum(sizes) > n:
        sizes[-1] = n - sizes[0] - sizes[1]
    if min(sizes) <= 0:
        raise DataError(f"split produced an empty part: sizes {sizes}")
    cuts = np.cumsum([0] + sizes)
    parts = [ds.subset(order[cuts[i]:cuts[i + 1]]) for i in range(3)]
    return DisjointSplit(*parts)


def sample_ood(ds: Dataset, count: int, seed: int = 0) -> np.ndarray:
    """Uniform points in [0,1]^d kept away from the data.

    Synthetic data: Euclidean distance > 3 sigma from every class center.
    Ingested data: farther than the median nearest-neighbour spacing from every sample.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    rng = np.random.default_rng(seed)
    if ds.centers is not None:
        anchors, radius = ds.centers, 3.0 * ds.spread
    else:
        anchors = ds.features
        probe = anchors[rng.choice(len(anchors), size=min(200, len(anchors)), replace=False)]
        d2 = ((probe[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)
        d2[d2 == 0] = np.inf
        radius = float(np.median(np.sqrt(d2.min(axis=1))))
    out, draws, budget = [], 0, 10000 * count
    while len(out) < count:
        batch = rng.uniform(0.0, 1.0, size=(max(count, 64), ds.dim))
        draws += len(batch)
        dist = np.sqrt(((batch[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)).min(axis=1)
        out.extend(batch[dist > radius])
        if len(out) < count and draws >= budget:
            raise DataError(f"could not draw {count} OOD points in {budget} attempts")
    return np.array(out[:count])


class GroundTruth:
    """The ground-truth function f() for a world built from ``ds``.

    A point derived from a known sample (by a mask, a perturbation, an attack)
    keeps that sample's class; generators report such points through
    ``record``. Any other query inherits the label of its nearest known sample
    when that sample is within ``radius`` in L-inf; otherwise f(x) = NO_CLASS.
    """

    def __init__(self, ds: Dataset, radius: float = 0.3):
        self.features = ds.features
        self.labels = ds.labels
        self.radius = float(radius)
        self._origin = {}

    @staticmethod
    def _key(row) -> bytes:
        return np.ascontiguousarray(row, dtype=np.float64).tobytes()

    def record(self, x, labels) -> None:
        """Register derived points with the class of the sample they came from."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x),))
        for row, label in zip(x, labels):
            self._origin[self._key(row)] = int(label)

    def __len__(self):
        return len(self._origin)

    def nearest(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(len(x), dtype=np.int64)
        for start in range(0, len(x), 64):
            chunk = x[start:start + 64]
            dist = np.abs(chunk[:, None, :] - self.features[None, :, :]).max(axis=-1)
            nearest = dist.argmin(axis=1)
            ok = dist[np.arange(len(chunk)), nearest] <= self.radius
            out[start:start + 64] = np.where(ok, self.labels[nearest], NO_CLASS)
        return out

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        known = np.array([self._origin.get(self._key(r)) for r in x], dtype=object)
        miss = np.array([k is None for k in known], dtype=bool)
        out = np.empty(len(x), dtype=np.int64)
        if (~miss).any():
            out[~miss] = known[~miss].astype(np.int64)
        if miss.any():
            out[miss] = self.nearest(x[miss])
        return out

    def save_origins(self, path) -> None:
        if self._origin:
            rows = np.array([np.frombuffer(k, dtype=np.float64) for k in self._origin])
            labels = np.array(list(self._origin.values()), dtype=np.int64)
        else:
            rows, labels = np.zeros((0, self.features.shape[1])), np.zeros(0, dtype=np.int64)
        np.savez(path, rows=rows, labels=labels)

    def load_origins(self, path) -> None:
        with np.load(path) as z:
            if len(z["labels"]):
                self.record(z["rows"], z["labels"])


def note_origin(truth, x, labels) -> None:
    """Tell a ground-truth oracle where derived points came from (no-op for plain callables)."""
    record = getattr(truth, "record", None)
    if record is not None:
        record(x, labels)
