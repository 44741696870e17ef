"""Datasets, class prototypes, Ward trees and in/out class partitions."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .netcore import Predictor, forward


class DataError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    role: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError("features must be N x d with one label per row")
        if len(self.labels) < 1:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError("labels must lie in [0, class_count)")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, role: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count,
                       role or self.role, self.provenance)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class BlobSpec:
    classes: int = 8
    per_class: int = 100
    dim: int = 16
    supercluster_count: int = 2
    spread: float = 1.5
    noise: float = 0.5
    separation: float = 3.0


def _blob_means(spec: BlobSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.classes < 2 or spec.per_class < 1 or spec.dim < 1 or spec.supercluster_count < 1:
        raise ValueError("classes >= 2, per_class >= 1, dim >= 1 and supercluster_count >= 1 required")
    centers = rng.normal(size=(spec.supercluster_count, spec.dim))
    centers *= spec.separation / np.sqrt(spec.dim)
    owner = np.arange(spec.classes) % spec.supercluster_count
    return centers[owner] + spec.spread * rng.normal(size=(spec.classes, spec.dim)) / np.sqrt(spec.dim)


def _sample(means, per_class, noise, rng, role, provenance):
    C, d = means.shape
    labels = np.repeat(np.arange(C), per_class)
    X = means[labels] + noise * rng.normal(size=(len(labels), d)) / np.sqrt(d)
    return Dataset(X, labels, C, role, provenance)


def generate_blobs(spec: BlobSpec, seed: int, role: str = "train") -> Dataset:
    """Gaussian class blobs whose means sit inside ``supercluster_count`` groups.

    ``spread``, ``noise`` and ``separation`` are Euclidean scales: the
    per-coordinate standard deviations are divided by sqrt(dim).
    """
    rng = np.random.default_rng(seed)
    means = _blob_means(spec, rng)
    return _sample(means, spec.per_class, spec.noise, rng, role, f"blobs:{spec}:seed={seed}")


def generate_blob_splits(spec: BlobSpec, seed: int, test_per_class: int) -> tuple[Dataset, Dataset]:
    """A train pool and a test set drawn around the same class means."""
    rng = np.random.default_rng(seed)
    means = _blob_means(spec, rng)
    prov = f"blobs:{spec}:seed={seed}"
    pool = _sample(means, spec.per_class, spec.noise, rng, "train", prov)
    test = _sample(means, test_per_class, spec.noise, rng, "test", prov)
    return pool, test


def class_prototypes(dataset: Dataset, featurizer: Predictor | None = None) -> np.ndarray:
    """Per-class mean of the featurized examples (identity featurizer by default)."""
    if featurizer is None:
        feats = dataset.features
    else:
        _, tr = forward(featurizer, dataset.features, "eval")
        feats = tr.features
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise DataError(f"class {int(missing[0])} has no examples")
    sums = np.zeros((dataset.class_count, feats.shape[1]))
    np.add.at(sums, dataset.labels, feats)
    return sums / counts[:, None]


@dataclass
class MergeTree:
    """Agglomeration history.

    Leaves are ``0..n-1``; the ``i``-th merge creates node ``n + i`` from
    ``merges[i] = (left, right, cost)`` with ``left < right``.
    """

    n_leaves: int
    merges: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def root(self) -> int:
        return 2 * self.n_leaves - 2

    def children(self, node: int) -> tuple[int, int] | None:
        if node < self.n_leaves:
            return None
        left, right, _ = self.merges[node - self.n_leaves]
        return left, right

    def leaves(self, node: int) -> list[int]:
        """Leaf ids under ``node`` in left-first depth-first order."""
        out, stack = [], [node]
        while stack:
            k = stack.pop()
            ch = self.children(k)
            if ch is None:
                out.append(k)
            else:
                stack.append(ch[1])
                stack.append(ch[0])
        return out

    def members(self, node: int) -> set[int]:
        return set(self.leaves(node))

    @property
    def costs(self) -> np.ndarray:
        return np.array([c for _, _, c in self.merges])


def ward_tree(prototypes) -> MergeTree:
    """Ward agglomeration with Lance-Williams updates.

    Linkage between clusters A and B is ``|A||B|/(|A|+|B|) * ||mu_A - mu_B||^2``
    (so two singletons sit at half their squared distance).  Ties go to the
    lexicographically smallest ``(i, j)`` pair of node ids.
    """
    P = np.asarray(prototypes, dtype=float)
    if P.ndim != 2 or len(P) < 2:
        raise ValueError("need at least two prototype rows")
    if not np.all(np.isfinite(P)):
        raise ValueError("prototypes must be finite")
    n = len(P)
    total = 2 * n - 1
    D = np.full((total, total), np.inf)
    sq = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1) / 2.0
    iu = np.triu_indices(n, 1)
    D[iu] = sq[iu]
    size = np.zeros(total, dtype=int)
    size[:n] = 1
    active = np.zeros(total, dtype=bool)
    active[:n] = True
    tree = MergeTree(n)
    for step in range(n - 1):
        flat = int(np.argmin(D))
        i, j = divmod(flat, total)
        cost = float(D[i, j])
        new = n + step
        ni, nj = size[i], size[j]
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        if len(others):
            dik = np.minimum(D[others, i], D[i, others])
            djk = np.minimum(D[others, j], D[j, others])
            nk = size[others]
            D[others, new] = ((ni + nk) * dik + (nj + nk) * djk - nk * cost) / (ni + nj + nk)
        for k in (i, j):
            D[k, :] = np.inf
            D[:, k] = np.inf
            active[k] = False
        active[new] = True
        size[new] = ni + nj
        tree.merges.append((i, j, max(cost, 0.0)))
    return tree


@dataclass
class ClassPartition:
    in_classes: list[int]
    out_classes: list[int]
    tree: MergeTree | None = None

    def __post_init__(self):
        if not self.in_classes or not self.out_classes:
            raise ValueError("both sides of a partition must be nonempty")
        if set(self.in_classes) & set(self.out_classes):
            raise ValueError("in and out classes overlap")
        if len(self.in_classes) != len(self.out_classes):
            raise ValueError("in and out sides must have equal size")

    @property
    def in_label_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.in_classes)}


def root_partition(tree: MergeTree) -> ClassPartition:
    """Left subtree of the root is in-domain, right subtree out-domain, truncated to equal size."""
    left, right = tree.children(tree.root)
    L, R = tree.leaves(left), tree.leaves(right)
    m = min(len(L), len(R))
    return ClassPartition(L[:m], R[:m], tree)


def apply_partition(dataset: Dataset, partition: ClassPartition) -> tuple[Dataset, Dataset]:
    """Split into (in-domain with contiguous labels, out-domain with original labels).

    Classes on neither side are dropped.
    """
    lut = np.full(dataset.class_count, -1)
    for c, i in partition.in_label_map.items():
        lut[c] = i
    in_mask = lut[dataset.labels] >= 0
    out_mask = np.isin(dataset.labels, partition.out_classes)
    din = Dataset(dataset.features[in_mask], lut[dataset.labels[in_mask]], len(partition.in_classes),
                  dataset.role, dataset.provenance)
    dout = dataset.subset(out_mask)
    return din, dout


def write_partition(path, partition: ClassPartition):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("[in]\n")
        f.writelines(f"{c}\n" for c in partition.in_classes)
        f.write("[out]\n")
        f.writelines(f"{c}\n" for c in partition.out_classes)


def read_partition(path) -> ClassPartition:
    sections: dict[str, list[int]] = {}
    current = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line in ("[in]", "[out]"):
                current = sections.setdefault(line[1:-1], [])
            elif current is None:
                raise ParseError(f"{path}:{lineno}: entry before any section header")
            else:
                current.append(int(line))
    if "in" not in sections or "out" not in sections:
        raise ParseError(f"{path}: needs both [in] and [out] sections")
    return ClassPartition(sections["in"], sections["out"])


def imagenot_classes() -> tuple[list[str], list[str]]:
    """The published ImageNet synset lists for the in- and out-domain sides."""
    pkg = resources.files("uqbed") / "data"
    read = lambda name: (pkg / name).read_text(encoding="utf-8").split()  # noqa: E731
    return read("imagenot_in.txt"), read("imagenot_out.txt")


@dataclass(frozen=True)
class SplitSpec:
    data_seed: int
    train_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def split_train_val(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    n = len(dataset)
    n_train = math.ceil(round(spec.train_fraction * n, 9))
    if n < 2 or n_train <= 0 or n_train >= n:
        raise ValueError(f"split of {n} rows at {spec.train_fraction} leaves one side empty")
    perm = np.random.default_rng(spec.data_seed).permutation(n)
    return dataset.subset(perm[:n_train], "train"), dataset.subset(perm[n_train:], "val")


def holdout_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class seeded holdout used when tabular data arrives without a test split."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        k = int(round(test_fraction * len(idx)))
        test_idx.extend(rng.permutation(idx)[:k])
    mask = np.zeros(len(dataset), dtype=bool)
    mask[test_idx] = True
    return dataset.subset(~mask, "train"), dataset.subset(mask, "test")


def write_tabular(path, dataset: Dataset, label_names=None):
    names = label_names if label_names is not None else [str(i) for i in range(dataset.class_count)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(dataset.dim)] + ["label"])
        for row, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [names[y]])


def load_tabular(path, role: str = "train") -> Dataset:
    """Read a CSV with a ``label`` column; labels map to ids in first-appearance order."""
    with open(path, encoding="utf-8", newline="") as f:
        raw = f.read()
    reader = csv.reader(raw.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty file") from None
    if "label" not in header:
        raise ParseError(f"{path}:1: no 'label' column")
    li = header.index("label")
    ids: dict[str, int] = {}
    rows, labels = [], []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} columns, got {len(rec)}")
        try:
            rows.append([float(v) for k, v in enumerate(rec) if k != li])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: non-numeric feature ({e})") from None
        labels.append(ids.setdefault(rec[li], len(ids)))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]
    return Dataset(np.array(rows), np.array(labels), len(ids), role, f"file:{digest}")
