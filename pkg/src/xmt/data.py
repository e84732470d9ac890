"""Cross-media datasets: TSV storage, stratified splits, z-scoring and a synthetic generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class CrossMediaPair(NamedTuple):
    id: str
    img_feature: np.ndarray
    txt_feature: np.ndarray
    label: int


@dataclass
class CrossMediaDataset:
    """Aligned image/text features with one label per pair, stored column-wise."""

    ids: list[str]
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.img = np.asarray(self.img, dtype=np.float64)
        self.txt = np.asarray(self.txt, dtype=np.float64)
        if self.img.ndim != 2 or self.txt.ndim != 2:
            raise ValueError("features must be 2-D (pairs x dims)")
        if len(self.img) != len(self.ids) or len(self.txt) != len(self.ids):
            raise ValueError("feature rows must match the number of ids")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(len(self.ids))
        if not self.class_names:
            self.class_names = [str(c) for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("pair ids must be unique")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dims(self) -> tuple[int, int]:
        return self.img.shape[1], self.txt.shape[1]

    @property
    def pairs(self) -> list[CrossMediaPair]:
        return [CrossMediaPair(i, a, b, int(y)) for i, a, b, y in zip(self.ids, self.img, self.txt, self.labels)]

    def subset(self, idx) -> "CrossMediaDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return CrossMediaDataset([self.ids[i] for i in idx], self.img[idx], self.txt[idx],
                                 self.labels[idx], self.num_classes, list(self.class_names))

    def drop_classes(self, names) -> "CrossMediaDataset":
        """Remove the named classes and relabel the remaining ones densely."""
        names = set(names)
        keep = [c for c, n in enumerate(self.class_names) if n not in names]
        remap = np.full(self.num_classes, -1)
        remap[keep] = np.arange(len(keep))
        rows = np.flatnonzero(remap[self.labels] >= 0)
        return CrossMediaDataset([self.ids[i] for i in rows], self.img[rows], self.txt[rows],
                                 remap[self.labels[rows]], len(keep), [self.class_names[c] for c in keep])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CrossMediaDataset):
            return NotImplemented
        return (self.ids == other.ids and self.num_classes == other.num_classes
                and self.class_names == other.class_names
                and np.array_equal(self.labels, other.labels)
                and self.img.shape == other.img.shape and self.txt.shape == other.txt.shape
                and np.array_equal(self.img, other.img) and np.array_equal(self.txt, other.txt))


# -- TSV format ------------------------------------------------------------

def save_dataset(dataset: CrossMediaDataset, path) -> None:
    d_i, d_t = dataset.dims
    lines = [f"#dims\t{d_i}\t{d_t}\t{dataset.num_classes}",
             "#classes\t" + "\t".join(dataset.class_names)]
    for pid, a, b, y in zip(dataset.ids, dataset.img, dataset.txt, dataset.labels):
        lines.append(f"{pid}\t{y}\t{','.join(map(repr, a.tolist()))}\t{','.join(map(repr, b.tolist()))}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _floats(field_text: str, expected: int, what: str, lineno: int) -> list[float]:
    try:
        values = [float(v) for v in field_text.split(",")]
    except ValueError:
        raise ValueError(f"line {lineno}: non-numeric {what} value") from None
    if len(values) != expected:
        raise ValueError(f"line {lineno}: expected {expected} {what} values, got {len(values)}")
    return values


def load_dataset(path) -> CrossMediaDataset:
    """Read the tab-separated dataset format written by ``save_dataset``.

    The ``#classes`` line is optional; without it classes are named by index.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#dims\t"):
        raise ValueError("line 1: missing '#dims' header")
    try:
        d_i, d_t, num_classes = (int(v) for v in lines[0].split("\t")[1:])
    except ValueError:
        raise ValueError("line 1: header must be '#dims<TAB>d_i<TAB>d_t<TAB>num_classes'") from None
    class_names: list[str] = []
    ids, img, txt, labels = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#classes\t"):
            class_names = line.split("\t")[1:]
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            y = int(parts[1])
        except ValueError:
            raise ValueError(f"line {lineno}: label is not an integer") from None
        if not 0 <= y < num_classes:
            raise ValueError(f"line {lineno}: label {y} outside [0, {num_classes})")
        ids.append(parts[0])
        labels.append(y)
        img.append(_floats(parts[2], d_i, "image", lineno))
        txt.append(_floats(parts[3], d_t, "text", lineno))
    if not ids:
        raise ValueError("dataset file has no pairs")
    return CrossMediaDataset(ids, np.array(img).reshape(-1, d_i), np.array(txt).reshape(-1, d_t),
                             labels, num_classes, class_names)


# -- splits and normalization ----------------------------------------------

def _allocate(n: int, fractions: np.ndarray) -> np.ndarray:
    raw = n * fractions
    counts = np.floor(raw + 1e-9).astype(int)
    remainder = raw - counts
    for k in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts


def split(dataset: CrossMediaDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified, seeded split into ``len(fractions)`` disjoint datasets (train, test, validation)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    parts_needed = int(np.count_nonzero(fr))
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in fr]
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        if members.size < parts_needed:
            raise ValueError(f"class {dataset.class_names[c]!r} has {members.size} pairs, "
                             f"fewer than {parts_needed} split parts")
        members = rng.permutation(members)
        bounds = np.cumsum(_allocate(members.size, fr))[:-1]
        for bucket, chunk in zip(buckets, np.split(members, bounds)):
            bucket.extend(chunk.tolist())
    return tuple(dataset.subset(sorted(b)) for b in buckets)


class NormStats(NamedTuple):
    img_mean: np.ndarray
    img_std: np.ndarray
    txt_mean: np.ndarray
    txt_std: np.ndarray


def normalize(dataset: CrossMediaDataset, stats: NormStats | None = None):
    """Z-score every feature dimension; constant dimensions get std 1.

    Without ``stats`` they are computed from ``dataset``. Returns ``(dataset, stats)``.
    """
    if stats is None:
        def moments(x):
            std = x.std(axis=0)
            return x.mean(axis=0), np.where(std > 0, std, 1.0)
        stats = NormStats(*moments(dataset.img), *moments(dataset.txt))
    if stats.img_mean.shape != (dataset.dims[0],) or stats.txt_mean.shape != (dataset.dims[1],):
        raise ValueError("normalization stats do not match dataset dims")
    out = CrossMediaDataset(list(dataset.ids), (dataset.img - stats.img_mean) / stats.img_std,
                            (dataset.txt - stats.txt_mean) / stats.txt_std,
                            dataset.labels.copy(), dataset.num_classes, list(dataset.class_names))
    return out, stats


# -- synthetic generator ---------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the latent-prototype generator.

    Each class owns a latent prototype; a pair jitters it by ``latent_noise``
    and renders the result through fixed per-media linear maps shared by both
    domains, adding ``noise_sigma`` feature noise per media.
    ``domain_shift`` offsets target image features along a fixed direction.
    Target classes ``0 .. overlap_classes-1`` reuse source prototypes.
    ``tgt_pairs_per_class`` defaults to ``pairs_per_class``.
    """

    num_src_classes: int = 10
    num_tgt_classes: int = 4
    overlap_classes: int = 2
    pairs_per_class: int = 50
    d_i: int = 64
    d_t: int = 32
    cluster_separation: float = 4.0
    domain_shift: float = 1.0
    noise_sigma: float = 1.0
    seed: int = 0
    latent_dim: int = 16
    latent_noise: float = 0.0
    tgt_pairs_per_class: int | None = None

    def __post_init__(self):
        for name in ("num_src_classes", "num_tgt_classes", "pairs_per_class", "d_i", "d_t", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.overlap_classes <= min(self.num_src_classes, self.num_tgt_classes):
            raise ValueError("overlap_classes must lie in [0, min(num_src_classes, num_tgt_classes)]")
        if not self.cluster_separation > 0:
            raise ValueError("cluster_separation must be > 0")
        if min(self.noise_sigma, self.domain_shift, self.latent_noise) < 0:
            raise ValueError("noise_sigma, latent_noise and domain_shift must be >= 0")
        if self.tgt_pairs_per_class is not None and self.tgt_pairs_per_class < 1:
            raise ValueError("tgt_pairs_per_class must be >= 1")


def _prototypes(rng: np.random.Generator, k: int, dim: int, separation: float) -> np.ndarray:
    p = rng.standard_normal((k, dim))
    return separation * p / np.linalg.norm(p, axis=1, keepdims=True)


def _render(rng, protos, labels, a_img, a_txt, offset, noise, latent_noise):
    z = protos[labels] + latent_noise * rng.standard_normal((len(labels), protos.shape[1]))
    img = z @ a_img.T + offset + noise * rng.standard_normal((len(labels), a_img.shape[0]))
    txt = z @ a_txt.T + noise * rng.standard_normal((len(labels), a_txt.shape[0]))
    return img, txt


def generate_synthetic(spec: SyntheticSpec) -> tuple[CrossMediaDataset, CrossMediaDataset]:
    """Source and target datasets sharing media maps and, for overlap classes, prototypes."""
    rng = np.random.default_rng(spec.seed)
    k = spec.latent_dim
    a_img = rng.standard_normal((spec.d_i, k)) / np.sqrt(k)
    a_txt = rng.standard_normal((spec.d_t, k)) / np.sqrt(k)
    direction = rng.standard_normal(spec.d_i)
    offset = spec.domain_shift * direction / np.linalg.norm(direction)

    src_protos = _prototypes(rng, spec.num_src_classes, k, spec.cluster_separation)
    fresh = _prototypes(rng, spec.num_tgt_classes - spec.overlap_classes, k, spec.cluster_separation)
    tgt_protos = np.concatenate([src_protos[: spec.overlap_classes], fresh])
    src_names = [f"s{c}" for c in range(spec.num_src_classes)]
    tgt_names = src_names[: spec.overlap_classes] + [
        f"t{c}" for c in range(spec.overlap_classes, spec.num_tgt_classes)]

    out = []
    for tag, protos, names, per_class, shift in (
        ("src", src_protos, src_names, spec.pairs_per_class, np.zeros(spec.d_i)),
        ("tgt", tgt_protos, tgt_names, spec.tgt_pairs_per_class or spec.pairs_per_class, offset),
    ):
        labels = np.repeat(np.arange(len(protos)), per_class)
        img, txt = _render(rng, protos, labels, a_img, a_txt, shift, spec.noise_sigma, spec.latent_noise)
        ids = [f"{tag}-{i:05d}" for i in range(len(labels))]
        out.append(CrossMediaDataset(ids, img, txt, labels, len(protos), names))
    return out[0], out[1]
