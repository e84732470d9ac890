"""Coupling losses between the two domain networks.

The MMD estimator is the biased quadratic (V-statistic) form averaged over a
geometric ladder of Gaussian bandwidths. Kernel sums go through ``math.fsum``
so that ``mmd_sq(X, Y) == mmd_sq(Y, X)`` holds bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

MEDIA_LAYERS = ("fc6", "fc7")
SHARED_LAYERS = ("fc8", "fc9")
TERMS = ("mmd_image", "mmd_text", "mmd_corr", "pair_src", "pair_tgt", "sem_src", "sem_tgt")


@dataclass(frozen=True)
class MmdConfig:
    """Kernel ladder: ``num_kernels`` bandwidths spaced by ``multiplier`` around a base.

    ``bandwidth=None`` takes the base from the median pairwise distance of the
    joint batch; a positive float fixes it.
    """

    num_kernels: int = 5
    multiplier: float = 2.0
    bandwidth: float | None = None

    def __post_init__(self):
        if self.num_kernels < 1:
            raise ValueError("num_kernels must be >= 1")
        if not self.multiplier > 0:
            raise ValueError("multiplier must be > 0")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be > 0")

    def ladder(self, base: float) -> np.ndarray:
        exps = np.arange(self.num_kernels) - (self.num_kernels - 1) / 2.0
        return base * self.multiplier ** exps


@dataclass(frozen=True)
class LossWeights:
    mmd_image: float = 0.3
    mmd_text: float = 0.3
    mmd_corr: float = 0.3
    pair_src: float = 0.1
    pair_tgt: float = 0.1
    sem_src: float = 1.0
    sem_tgt: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    mmd_image: float = 0.0
    mmd_text: float = 0.0
    mmd_corr: float = 0.0
    pair_src: float = 0.0
    pair_tgt: float = 0.0
    sem_src: float = 0.0
    sem_tgt: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def gaussian_kernel(x, y, bandwidth: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (2.0 * bandwidth * bandwidth))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Explicit differences: symmetric in (a, b) bit for bit, unlike the expanded form.
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(X, Y) -> float:
    """Median pairwise Euclidean distance over the pooled rows of X and Y."""
    Z = np.concatenate([np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)])
    d2 = _sq_dists(Z, Z)
    iu = np.triu_indices(len(Z), k=1)
    med = float(np.sqrt(np.median(d2[iu])))
    return med if med > 0 else 1.0


def _ladder_kernel(d2: np.ndarray, sigmas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ladder-averaged kernel and its derivative w.r.t. the squared distance."""
    k = np.zeros_like(d2)
    dk = np.zeros_like(d2)
    for s in sigmas:
        e = np.exp(-d2 / (2.0 * s * s))
        k += e
        dk -= e / (2.0 * s * s)
    n = len(sigmas)
    return k / n, dk / n


def _pull(coef: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # d/da_i of sum_j coef_ij * ||a_i - b_j||^2
    return 2.0 * (coef.sum(axis=1)[:, None] * a - coef @ b)


def mmd_sq(X, Y, cfg: MmdConfig = MmdConfig()) -> tuple[float, np.ndarray, np.ndarray]:
    """Biased squared MMD between the row sets X and Y, with exact gradients.

    The bandwidth is treated as a constant for differentiation even when it
    comes from the median heuristic.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"incompatible sample matrices {X.shape} and {Y.shape}")
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise ValueError(f"MMD needs at least 2 samples per side, got {n} and {m}")
    base = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(X, Y)
    sigmas = cfg.ladder(base)

    kxx, dxx = _ladder_kernel(_sq_dists(X, X), sigmas)
    kyy, dyy = _ladder_kernel(_sq_dists(Y, Y), sigmas)
    kxy, dxy = _ladder_kernel(_sq_dists(X, Y), sigmas)

    sxx = math.fsum(kxx.ravel()) / (n * n)
    syy = math.fsum(kyy.ravel()) / (m * m)
    sxy = math.fsum(kxy.ravel()) / (n * m)
    value = max(sxx + syy - 2.0 * sxy, 0.0)

    # Within-set sums count each unordered pair twice, hence the factor 2.
    gX = 2.0 * _pull(dxx, X, X) / (n * n) - 2.0 * _pull(dxy, X, Y) / (n * m)
    gY = 2.0 * _pull(dyy, Y, Y) / (m * m) - 2.0 * _pull(dxy.T, Y, X) / (n * m)
    return value, gX, gY


def mmd_permutation_test(X, Y, cfg: MmdConfig = MmdConfig(), num_permutations: int = 100,
                         rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Two-sample permutation test on the biased MMD statistic.

    The pooled kernel matrix is built once (median bandwidth from the pooled
    sample, as in ``mmd_sq``) and relabelled per permutation. Returns
    ``(statistic, p_value)`` with the usual +1 correction.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = len(X)
    Z = np.concatenate([X, Y])
    base = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(X, Y)
    K, _ = _ladder_kernel(_sq_dists(Z, Z), cfg.ladder(base))

    def stat(idx):
        a, b = idx[:n], idx[n:]
        return K[np.ix_(a, a)].mean() + K[np.ix_(b, b)].mean() - 2.0 * K[np.ix_(a, b)].mean()

    rng = np.random.default_rng() if rng is None else rng
    observed = stat(np.arange(len(Z)))
    hits = sum(stat(rng.permutation(len(Z))) >= observed for _ in range(num_permutations))
    return float(observed), (hits + 1) / (num_permutations + 1)


def _layer(trace, name: str) -> np.ndarray:
    try:
        return trace.post[name]
    except KeyError:
        raise KeyError(f"trace has no layer {name!r}") from None


def mmd_media_loss(trace_src, trace_tgt, cfg: MmdConfig = MmdConfig(), layers: Sequence[str] = MEDIA_LAYERS):
    """Layer-wise MMD between source and target activations of one media type.

    Returns ``(value, grads_src, grads_tgt)``; grads are keyed by layer name
    and are w.r.t. that layer's output.
    """
    value = 0.0
    gs, gt = {}, {}
    for name in layers:
        v, gs[name], gt[name] = mmd_sq(_layer(trace_src, name), _layer(trace_tgt, name), cfg)
        value += v
    return value, gs, gt


def mmd_corr_loss(traces_src: Sequence, traces_tgt: Sequence, cfg: MmdConfig = MmdConfig(),
                  layers: Sequence[str] = SHARED_LAYERS):
    """Shared-layer MMD with image and text rows pooled within each domain.

    Returns ``(value, grads_src, grads_tgt)`` where each grads entry is a list
    aligned with the input traces, each a dict keyed by layer name.
    """
    value = 0.0
    gs = [{} for _ in traces_src]
    gt = [{} for _ in traces_tgt]
    for name in layers:
        src_parts = [_layer(t, name) for t in traces_src]
        tgt_parts = [_layer(t, name) for t in traces_tgt]
        v, g_src, g_tgt = mmd_sq(np.concatenate(src_parts), np.concatenate(tgt_parts), cfg)
        value += v
        for out, parts, g in ((gs, src_parts, g_src), (gt, tgt_parts, g_tgt)):
            splits = np.cumsum([len(p) for p in parts])[:-1]
            for d, piece in zip(out, np.split(g, splits)):
                d[name] = piece
    return value, gs, gt


def pairwise_loss(trace_img, trace_txt, layers: Sequence[str] = MEDIA_LAYERS):
    """Mean over aligned pairs of the squared distance between image and text activations,
    summed over ``layers``. Returns ``(value, grads_img, grads_txt)``."""
    value = 0.0
    gi, gt = {}, {}
    for name in layers:
        a, b = _layer(trace_img, name), _layer(trace_txt, name)
        if a.shape != b.shape:
            raise ValueError(f"unaligned pair batches at {name}: {a.shape} vs {b.shape}")
        n = len(a)
        diff = a - b
        value += float(np.sum(diff * diff)) / n
        gi[name] = 2.0 * diff / n
        gt[name] = -gi[name]
    return value, gi, gt


def combine(terms: Mapping[str, float], weights: LossWeights) -> LossBreakdown:
    """Weighted total of the seven loss terms; terms are stored unweighted."""
    missing = [t for t in TERMS if t not in terms]
    if missing:
        raise ValueError(f"missing loss terms: {missing}")
    for t in TERMS:
        if not np.isfinite(terms[t]):
            raise ValueError(f"loss term {t} is not finite: {terms[t]}")
    w = weights.as_dict()
    total = sum(w[t] * float(terms[t]) for t in TERMS)
    return LossBreakdown(**{t: float(terms[t]) for t in TERMS}, total=total)
