"""Two-domain transfer network over precomputed image/text features.

Each domain has an image pathway (fc6, fc7), a text pathway (fc6, fc7), two
shared layers (fc8, fc9) and a classifier (fc10). Source and target networks
have the same shapes except for the classifier width.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import losses as L
from .losses import LossBreakdown, LossWeights, MmdConfig
from .nn import (
    IDENTITY,
    RELU,
    DenseLayer,
    LayerCache,
    LayerGrads,
    SgdConfig,
    backward,
    forward,
    init_layer,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)

IMAGE = "image"
TEXT = "text"
MEDIA = (IMAGE, TEXT)
LAYER_NAMES = ("img_fc6", "img_fc7", "txt_fc6", "txt_fc7", "shared_fc8", "shared_fc9", "classifier_fc10")
_PATHWAY = {
    IMAGE: ("img_fc6", "img_fc7"),
    TEXT: ("txt_fc6", "txt_fc7"),
}
_SHARED = ("shared_fc8", "shared_fc9", "classifier_fc10")
_TRACE_KEYS = ("fc6", "fc7", "fc8", "fc9", "fc10")


@dataclass
class DomainNetwork:
    img_fc6: DenseLayer
    img_fc7: DenseLayer
    txt_fc6: DenseLayer
    txt_fc7: DenseLayer
    shared_fc8: DenseLayer
    shared_fc9: DenseLayer
    classifier_fc10: DenseLayer

    def __post_init__(self):
        for media in MEDIA:
            fc6, fc7 = (getattr(self, n) for n in _PATHWAY[media])
            if fc6.out_dim != fc7.in_dim or fc7.out_dim != self.shared_fc8.in_dim:
                raise ValueError(f"{media} pathway does not feed the shared layers")
        if self.shared_fc8.out_dim != self.shared_fc9.in_dim or self.shared_fc9.out_dim != self.classifier_fc10.in_dim:
            raise ValueError("shared layers are not chained")

    @property
    def num_classes(self) -> int:
        return self.classifier_fc10.out_dim

    @property
    def dims(self) -> tuple[int, int]:
        return self.img_fc6.in_dim, self.txt_fc6.in_dim

    def layers(self) -> list[DenseLayer]:
        return [getattr(self, n) for n in LAYER_NAMES]

    def copy(self) -> "DomainNetwork":
        return DomainNetwork(*(layer.copy() for layer in self.layers()))


def init_domain_network(d_img: int, d_txt: int, num_classes: int, hidden: int,
                        rng: np.random.Generator) -> DomainNetwork:
    return DomainNetwork(
        img_fc6=init_layer(d_img, hidden, RELU, rng),
        img_fc7=init_layer(hidden, hidden, RELU, rng),
        txt_fc6=init_layer(d_txt, hidden, RELU, rng),
        txt_fc7=init_layer(hidden, hidden, RELU, rng),
        shared_fc8=init_layer(hidden, hidden, RELU, rng),
        shared_fc9=init_layer(hidden, hidden, RELU, rng),
        classifier_fc10=init_layer(hidden, num_classes, IDENTITY, rng),
    )


@dataclass
class ForwardTrace:
    """Layer outputs of one media batch through one domain network.

    ``post`` maps fc6..fc10 to layer outputs (fc10 holds the logits);
    ``prob`` is the softmax of the logits.
    """

    media: str
    post: dict[str, np.ndarray]
    prob: np.ndarray
    caches: dict[str, LayerCache] = field(repr=False)


class PairedBatch(NamedTuple):
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray


def _route(media: str) -> tuple[str, ...]:
    if media not in MEDIA:
        raise ValueError(f"unknown media type {media!r}")
    return _PATHWAY[media] + _SHARED


def forward_item(net: DomainNetwork, media: str, features) -> ForwardTrace:
    """Run a batch (or single vector) of one media type through its pathway and the shared layers."""
    x = np.asarray(features, dtype=np.float64)
    post, caches = {}, {}
    for key, name in zip(_TRACE_KEYS, _route(media)):
        x, caches[key] = forward(getattr(net, name), x)
        post[key] = x
    return ForwardTrace(media, post, softmax(x), caches)


def embed(net: DomainNetwork, media: str, features) -> np.ndarray:
    """Class-probability vectors used as the common representation."""
    return forward_item(net, media, features).prob


def backward_trace(net: DomainNetwork, trace: ForwardTrace, grad_post: dict[str, np.ndarray],
                   grads: dict[str, LayerGrads]) -> None:
    """Backpropagate gradients attached at any layer outputs of ``trace``.

    ``grad_post`` maps fc6..fc10 to gradients w.r.t. that layer's output.
    Parameter gradients are accumulated into ``grads`` by layer name.
    """
    names = _route(trace.media)
    g = None
    for key, name in reversed(list(zip(_TRACE_KEYS, names))):
        if key in grad_post:
            g = grad_post[key] if g is None else g + grad_post[key]
        if g is None:
            continue
        g, lg = backward(getattr(net, name), g, trace.caches[key])
        if name in grads:
            prev = grads[name]
            grads[name] = LayerGrads(prev.weights + lg.weights, prev.bias + lg.bias)
        else:
            grads[name] = lg


def _check_batch(net: DomainNetwork, batch: PairedBatch, min_size: int = 1) -> None:
    img, txt, labels = batch
    n = len(labels)
    if len(img) != n or len(txt) != n:
        raise ValueError("image, text and label rows must be aligned")
    if n < min_size:
        raise ValueError(f"batch needs at least {min_size} pairs, got {n}")
    if n and (np.min(labels) < 0 or np.max(labels) >= net.num_classes):
        raise ValueError(f"labels must lie in [0, {net.num_classes})")


class _DomainPass(NamedTuple):
    img: ForwardTrace
    txt: ForwardTrace
    sem: float
    pair: float
    grad_img: dict
    grad_txt: dict


def _domain_pass(net: DomainNetwork, batch: PairedBatch, w_sem: float, w_pair: float) -> _DomainPass:
    """Forward both media of one domain and seed its within-domain loss gradients."""
    ti = forward_item(net, IMAGE, batch.img)
    tt = forward_item(net, TEXT, batch.txt)
    grad_img: dict[str, np.ndarray] = {}
    grad_txt: dict[str, np.ndarray] = {}
    sem = pair = 0.0
    if w_sem > 0:
        li, gi = softmax_cross_entropy(ti.post["fc10"], batch.labels)
        lt, gt = softmax_cross_entropy(tt.post["fc10"], batch.labels)
        sem = li + lt
        grad_img["fc10"] = w_sem * gi
        grad_txt["fc10"] = w_sem * gt
    if w_pair > 0:
        pair, gpi, gpt = L.pairwise_loss(ti, tt)
        for k in gpi:
            grad_img[k] = w_pair * gpi[k]
            grad_txt[k] = w_pair * gpt[k]
    return _DomainPass(ti, tt, sem, pair, grad_img, grad_txt)


def _add(dst: dict, key: str, g: np.ndarray) -> None:
    dst[key] = g if key not in dst else dst[key] + g


def _apply(net: DomainNetwork, grads: dict[str, LayerGrads], sgd: SgdConfig) -> None:
    zero = {n: LayerGrads(np.zeros_like(l.weights), np.zeros_like(l.bias))
            for n, l in zip(LAYER_NAMES, net.layers())}
    zero.update(grads)
    sgd_step(net.layers(), [zero[n] for n in LAYER_NAMES], sgd)


@dataclass
class DcktModel:
    source: DomainNetwork
    target: DomainNetwork
    weights: LossWeights = field(default_factory=LossWeights)
    mmd_cfg: MmdConfig = field(default_factory=MmdConfig)
    seed: int = 0

    def __post_init__(self):
        if self.source.dims != self.target.dims:
            raise ValueError(f"domain input dims differ: {self.source.dims} vs {self.target.dims}")
        for a, b in zip(self.source.layers()[:-1], self.target.layers()[:-1]):
            if a.weights.shape != b.weights.shape:
                raise ValueError("source and target hidden layer shapes differ")
        if self.source.classifier_fc10.in_dim != self.target.classifier_fc10.in_dim:
            raise ValueError("classifier input widths differ")

    def network(self, domain: str) -> DomainNetwork:
        if domain == "source":
            return self.source
        if domain == "target":
            return self.target
        raise ValueError(f"unknown domain {domain!r}")


def build_model(d_img: int, d_txt: int, src_classes: int, tgt_classes: int, hidden: int = 128,
                weights: LossWeights | None = None, mmd_cfg: MmdConfig | None = None,
                seed: int = 0, shared_init: bool = True) -> DcktModel:
    """Fresh model. With ``shared_init`` the target hidden layers start as copies of
    the source ones, so layer-wise MMD compares like-for-like units."""
    rng = np.random.default_rng([seed, 1])
    src = init_domain_network(d_img, d_txt, src_classes, hidden, rng)
    tgt = init_domain_network(d_img, d_txt, tgt_classes, hidden, rng)
    if shared_init:
        tgt = DomainNetwork(*(layer.copy() for layer in src.layers()[:-1]), tgt.classifier_fc10)
    return DcktModel(src, tgt, weights or LossWeights(), mmd_cfg or MmdConfig(), seed)


def joint_objective(model: DcktModel, batch_src: PairedBatch, batch_tgt: PairedBatch):
    """All seven losses and the parameter gradients of their weighted total.

    Terms whose weight is zero are skipped and reported as 0.
    Returns ``(LossBreakdown, grads_src, grads_tgt)``.
    """
    w = model.weights
    _check_batch(model.source, batch_src, 2)
    _check_batch(model.target, batch_tgt, 2)
    s = _domain_pass(model.source, batch_src, w.sem_src, w.pair_src)
    t = _domain_pass(model.target, batch_tgt, w.sem_tgt, w.pair_tgt)
    terms = dict.fromkeys(L.TERMS, 0.0)
    terms.update(sem_src=s.sem, pair_src=s.pair, sem_tgt=t.sem, pair_tgt=t.pair)

    for term, src_trace, tgt_trace, src_seed, tgt_seed in (
        ("mmd_image", s.img, t.img, s.grad_img, t.grad_img),
        ("mmd_text", s.txt, t.txt, s.grad_txt, t.grad_txt),
    ):
        wt = getattr(w, term)
        if wt > 0:
            terms[term], gs, gt = L.mmd_media_loss(src_trace, tgt_trace, model.mmd_cfg)
            for k in gs:
                _add(src_seed, k, wt * gs[k])
                _add(tgt_seed, k, wt * gt[k])
    if w.mmd_corr > 0:
        terms["mmd_corr"], gs, gt = L.mmd_corr_loss((s.img, s.txt), (t.img, t.txt), model.mmd_cfg)
        for seeds, parts in (((s.grad_img, s.grad_txt), gs), ((t.grad_img, t.grad_txt), gt)):
            for seed, part in zip(seeds, parts):
                for k, g in part.items():
                    _add(seed, k, w.mmd_corr * g)

    breakdown = L.combine(terms, w)
    grads_src: dict[str, LayerGrads] = {}
    grads_tgt: dict[str, LayerGrads] = {}
    backward_trace(model.source, s.img, s.grad_img, grads_src)
    backward_trace(model.source, s.txt, s.grad_txt, grads_src)
    backward_trace(model.target, t.img, t.grad_img, grads_tgt)
    backward_trace(model.target, t.txt, t.grad_txt, grads_tgt)
    return breakdown, grads_src, grads_tgt


def joint_step(model: DcktModel, batch_src: PairedBatch, batch_tgt: PairedBatch, sgd: SgdConfig) -> LossBreakdown:
    """One SGD update of both domain networks; returns the pre-update losses."""
    breakdown, grads_src, grads_tgt = joint_objective(model, batch_src, batch_tgt)
    _apply(model.source, grads_src, sgd)
    _apply(model.target, grads_tgt, sgd)
    return breakdown


def domain_objective(net: DomainNetwork, batch: PairedBatch, weights: LossWeights, domain: str = "source"):
    """Semantic and pairwise losses of a single domain; MMD weights are ignored."""
    _check_batch(net, batch, 1)
    w_sem, w_pair = (weights.sem_src, weights.pair_src) if domain == "source" else (weights.sem_tgt, weights.pair_tgt)
    p = _domain_pass(net, batch, w_sem, w_pair)
    grads: dict[str, LayerGrads] = {}
    backward_trace(net, p.img, p.grad_img, grads)
    backward_trace(net, p.txt, p.grad_txt, grads)
    return p.sem, p.pair, grads


def domain_step(net: DomainNetwork, batch: PairedBatch, weights: LossWeights, sgd: SgdConfig,
                domain: str = "source") -> tuple[float, float]:
    sem, pair, grads = domain_objective(net, batch, weights, domain)
    _apply(net, grads, sgd)
    return sem, pair


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    """Shuffled index batches covering ``range(n)`` once; a trailing batch smaller
    than ``min_size`` is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def pretrain_domain(net: DomainNetwork, data, epochs: int, weights: LossWeights, sgd: SgdConfig,
                    batch_size: int = 32, domain: str = "source", rng: np.random.Generator | None = None):
    """Train one domain alone with its semantic and pairwise losses.

    ``data`` is anything with ``img``, ``txt`` and ``labels`` arrays. Returns a
    list of per-epoch ``(mean semantic, mean pairwise)`` losses.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(data.labels) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(sgd.seed)
    history = []
    for _ in range(epochs):
        sems, pairs = [], []
        for idx in iterate_batches(len(data.labels), batch_size, rng):
            batch = PairedBatch(data.img[idx], data.txt[idx], data.labels[idx])
            sem, pair = domain_step(net, batch, weights, sgd, domain)
            sems.append(sem)
            pairs.append(pair)
        history.append((float(np.mean(sems)), float(np.mean(pairs))))
    return history


# -- checkpoints -----------------------------------------------------------

_MAGIC = "#xmt-checkpoint v1"


def save_checkpoint(model: DcktModel, path) -> None:
    """Line-based checkpoint; floats are written with ``repr`` so reading is bit-exact."""
    lines = [_MAGIC, f"seed = {model.seed}"]
    lines.append("weights = " + ",".join(f"{k}:{v!r}" for k, v in model.weights.as_dict().items()))
    c = model.mmd_cfg
    lines.append(f"mmd = {c.num_kernels},{c.multiplier!r},{'median' if c.bandwidth is None else repr(c.bandwidth)}")
    count = 0
    for domain in ("source", "target"):
        net = model.network(domain)
        for name, layer in zip(LAYER_NAMES, net.layers()):
            lines.append(f"layer {domain}.{name} {layer.activation} {layer.out_dim} {layer.in_dim}")
            lines.append(",".join(map(repr, layer.weights.ravel().tolist())))
            lines.append(",".join(map(repr, layer.bias.tolist())))
            count += 1
    lines.append(f"#end {count}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> DcktModel:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    try:
        return _parse_checkpoint(lines)
    except (ValueError, IndexError, KeyError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc


def _parse_checkpoint(lines: list[str]) -> DcktModel:
    if lines[0] != _MAGIC:
        raise ValueError("bad header")
    seed = int(lines[1].split("=", 1)[1])
    weights = LossWeights(**{k: float(v) for k, v in
                             (item.split(":") for item in lines[2].split("=", 1)[1].strip().split(","))})
    nk, mult, bw = lines[3].split("=", 1)[1].strip().split(",")
    mmd_cfg = MmdConfig(int(nk), float(mult), None if bw == "median" else float(bw))
    layers: dict[str, dict[str, DenseLayer]] = {"source": {}, "target": {}}
    i = 4
    while not lines[i].startswith("#end"):
        tag, qualified, act, out_dim, in_dim = lines[i].split(" ")
        if tag != "layer":
            raise ValueError(f"unexpected line {i + 1}")
        domain, name = qualified.split(".")
        out_dim, in_dim = int(out_dim), int(in_dim)
        w = np.array([float(v) for v in lines[i + 1].split(",")])
        b = np.array([float(v) for v in lines[i + 2].split(",")])
        if w.size != out_dim * in_dim or b.size != out_dim:
            raise ValueError(f"layer {qualified} has wrong parameter count")
        layers[domain][name] = DenseLayer(w.reshape(out_dim, in_dim), b, act)
        i += 3
    if int(lines[i].split()[1]) != sum(len(v) for v in layers.values()):
        raise ValueError("layer count mismatch")
    nets = [DomainNetwork(**{n: layers[d][n] for n in LAYER_NAMES}) for d in ("source", "target")]
    return DcktModel(nets[0], nets[1], weights, mmd_cfg, seed)
