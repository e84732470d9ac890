"""Independent reference computations used by the tests.

Nothing here calls into the vectorised paths it is used to check.
"""
import math
from fractions import Fraction

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """max |a - n| / max(max|a|, max|n|): relative error of the whole gradient array."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


def brute_ap(relevance):
    """Average precision by literal summation over rank positions.

    Each precision term is the float ``Rk / k``; the terms are added exactly as
    fractions and rounded once, which is the correctly rounded sum.
    """
    R = sum(1 for r in relevance if r)
    if R == 0:
        return 0.0
    total = Fraction(0)
    for k in range(1, len(relevance) + 1):
        if relevance[k - 1]:
            Rk = sum(1 for r in relevance[:k] if r)
            total += Fraction(Rk / k)
    return float(total) / R


def brute_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return 1.0 - dot / (na * nb)


def brute_retrieval(img_emb, txt_emb, labels):
    """Per-query AP lists for both directions with pure-Python ranking (stable by index)."""
    def direction(queries, gallery):
        aps = []
        for q, yq in zip(queries, labels):
            dists = [(brute_cosine(q, g), j) for j, g in enumerate(gallery)]
            dists.sort()
            aps.append(brute_ap([labels[j] == yq for _, j in dists]))
        return aps
    return direction(img_emb, txt_emb), direction(txt_emb, img_emb)


def brute_mmd(X, Y, sigmas):
    """Biased MMD^2 with double loops, averaged over the bandwidths."""
    def k(a, b, s):
        return math.exp(-sum((u - v) ** 2 for u, v in zip(a, b)) / (2 * s * s))
    vals = []
    for s in sigmas:
        xx = sum(k(a, b, s) for a in X for b in X) / len(X) ** 2
        yy = sum(k(a, b, s) for a in Y for b in Y) / len(Y) ** 2
        xy = sum(k(a, b, s) for a in X for b in Y) / (len(X) * len(Y))
        vals.append(xx + yy - 2 * xy)
    return sum(vals) / len(vals)


def _batched_forward(params, domain, media, x):
    """Forward ``x`` through P stacked parameter sets; returns fc6..fc10 outputs, each (P, n, width)."""
    prefix = {"image": "img", "text": "txt"}[media]
    names = (f"{prefix}_fc6", f"{prefix}_fc7", "shared_fc8", "shared_fc9", "classifier_fc10")
    P = params[(domain, names[0])][0].shape[0]
    h = np.broadcast_to(x, (P,) + x.shape)
    outs = []
    for name in names:
        W, b = params[(domain, name)]
        h = np.einsum("pni,poi->pno", h, W) + b[:, None, :]
        if name != "classifier_fc10":
            h = np.maximum(h, 0.0)
        outs.append(h)
    return dict(zip(("fc6", "fc7", "fc8", "fc9", "fc10"), outs))


def _batched_ce(logits, labels):
    z = logits - logits.max(axis=2, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
    return -logp[:, np.arange(len(labels)), labels].mean(axis=1)


def _batched_mmd(X, Y, sigmas):
    def k(a, b):
        d2 = ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(axis=3)
        return np.mean([np.exp(-d2 / (2 * s * s)) for s in sigmas], axis=0).mean(axis=(1, 2))
    return k(X, X) + k(Y, Y) - 2 * k(X, Y)


def batched_joint_total(params, batch_src, batch_tgt, weights, sigmas):
    """Weighted seven-term objective for P parameter sets at once.

    ``params`` maps (domain, layer name) to stacked (W, b) arrays with a leading
    P axis; batches are (img, txt, labels); ``weights`` is a dict of term weights.
    """
    out = {}
    for domain, (img, txt, y) in (("source", batch_src), ("target", batch_tgt)):
        a = _batched_forward(params, domain, "image", img)
        t = _batched_forward(params, domain, "text", txt)
        out[domain] = (a, t)
        tag = "src" if domain == "source" else "tgt"
        sem = _batched_ce(a["fc10"], y) + _batched_ce(t["fc10"], y)
        pair = sum(((a[k] - t[k]) ** 2).sum(axis=(1, 2)) / len(y) for k in ("fc6", "fc7"))
        out[f"sem_{tag}"], out[f"pair_{tag}"] = sem, pair
    (si, st), (ti, tt) = out["source"], out["target"]
    out["mmd_image"] = sum(_batched_mmd(si[k], ti[k], sigmas) for k in ("fc6", "fc7"))
    out["mmd_text"] = sum(_batched_mmd(st[k], tt[k], sigmas) for k in ("fc6", "fc7"))
    out["mmd_corr"] = sum(_batched_mmd(np.concatenate([si[k], st[k]], axis=1),
                                       np.concatenate([ti[k], tt[k]], axis=1), sigmas) for k in ("fc8", "fc9"))
    return sum(w * out[term] for term, w in weights.items())


def batched_numeric_grad(f, theta, h=1e-5):
    """Central differences of ``f`` (which maps a (P, D) stack of parameter vectors to P values)."""
    D = len(theta)
    E = np.eye(D) * h
    vals = f(np.concatenate([theta + E, theta - E]))
    return (vals[:D] - vals[D:]) / (2 * h)


_LAYERS = ("img_fc6", "img_fc7", "txt_fc6", "txt_fc7", "shared_fc8", "shared_fc9", "classifier_fc10")


def flatten_params(m):
    """Source then target layers, each weights (row-major) then bias."""
    layers = m.source.layers() + m.target.layers()
    return np.concatenate([np.concatenate([l.weights.ravel(), l.bias]) for l in layers])


def stack_params(m, thetas):
    """Unflatten a (P, D) stack of parameter vectors into the oracle's layer dict."""
    params, at = {}, 0
    for domain in ("source", "target"):
        for name, layer in zip(_LAYERS, m.network(domain).layers()):
            o, i = layer.weights.shape
            W = thetas[:, at:at + o * i].reshape(-1, o, i)
            b = thetas[:, at + o * i:at + o * i + o]
            params[(domain, name)] = (W, b)
            at += o * i + o
    return params
