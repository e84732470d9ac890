"""Bidirectional cross-media retrieval scored by mean average precision.

Every query ranks the whole gallery of the other media type by cosine
distance; no top-k truncation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import IMAGE, TEXT, embed


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - np.dot(a, b) / (na * nb), 0.0, 2.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance is undefined for a zero vector")
    return x / norms


def distance_matrix(queries, gallery) -> np.ndarray:
    return 1.0 - _unit_rows(queries) @ _unit_rows(gallery).T


def rank_gallery(query, gallery) -> np.ndarray:
    """Gallery indices by ascending cosine distance; ties keep the original order."""
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    d = distance_matrix(np.atleast_2d(query), gallery)[0]
    return np.argsort(d, kind="stable")


def average_precision(ranked_relevance, num_relevant: int | None = None) -> float:
    """AP of one ranked list: ``(1/R) * sum_k precision@k * rel_k``; 0 when nothing is relevant.

    The sum is correctly rounded (``math.fsum``), so the result does not depend
    on summation order.
    """
    rel = np.asarray(ranked_relevance, dtype=bool)
    if rel.size == 0:
        raise ValueError("ranked list is empty")
    r = int(rel.sum())
    if num_relevant is not None and num_relevant != r:
        raise ValueError(f"num_relevant={num_relevant} but the list holds {r} relevant items")
    if r == 0:
        return 0.0
    hits = np.cumsum(rel)
    k = np.arange(1, rel.size + 1)
    return math.fsum((hits / k)[rel].tolist()) / r


def query_aps(queries, gallery, query_labels, gallery_labels) -> np.ndarray:
    """AP of every query row against the full gallery."""
    d = distance_matrix(queries, gallery)
    order = np.argsort(d, axis=1, kind="stable")
    rel = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    return np.array([average_precision(row) for row in rel])


@dataclass
class RetrievalReport:
    map_img_to_txt: float
    map_txt_to_img: float
    map_average: float
    ap_img_to_txt: np.ndarray
    ap_txt_to_img: np.ndarray

    def to_text(self, directions: str = "both") -> str:
        """Flat ``key = value`` record; ``directions`` is ``both``, ``i2t`` or ``t2i``."""
        directions = directions.lower()
        if directions not in ("both", "i2t", "t2i"):
            raise ValueError(f"unknown direction filter {directions!r}")
        rows = []
        if directions in ("both", "i2t"):
            rows.append(("map_img_to_txt", self.map_img_to_txt))
        if directions in ("both", "t2i"):
            rows.append(("map_txt_to_img", self.map_txt_to_img))
        if directions == "both":
            rows.append(("map_average", self.map_average))
        rows.append(("num_queries", len(self.ap_img_to_txt)))
        return "".join(f"{k} = {v!r}\n" for k, v in rows)

    def per_query_table(self) -> str:
        lines = ["ap_img_to_txt\tap_txt_to_img"]
        lines += [f"{a!r}\t{b!r}" for a, b in zip(self.ap_img_to_txt.tolist(), self.ap_txt_to_img.tolist())]
        return "\n".join(lines) + "\n"


def report_from_embeddings(img_emb, txt_emb, labels) -> RetrievalReport:
    labels = np.asarray(labels)
    i2t = query_aps(img_emb, txt_emb, labels, labels)
    t2i = query_aps(txt_emb, img_emb, labels, labels)
    a, b = float(np.mean(i2t)), float(np.mean(t2i))
    return RetrievalReport(a, b, (a + b) / 2.0, i2t, t2i)


def evaluate(model, test_set, domain: str = "target") -> RetrievalReport:
    """Embed the test pairs with one domain network and score both retrieval directions.

    Labels are only used to judge relevance.
    """
    if len(test_set.labels) == 0:
        raise ValueError("test set is empty")
    net = model.network(domain)
    return report_from_embeddings(embed(net, IMAGE, test_set.img), embed(net, TEXT, test_set.txt),
                                  test_set.labels)
