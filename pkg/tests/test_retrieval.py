import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_ap, brute_retrieval
from xmt.retrieval import (
    RetrievalReport,
    average_precision,
    cosine_distance,
    rank_gallery,
    report_from_embeddings,
)


def test_cosine_distance_cases():
    assert cosine_distance([1.0, 2.0], [2.0, 4.0]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == 1.0
    assert cosine_distance([1.0, -1.0], [-2.0, 2.0]) == pytest.approx(2.0)


def test_cosine_distance_rejects_zero_vector():
    with pytest.raises(ValueError):
        cosine_distance([0.0, 0.0], [1.0, 0.0])


def test_rank_gallery_cases():
    assert rank_gallery([1.0, 0.0], [[0.3, 0.3]]).tolist() == [0]
    gallery = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    assert rank_gallery([1.0, 0.0], gallery)[0] == 2
    assert rank_gallery([0.2, 0.7], np.ones((5, 2))).tolist() == [0, 1, 2, 3, 4]


def test_rank_gallery_empty():
    with pytest.raises(ValueError):
        rank_gallery([1.0], np.zeros((0, 1)))


def test_average_precision_hand_example():
    assert average_precision([True, False, True, False], 2) == pytest.approx((1 + 2 / 3) / 2)


def test_average_precision_degenerate_lists():
    assert average_precision([True] * 5) == 1.0
    assert average_precision([False] * 5) == 0.0


def test_average_precision_inconsistent_count():
    with pytest.raises(ValueError):
        average_precision([True, False], 2)


def test_average_precision_exhaustive_against_oracle():
    for n in range(1, 13):
        for rel in itertools.product([False, True], repeat=n):
            assert average_precision(rel) == pytest.approx(brute_ap(rel), abs=1e-15)


@pytest.mark.parametrize("n", range(1, 11))
def test_reversed_perfect_ranking_is_the_minimum(n):
    for r in range(1, n + 1):
        best = [True] * r + [False] * (n - r)
        aps = [brute_ap(p) for p in set(itertools.permutations(best))]
        assert average_precision(best) == 1.0
        assert average_precision(best[::-1]) == pytest.approx(min(aps), abs=1e-15)


def test_report_perfect_separation():
    labels = np.array([0, 1, 2, 0, 1, 2])
    emb = np.eye(3)[labels] + 0.01
    rep = report_from_embeddings(emb, emb, labels)
    assert rep.map_img_to_txt == rep.map_txt_to_img == rep.map_average == 1.0


def test_report_single_label():
    rng = np.random.default_rng(0)
    rep = report_from_embeddings(rng.random((5, 3)), rng.random((5, 3)), np.zeros(5, dtype=int))
    assert rep.map_average == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_report_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=12)
    img, txt = rng.random((12, 4)), rng.random((12, 4))
    rep = report_from_embeddings(img, txt, labels)
    i2t, t2i = brute_retrieval(img.tolist(), txt.tolist(), labels.tolist())
    assert rep.ap_img_to_txt.tolist() == pytest.approx(i2t, abs=1e-15)
    assert rep.ap_txt_to_img.tolist() == pytest.approx(t2i, abs=1e-15)
    assert len(rep.ap_img_to_txt) == len(rep.ap_txt_to_img) == 12
    assert rep.map_average == pytest.approx((np.mean(i2t) + np.mean(t2i)) / 2, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=10)
    img, txt = rng.random((10, 4)), rng.random((10, 4))
    a = report_from_embeddings(img, txt, labels)
    b = report_from_embeddings(img * scale, txt * scale, labels)
    assert np.array_equal(a.ap_img_to_txt, b.ap_img_to_txt)
    assert np.array_equal(a.ap_txt_to_img, b.ap_txt_to_img)


def test_report_text_and_direction_filter():
    rep = RetrievalReport(0.5, 0.25, 0.375, np.array([0.5]), np.array([0.25]))
    both = rep.to_text()
    assert "map_img_to_txt = 0.5" in both and "map_average = 0.375" in both
    i2t = rep.to_text("i2t")
    assert "map_txt_to_img" not in i2t and "map_average" not in i2t
    assert rep.per_query_table().splitlines() == ["ap_img_to_txt\tap_txt_to_img", "0.5\t0.25"]
    with pytest.raises(ValueError):
        rep.to_text("sideways")
