import numpy as np
import pytest

from oracles import batched_joint_total, batched_numeric_grad, flatten_params, rel_error, stack_params
from xmt.losses import LossWeights, MmdConfig
from xmt.model import (
    IMAGE,
    LAYER_NAMES,
    TEXT,
    PairedBatch,
    build_model,
    domain_step,
    embed,
    forward_item,
    joint_objective,
    joint_step,
    load_checkpoint,
    pretrain_domain,
    save_checkpoint,
)
from xmt.nn import SgdConfig


def _batch(rng, n, d_i, d_t, classes, shift=0.0):
    return PairedBatch(rng.normal(shift, size=(n, d_i)), rng.normal(shift, size=(n, d_t)),
                       rng.integers(0, classes, size=n))


def _params(net):
    return [np.concatenate([l.weights.ravel(), l.bias]) for l in net.layers()]


def test_forward_item_shapes_and_probabilities():
    m = build_model(5, 3, 4, 2, hidden=6)
    tr = forward_item(m.source, IMAGE, np.ones((7, 5)))
    assert [tr.post[k].shape for k in ("fc6", "fc9", "fc10")] == [(7, 6), (7, 6), (7, 4)]
    assert np.allclose(tr.prob.sum(axis=1), 1.0)
    assert embed(m.target, TEXT, np.zeros((2, 3))).shape == (2, 2)


def test_forward_item_rejects_wrong_width_and_media():
    m = build_model(5, 3, 4, 2, hidden=6)
    with pytest.raises(ValueError):
        forward_item(m.source, IMAGE, np.ones((2, 3)))
    with pytest.raises(ValueError):
        forward_item(m.source, "audio", np.ones((2, 5)))


def test_pathways_are_independent():
    # Changing a text-pathway weight leaves image outputs untouched.
    m = build_model(5, 3, 4, 2, hidden=6)
    x = np.random.default_rng(0).normal(size=(3, 5))
    before = embed(m.source, IMAGE, x)
    m.source.txt_fc6.weights += 1.0
    assert np.array_equal(embed(m.source, IMAGE, x), before)


def test_domains_share_no_parameter_storage():
    m = build_model(5, 3, 4, 2, hidden=6)
    for a, b in zip(m.source.layers(), m.target.layers()):
        assert not np.shares_memory(a.weights, b.weights)
    m.source.img_fc6.weights[0, 0] += 1.0
    assert m.source.img_fc6.weights[0, 0] != m.target.img_fc6.weights[0, 0]


def test_zero_weights_leave_parameters_unchanged():
    rng = np.random.default_rng(1)
    m = build_model(5, 3, 4, 2, hidden=6, weights=LossWeights(*([0.0] * 7)))
    before = _params(m.source) + _params(m.target)
    out = joint_step(m, _batch(rng, 4, 5, 3, 4), _batch(rng, 4, 5, 3, 2), SgdConfig(0.01, 0.0))
    assert out.total == 0.0
    after = _params(m.source) + _params(m.target)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_without_mmd_the_source_ignores_the_target_batch():
    rng = np.random.default_rng(2)
    w = LossWeights(mmd_image=0.0, mmd_text=0.0, mmd_corr=0.0)
    bs = _batch(rng, 4, 5, 3, 4)
    a, b = build_model(5, 3, 4, 2, hidden=6, weights=w), build_model(5, 3, 4, 2, hidden=6, weights=w)
    joint_step(a, bs, _batch(rng, 4, 5, 3, 2), SgdConfig())
    joint_step(b, bs, _batch(rng, 4, 5, 3, 2, shift=3.0), SgdConfig())
    assert all(np.array_equal(x, y) for x, y in zip(_params(a.source), _params(b.source)))


def test_joint_step_matches_domain_step_without_coupling():
    rng = np.random.default_rng(3)
    w = LossWeights(mmd_image=0.0, mmd_text=0.0, mmd_corr=0.0, pair_src=0.0, pair_tgt=0.0)
    a = build_model(5, 3, 4, 2, hidden=6, weights=w)
    b = build_model(5, 3, 4, 2, hidden=6, weights=w)
    bs, bt = _batch(rng, 4, 5, 3, 4), _batch(rng, 4, 5, 3, 2)
    joint_step(a, bs, bt, SgdConfig())
    domain_step(b.source, bs, w, SgdConfig(), "source")
    domain_step(b.target, bt, w, SgdConfig(), "target")
    for x, y in zip(_params(a.source) + _params(a.target), _params(b.source) + _params(b.target)):
        assert np.array_equal(x, y)


def test_joint_step_requires_two_pairs():
    rng = np.random.default_rng(4)
    m = build_model(5, 3, 4, 2, hidden=6)
    with pytest.raises(ValueError):
        joint_step(m, _batch(rng, 1, 5, 3, 4), _batch(rng, 4, 5, 3, 2), SgdConfig())


def test_loss_decreases_on_a_fixed_batch():
    rng = np.random.default_rng(5)
    m = build_model(8, 6, 4, 2, hidden=16, seed=5)
    bs, bt = _batch(rng, 16, 8, 6, 4), _batch(rng, 16, 8, 6, 2, shift=0.5)
    totals = [joint_step(m, bs, bt, SgdConfig(0.01)).total for _ in range(201)]
    drops = sum(b <= a for a, b in zip(totals, totals[1:]))
    assert drops >= 0.95 * 200


def _total(m, bs, bt):
    return joint_objective(m, bs, bt)[0].total


@pytest.mark.parametrize("seed", range(100))
def test_joint_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = MmdConfig(bandwidth=float(rng.uniform(0.5, 3.0)))
    m = build_model(3, 2, 3, 2, hidden=8, seed=seed, shared_init=False, mmd_cfg=cfg)
    # Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
    for layer in m.source.layers() + m.target.layers():
        layer.bias += rng.normal(0, 0.1, size=layer.bias.shape)
    bs, bt = _batch(rng, 2, 3, 2, 3), _batch(rng, 2, 3, 2, 2, shift=0.5)
    breakdown, gs, gt = joint_objective(m, bs, bt)
    analytic = np.concatenate([np.concatenate([g[n].weights.ravel(), g[n].bias])
                               for g in (gs, gt) for n in LAYER_NAMES])
    theta = flatten_params(m)
    w, sigmas = m.weights.as_dict(), cfg.ladder(cfg.bandwidth)
    f = lambda th: batched_joint_total(stack_params(m, th), bs, bt, w, sigmas)  # noqa: E731
    assert f(theta[None])[0] == pytest.approx(breakdown.total, rel=1e-12)
    # A 1e-5 step can straddle a pre-activation within 1e-5 of the ReLU corner.
    assert rel_error(analytic, batched_numeric_grad(f, theta, h=1e-6)) < 1e-3


def _separable(seed, n=200, classes=4):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    protos_i, protos_t = rng.normal(size=(classes, 6)) * 3, rng.normal(size=(classes, 4)) * 3
    return PairedBatch(protos_i[labels] + rng.normal(size=(n, 6)) * 0.5,
                       protos_t[labels] + rng.normal(size=(n, 4)) * 0.5, labels)


def test_pretrain_reaches_high_training_accuracy():
    data = _separable(0)
    m = build_model(6, 4, 4, 4, hidden=16)
    hist = pretrain_domain(m.source, data, 30, m.weights, SgdConfig(0.05), batch_size=16)
    assert len(hist) == 30 and hist[-1][0] < hist[0][0]
    for media, x in ((IMAGE, data.img), (TEXT, data.txt)):
        assert np.mean(np.argmax(embed(m.source, media, x), axis=1) == data.labels) > 0.9


def test_pretrain_rejects_zero_epochs():
    m = build_model(6, 4, 4, 4, hidden=8)
    with pytest.raises(ValueError):
        pretrain_domain(m.source, _separable(1), 0, m.weights, SgdConfig())


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(6)
    m = build_model(5, 3, 4, 2, hidden=6, seed=9, mmd_cfg=MmdConfig(3, 1.5, 0.7),
                    weights=LossWeights(mmd_corr=0.123456789))
    joint_step(m, _batch(rng, 4, 5, 3, 4), _batch(rng, 4, 5, 3, 2), SgdConfig())
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.seed == 9 and back.weights == m.weights and back.mmd_cfg == m.mmd_cfg
    for x, y in zip(_params(m.source) + _params(m.target), _params(back.source) + _params(back.target)):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("mangle", [
    lambda t: t.replace("#xmt-checkpoint", "#other"),
    lambda t: t.rsplit("\n", 3)[0],
    lambda t: t.replace(",", ";", 40),
])
def test_corrupt_checkpoint_is_rejected(tmp_path, mangle):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(5, 3, 4, 2, hidden=6), path)
    path.write_text(mangle(path.read_text()))
    with pytest.raises(ValueError, match="corrupt checkpoint"):
        load_checkpoint(path)
