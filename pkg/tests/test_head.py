"""Classifier head: forward/backward, quality wiring, fusion, checkpoints."""

import numpy as np
import numpy.testing as npt
import pytest

from marginlab import margins, quality
from marginlab.head import BatchForward, MarginHead, StaleForwardError, fuse_features
from marginlab.margins import (
    ADAFACE,
    ARCFACE,
    COSFACE,
    CURRICULARFACE,
    SOFTMAX,
    VARIANTS,
    CosineBatch,
    MarginSpec,
)


def make_head(variant=ADAFACE, proxy=quality.FEATURE_NORM, d=16, c=10, seed=0, **kw):
    return MarginHead(d, c, MarginSpec(variant, **kw), proxy=proxy, seed=seed)


def random_inputs(rng, n=8, d=16, c=10, scale_spread=True):
    z = rng.normal(size=(n, d))
    if scale_spread:
        z *= rng.uniform(0.5, 3.0, size=(n, 1))
    labels = rng.integers(0, c, size=n)
    return z, labels


def fd_head_grads(head, z, labels, z_hat, step=1e-5):
    """Vectorized central differences of the frozen-quality mean loss."""
    n, d = z.shape
    dc = head.W.shape[1]

    def mean_losses(stack_z, W=None):
        per = head.loss_given_quality(stack_z, labels, z_hat, W=W)
        return per.reshape(-1, n).mean(axis=1)

    eye = np.eye(n * d).reshape(n * d, n, d) * step
    plus = mean_losses(z[None] + eye)
    minus = mean_losses(z[None] - eye)
    fd_z = ((plus - minus) / (2 * step)).reshape(n, d)

    fd_w = np.zeros_like(head.W)
    base_w = head.W
    for i in range(base_w.shape[0]):
        for j in range(dc):
            wp, wm = base_w.copy(), base_w.copy()
            wp[i, j] += step
            wm[i, j] -= step
            lp = head.loss_given_quality(z, labels, z_hat, W=wp).mean()
            lm = head.loss_given_quality(z, labels, z_hat, W=wm).mean()
            fd_w[i, j] = (lp - lm) / (2 * step)
    return fd_w, fd_z


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1.0)
    return np.max(np.abs(a - b)) / denom


# ---------------------------------------------------------------------------
# forward


def test_forward_matches_manual_composition():
    rng = np.random.default_rng(0)
    head = make_head(ADAFACE)
    z, labels = random_inputs(rng)
    fwd = head.forward(z, labels, training=True)

    norms = np.linalg.norm(z, axis=1)
    cos = (z / norms[:, None]) @ (head.W / np.linalg.norm(head.W, axis=0))
    batch = CosineBatch(np.clip(cos, -1, 1), labels)
    z_hat = quality.quality_indicator(head.stats, norms)
    loss = margins.ce_loss(head.spec, batch, z_hat)
    assert fwd.loss == pytest.approx(loss, abs=1e-15)
    npt.assert_array_equal(fwd.z_hat, z_hat)


def test_forward_rejects_zero_embedding():
    head = make_head()
    z = np.zeros((2, 16))
    with pytest.raises(ValueError, match="zero-norm"):
        head.forward(z, np.array([0, 1]))


def test_saturated_sample_loss_and_scale_vanish():
    head = make_head(COSFACE, d=4, c=3, m=0.35)
    head.W = np.eye(4)[:, :3]
    z = np.array([[5.0, 0.0, 0.0, 0.0]])
    head.stats = quality.update_stats(head.stats, [5.0])
    fwd = head.forward(z, np.array([0]), training=False)
    assert fwd.loss < 1e-12
    assert np.max(np.abs(fwd.grad_scale.g)) < 1e-10


def test_eval_forward_is_deterministic_and_stat_preserving():
    rng = np.random.default_rng(1)
    head = make_head(ADAFACE)
    z, labels = random_inputs(rng)
    head.forward(z, labels, training=True)
    stats_before = head.stats
    t_before = head.spec.t
    a = head.forward(z, labels, training=False)
    b = head.forward(z, labels, training=False)
    assert head.stats == stats_before
    assert head.spec.t == t_before
    npt.assert_array_equal(a.logits, b.logits)
    npt.assert_array_equal(a.probs, b.probs)
    assert a.loss == b.loss


def test_adaface_head_with_forced_quality_matches_arcface_head():
    rng = np.random.default_rng(2)
    ada = make_head(ADAFACE, proxy=quality.EXTERNAL_QUALITY, m=0.4, seed=7)
    arc = make_head(ARCFACE, m=0.4, seed=7)
    z, labels = random_inputs(rng)
    # external quality 0 maps to z_hat = -1, the ArcFace reduction point
    fwd_ada = ada.forward(z, labels, training=False, sample_quality=np.zeros(8))
    arc.stats = quality.update_stats(arc.stats, np.linalg.norm(z, axis=1))
    fwd_arc = arc.forward(z, labels, training=False)
    npt.assert_array_equal(fwd_ada.logits, fwd_arc.logits)
    assert fwd_ada.loss == fwd_arc.loss


def test_ground_truth_prob_proxy_wiring():
    rng = np.random.default_rng(3)
    head = make_head(ADAFACE, proxy=quality.GROUND_TRUTH_PROB)
    z, labels = random_inputs(rng)
    fwd = head.forward(z, labels, training=True)
    plain = margins.softmax_probs(head.spec.s * fwd.cos_theta)
    expect = 2.0 * plain[np.arange(8), labels] - 1.0
    npt.assert_array_equal(fwd.z_hat, expect)


def test_external_proxy_requires_quality():
    head = make_head(ADAFACE, proxy=quality.EXTERNAL_QUALITY)
    with pytest.raises(ValueError):
        head.forward(np.ones((2, 16)), np.array([0, 1]))


# ---------------------------------------------------------------------------
# backward


@pytest.mark.parametrize("variant", VARIANTS)
def test_head_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(4)
    kw = {"m": 1.35} if variant == "sphereface" else {}
    head = make_head(variant, seed=3, **kw)
    checked = 0
    while checked < 3:
        z, labels = random_inputs(rng)
        fwd = head.forward(z, labels, training=True)
        if variant == CURRICULARFACE:
            rows = np.arange(8)
            pos = fwd.logits[rows, labels]
            gap = np.abs(pos[:, None] - fwd.cos_theta)
            gap[rows, labels] = np.inf
            if gap.min() < 1e-3:
                continue
        d_w, d_z = head.backward(fwd)
        fd_w, fd_z = fd_head_grads(head, z, labels, fwd.z_hat)
        assert rel_err(d_z, fd_z) < 1e-5
        assert rel_err(d_w, fd_w) < 1e-5
        checked += 1


def test_head_gradients_with_other_proxies():
    rng = np.random.default_rng(5)
    for proxy in (quality.GROUND_TRUTH_PROB, quality.EXTERNAL_QUALITY):
        head = make_head(ADAFACE, proxy=proxy, seed=11)
        z, labels = random_inputs(rng)
        q = rng.uniform(0, 1, size=8) if proxy == quality.EXTERNAL_QUALITY else None
        fwd = head.forward(z, labels, training=True, sample_quality=q)
        d_w, d_z = head.backward(fwd)
        fd_w, fd_z = fd_head_grads(head, z, labels, fwd.z_hat)
        assert rel_err(d_z, fd_z) < 1e-5
        assert rel_err(d_w, fd_w) < 1e-5


def test_backward_bit_identical_to_direct_ce_grad():
    rng = np.random.default_rng(6)
    head = make_head(ADAFACE)
    z, labels = random_inputs(rng)
    fwd = head.forward(z, labels, training=True)
    d_w, d_z = head.backward(fwd)
    # recompute z_hat externally and call the gradient op directly
    z_hat = quality.quality_indicator(head.stats, np.linalg.norm(z, axis=1))
    g = margins.ce_grad(
        head.spec,
        CosineBatch(fwd.cos_theta, labels),
        quality=z_hat,
        embeddings=z,
        weights=head.W,
    )
    npt.assert_array_equal(d_w, g.d_weights)
    npt.assert_array_equal(d_z, g.d_embeddings)


def test_backward_rejects_stale_forward():
    rng = np.random.default_rng(7)
    head = make_head(ADAFACE)
    z, labels = random_inputs(rng)
    fwd = head.forward(z, labels, training=True)
    head.apply_update(np.zeros_like(head.W))
    with pytest.raises(StaleForwardError):
        head.backward(fwd)


def test_backward_rejects_forward_from_other_head():
    rng = np.random.default_rng(8)
    a = make_head(ADAFACE)
    b = make_head(ADAFACE)
    z, labels = random_inputs(rng)
    fwd = a.forward(z, labels, training=True)
    with pytest.raises(StaleForwardError):
        b.backward(fwd)


def test_saturated_sample_gradient_below_1e10():
    head = make_head(SOFTMAX, d=4, c=3)
    head.W = np.eye(4)[:, :3]
    head.stats = quality.update_stats(head.stats, [5.0])
    z = np.array([[5.0, 0.0, 0.0, 0.0]])
    fwd = head.forward(z, np.array([0]), training=False)
    d_w, d_z = head.backward(fwd)
    assert np.max(np.abs(d_z)) < 1e-10
    assert np.max(np.abs(d_w)) < 1e-10


def test_small_step_descent_along_negative_gradient():
    rng = np.random.default_rng(9)
    for variant in (SOFTMAX, ARCFACE, ADAFACE):
        head = make_head(variant, seed=5)
        z, labels = random_inputs(rng)
        fwd = head.forward(z, labels, training=True)
        assert np.all(fwd.grad_scale.prob_term <= 0)
        d_w, d_z = head.backward(fwd)
        scale = 1e-4 / max(np.max(np.abs(d_w)), 1e-12)
        head.apply_update(-scale * d_w)
        after = head.forward(z, labels, training=False)
        assert after.loss < fwd.loss


# ---------------------------------------------------------------------------
# fusion


def test_fuse_single_feature_normalizes():
    v = np.array([[3.0, 4.0]])
    npt.assert_allclose(fuse_features(v, [5.0]), [0.6, 0.8], rtol=1e-15)


def test_fuse_identical_directions():
    v = np.array([[1.0, 0.0], [2.0, 0.0]])
    npt.assert_allclose(fuse_features(v, [10.0, 3.0]), [1.0, 0.0], rtol=1e-15)


def test_fuse_zero_weight_drops_member():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    npt.assert_allclose(fuse_features(v, [10.0, 0.0]), [1.0, 0.0], rtol=1e-15)


def test_fuse_output_unit_norm_and_scale_invariant():
    rng = np.random.default_rng(10)
    f = rng.normal(size=(6, 12))
    w = rng.uniform(0.5, 5.0, size=6)
    out = fuse_features(f, w)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    npt.assert_allclose(out, fuse_features(f, 7.3 * w), atol=1e-12)


def test_fuse_rejects_empty_and_zero_vectors():
    with pytest.raises(ValueError):
        fuse_features(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        fuse_features(np.zeros((1, 3)), [1.0])


# ---------------------------------------------------------------------------
# persistence


def test_checkpoint_round_trip_exact(tmp_path):
    rng = np.random.default_rng(11)
    head = make_head(ADAFACE, seed=13)
    z, labels = random_inputs(rng)
    head.forward(z, labels, training=True)
    path = tmp_path / "head.npz"
    head.save(path)
    back = MarginHead.load(path)
    npt.assert_array_equal(back.W, head.W)
    assert back.stats == head.stats
    assert back.spec == head.spec
    assert back.proxy == head.proxy
    # the restored head computes identical numbers
    a = head.forward(z, labels, training=False)
    b = back.forward(z, labels, training=False)
    npt.assert_array_equal(a.logits, b.logits)


def test_load_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, format=np.array("margin-head-v999"), W=np.eye(3))
    with pytest.raises(ValueError, match="format"):
        MarginHead.load(path)
