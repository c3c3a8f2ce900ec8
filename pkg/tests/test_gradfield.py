"""Gradient-scale field grids and their CSV export."""

import numpy as np
import numpy.testing as npt
import pytest

from marginlab import margins
from marginlab.gradfield import (
    compute_field,
    default_quality_axis,
    default_theta_axis,
    export_field,
    parse_field,
)
from marginlab.margins import ADAFACE, ARCFACE, COSFACE, MarginSpec


def small_field(spec, nt=9, nq=5):
    theta = np.linspace(0.2, np.pi - 0.2, nt)
    qual = np.linspace(-1, 1, nq)
    return compute_field(spec, theta, qual)


def test_default_axes_shapes():
    field = compute_field(MarginSpec(ARCFACE, m=0.5))
    assert field.theta.size == default_theta_axis().size == 181
    assert field.quality.size == default_quality_axis().size == 41
    assert field.values.shape == (181, 41)
    assert np.all(np.isfinite(field.values))


def test_cosface_field_constant_along_quality():
    field = small_field(MarginSpec(COSFACE, m=0.35))
    npt.assert_array_equal(field.values, field.values[:, :1].repeat(5, axis=1))


def test_adaface_row_at_quality_minus_one_equals_arcface():
    qual = np.array([-1.0, 0.0, 1.0])
    theta = np.linspace(0.2, np.pi - 0.2, 25)
    ada = compute_field(MarginSpec(ADAFACE, m=0.4), theta, qual)
    arc = compute_field(MarginSpec(ARCFACE, m=0.4), theta, qual)
    npt.assert_allclose(ada.values[:, 0], arc.values[:, 0], atol=1e-12)


def test_field_matches_finite_difference_g():
    rng = np.random.default_rng(0)
    spec = MarginSpec(ADAFACE, m=0.4)
    field = small_field(spec, nt=21, nq=9)
    step = 1e-6
    for _ in range(20):
        i = rng.integers(0, field.theta.size)
        k = rng.integers(0, field.quality.size)
        th, q = field.theta[i], field.quality[k]
        c = np.cos(th)
        cn = np.cos(np.pi - th)

        def pos_logit(cv):
            return float(margins.margin_logit(spec, cv, q))

        # probability under the two-class surrogate
        logits = np.array([pos_logit(c), spec.s * cn])
        p = margins.softmax_probs(logits)[0]
        fd_deriv = (pos_logit(c + step) - pos_logit(c - step)) / (2 * step)
        expected = abs((p - 1.0) * fd_deriv)
        assert field.values[i, k] == pytest.approx(expected, rel=1e-6, abs=1e-12)


def test_arcface_emphasis_decays_toward_hard_region():
    # positive angular margin: the derivative factor shrinks as theta grows
    spec = MarginSpec(ARCFACE, m=0.4)
    theta = np.linspace(0.3, np.pi - 0.3, 61)
    deriv = margins.angular_deriv(np.cos(theta), spec.m, spec.s)
    assert np.all(np.diff(np.abs(deriv)) < 0) or np.all(np.diff(deriv) < 0)


def test_adaface_high_quality_emphasizes_hard_samples():
    field = small_field(MarginSpec(ADAFACE, m=0.4), nt=31, nq=3)
    hard = field.theta > 2.2  # well past the boundary region
    assert np.all(field.values[hard, 2] > field.values[hard, 0])


def test_axis_validation():
    spec = MarginSpec(ARCFACE)
    with pytest.raises(ValueError):
        compute_field(spec, np.array([0.0, 1.0]), None)  # touches 0
    with pytest.raises(ValueError):
        compute_field(spec, np.array([1.0, 0.5]), None)  # not increasing
    with pytest.raises(ValueError):
        compute_field(spec, None, np.array([-2.0, 0.0]))


def test_export_cardinality_and_determinism(tmp_path):
    field = small_field(MarginSpec(ADAFACE, m=0.4), nt=3, nq=3)
    p1 = export_field(field, tmp_path / "a.csv")
    p2 = export_field(field, tmp_path / "b.csv")
    body = p1.read_text()
    data_rows = [
        ln for ln in body.splitlines() if ln and not ln.startswith(("#", "theta,"))
    ]
    assert len(data_rows) == 9
    assert body == p2.read_text()


def test_export_round_trip_full_precision(tmp_path):
    field = small_field(MarginSpec(ADAFACE, m=0.4), nt=7, nq=5)
    path = export_field(field, tmp_path / "field.csv")
    theta, qual, values = parse_field(path)
    npt.assert_array_equal(theta, field.theta)
    npt.assert_array_equal(qual, field.quality)
    npt.assert_array_equal(values, field.values)
