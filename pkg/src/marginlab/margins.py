"""Margin-based softmax losses over cosine logits.

Implements the classic margin family (softmax, SphereFace, CosFace, ArcFace,
CurricularFace) plus two norm-adaptive variants: a MagFace-style adaptive
angular margin and the quality-adaptive AdaFace margin.  Everything operates
on cosine similarities between unit-normalized embeddings and unit-normalized
class weights.  The module provides the modified logits, softmax
probabilities, the mean cross-entropy loss, hand-derived gradients (including
the unit-normalization Jacobian when raw embeddings/weights are supplied),
and the per-sample gradient scale induced by each margin.

All math is float64.  The quality indicator and the curricular progression
state ``t`` are constants under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SOFTMAX = "softmax"
SPHEREFACE = "sphereface"
COSFACE = "cosface"
ARCFACE = "arcface"
CURRICULARFACE = "curricularface"
ADAPTIVE_ANGULAR = "adaptive_angular"
ADAFACE = "adaface"

VARIANTS = (
    SOFTMAX,
    SPHEREFACE,
    COSFACE,
    ARCFACE,
    CURRICULARFACE,
    ADAPTIVE_ANGULAR,
    ADAFACE,
)

# Variants whose ground-truth logit depends on a per-sample quality scalar.
QUALITY_VARIANTS = (ADAPTIVE_ANGULAR, ADAFACE)

COS_TOL = 1e-9
# Clamp for the angular-derivative denominator sqrt(1 - cos^2): when
# 1 - cos^2 < SIN2_FLOOR the derivative would diverge at theta in {0, pi}.
SIN2_FLOOR = 1e-8
SIN_CLAMP = 1e-4

# Margin range for the adaptive angular (MagFace-style) variant: the clipped
# norm indicator in [-1, 1] maps linearly onto [low, high].
ADAPTIVE_M_LOW = 0.1
ADAPTIVE_M_HIGH = 0.8


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class MissingQualityError(ValueError):
    """A quality scalar is required for this variant but was not supplied."""


@dataclass
class MarginSpec:
    """Loss variant plus its hyperparameters.

    ``t`` is the curricular progression state and only meaningful for
    CurricularFace; ``curricular_update_t`` mutates it, so one spec instance
    must not be shared across concurrent training loops.
    """

    variant: str
    m: float = 0.4
    s: float = 64.0
    t: float = 0.0
    t_momentum: float = 0.99

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.s > 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if self.m < 0:
            raise ValueError(f"margin m must be nonnegative, got {self.m}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if not 0.0 < self.t_momentum < 1.0:
            raise ValueError(f"t_momentum must lie in (0, 1), got {self.t_momentum}")

    @property
    def needs_quality(self) -> bool:
        return self.variant in QUALITY_VARIANTS


@dataclass
class CosineBatch:
    """Cosine similarities (batch x classes) with ground-truth labels."""

    cos_theta: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.cos_theta = _check_cos(np.asarray(self.cos_theta, dtype=np.float64))
        self.labels = np.asarray(self.labels)
        if self.cos_theta.ndim != 2:
            raise ValueError("cos_theta must be 2-D (batch x classes)")
        if self.labels.shape != (self.cos_theta.shape[0],):
            raise ValueError("labels must be 1-D with one entry per row")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        c = self.cos_theta.shape[1]
        if np.any(self.labels < 0) or np.any(self.labels >= c):
            raise ValueError(f"labels must lie in [0, {c})")

    @property
    def size(self) -> int:
        return self.cos_theta.shape[0]

    @property
    def num_classes(self) -> int:
        return self.cos_theta.shape[1]

    def positive_cos(self) -> np.ndarray:
        return self.cos_theta[np.arange(self.size), self.labels]


@dataclass(frozen=True)
class GradScaleReport:
    """Per-sample gradient scale g for the ground-truth class.

    ``g == prob_term * deriv_term`` holds exactly; ``prob_term`` is the
    softmax residual (P_y - 1) and ``deriv_term`` the derivative of the
    margined logit with respect to cos(theta_y).
    """

    g: np.ndarray
    prob_term: np.ndarray
    deriv_term: np.ndarray


@dataclass(frozen=True)
class CeGrads:
    """Gradients of the mean cross-entropy loss.

    ``d_cos`` is always populated; ``d_embeddings`` / ``d_weights`` are
    filled only when raw embeddings and weights were supplied so the
    unit-normalization Jacobian can be expanded.
    """

    d_cos: np.ndarray
    d_embeddings: Optional[np.ndarray] = None
    d_weights: Optional[np.ndarray] = None


def _check_cos(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise DomainError("cosine values must be finite")
    if np.any(np.abs(c) > 1.0 + COS_TOL):
        raise DomainError("cosine values must lie in [-1, 1]")
    return np.clip(c, -1.0, 1.0)


def _check_quality(spec: MarginSpec, quality) -> Optional[np.ndarray]:
    if not spec.needs_quality:
        return None
    if quality is None:
        raise MissingQualityError(
            f"variant {spec.variant!r} requires a per-sample quality scalar"
        )
    q = np.asarray(quality, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise DomainError("quality values must be finite")
    if np.any(np.abs(q) > 1.0 + COS_TOL):
        raise DomainError("quality values must lie in [-1, 1]")
    return np.clip(q, -1.0, 1.0)


def _clamped_sin(c: np.ndarray) -> np.ndarray:
    """sqrt(1 - c^2) with the divergence clamp near |c| = 1."""
    s2 = 1.0 - c * c
    return np.where(s2 < SIN2_FLOOR, SIN_CLAMP, np.sqrt(np.maximum(s2, 0.0)))


def _shifted_cos(c: np.ndarray, delta) -> np.ndarray:
    """cos(theta + delta) expressed through cos(theta) = c."""
    return c * np.cos(delta) - np.sqrt(np.maximum(1.0 - c * c, 0.0)) * np.sin(delta)


def adaptive_margin(z_hat: np.ndarray) -> np.ndarray:
    """Monotone map from the clipped norm indicator in [-1, 1] to a margin."""
    z = np.asarray(z_hat, dtype=np.float64)
    return ADAPTIVE_M_LOW + 0.5 * (z + 1.0) * (ADAPTIVE_M_HIGH - ADAPTIVE_M_LOW)


def angular_deriv(cos_theta, m, s) -> np.ndarray:
    """Derivative of s*cos(theta + m) with respect to cos(theta).

    Equals s * (cos(m) + cos(theta) * sin(m) / sqrt(1 - cos(theta)^2)),
    with the denominator clamped near the poles.  ``m`` may be negative
    (AdaFace routes its quality-dependent angular term through here).
    """
    c = np.asarray(cos_theta, dtype=np.float64)
    return s * (np.cos(m) + c * np.sin(m) / _clamped_sin(c))


def margin_logit(spec: MarginSpec, cos_theta_y, quality=None):
    """Modified ground-truth logit f(theta_y) for one or many samples.

    ``quality`` is the clipped norm indicator in [-1, 1]; it is required for
    the adaptive variants and ignored otherwise.
    """
    c = _check_cos(cos_theta_y)
    q = _check_quality(spec, quality)
    v, s, m = spec.variant, spec.s, spec.m
    if v == SOFTMAX:
        return s * c
    if v == COSFACE:
        return s * (c - m)
    if v in (ARCFACE, CURRICULARFACE):
        return s * _shifted_cos(c, m)
    if v == SPHEREFACE:
        theta = np.arccos(c)
        if np.any(m * theta > np.pi + 1e-12):
            raise DomainError(
                "sphereface requires m * theta <= pi; reduce m or restrict angles"
            )
        return s * np.cos(m * theta)
    if v == ADAPTIVE_ANGULAR:
        return s * _shifted_cos(c, adaptive_margin(q))
    # adaface
    g_angle = -m * q
    g_add = m * q + m
    return s * (_shifted_cos(c, g_angle) - g_add)


def negative_logit(spec: MarginSpec, cos_theta_j, cos_theta_y_margined=None):
    """Logit for a negative class j != y.

    Plain s*cos(theta_j) except for CurricularFace, whose hard-sample branch
    replaces cos(theta_j) with cos(theta_j) * (t + cos(theta_j)) whenever the
    margined ground-truth logit falls below cos(theta_j).  The comparison is
    against the s-scaled margined logit, as the branch is written.
    """
    c = _check_cos(cos_theta_j)
    if spec.variant != CURRICULARFACE:
        return spec.s * c
    if cos_theta_y_margined is None:
        raise ValueError("curricularface needs the margined ground-truth logit")
    margined = np.asarray(cos_theta_y_margined, dtype=np.float64)
    hard = margined < c
    return spec.s * np.where(hard, c * (spec.t + c), c)


def batch_logits(spec: MarginSpec, batch: CosineBatch, quality=None) -> np.ndarray:
    """Full (batch x classes) modified-logit matrix."""
    cos = batch.cos_theta
    rows = np.arange(batch.size)
    pos = margin_logit(spec, batch.positive_cos(), quality)
    if spec.variant == CURRICULARFACE:
        hard = pos[:, None] < cos
        logits = spec.s * np.where(hard, cos * (spec.t + cos), cos)
    else:
        logits = spec.s * cos
    logits[rows, batch.labels] = pos
    return logits


def softmax_probs(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction; rejects non-finite input."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    squeeze = z.ndim == 1
    z = np.atleast_2d(z)
    ex = np.exp(z - z.max(axis=1, keepdims=True))
    p = ex / ex.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def _per_sample_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-log P_y per row, accurate even when P_y is within 1e-15 of 1.

    Saturated rows go through log1p of the competitor mass so that finite
    differences of the loss remain meaningful at full double precision.
    """
    rows = np.arange(logits.shape[0])
    mx = logits.max(axis=1)
    ex = np.exp(logits - mx[:, None])
    ex_y = ex[rows, labels]
    ex_others = ex.copy()
    ex_others[rows, labels] = 0.0
    competitor = ex_others.sum(axis=1)
    y_is_max = logits[rows, labels] == mx
    return np.where(
        y_is_max,
        np.log1p(competitor),
        np.log(competitor + ex_y) + mx - logits[rows, labels],
    )


def ce_loss(spec: MarginSpec, batch: CosineBatch, quality=None) -> float:
    """Mean cross-entropy of the margined softmax over the batch."""
    logits = batch_logits(spec, batch, quality)
    return float(_per_sample_losses(logits, batch.labels).mean())


def _logit_cos_derivs(
    spec: MarginSpec, batch: CosineBatch, quality, pos_logit: np.ndarray
) -> np.ndarray:
    """d logit_ij / d cos_ij, holding quality, t and branch choices fixed."""
    cos = batch.cos_theta
    rows = np.arange(batch.size)
    q = _check_quality(spec, quality)
    v, s, m = spec.variant, spec.s, spec.m
    if v == CURRICULARFACE:
        hard = pos_logit[:, None] < cos
        deriv = np.where(hard, s * (spec.t + 2.0 * cos), np.full_like(cos, s))
    else:
        deriv = np.full_like(cos, s)

    c_y = batch.positive_cos()
    if v in (SOFTMAX, COSFACE):
        pos_deriv = np.full_like(c_y, s)
    elif v in (ARCFACE, CURRICULARFACE):
        pos_deriv = angular_deriv(c_y, m, s)
    elif v == SPHEREFACE:
        theta = np.arccos(c_y)
        pos_deriv = s * m * np.sin(m * theta) / _clamped_sin(c_y)
    elif v == ADAPTIVE_ANGULAR:
        pos_deriv = angular_deriv(c_y, adaptive_margin(q), s)
    else:  # adaface; the additive term has zero derivative
        pos_deriv = angular_deriv(c_y, -m * q, s)
    deriv[rows, batch.labels] = pos_deriv
    return deriv


def ce_grad(
    spec: MarginSpec,
    batch: CosineBatch,
    quality=None,
    embeddings=None,
    weights=None,
) -> CeGrads:
    """Analytic gradients of ``ce_loss``.

    ``d_cos`` is the gradient with respect to the cosine matrix.  When raw
    ``embeddings`` (batch x d) and ``weights`` (d x classes) are supplied,
    the gradient is expanded through the unit-normalization of both, giving
    ``d_embeddings`` and ``d_weights``.  The quality scalar never receives
    gradient.
    """
    rows = np.arange(batch.size)
    logits = batch_logits(spec, batch, quality)
    probs = softmax_probs(logits)
    resid = probs.copy()
    resid[rows, batch.labels] -= 1.0
    pos_logit = logits[rows, batch.labels]
    deriv = _logit_cos_derivs(spec, batch, quality, pos_logit)
    scale = resid * deriv  # d loss_i / d cos_ij, before the batch mean
    d_cos = scale / batch.size

    d_z = d_w = None
    if embeddings is not None or weights is not None:
        if embeddings is None or weights is None:
            raise ValueError("embeddings and weights must be supplied together")
        z = np.asarray(embeddings, dtype=np.float64)
        w = np.asarray(weights, dtype=np.float64)
        z_norm = np.linalg.norm(z, axis=1)
        w_norm = np.linalg.norm(w, axis=0)
        if np.any(z_norm < 1e-12) or np.any(w_norm < 1e-12):
            raise DomainError("embeddings and weight columns must be nonzero")
        zu = z / z_norm[:, None]
        wu = w / w_norm[None, :]
        cos = zu @ wu
        if not np.allclose(cos, batch.cos_theta, atol=1e-8):
            raise DomainError("batch cosines do not match embeddings and weights")
        cos = batch.cos_theta
        # d cos_ij / d z_i = (w_u_j - cos_ij * z_u_i) / ||z_i||
        row_mix = (scale * cos).sum(axis=1)
        d_z = (scale @ wu.T - row_mix[:, None] * zu) / z_norm[:, None] / batch.size
        # d cos_ij / d W_j = (z_u_i - cos_ij * w_u_j) / ||W_j||
        col_mix = (scale * cos).sum(axis=0)
        d_w = (zu.T @ scale - wu * col_mix[None, :]) / w_norm[None, :] / batch.size
    return CeGrads(d_cos=d_cos, d_embeddings=d_z, d_weights=d_w)


def gradient_scale(
    spec: MarginSpec, cos_theta_y, p_y, quality=None
) -> GradScaleReport:
    """Closed-form gradient scale for the ground-truth class.

    Softmax and CosFace give (P_y - 1) * s independent of the angle; the
    angular variants pick up the cos(theta)-dependent derivative factor,
    which is what shifts sample emphasis with difficulty.
    """
    c = _check_cos(cos_theta_y)
    p = np.asarray(p_y, dtype=np.float64)
    if np.any(p < -COS_TOL) or np.any(p > 1.0 + COS_TOL):
        raise DomainError("probabilities must lie in [0, 1]")
    p = np.clip(p, 0.0, 1.0)
    q = _check_quality(spec, quality)
    v, s, m = spec.variant, spec.s, spec.m
    if v in (SOFTMAX, COSFACE):
        deriv = np.broadcast_to(np.float64(s), c.shape).copy()
    elif v in (ARCFACE, CURRICULARFACE):
        deriv = angular_deriv(c, m, s)
    elif v == SPHEREFACE:
        deriv = s * m * np.sin(m * np.arccos(c)) / _clamped_sin(c)
    elif v == ADAPTIVE_ANGULAR:
        deriv = angular_deriv(c, adaptive_margin(q), s)
    else:  # adaface
        deriv = angular_deriv(c, -m * q, s)
    prob_term = p - 1.0
    return GradScaleReport(g=prob_term * deriv, prob_term=prob_term, deriv_term=deriv)


def curricular_update_t(spec: MarginSpec, mean_positive_cos: float) -> float:
    """EMA update of the curricular progression state; returns the new t."""
    if spec.variant != CURRICULARFACE:
        raise ValueError("t updates only apply to curricularface")
    mean_cos = float(mean_positive_cos)
    if not np.isfinite(mean_cos):
        raise DomainError("mean positive cosine must be finite")
    new_t = spec.t_momentum * spec.t + (1.0 - spec.t_momentum) * mean_cos
    spec.t = float(np.clip(new_t, 0.0, 1.0))
    return spec.t
