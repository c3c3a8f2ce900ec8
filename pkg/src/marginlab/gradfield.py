"""Gradient-scale fields over (angle, quality) grids.

For each grid point the ground-truth probability is computed under a
two-class surrogate: the ground-truth class sits at angle theta and a single
negative class at pi - theta.  That makes the field a pure function of
(theta, quality) and reproduces how each margin redistributes sample
emphasis.  Output tables are plain CSV, one row per grid point, theta-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import margins
from .margins import CosineBatch, MarginSpec

DEFAULT_THETA_POINTS = 181
DEFAULT_QUALITY_POINTS = 41


@dataclass(frozen=True)
class FieldGrid:
    theta: np.ndarray  # strictly increasing, inside (0, pi)
    quality: np.ndarray  # strictly increasing, inside [-1, 1]
    values: np.ndarray  # (len(theta), len(quality)) gradient-scale magnitudes
    spec: MarginSpec


def default_theta_axis(n: int = DEFAULT_THETA_POINTS) -> np.ndarray:
    return np.linspace(0.0, np.pi, n + 2)[1:-1]


def default_quality_axis(n: int = DEFAULT_QUALITY_POINTS) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


def compute_field(
    spec: MarginSpec,
    theta_axis=None,
    quality_axis=None,
    negative_angle_fn=None,
) -> FieldGrid:
    """Evaluate |g| for every (theta, quality) grid point.

    ``negative_angle_fn`` maps theta to the negative-class angle; the default
    mirrors the ground-truth angle at pi - theta.
    """
    theta = (
        default_theta_axis() if theta_axis is None else np.asarray(theta_axis, float)
    )
    qual = (
        default_quality_axis()
        if quality_axis is None
        else np.asarray(quality_axis, float)
    )
    if theta.ndim != 1 or np.any(np.diff(theta) <= 0):
        raise ValueError("theta axis must be 1-D and strictly increasing")
    if qual.ndim != 1 or np.any(np.diff(qual) <= 0):
        raise ValueError("quality axis must be 1-D and strictly increasing")
    if theta[0] <= 0 or theta[-1] >= np.pi:
        raise ValueError("theta axis must lie inside (0, pi)")
    if qual[0] < -1 or qual[-1] > 1:
        raise ValueError("quality axis must lie inside [-1, 1]")

    if negative_angle_fn is None:
        negative_angle_fn = lambda t: np.pi - t  # noqa: E731
    cos_pos = np.cos(theta)
    cos_neg = np.cos(negative_angle_fn(theta))
    nt = theta.size
    labels = np.zeros(nt, dtype=int)
    cos = np.column_stack([cos_pos, cos_neg])
    batch = CosineBatch(cos, labels)

    values = np.empty((nt, qual.size))
    for k, q in enumerate(qual):
        qv = np.full(nt, q) if spec.needs_quality else None
        logits = margins.batch_logits(spec, batch, qv)
        probs = margins.softmax_probs(logits)
        rep = margins.gradient_scale(spec, cos_pos, probs[:, 0], qv)
        values[:, k] = np.abs(rep.g)
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite values")
    return FieldGrid(theta=theta, quality=qual, values=values, spec=spec)


def export_field(field: FieldGrid, destination) -> Path:
    """Write the field as CSV: metadata comments, header, theta-major rows.

    Floats are written with shortest round-trip formatting, so re-exporting
    the same field is byte-identical and parsing recovers full precision.
    """
    path = Path(destination)
    spec = field.spec
    lines = [
        f"# variant={spec.variant} m={spec.m!r} s={spec.s!r} t={spec.t!r}",
        f"# theta_points={field.theta.size} quality_points={field.quality.size}",
        "theta,quality,grad_scale",
    ]
    for i, th in enumerate(field.theta):
        for k, q in enumerate(field.quality):
            lines.append(f"{float(th)!r},{float(q)!r},{float(field.values[i, k])!r}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def parse_field(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read back (theta, quality, values) from an exported table."""
    rows = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if not line or line.startswith("#") or line.startswith("theta,"):
            continue
        th, q, g = line.split(",")
        rows.append((float(th), float(q), float(g)))
    data = np.array(rows)
    theta = np.unique(data[:, 0])
    qual = np.unique(data[:, 1])
    values = data[:, 2].reshape(theta.size, qual.size)
    return theta, qual, values
