"""Feature-norm statistics and the clipped quality indicator.

The indicator z_hat = clip((||z|| - mu) / (sigma / h), -1, 1) normalizes a
raw feature norm against running batch statistics.  mu and sigma are smoothed
with an exponential moving average across training steps so small batches do
not destabilize them.  z_hat never carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

FEATURE_NORM = "feature_norm"
GROUND_TRUTH_PROB = "ground_truth_prob"
EXTERNAL_QUALITY = "external_quality"
PROXIES = (FEATURE_NORM, GROUND_TRUTH_PROB, EXTERNAL_QUALITY)


class UninitializedStatsError(ValueError):
    """Norm statistics were queried before the first batch update."""


@dataclass(frozen=True)
class NormStats:
    """Running mean / standard deviation of batch feature norms.

    ``literal_ema`` flips the update so the current batch is weighted by
    alpha instead of the running value; the default weights history by alpha,
    which is the smoothing reading.  Single-writer state: concurrent reads
    are fine between updates.
    """

    mu: float = 0.0
    sigma: float = 0.0
    alpha: float = 0.99
    h: float = 0.33
    step_count: int = 0
    sigma_floor: float = 1e-3
    literal_ema: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")

    @property
    def initialized(self) -> bool:
        return self.step_count > 0


def update_stats(stats: NormStats, batch_norms) -> NormStats:
    """Fold one batch of feature norms into the running statistics.

    The first batch initializes mu/sigma directly; later batches blend in
    with the EMA.  Batch sigma uses population (1/N) normalization, so a
    batch of one contributes sigma 0 (then floored).
    """
    norms = np.asarray(batch_norms, dtype=np.float64).ravel()
    if norms.size == 0:
        raise ValueError("batch of norms is empty")
    if not np.all(np.isfinite(norms)) or np.any(norms < 0):
        raise ValueError("norms must be finite and nonnegative")
    batch_mu = float(norms.mean())
    batch_sigma = float(norms.std())
    if not stats.initialized:
        mu, sigma = batch_mu, batch_sigma
    elif stats.literal_ema:
        mu = stats.alpha * batch_mu + (1.0 - stats.alpha) * stats.mu
        sigma = stats.alpha * batch_sigma + (1.0 - stats.alpha) * stats.sigma
    else:
        mu = stats.alpha * stats.mu + (1.0 - stats.alpha) * batch_mu
        sigma = stats.alpha * stats.sigma + (1.0 - stats.alpha) * batch_sigma
    return replace(
        stats,
        mu=mu,
        sigma=max(sigma, stats.sigma_floor),
        step_count=stats.step_count + 1,
    )


def quality_indicator(stats: NormStats, norm):
    """Clipped normalized norm in [-1, 1]; accepts scalars or arrays."""
    if not stats.initialized:
        raise UninitializedStatsError("update_stats must run before querying z_hat")
    n = np.asarray(norm, dtype=np.float64)
    z = (n - stats.mu) / (stats.sigma / stats.h)
    return np.clip(z, -1.0, 1.0)


def proxy_value(
    choice: str,
    stats: NormStats | None = None,
    norms=None,
    prob_true=None,
    external_quality=None,
):
    """Per-sample quality scalar in [-1, 1] from the chosen proxy source.

    feature_norm routes through ``quality_indicator``; ground_truth_prob maps
    a probability in [0, 1] via 2p - 1; external_quality maps a supplied
    score in [0, 1] via 2q - 1.
    """
    if choice == FEATURE_NORM:
        if stats is None or norms is None:
            raise ValueError("feature_norm proxy needs stats and norms")
        return quality_indicator(stats, norms)
    if choice == GROUND_TRUTH_PROB:
        if prob_true is None:
            raise ValueError("ground_truth_prob proxy needs the current P_y")
        p = np.asarray(prob_true, dtype=np.float64)
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        return 2.0 * p - 1.0
    if choice == EXTERNAL_QUALITY:
        if external_quality is None:
            raise ValueError("external_quality proxy needs a quality score")
        q = np.asarray(external_quality, dtype=np.float64)
        if np.any(q < 0) or np.any(q > 1):
            raise ValueError("quality scores must lie in [0, 1]")
        return 2.0 * q - 1.0
    raise ValueError(f"unknown proxy {choice!r}")
