"""Trainable cosine-classifier head.

Owns the class-weight matrix W (d x C, columns used unit-normalized, no
bias), the running norm statistics feeding the quality indicator, and the
margin spec.  ``forward`` produces every batch intermediate needed for the
hand-derived ``backward``; during training it also folds the raw embedding
norms into the statistics and, for CurricularFace, advances t.

Single-writer: one head may train on one thread of control; any number of
heads may evaluate concurrently.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import margins, quality
from .margins import CosineBatch, GradScaleReport, MarginSpec
from .quality import NormStats

HEAD_FORMAT = "margin-head-v1"

_head_ids = itertools.count(1)


class StaleForwardError(RuntimeError):
    """backward() received a forward produced by another head or an older state."""


@dataclass(frozen=True)
class BatchForward:
    """Everything computed in one head forward pass."""

    embeddings: np.ndarray
    labels: np.ndarray
    raw_norms: np.ndarray
    cos_theta: np.ndarray
    z_hat: Optional[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray
    per_sample_loss: np.ndarray
    loss: float
    grad_scale: GradScaleReport
    head_id: int
    head_version: int


class MarginHead:
    def __init__(
        self,
        embed_dim: int,
        num_classes: int,
        spec: MarginSpec,
        proxy: str = quality.FEATURE_NORM,
        h: float = 0.33,
        ema_alpha: float = 0.99,
        seed: int = 0,
        literal_ema: bool = False,
    ):
        if embed_dim < 2 or num_classes < 2:
            raise ValueError("need embed_dim >= 2 and num_classes >= 2")
        if proxy not in quality.PROXIES:
            raise ValueError(f"unknown proxy {proxy!r}")
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.spec = spec
        self.proxy = proxy
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((embed_dim, num_classes))
        self.W = w / np.linalg.norm(w, axis=0, keepdims=True)
        self.stats = NormStats(alpha=ema_alpha, h=h, literal_ema=literal_ema)
        self._id = next(_head_ids)
        self._version = 0

    # -- forward / backward -------------------------------------------------

    def forward(
        self, embeddings, labels, training: bool = True, sample_quality=None
    ) -> BatchForward:
        """Run one batch through the head.

        In training mode the norm statistics are updated from the raw
        (pre-normalization) embedding norms before z_hat is computed, and
        CurricularFace advances its t state.  In evaluation mode nothing
        mutates and repeated calls are bit-identical.
        """
        z = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        if z.ndim != 2 or z.shape[1] != self.embed_dim:
            raise ValueError(f"embeddings must be (batch, {self.embed_dim})")
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero-norm embedding")
        cos = (z / norms[:, None]) @ (self.W / np.linalg.norm(self.W, axis=0))
        cos = np.clip(cos, -1.0, 1.0)
        batch = CosineBatch(cos, labels)

        if training:
            self.stats = quality.update_stats(self.stats, norms)
            if self.spec.variant == margins.CURRICULARFACE:
                margins.curricular_update_t(self.spec, batch.positive_cos().mean())
            self._version += 1

        z_hat = self._quality(batch, norms, sample_quality)
        logits = margins.batch_logits(self.spec, batch, z_hat)
        probs = margins.softmax_probs(logits)
        per_sample = margins._per_sample_losses(logits, batch.labels)
        rows = np.arange(batch.size)
        report = margins.gradient_scale(
            self.spec, batch.positive_cos(), probs[rows, batch.labels], z_hat
        )
        return BatchForward(
            embeddings=z,
            labels=batch.labels,
            raw_norms=norms,
            cos_theta=cos,
            z_hat=z_hat,
            logits=logits,
            probs=probs,
            per_sample_loss=per_sample,
            loss=float(per_sample.mean()),
            grad_scale=report,
            head_id=self._id,
            head_version=self._version,
        )

    def backward(self, fwd: BatchForward):
        """Analytic (dL/dW, dL/dz) for a forward produced by this head.

        No gradient flows through z_hat or the norm statistics.
        """
        if fwd.head_id != self._id or fwd.head_version != self._version:
            raise StaleForwardError(
                "forward state is stale; rerun forward after any head mutation"
            )
        grads = margins.ce_grad(
            self.spec,
            CosineBatch(fwd.cos_theta, fwd.labels),
            quality=fwd.z_hat,
            embeddings=fwd.embeddings,
            weights=self.W,
        )
        return grads.d_weights, grads.d_embeddings

    def loss_given_quality(self, embeddings, labels, z_hat, W=None) -> np.ndarray:
        """Per-sample losses with z_hat held fixed; pure, mutates nothing.

        Accepts stacked inputs of shape (..., batch, d) so finite-difference
        probes can be evaluated in one vectorized call.  ``W`` overrides the
        head weights (same shape), which is how weight-side probes are run.
        """
        z = np.asarray(embeddings, dtype=np.float64)
        w = self.W if W is None else np.asarray(W, dtype=np.float64)
        lead = z.shape[:-2]
        z2 = z.reshape(-1, z.shape[-1])
        norms = np.linalg.norm(z2, axis=1)
        cos = (z2 / norms[:, None]) @ (w / np.linalg.norm(w, axis=0))
        cos = np.clip(cos, -1.0, 1.0)
        reps = z2.shape[0] // np.asarray(labels).shape[0]
        lab = np.tile(np.asarray(labels), reps)
        zh = None
        if z_hat is not None:
            zh = np.tile(np.asarray(z_hat, dtype=np.float64), reps)
        batch = CosineBatch(cos, lab)
        logits = margins.batch_logits(self.spec, batch, zh)
        losses = margins._per_sample_losses(logits, lab)
        return losses.reshape(*lead, -1) if lead else losses

    # -- quality wiring ------------------------------------------------------

    def _quality(self, batch, norms, sample_quality):
        if self.proxy == quality.FEATURE_NORM:
            if not self.stats.initialized:
                if self.spec.needs_quality:
                    raise quality.UninitializedStatsError(
                        "norm stats are uninitialized; train before evaluating"
                    )
                return None
            return quality.quality_indicator(self.stats, norms)
        if self.proxy == quality.GROUND_TRUTH_PROB:
            plain = margins.softmax_probs(self.spec.s * batch.cos_theta)
            p_y = plain[np.arange(batch.size), batch.labels]
            return quality.proxy_value(quality.GROUND_TRUTH_PROB, prob_true=p_y)
        if sample_quality is None:
            raise ValueError("external_quality proxy needs per-sample quality")
        return quality.proxy_value(
            quality.EXTERNAL_QUALITY, external_quality=sample_quality
        )

    # -- mutation / persistence ----------------------------------------------

    def apply_update(self, delta) -> None:
        """Add a step to W (caller owns step size and sign); bumps version."""
        d = np.asarray(delta, dtype=np.float64)
        if d.shape != self.W.shape:
            raise ValueError("update shape mismatch")
        self.W = self.W + d
        self._version += 1

    def save(self, path) -> None:
        np.savez(
            path,
            format=np.array(HEAD_FORMAT),
            W=self.W,
            proxy=np.array(self.proxy),
            spec=np.array(
                json.dumps(
                    {
                        "variant": self.spec.variant,
                        "m": self.spec.m,
                        "s": self.spec.s,
                        "t": self.spec.t,
                        "t_momentum": self.spec.t_momentum,
                    },
                    sort_keys=True,
                )
            ),
            stats=np.array(
                [
                    self.stats.mu,
                    self.stats.sigma,
                    self.stats.alpha,
                    self.stats.h,
                    float(self.stats.step_count),
                    self.stats.sigma_floor,
                    float(self.stats.literal_ema),
                ]
            ),
        )

    @classmethod
    def load(cls, path) -> "MarginHead":
        with np.load(path, allow_pickle=False) as data:
            fmt = str(data["format"])
            if fmt != HEAD_FORMAT:
                raise ValueError(f"unsupported head format {fmt!r}")
            w = data["W"]
            spec = MarginSpec(**json.loads(str(data["spec"])))
            st = data["stats"]
            head = cls(
                embed_dim=w.shape[0],
                num_classes=w.shape[1],
                spec=spec,
                proxy=str(data["proxy"]),
                h=float(st[3]),
                ema_alpha=float(st[2]),
                literal_ema=bool(st[6]),
            )
            head.W = w.copy()
            head.stats = NormStats(
                mu=float(st[0]),
                sigma=float(st[1]),
                alpha=float(st[2]),
                h=float(st[3]),
                step_count=int(st[4]),
                sigma_floor=float(st[5]),
                literal_ema=bool(st[6]),
            )
        return head


def fuse_features(features, norms) -> np.ndarray:
    """Norm-weighted average of unit-normalized features, re-normalized.

    The weights are the supplied raw norms, so a zero-norm member drops out
    entirely; scaling every norm by the same constant leaves the result
    unchanged.
    """
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(norms, dtype=np.float64).ravel()
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("features must be a nonempty (n, d) array")
    if w.shape[0] != f.shape[0]:
        raise ValueError("one norm per feature required")
    if np.any(w < 0):
        raise ValueError("norms must be nonnegative")
    lengths = np.linalg.norm(f, axis=1)
    if np.any(lengths < 1e-12):
        raise ValueError("cannot fuse a zero feature vector")
    fused = (w[:, None] * (f / lengths[:, None])).sum(axis=0)
    total = np.linalg.norm(fused)
    if total < 1e-12:
        raise ValueError("fusion weights cancel; no direction left")
    return fused / total
