"""Verification and open/closed-set identification metrics.

All comparisons are cosine similarities, so every metric is invariant to
uniform rescaling of embedding norms.  Thresholds are always chosen from the
discrete score sets, with ties broken toward the stricter (higher) threshold
so a FAR / FPIR budget is never exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import fuse_features
from .train import pearson


class ProtocolError(ValueError):
    """The evaluation protocol is malformed or an operating point is unreachable."""


@dataclass(frozen=True)
class VerificationPairs:
    """Index pairs into an embedding matrix plus same-identity flags."""

    first: np.ndarray
    second: np.ndarray
    same: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "first", np.asarray(self.first, dtype=int))
        object.__setattr__(self, "second", np.asarray(self.second, dtype=int))
        object.__setattr__(self, "same", np.asarray(self.same, dtype=bool))
        if not (self.first.shape == self.second.shape == self.same.shape):
            raise ProtocolError("pair arrays must share one shape")
        if self.first.size == 0:
            raise ProtocolError("empty pair list")

    @property
    def size(self) -> int:
        return self.first.size


def _unit_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ProtocolError("zero embedding in protocol")
    return x / norms


def pair_scores(pairs: VerificationPairs, embeddings) -> np.ndarray:
    e = _unit_rows(embeddings)
    return np.sum(e[pairs.first] * e[pairs.second], axis=1)


def verification_accuracy(pairs: VerificationPairs, embeddings) -> float:
    """Best 1:1 accuracy over all thresholds between sorted scores.

    Candidate thresholds are the midpoints between consecutive distinct
    scores plus one below the minimum and one above the maximum; a pair is
    declared same-identity when its score clears the threshold.
    """
    scores = pair_scores(pairs, embeddings)
    uniq = np.unique(scores)
    cands = np.concatenate(
        [[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]]
    )
    accept = scores[None, :] >= cands[:, None]
    correct = (accept == pairs.same[None, :]).mean(axis=1)
    return float(correct.max())


def tar_at_far(pairs: VerificationPairs, embeddings, far: float) -> float:
    """True accept rate at the largest threshold whose FAR stays within budget.

    With k = floor(far * n_impostor) admissible false accepts, the threshold
    is the (k+1)-th largest impostor score and acceptance is strictly-greater,
    so the realized FAR never exceeds the target.
    """
    if not 0.0 <= far <= 1.0:
        raise ProtocolError("far must lie in [0, 1]")
    scores = pair_scores(pairs, embeddings)
    genuine = scores[pairs.same]
    impostor = scores[~pairs.same]
    if impostor.size == 0:
        raise ProtocolError("no impostor pairs")
    if genuine.size == 0:
        raise ProtocolError("no genuine pairs")
    k = int(np.floor(far * impostor.size))
    if far > 0.0 and k == 0:
        raise ProtocolError(
            f"far={far} is below the impostor resolution 1/{impostor.size}"
        )
    if k >= impostor.size:
        return 1.0
    threshold = np.sort(impostor)[::-1][k]
    return float((genuine > threshold).mean())


def build_gallery_templates(embeddings, labels, norms=None):
    """One fused template per identity, weighted by raw feature norms."""
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    w = np.linalg.norm(e, axis=1) if norms is None else np.asarray(norms, float)
    ids = np.unique(labels)
    templates = np.stack(
        [fuse_features(e[labels == i], w[labels == i]) for i in ids]
    )
    return templates, ids


def _template_scores(probe_x, templates):
    return _unit_rows(probe_x) @ _unit_rows(templates).T


def rank_retrieval(probe_x, probe_labels, templates, template_ids, k: int) -> float:
    """Fraction of probes whose identity is among the k nearest templates."""
    template_ids = np.asarray(template_ids)
    if not 1 <= k <= template_ids.size:
        raise ProtocolError(f"k must lie in [1, {template_ids.size}]")
    probe_labels = np.asarray(probe_labels)
    if probe_labels.size == 0:
        raise ProtocolError("no probes")
    scores = _template_scores(probe_x, templates)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    topk_ids = template_ids[order]
    return float((topk_ids == probe_labels[:, None]).any(axis=1).mean())


def tpir_at_fpir(probe_x, probe_labels, templates, template_ids, fpir: float) -> float:
    """Open-set identification rate at a false-positive budget.

    Unenrolled probes (labels absent from the gallery) calibrate the
    acceptance threshold on their top gallery score; TPIR is the fraction of
    enrolled probes that are accepted and rank-1 correct.
    """
    if not 0.0 <= fpir <= 1.0:
        raise ProtocolError("fpir must lie in [0, 1]")
    probe_labels = np.asarray(probe_labels)
    template_ids = np.asarray(template_ids)
    enrolled = np.isin(probe_labels, template_ids)
    if not (~enrolled).any():
        raise ProtocolError("no unenrolled probes to calibrate the threshold")
    if not enrolled.any():
        raise ProtocolError("no enrolled probes to score")
    scores = _template_scores(probe_x, templates)
    best = np.argmax(scores, axis=1)
    top_score = scores[np.arange(scores.shape[0]), best]
    top_id = template_ids[best]

    impostor_top = top_score[~enrolled]
    k = int(np.floor(fpir * impostor_top.size))
    if k >= impostor_top.size:
        threshold = -np.inf
    else:
        threshold = np.sort(impostor_top)[::-1][k]
    genuine = enrolled
    hit = (top_score[genuine] > threshold) & (top_id[genuine] == probe_labels[genuine])
    return float(hit.mean())


@dataclass(frozen=True)
class CorrelationReport:
    r_norm: float
    r_prob: float


def quality_correlation_report(raw_norms, prob_true, true_quality) -> CorrelationReport:
    """Pearson correlations of (feature norm, P_y) against ground-truth quality."""
    return CorrelationReport(
        r_norm=pearson(raw_norms, true_quality),
        r_prob=pearson(prob_true, true_quality),
    )
