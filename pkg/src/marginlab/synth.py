"""Synthetic identity benchmark with ground-truth quality.

Each identity owns a unit prototype direction in ambient space.  A sample of
quality q is the renormalized mix q * prototype + (1 - q) * noise, so q is
exactly the identity-signal content.  A configurable fraction of training
samples has the prototype term dropped entirely: those are unidentifiable,
carry quality 0, and play the role of fully degraded inputs.

The test split holds per-identity galleries drawn at high quality and probe
sets spanning the whole quality range, binned into terciles.  A trailing
block of identities is left out of the gallery to serve as open-set
impostors.  Generation is deterministic under the config seed and
parallelizable per identity (independent child seeds).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

DATASET_FORMAT = "synth-dataset-v1"

CROP_FRACTION_RANGE = (0.1, 0.9)
PHOTOMETRIC_RANGE = (0.6, 1.4)
SMOOTH_KERNEL = (0.25, 0.5, 0.25)
# Recorded identity-signal retention per transform.  Cropping keeps the
# untouched coordinate fraction; smoothing attenuates a random prototype's
# component by roughly this factor; pure rescaling keeps the direction.
SMOOTH_RETENTION = 0.8


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 200
    samples_per_identity: int = 60
    ambient_dim: int = 128
    quality_a: float = 5.0
    quality_b: float = 2.0
    unidentifiable_fraction: float = 0.1
    augment_probability: float = 0.2
    seed: int = 0
    gallery_per_identity: int = 3
    probes_per_identity: int = 10
    unenrolled_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.num_identities < 2:
            raise ValueError("need at least two identities")
        if self.samples_per_identity < 1:
            raise ValueError("need at least one sample per identity")
        if self.ambient_dim < 2:
            raise ValueError("ambient_dim must be >= 2")
        if self.quality_a <= 0 or self.quality_b <= 0:
            raise ValueError("quality distribution parameters must be positive")
        if not 0.0 <= self.unidentifiable_fraction < 1.0:
            raise ValueError("unidentifiable_fraction must lie in [0, 1)")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ValueError("augment_probability must lie in [0, 1]")
        if self.gallery_per_identity < 1 or self.probes_per_identity < 1:
            raise ValueError("gallery and probe counts must be >= 1")
        if not 0.0 <= self.unenrolled_fraction < 1.0:
            raise ValueError("unenrolled_fraction must lie in [0, 1)")


@dataclass
class SynthSample:
    x: np.ndarray
    label: int
    true_quality: float
    identifiable: bool
    augmentations: tuple = ()


@dataclass
class SynthDataset:
    config: SynthConfig
    prototypes: np.ndarray  # (C, dim)
    train_x: np.ndarray
    train_labels: np.ndarray
    train_quality: np.ndarray
    train_identifiable: np.ndarray
    gallery_x: np.ndarray
    gallery_labels: np.ndarray
    gallery_quality: np.ndarray
    probe_x: np.ndarray
    probe_labels: np.ndarray
    probe_quality: np.ndarray
    probe_bin: np.ndarray  # 0 = lowest-quality tercile
    enrolled_ids: np.ndarray

    @property
    def num_train(self) -> int:
        return self.train_x.shape[0]

    @property
    def probe_enrolled_mask(self) -> np.ndarray:
        return np.isin(self.probe_labels, self.enrolled_ids)


def make_sample(prototype: np.ndarray, q: float, noise: np.ndarray) -> np.ndarray:
    """Renormalized q * prototype + (1 - q) * noise."""
    v = q * prototype + (1.0 - q) * noise
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("degenerate sample: prototype and noise cancel")
    return v / n


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate(config: SynthConfig) -> SynthDataset:
    c = config
    children = np.random.SeedSequence(c.seed).spawn(c.num_identities)
    protos = np.empty((c.num_identities, c.ambient_dim))
    tr_x, tr_q, tr_ident = [], [], []
    ga_x, ga_q = [], []
    pr_x, pr_q = [], []
    for ident in range(c.num_identities):
        rng = np.random.default_rng(children[ident])
        proto = _unit(rng, c.ambient_dim)
        protos[ident] = proto
        for _ in range(c.samples_per_identity):
            q = float(rng.beta(c.quality_a, c.quality_b))
            erased = rng.random() < c.unidentifiable_fraction
            noise = _unit(rng, c.ambient_dim)
            if erased:
                tr_x.append(noise)
                tr_q.append(0.0)
                tr_ident.append(False)
            else:
                tr_x.append(make_sample(proto, q, noise))
                tr_q.append(q)
                tr_ident.append(True)
        for _ in range(c.gallery_per_identity):
            q = float(rng.uniform(0.85, 1.0))
            ga_x.append(make_sample(proto, q, _unit(rng, c.ambient_dim)))
            ga_q.append(q)
        for _ in range(c.probes_per_identity):
            q = float(rng.uniform(0.05, 0.95))
            pr_x.append(make_sample(proto, q, _unit(rng, c.ambient_dim)))
            pr_q.append(q)

    rep = c.samples_per_identity
    labels = np.repeat(np.arange(c.num_identities), rep)
    gallery_labels = np.repeat(np.arange(c.num_identities), c.gallery_per_identity)
    probe_labels = np.repeat(np.arange(c.num_identities), c.probes_per_identity)
    probe_quality = np.array(pr_q)
    cuts = np.quantile(probe_quality, [1 / 3, 2 / 3])
    probe_bin = np.digitize(probe_quality, cuts)
    n_unenrolled = int(np.floor(c.unenrolled_fraction * c.num_identities))
    enrolled = np.arange(c.num_identities - n_unenrolled)
    return SynthDataset(
        config=c,
        prototypes=protos,
        train_x=np.array(tr_x),
        train_labels=labels,
        train_quality=np.array(tr_q),
        train_identifiable=np.array(tr_ident, dtype=bool),
        gallery_x=np.array(ga_x),
        gallery_labels=gallery_labels,
        gallery_quality=np.array(ga_q),
        probe_x=np.array(pr_x),
        probe_labels=probe_labels,
        probe_quality=probe_quality,
        probe_bin=probe_bin,
        enrolled_ids=enrolled,
    )


# ---------------------------------------------------------------------------
# augmentation analogues


def crop_block(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """Zero a contiguous coordinate block (wrapping at the end)."""
    out = x.copy()
    idx = (start + np.arange(length)) % x.size
    out[idx] = 0.0
    return out


def smooth(x: np.ndarray) -> np.ndarray:
    """Circular convolution with a short low-pass kernel."""
    a, b, c = SMOOTH_KERNEL
    return a * np.roll(x, 1) + b * x + c * np.roll(x, -1)


def photometric(x: np.ndarray, factor: float) -> np.ndarray:
    return factor * x


def augment(sample: SynthSample, config: SynthConfig, rng) -> SynthSample:
    """Apply each transform independently with the configured probability.

    The recorded quality shrinks by each transform's signal retention; a
    full-coverage crop erases the identity entirely.
    """
    p = config.augment_probability
    x = sample.x
    q = sample.true_quality
    identifiable = sample.identifiable
    applied = []
    if rng.random() < p:
        frac = rng.uniform(*CROP_FRACTION_RANGE)
        length = int(round(frac * x.size))
        x = crop_block(x, int(rng.integers(0, x.size)), length)
        q *= 1.0 - length / x.size
        applied.append("crop")
    if rng.random() < p:
        x = smooth(x)
        q *= SMOOTH_RETENTION
        applied.append("smooth")
    if rng.random() < p:
        x = photometric(x, float(rng.uniform(*PHOTOMETRIC_RANGE)))
        applied.append("photometric")
    if q <= 0.0:
        identifiable = False
        q = 0.0
    return SynthSample(
        x=x,
        label=sample.label,
        true_quality=q,
        identifiable=identifiable,
        augmentations=tuple(applied),
    )


def augment_batch(x, quality_vals, identifiable, p, rng):
    """Vectorized decisions + per-row transforms for the training loop."""
    x = np.array(x, dtype=np.float64, copy=True)
    q = np.array(quality_vals, dtype=np.float64, copy=True)
    ident = np.array(identifiable, dtype=bool, copy=True)
    if p <= 0.0:
        return x, q, ident
    n, dim = x.shape
    do = rng.random((n, 3)) < p
    for i in np.nonzero(do.any(axis=1))[0]:
        if do[i, 0]:
            frac = rng.uniform(*CROP_FRACTION_RANGE)
            length = int(round(frac * dim))
            x[i] = crop_block(x[i], int(rng.integers(0, dim)), length)
            q[i] *= 1.0 - length / dim
        if do[i, 1]:
            x[i] = smooth(x[i])
            q[i] *= SMOOTH_RETENTION
        if do[i, 2]:
            x[i] = photometric(x[i], float(rng.uniform(*PHOTOMETRIC_RANGE)))
        if q[i] <= 0.0:
            q[i] = 0.0
            ident[i] = False
    return x, q, ident


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: SynthDataset, path) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    np.savez(
        path,
        format=np.array(DATASET_FORMAT),
        config=np.array(json.dumps(asdict(dataset.config), sort_keys=True)),
        prototypes=dataset.prototypes,
        train_x=dataset.train_x,
        train_labels=dataset.train_labels,
        train_quality=dataset.train_quality,
        train_identifiable=dataset.train_identifiable,
        gallery_x=dataset.gallery_x,
        gallery_labels=dataset.gallery_labels,
        gallery_quality=dataset.gallery_quality,
        probe_x=dataset.probe_x,
        probe_labels=dataset.probe_labels,
        probe_quality=dataset.probe_quality,
        probe_bin=dataset.probe_bin,
        enrolled_ids=dataset.enrolled_ids,
    )
    return path


def load_dataset(path) -> SynthDataset:
    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["format"])
        if fmt != DATASET_FORMAT:
            raise ValueError(f"unsupported dataset format {fmt!r}")
        config = SynthConfig(**json.loads(str(data["config"])))
        return SynthDataset(
            config=config,
            prototypes=data["prototypes"],
            train_x=data["train_x"],
            train_labels=data["train_labels"],
            train_quality=data["train_quality"],
            train_identifiable=data["train_identifiable"],
            gallery_x=data["gallery_x"],
            gallery_labels=data["gallery_labels"],
            gallery_quality=data["gallery_quality"],
            probe_x=data["probe_x"],
            probe_labels=data["probe_labels"],
            probe_quality=data["probe_quality"],
            probe_bin=data["probe_bin"],
            enrolled_ids=data["enrolled_ids"],
        )
