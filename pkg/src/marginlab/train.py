"""Mini-batch SGD training of the embedding net + margin head.

The loop is deliberately explicit: shuffled batches, optional on-the-fly
augmentation, hand-derived backward through head and net, classical momentum,
and a step learning-rate schedule.  Everything is seeded, so a fixed config
reproduces the log byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import quality, synth
from .head import HEAD_FORMAT, MarginHead
from .margins import MarginSpec
from .net import EmbedNet, Layer, build_embed_net

CHECKPOINT_FORMAT = "margin-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    spec: MarginSpec
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (10, 16, 18)
    lr_decay: float = 0.1
    seed: int = 0
    proxy: str = quality.FEATURE_NORM
    h: float = 0.33
    ema_alpha: float = 0.99
    hidden: tuple = (256, 256)
    embed_dim: int = 64
    augment_probability: Optional[float] = None  # None: use the dataset's value
    tracked_samples: int = 512

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs or batch size")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(m < 0 or m >= self.epochs for m in ms) and self.epochs > 0:
            raise ValueError("milestones must lie inside [0, epochs)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_lines(self) -> list:
        out = []
        for rec in self.steps:
            out.append(json.dumps({"kind": "step", **rec}, sort_keys=True))
        for rec in self.epochs:
            out.append(json.dumps({"kind": "epoch", **rec}, sort_keys=True))
        out.append(json.dumps({"kind": "summary", **self.summary}, sort_keys=True))
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="ascii")


@dataclass
class TrainResult:
    net: EmbedNet
    head: MarginHead
    log: TrainLog


def pearson(x, y) -> float:
    """Pearson correlation coefficient of two equal-length samples."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance input")
    return float((xc * yc).sum() / (sx * sy))


def _safe_pearson(x, y) -> float:
    try:
        return pearson(x, y)
    except ValueError:
        return float("nan")


def embed_in_chunks(net: EmbedNet, x, chunk: int = 2048) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    parts = [net.forward(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def _lr_at(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.learning_rate * config.lr_decay**passed


def train(
    config: TrainConfig,
    dataset: synth.SynthDataset,
    head: Optional[MarginHead] = None,
    net: Optional[EmbedNet] = None,
) -> TrainResult:
    """Run the configured schedule and return (net, head, log).

    The tracked-subset correlations (feature norm vs quality, ground-truth
    probability vs quality) are logged per epoch from a frozen evaluation
    pass, and the final summary records mean feature norms of identifiable
    vs unidentifiable training samples.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    n_classes = dataset.config.num_identities
    if net is None:
        net = build_embed_net(
            dataset.config.ambient_dim,
            hidden=tuple(config.hidden),
            embed_dim=config.embed_dim,
            seed=seeds[0],
        )
    if head is None:
        head = MarginHead(
            net.output_dim,
            n_classes,
            replace(config.spec),  # private copy: training mutates t
            proxy=config.proxy,
            h=config.h,
            ema_alpha=config.ema_alpha,
            seed=seeds[1],
        )
    loop_rng = np.random.default_rng(seeds[2])
    tracked_rng = np.random.default_rng(seeds[3])

    n = dataset.num_train
    x_all = dataset.train_x
    y_all = dataset.train_labels
    q_all = dataset.train_quality
    ident_all = dataset.train_identifiable
    p_aug = (
        dataset.config.augment_probability
        if config.augment_probability is None
        else config.augment_probability
    )
    tracked = np.sort(
        tracked_rng.choice(n, size=min(config.tracked_samples, n), replace=False)
    )

    velocities = [
        [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers],
        np.zeros_like(head.W),
    ]
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        order = loop_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, qb, identb = x_all[idx], q_all[idx], ident_all[idx]
            if p_aug > 0:
                xb, qb, identb = synth.augment_batch(xb, qb, identb, p_aug, loop_rng)
            emb = net.forward(xb)
            if not np.all(np.isfinite(emb)):
                raise TrainingDiverged(
                    f"non-finite embeddings at epoch {epoch} step {step} (lr={lr})"
                )
            fwd = head.forward(
                emb,
                y_all[idx],
                training=True,
                sample_quality=qb if config.proxy == quality.EXTERNAL_QUALITY else None,
            )
            if not np.isfinite(fwd.loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} (lr={lr})"
                )
            d_w_head, d_emb = head.backward(fwd)
            net_grads, _ = net.backward(d_emb)

            wd = config.weight_decay
            net_deltas = []
            for layer, (vw, vb), (gw, gb) in zip(
                net.layers, velocities[0], net_grads
            ):
                vw *= config.momentum
                vw += gw + wd * layer.w
                vb *= config.momentum
                vb += gb
                net_deltas.append((-lr * vw, -lr * vb))
            net.apply_update(net_deltas)
            vh = velocities[1]
            vh *= config.momentum
            vh += d_w_head + wd * head.W
            head.apply_update(-lr * vh)

            epoch_losses.append(fwd.loss)
            log.steps.append(
                {"epoch": epoch, "step": step, "loss": fwd.loss, "lr": lr}
            )
            step += 1

        track = _tracked_metrics(net, head, dataset, tracked)
        log.epochs.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(epoch_losses)),
                "lr": lr,
                "r_norm_quality": track["r_norm"],
                "r_prob_quality": track["r_prob"],
                "tracked_norms": track["norms"],
                "tracked_probs": track["probs"],
            }
        )

    log.summary = _final_summary(config, net, head, dataset, log)
    return TrainResult(net=net, head=head, log=log)


def _tracked_metrics(net, head, dataset, tracked_idx):
    emb = embed_in_chunks(net, dataset.train_x[tracked_idx])
    labels = dataset.train_labels[tracked_idx]
    q = dataset.train_quality[tracked_idx]
    identifiable = dataset.train_identifiable[tracked_idx]
    fwd = head.forward(
        emb,
        labels,
        training=False,
        sample_quality=np.clip(q, 0, 1)
        if head.proxy == quality.EXTERNAL_QUALITY
        else None,
    )
    p_y = fwd.probs[np.arange(labels.size), labels]
    ok = identifiable
    return {
        "r_norm": _safe_pearson(fwd.raw_norms[ok], q[ok]),
        "r_prob": _safe_pearson(p_y[ok], q[ok]),
        "norms": [round(float(v), 6) for v in fwd.raw_norms],
        "probs": [round(float(v), 6) for v in p_y],
    }


def _final_summary(config, net, head, dataset, log):
    emb = embed_in_chunks(net, dataset.train_x)
    norms = np.linalg.norm(emb, axis=1)
    ident = dataset.train_identifiable
    summary = {
        "epochs": config.epochs,
        "steps": len(log.steps),
        "final_lr": _lr_at(config, config.epochs - 1) if config.epochs else None,
        "final_mean_loss": log.epochs[-1]["mean_loss"] if log.epochs else None,
        "norm_identifiable_mean": float(norms[ident].mean()) if ident.any() else None,
        "norm_unidentifiable_mean": float(norms[~ident].mean())
        if (~ident).any()
        else None,
    }
    return summary


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, net: EmbedNet, head: MarginHead) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    payload = {
        "format": np.array(CHECKPOINT_FORMAT),
        "n_layers": np.array(len(net.layers)),
        "head_format": np.array(HEAD_FORMAT),
        "head_W": head.W,
        "head_proxy": np.array(head.proxy),
        "head_spec": np.array(
            json.dumps(
                {
                    "variant": head.spec.variant,
                    "m": head.spec.m,
                    "s": head.spec.s,
                    "t": head.spec.t,
                    "t_momentum": head.spec.t_momentum,
                },
                sort_keys=True,
            )
        ),
        "head_stats": np.array(
            [
                head.stats.mu,
                head.stats.sigma,
                head.stats.alpha,
                head.stats.h,
                float(head.stats.step_count),
                head.stats.sigma_floor,
                float(head.stats.literal_ema),
            ]
        ),
    }
    for i, layer in enumerate(net.layers):
        payload[f"layer{i}_w"] = layer.w
        payload[f"layer{i}_b"] = layer.b
        payload[f"layer{i}_act"] = np.array(layer.activation)
    np.savez(path, **payload)
    return path


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["format"])
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {fmt!r}")
        layers = [
            Layer(
                w=data[f"layer{i}_w"],
                b=data[f"layer{i}_b"],
                activation=str(data[f"layer{i}_act"]),
            )
            for i in range(int(data["n_layers"]))
        ]
        net = EmbedNet(layers)
        w = data["head_W"]
        spec = MarginSpec(**json.loads(str(data["head_spec"])))
        st = data["head_stats"]
        head = MarginHead(
            embed_dim=w.shape[0],
            num_classes=w.shape[1],
            spec=spec,
            proxy=str(data["head_proxy"]),
            h=float(st[3]),
            ema_alpha=float(st[2]),
            literal_ema=bool(st[6]),
        )
        head.W = w.copy()
        head.stats = quality.NormStats(
            mu=float(st[0]),
            sigma=float(st[1]),
            alpha=float(st[2]),
            h=float(st[3]),
            step_count=int(st[4]),
            sigma_floor=float(st[5]),
            literal_ema=bool(st[6]),
        )
    return net, head
