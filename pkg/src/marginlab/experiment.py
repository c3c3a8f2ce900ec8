"""Experiment machinery shared by the CLI and the verification suites.

Covers: embedding + metric evaluation of a trained model on the synthetic
benchmark, the gradient/reduction/closed-form oracle suite, and the
per-iteration timing comparison across margin variants.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import margins, metrics, quality, synth
from .head import MarginHead
from .margins import (
    ADAFACE,
    ARCFACE,
    COSFACE,
    CURRICULARFACE,
    SPHEREFACE,
    VARIANTS,
    CosineBatch,
    MarginSpec,
)
from .metrics import VerificationPairs
from .net import build_embed_net
from .train import TrainConfig, embed_in_chunks, pearson, train

# Conventional margins used when a suite needs one spec per variant.
VARIANT_DEFAULT_M = {SPHEREFACE: 1.35, CURRICULARFACE: 0.5}


def default_spec(variant: str, **kw) -> MarginSpec:
    kw.setdefault("m", VARIANT_DEFAULT_M.get(variant, 0.4))
    return MarginSpec(variant, **kw)


# ---------------------------------------------------------------------------
# model evaluation on the synthetic benchmark


def build_hq_pairs(labels, bin_mask):
    """Deterministic verification pairs inside one probe bin.

    Genuine: all within-identity pairs in the bin.  Impostor: ring pairs over
    the bin ordering, skipping same-identity neighbors.
    """
    idx = np.nonzero(bin_mask)[0]
    lab = np.asarray(labels)[idx]
    first, second, same = [], [], []
    for a in range(idx.size):
        for b in range(a + 1, idx.size):
            if lab[a] == lab[b]:
                first.append(idx[a])
                second.append(idx[b])
                same.append(True)
    for a in range(idx.size):
        b = (a + 1) % idx.size
        if lab[a] != lab[b]:
            first.append(idx[a])
            second.append(idx[b])
            same.append(False)
    if not first:
        raise metrics.ProtocolError("bin too small to build verification pairs")
    return VerificationPairs(first, second, same)


def evaluate_model(net, head, dataset: synth.SynthDataset, fpir: float = 0.01) -> dict:
    """Closed/open-set metrics, quality correlations, and the two composites.

    The low-quality composite mirrors the ablation summary: the mean of
    rank-1 retrieval and TPIR at the configured FPIR on the lowest-quality
    probe bin (FPIR calibrated on every unenrolled probe).  The high-quality
    composite is 1:1 verification accuracy on the highest-quality bin.
    """
    enrolled_gal = np.isin(dataset.gallery_labels, dataset.enrolled_ids)
    gal_emb = embed_in_chunks(net, dataset.gallery_x[enrolled_gal])
    probe_emb = embed_in_chunks(net, dataset.probe_x)
    templates, template_ids = metrics.build_gallery_templates(
        gal_emb, dataset.gallery_labels[enrolled_gal]
    )
    enrolled = dataset.probe_enrolled_mask
    bins = dataset.probe_bin

    report = {
        "fpir_target": fpir,
        "n_templates": int(template_ids.size),
        "n_probes": int(probe_emb.shape[0]),
        "n_enrolled_probes": int(enrolled.sum()),
        "n_unenrolled_probes": int((~enrolled).sum()),
    }
    report["rank1"] = metrics.rank_retrieval(
        probe_emb[enrolled], dataset.probe_labels[enrolled], templates, template_ids, 1
    )
    report["rank5"] = metrics.rank_retrieval(
        probe_emb[enrolled], dataset.probe_labels[enrolled], templates, template_ids, 5
    )
    report["tpir"] = metrics.tpir_at_fpir(
        probe_emb, dataset.probe_labels, templates, template_ids, fpir
    )
    for b in (0, 1, 2):
        mask = enrolled & (bins == b)
        report[f"rank1_bin{b}"] = metrics.rank_retrieval(
            probe_emb[mask], dataset.probe_labels[mask], templates, template_ids, 1
        )
        sel = mask | ~enrolled  # bin-restricted genuine probes, all impostors
        report[f"tpir_bin{b}"] = metrics.tpir_at_fpir(
            probe_emb[sel], dataset.probe_labels[sel], templates, template_ids, fpir
        )

    pairs = build_hq_pairs(dataset.probe_labels, enrolled & (bins == 2))
    report["verification_hq"] = metrics.verification_accuracy(pairs, probe_emb)

    fwd = head.forward(
        probe_emb,
        dataset.probe_labels,
        training=False,
        sample_quality=np.clip(dataset.probe_quality, 0, 1)
        if head.proxy == quality.EXTERNAL_QUALITY
        else None,
    )
    p_y = fwd.probs[np.arange(dataset.probe_labels.size), dataset.probe_labels]
    rep = metrics.quality_correlation_report(
        fwd.raw_norms, p_y, dataset.probe_quality
    )
    report["r_norm_quality"] = rep.r_norm
    report["r_prob_quality"] = rep.r_prob

    report["hq_composite"] = report["verification_hq"]
    report["lq_composite"] = 0.5 * (report["rank1_bin0"] + report["tpir_bin0"])
    return report


# ---------------------------------------------------------------------------
# gradient / reduction / closed-form oracle suite


def _losses_for_weight_stack(head, z, labels, z_hat, w_stack):
    """Per-sample losses for every W in a (p, d, C) stack, one vector pass."""
    zu = z / np.linalg.norm(z, axis=1, keepdims=True)
    wu = w_stack / np.linalg.norm(w_stack, axis=1, keepdims=True)
    cos = np.einsum("nd,pdc->pnc", zu, wu)
    p, n, c = cos.shape
    lab = np.tile(labels, p)
    zh = None if z_hat is None else np.tile(z_hat, p)
    batch = CosineBatch(np.clip(cos, -1, 1).reshape(p * n, c), lab)
    logits = margins.batch_logits(head.spec, batch, zh)
    return margins._per_sample_losses(logits, lab).reshape(p, n)


def fd_head_gradients(head, z, labels, z_hat, step=1e-5):
    """Vectorized central differences of the frozen-quality mean loss."""
    n, d = z.shape
    probes = np.eye(n * d).reshape(n * d, n, d) * step
    stack = np.concatenate([z[None] + probes, z[None] - probes], axis=0)
    means = head.loss_given_quality(stack, labels, z_hat).mean(axis=1)
    fd_z = ((means[: n * d] - means[n * d :]) / (2 * step)).reshape(n, d)

    w = head.W
    dd, cc = w.shape
    probes_w = np.eye(dd * cc).reshape(dd * cc, dd, cc) * step
    stack_w = np.concatenate([w[None] + probes_w, w[None] - probes_w], axis=0)
    means_w = _losses_for_weight_stack(head, z, labels, z_hat, stack_w).mean(axis=1)
    fd_w = ((means_w[: dd * cc] - means_w[dd * cc :]) / (2 * step)).reshape(dd, cc)
    return fd_w, fd_z


def max_rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b)) / denom)


def _draw_instance(rng, head, batch, dim):
    z = rng.normal(size=(batch, dim)) * rng.uniform(0.5, 2.5, size=(batch, 1))
    labels = rng.integers(0, head.num_classes, size=batch)
    return z, labels


def _instance_ok(head, fwd):
    spec = head.spec
    rows = np.arange(fwd.labels.size)
    cos_y = fwd.cos_theta[rows, fwd.labels]
    if spec.variant == SPHEREFACE:
        if np.any(spec.m * np.arccos(cos_y) > np.pi - 0.05):
            return False
    if np.any(1.0 - cos_y**2 < 1e-6):
        return False
    if spec.variant == CURRICULARFACE:
        pos = fwd.logits[rows, fwd.labels]
        gap = np.abs(pos[:, None] - fwd.cos_theta)
        gap[rows, fwd.labels] = np.inf
        if gap.min() < 5e-3:
            return False
    return True


def gradient_check_variant(
    variant,
    instances=20,
    batch=8,
    classes=10,
    dim=16,
    step=1e-5,
    seed=0,
) -> dict:
    """Head-level analytic vs finite-difference gradients; max errors."""
    rng = np.random.default_rng(seed)
    head = MarginHead(dim, classes, default_spec(variant), seed=seed + 1)
    worst_z = worst_w = 0.0
    done = 0
    while done < instances:
        z, labels = _draw_instance(rng, head, batch, dim)
        fwd = head.forward(z, labels, training=True)
        if not _instance_ok(head, fwd):
            continue
        d_w, d_z = head.backward(fwd)
        fd_w, fd_z = fd_head_gradients(head, z, labels, fwd.z_hat, step=step)
        worst_z = max(worst_z, max_rel_err(d_z, fd_z))
        worst_w = max(worst_w, max_rel_err(d_w, fd_w))
        done += 1
    return {"max_rel_dz": worst_z, "max_rel_dw": worst_w}


def reduction_check(batches=50, batch=8, classes=10, seed=0) -> dict:
    """AdaFace at pinned quality against its three closed-form reductions."""
    rng = np.random.default_rng(seed)
    m, s = 0.4, 64.0
    ada = MarginSpec(ADAFACE, m=m, s=s)
    arc = MarginSpec(ARCFACE, m=m, s=s)
    cosf = MarginSpec(COSFACE, m=m, s=s)
    worst = 0.0
    for _ in range(batches):
        cos = rng.uniform(-0.95, 0.95, size=(batch, classes))
        labels = rng.integers(0, classes, size=batch)
        b = CosineBatch(cos, labels)
        rows = np.arange(batch)

        for q, ref in ((-1.0, arc), (0.0, cosf)):
            qv = np.full(batch, q)
            worst = max(
                worst,
                np.max(
                    np.abs(margins.batch_logits(ada, b, qv) - margins.batch_logits(ref, b))
                ),
                abs(margins.ce_loss(ada, b, qv) - margins.ce_loss(ref, b)),
                np.max(
                    np.abs(
                        margins.ce_grad(ada, b, qv).d_cos - margins.ce_grad(ref, b).d_cos
                    )
                ),
            )

        qv = np.ones(batch)
        ref_logits = s * cos.copy()
        c_y = b.positive_cos()
        ref_logits[rows, labels] = s * (
            c_y * np.cos(-m) - np.sqrt(1 - c_y**2) * np.sin(-m) - 2 * m
        )
        ref_losses = margins._per_sample_losses(ref_logits, labels)
        probs = margins.softmax_probs(ref_logits)
        resid = probs.copy()
        resid[rows, labels] -= 1.0
        deriv = np.full_like(cos, s)
        deriv[rows, labels] = margins.angular_deriv(c_y, -m, s)
        worst = max(
            worst,
            np.max(np.abs(margins.batch_logits(ada, b, qv) - ref_logits)),
            abs(margins.ce_loss(ada, b, qv) - float(ref_losses.mean())),
            np.max(np.abs(margins.ce_grad(ada, b, qv).d_cos - resid * deriv / batch)),
        )
    return {"max_abs_diff": float(worst)}


def gst_closed_form_check(points=200, seed=0) -> dict:
    """Closed-form gradient scale vs finite differences of the logit."""
    rng = np.random.default_rng(seed)
    step = 1e-6
    out = {}
    for variant in VARIANTS:
        worst = 0.0
        for _ in range(points):
            m = rng.uniform(0.05, 0.6)
            if variant == SPHEREFACE:
                m = rng.uniform(0.5, 1.5)
                theta = rng.uniform(0.05, np.pi / m - 0.05)
            else:
                theta = rng.uniform(0.05, np.pi - 0.05)
            spec = MarginSpec(variant, m=m, s=64.0, t=rng.uniform(0, 1))
            c = np.cos(theta)
            q = rng.uniform(-1, 1)
            p = rng.uniform(0, 1)
            rep = margins.gradient_scale(spec, c, p, q)
            fd = (
                float(margins.margin_logit(spec, c + step, q))
                - float(margins.margin_logit(spec, c - step, q))
            ) / (2 * step)
            worst = max(worst, abs(float(rep.deriv_term) - fd) / max(abs(fd), 1.0))
            expect = (p - 1.0) * float(rep.deriv_term)
            assert float(rep.g) == expect
        out[variant] = worst
    return out


def monotonicity_check(points=10_000) -> bool:
    """Angular derivative strictly monotone in cos(theta) for m of both signs."""
    eps = 1e-3
    c = np.linspace(-1 + eps, 1 - eps, points)
    ok = True
    for m in (0.2, 0.4):
        ok &= bool(np.all(np.diff(margins.angular_deriv(c, m, 64.0)) > 0))
        ok &= bool(np.all(np.diff(margins.angular_deriv(c, -m, 64.0)) < 0))
    return ok


def run_gradcheck(
    instances=20,
    batch=8,
    classes=10,
    dim=16,
    step=1e-5,
    tolerance=1e-5,
    reduction_batches=50,
    gst_points=200,
    seed=0,
) -> dict:
    """Full oracle suite; returns a flat machine-readable report."""
    report = {
        "instances": instances,
        "batch": batch,
        "classes": classes,
        "dim": dim,
        "step": step,
        "tolerance": tolerance,
    }
    ok = True
    for variant in VARIANTS:
        res = gradient_check_variant(
            variant,
            instances=instances,
            batch=batch,
            classes=classes,
            dim=dim,
            step=step,
            seed=seed,
        )
        report[f"{variant}.max_rel_dz"] = res["max_rel_dz"]
        report[f"{variant}.max_rel_dw"] = res["max_rel_dw"]
        passed = max(res["max_rel_dz"], res["max_rel_dw"]) < tolerance
        report[f"{variant}.pass"] = passed
        ok &= passed

    red = reduction_check(batches=reduction_batches, seed=seed)
    report["reduction.max_abs_diff"] = red["max_abs_diff"]
    report["reduction.pass"] = red["max_abs_diff"] < 1e-12
    ok &= report["reduction.pass"]

    gst = gst_closed_form_check(points=gst_points, seed=seed)
    worst_gst = max(gst.values())
    for variant, err in gst.items():
        report[f"gst.{variant}.max_rel"] = err
    report["gst.pass"] = worst_gst < 1e-6
    ok &= report["gst.pass"]

    report["monotonicity.pass"] = monotonicity_check()
    ok &= report["monotonicity.pass"]
    report["pass"] = ok
    return report


# ---------------------------------------------------------------------------
# timing


def run_timing(
    variants=None,
    iterations=200,
    batch_size=128,
    dim=128,
    embed_dim=64,
    classes=200,
    block=10,
    seed=0,
) -> dict:
    """Mean wall time per full training iteration, per margin variant.

    Every variant runs the same batch through an identically initialized
    net + head; measurement interleaves fixed-size blocks across variants so
    slow system drift cancels out of the comparison.
    """
    if variants is None:
        variants = list(VARIANTS)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch_size, dim))
    labels = rng.integers(0, classes, size=batch_size)

    arms = {}
    for v in variants:
        net = build_embed_net(dim, embed_dim=embed_dim, seed=seed)
        head = MarginHead(embed_dim, classes, default_spec(v), seed=seed + 1)
        arms[v] = (net, head)

    def one_iteration(net, head):
        emb = net.forward(x)
        fwd = head.forward(emb, labels, training=True)
        d_w, d_emb = head.backward(fwd)
        grads, _ = net.backward(d_emb)
        net.apply_update([(-1e-3 * gw, -1e-3 * gb) for gw, gb in grads])
        head.apply_update(-1e-3 * d_w)

    for v in variants:  # warmup
        for _ in range(5):
            one_iteration(*arms[v])

    totals = {v: 0.0 for v in variants}
    counts = {v: 0 for v in variants}
    while min(counts.values()) < iterations:
        for v in variants:
            net, head = arms[v]
            start = time.perf_counter()
            for _ in range(block):
                one_iteration(net, head)
            totals[v] += time.perf_counter() - start
            counts[v] += block

    report = {"iterations": iterations, "batch_size": batch_size}
    for v in variants:
        report[f"{v}.mean_seconds"] = totals[v] / counts[v]
    if ARCFACE in variants:
        base = report[f"{ARCFACE}.mean_seconds"]
        for v in variants:
            report[f"{v}.ratio_to_arcface"] = report[f"{v}.mean_seconds"] / base
    return report


# ---------------------------------------------------------------------------
# training arms (shared by ablation and A/B runs)


def train_and_evaluate(
    synth_config: synth.SynthConfig,
    train_config: TrainConfig,
    dataset: synth.SynthDataset | None = None,
    fpir: float = 0.01,
) -> dict:
    """One training arm: returns the metric report plus training summary."""
    if dataset is None:
        dataset = synth.generate(synth_config)
    result = train(train_config, dataset)
    report = evaluate_model(result.net, result.head, dataset, fpir=fpir)
    report["final_mean_loss"] = result.log.summary["final_mean_loss"]
    report["norm_identifiable_mean"] = result.log.summary["norm_identifiable_mean"]
    report["norm_unidentifiable_mean"] = result.log.summary["norm_unidentifiable_mean"]
    return report
