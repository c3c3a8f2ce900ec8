"""Experiment runner.

Commands: train, evaluate, ablate, gst-field, gradcheck, timing.  Every
artifact-producing run writes a manifest with the fully resolved config so
the run can be reproduced exactly.  Run directories are append-only: rerun
into a fresh directory or pass --overwrite.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfg
from . import experiment, gradfield, synth
from .config import ConfigError, RunConfig
from .margins import VARIANTS, MarginSpec
from .train import TrainingDiverged, save_checkpoint, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _prepare_out_dir(out, overwrite: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise ConfigError(
            f"output directory {path} is not empty; use --overwrite or a fresh path"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_or_generate(rc: RunConfig):
    data_path = rc["data.path"]
    if data_path is not None:
        return synth.load_dataset(data_path)
    return synth.generate(rc.synth_config())


def cmd_train(rc: RunConfig, out: Path) -> None:
    dataset = _load_or_generate(rc)
    result = train(rc.train_config(), dataset)
    report = experiment.evaluate_model(
        result.net, result.head, dataset, fpir=rc["eval.fpir"]
    )
    report.update(
        {
            k: v
            for k, v in result.log.summary.items()
            if k in ("final_mean_loss", "norm_identifiable_mean", "norm_unidentifiable_mean")
        }
    )
    save_checkpoint(out / "checkpoint.npz", result.net, result.head)
    result.log.write(out / "train_log.jsonl")
    (out / "metrics.txt").write_text(cfg.render_report(report), encoding="ascii")
    (out / "manifest.txt").write_text(
        cfg.render_manifest(rc, "train"), encoding="ascii"
    )


def cmd_evaluate(rc: RunConfig, out: Path, checkpoint: str) -> None:
    if checkpoint is None:
        raise ConfigError("evaluate requires --checkpoint")
    net, head = load_checkpoint(checkpoint)
    dataset = _load_or_generate(rc)
    report = experiment.evaluate_model(net, head, dataset, fpir=rc["eval.fpir"])
    (out / "metrics.txt").write_text(cfg.render_report(report), encoding="ascii")
    (out / "manifest.txt").write_text(
        cfg.render_manifest(rc, "evaluate", extra={"checkpoint": checkpoint}),
        encoding="ascii",
    )


def _arm_configs(rc: RunConfig, axis: str, values):
    """TrainConfig per arm; every arm shares the seed and the dataset."""
    base = rc.train_config()
    arms = []
    for value in values:
        if axis == "h":
            arm = replace(base, h=float(value))
        elif axis == "m":
            arm = replace(base, spec=replace(base.spec, m=float(value)))
        elif axis == "proxy":
            arm = replace(base, proxy=str(value))
        elif axis == "augment_p":
            arm = replace(base, augment_probability=float(value))
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}")
        arms.append((str(value), arm))
    return arms


def cmd_ablate(rc: RunConfig, out: Path) -> None:
    axis = rc["ablate.axis"]
    if axis not in cfg.ABLATION_AXES:
        raise ConfigError(f"ablate.axis must be one of {cfg.ABLATION_AXES}")
    values = [v.strip() for v in str(rc["ablate.values"]).split(",") if v.strip()]
    if len(values) < 2:
        raise ConfigError("ablation needs at least two values")
    arms = _arm_configs(rc, axis, values)

    dataset = _load_or_generate(rc)
    rows = []
    for value, arm_config in arms:
        report = experiment.train_and_evaluate(
            rc.synth_config(), arm_config, dataset=dataset, fpir=rc["eval.fpir"]
        )
        arm_dir = out / f"arm_{axis}={value}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        (arm_dir / "metrics.txt").write_text(
            cfg.render_report(report), encoding="ascii"
        )
        rows.append((value, report))

    table = ["value,hq_composite,lq_composite,rank1,tpir"]
    for value, report in rows:
        table.append(
            f"{value},{report['hq_composite']!r},{report['lq_composite']!r},"
            f"{report['rank1']!r},{report['tpir']!r}"
        )
    (out / "ablation.csv").write_text("\n".join(table) + "\n", encoding="ascii")
    (out / "manifest.txt").write_text(
        cfg.render_manifest(rc, "ablate"), encoding="ascii"
    )


def cmd_gst_field(rc: RunConfig, out: Path) -> None:
    theta = gradfield.default_theta_axis(rc["field.theta_points"])
    qual = gradfield.default_quality_axis(rc["field.quality_points"])
    for variant in rc["field.variants"]:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown field variant {variant!r}")
        spec = MarginSpec(
            variant,
            m=experiment.VARIANT_DEFAULT_M.get(variant, rc["margin.m"]),
            s=rc["margin.s"],
            t=rc["margin.t"],
        )
        field = gradfield.compute_field(spec, theta, qual)
        gradfield.export_field(field, out / f"field_{variant}.csv")
    (out / "manifest.txt").write_text(
        cfg.render_manifest(rc, "gst-field"), encoding="ascii"
    )


def cmd_gradcheck(rc: RunConfig, out: Path) -> int:
    report = experiment.run_gradcheck(
        instances=rc["gradcheck.instances"],
        step=rc["gradcheck.step"],
        tolerance=rc["gradcheck.tolerance"],
        seed=rc["seed"],
    )
    text = cfg.render_report(report)
    (out / "gradcheck.txt").write_text(text, encoding="ascii")
    (out / "manifest.txt").write_text(
        cfg.render_manifest(rc, "gradcheck"), encoding="ascii"
    )
    sys.stdout.write(text)
    return EXIT_OK if report["pass"] else 1


def cmd_timing(rc: RunConfig, out: Path) -> None:
    for v in rc["timing.variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown timing variant {v!r}")
    report = experiment.run_timing(
        variants=list(rc["timing.variants"]),
        iterations=rc["timing.iterations"],
        batch_size=rc["timing.batch_size"],
        seed=rc["seed"],
    )
    text = cfg.render_report(report)
    (out / "timing.txt").write_text(text, encoding="ascii")
    (out / "manifest.txt").write_text(
        cfg.render_manifest(rc, "timing"), encoding="ascii"
    )
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginlab",
        description="margin-based softmax loss experiments on a synthetic benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "ablate", "gst-field", "gradcheck", "timing"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="key-value config file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", type=str, required=True, help="run output directory")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--overwrite", action="store_true")
        if name == "evaluate":
            p.add_argument("--checkpoint", type=str, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = cfg.resolve(args.config, args.set, args.seed)
        # config validation happens before any output is created
        rc.margin_spec()
        rc.synth_config()
        rc.train_config()
        out = _prepare_out_dir(args.out, args.overwrite)
        if args.command == "train":
            cmd_train(rc, out)
        elif args.command == "evaluate":
            cmd_evaluate(rc, out, args.checkpoint)
        elif args.command == "ablate":
            cmd_ablate(rc, out)
        elif args.command == "gst-field":
            cmd_gst_field(rc, out)
        elif args.command == "gradcheck":
            return cmd_gradcheck(rc, out)
        elif args.command == "timing":
            cmd_timing(rc, out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
