"""Flat key-value run configuration with strict parsing.

Config files are plain text, one ``section.key = value`` per line, ``#``
comments allowed.  Unknown keys are rejected so every manifest line is
meaningful; the manifest written into each run directory echoes the fully
resolved configuration and reproduces the run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import quality
from .margins import VARIANTS, MarginSpec
from .synth import SynthConfig
from .train import TrainConfig

MANIFEST_VERSION = "marginlab-manifest-v1"

ABLATION_AXES = ("h", "m", "proxy", "augment_p")


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, or failed validation."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_float_list(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_str_list(text: str):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _parse_optional_float(text: str):
    return None if text.strip().lower() == "none" else float(text)


def _parse_optional_str(text: str):
    return None if text.strip().lower() == "none" else text.strip()


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "data.path": (_parse_optional_str, None),
    "margin.variant": (str, "adaface"),
    "margin.m": (float, 0.4),
    "margin.s": (float, 64.0),
    "margin.t": (float, 0.0),
    "margin.t_momentum": (float, 0.99),
    "quality.proxy": (str, quality.FEATURE_NORM),
    "quality.h": (float, 0.33),
    "quality.ema_alpha": (float, 0.99),
    "synth.num_identities": (int, 200),
    "synth.samples_per_identity": (int, 60),
    "synth.ambient_dim": (int, 128),
    "synth.quality_a": (float, 5.0),
    "synth.quality_b": (float, 2.0),
    "synth.unidentifiable_fraction": (float, 0.1),
    "synth.augment_probability": (float, 0.2),
    "synth.gallery_per_identity": (int, 3),
    "synth.probes_per_identity": (int, 10),
    "synth.unenrolled_fraction": (float, 0.2),
    "train.epochs": (int, 20),
    "train.batch_size": (int, 128),
    "train.learning_rate": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.milestones": (_parse_int_list, (10, 16, 18)),
    "train.lr_decay": (float, 0.1),
    "train.hidden": (_parse_int_list, (256, 256)),
    "train.embed_dim": (int, 64),
    "train.augment_probability": (_parse_optional_float, None),
    "train.tracked_samples": (int, 512),
    "eval.fpir": (float, 0.01),
    "field.variants": (_parse_str_list, VARIANTS),
    "field.theta_points": (int, 181),
    "field.quality_points": (int, 41),
    "ablate.axis": (str, "h"),
    "ablate.values": (str, "0.22,0.33,0.66"),
    "gradcheck.instances": (int, 20),
    "gradcheck.step": (float, 1e-5),
    "gradcheck.tolerance": (float, 1e-5),
    "timing.iterations": (int, 200),
    "timing.batch_size": (int, 128),
    "timing.variants": (_parse_str_list, ("arcface", "adaface")),
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved flat configuration."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def margin_spec(self) -> MarginSpec:
        v = self.values
        if v["margin.variant"] not in VARIANTS:
            raise ConfigError(f"unknown margin.variant {v['margin.variant']!r}")
        try:
            return MarginSpec(
                v["margin.variant"],
                m=v["margin.m"],
                s=v["margin.s"],
                t=v["margin.t"],
                t_momentum=v["margin.t_momentum"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def synth_config(self) -> SynthConfig:
        v = self.values
        try:
            return SynthConfig(
                num_identities=v["synth.num_identities"],
                samples_per_identity=v["synth.samples_per_identity"],
                ambient_dim=v["synth.ambient_dim"],
                quality_a=v["synth.quality_a"],
                quality_b=v["synth.quality_b"],
                unidentifiable_fraction=v["synth.unidentifiable_fraction"],
                augment_probability=v["synth.augment_probability"],
                seed=v["seed"],
                gallery_per_identity=v["synth.gallery_per_identity"],
                probes_per_identity=v["synth.probes_per_identity"],
                unenrolled_fraction=v["synth.unenrolled_fraction"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        v = self.values
        if v["quality.proxy"] not in quality.PROXIES:
            raise ConfigError(f"unknown quality.proxy {v['quality.proxy']!r}")
        try:
            return TrainConfig(
                spec=self.margin_spec(),
                epochs=v["train.epochs"],
                batch_size=v["train.batch_size"],
                learning_rate=v["train.learning_rate"],
                momentum=v["train.momentum"],
                milestones=v["train.milestones"],
                lr_decay=v["train.lr_decay"],
                seed=v["seed"],
                proxy=v["quality.proxy"],
                h=v["quality.h"],
                ema_alpha=v["quality.ema_alpha"],
                hidden=v["train.hidden"],
                embed_dim=v["train.embed_dim"],
                augment_probability=v["train.augment_probability"],
                tracked_samples=v["train.tracked_samples"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve(config_path=None, overrides=(), seed=None) -> RunConfig:
    """File values < --set overrides < --seed; everything else defaulted."""
    raw = {}
    if config_path is not None:
        raw.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value

    values = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r}") from exc
        else:
            values[key] = default
    if seed is not None:
        values["seed"] = int(seed)
    return RunConfig(values=values)


def render_manifest(config: RunConfig, command: str, extra=None) -> str:
    """Deterministic manifest: resolved config plus run identity."""
    from . import __version__

    lines = [
        f"manifest.version = {MANIFEST_VERSION}",
        f"manifest.package = marginlab {__version__}",
        f"manifest.command = {command}",
    ]
    if extra:
        for key in sorted(extra):
            lines.append(f"{key} = {extra[key]}")
    for key in sorted(config.values):
        value = config.values[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):  # numpy scalar
        return _format_value(v.item())
    return str(v)


def render_report(report: dict) -> str:
    """Structured key-value document for metric and check reports."""
    lines = []
    for key in sorted(report):
        lines.append(f"{key} = {_format_value(report[key])}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Inverse of render_report for round-trip checks and downstream tools."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if value in ("True", "False"):
            out[key] = value == "True"
        else:
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out
