"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored; list values are comma separated.
Keys prefixed ``data.`` describe the dataset when a suite carries its own.
"""
from __future__ import annotations

from pathlib import Path

from ..errors import FormatError
from ..normalizers import NormalizerConfig
from ..theory import InitScheme, NetworkSpec
from .data import DatasetSpec
from .optim import StepSchedule
from .train import TrainConfig


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"line {n}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in split_list(value))


def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in split_list(value))


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"not a boolean: {value!r}")


def dataset_spec(kv: dict[str, str], prefix: str = "") -> DatasetSpec:
    g = lambda k, d=None: kv.get(prefix + k, d)
    informative = g("informative")
    return DatasetSpec(
        source=g("source", "synthetic"),
        paths=tuple(split_list(g("paths", ""))),
        mean=_floats(g("mean", "")),
        std=_floats(g("std", "")),
        n_train=int(g("n_train", 2000)),
        n_test=int(g("n_test", 1000)),
        dim=int(g("dim", 64)),
        classes=int(g("classes", 10)),
        separation=float(g("separation", 3.0)),
        informative=int(informative) if informative else None,
        seed=int(g("seed", 0)),
    )


def train_config(kv: dict[str, str], normalizer: str | None = None, variance: float | None = None,
                 seed: int | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig`; the keyword overrides are used by the
    ablation runner to fill in one grid cell."""
    norm = NormalizerConfig.parse(normalizer or kv.get("normalizer", "full_bn"))
    widths = _ints(kv.get("widths", "64,128,128,128,128,10"))
    spec = NetworkSpec.classifier(widths, norm, batch_size=int(kv.get("batch_size", 128)))
    family = kv.get("init_family", "uniform")
    var = variance if variance is not None else float(kv.get("variance", 1e-2))
    scheme = InitScheme(family, var)
    fp = kv.get("fp_init")
    layer_vars = kv.get("layer_variances")
    return TrainConfig(
        spec=spec,
        scheme=scheme,
        fp_scheme=InitScheme.parse(fp) if fp else None,
        schedule=StepSchedule(float(kv.get("lr", 1e-3)), _ints(kv.get("milestones", "16,24,28")),
                              float(kv.get("decay", 10.0))),
        epochs=int(kv.get("epochs", 30)),
        seed=seed if seed is not None else int(kv.get("seed", 0)),
        latent_clip=_bool(kv.get("latent_clip", "true")),
        telemetry=_bool(kv.get("telemetry", "true")),
        layer_variances=_floats(layer_vars) if layer_vars else None,
    )


def analysis_spec(kv: dict[str, str]) -> tuple[NetworkSpec, InitScheme, dict]:
    """Network, init scheme and extra MC options for ``analyze``."""
    widths = _ints(kv.get("widths", "64,64,64,64"))
    norm = NormalizerConfig.parse(kv.get("normalizer", "identity"))
    spec = NetworkSpec.binary_mlp(widths, norm, batch_size=int(kv.get("batch_size", 128)))
    scheme = InitScheme.parse(kv.get("init", "uniform:1e-2"))
    extra = {k: kv[k] for k in ("input", "ste") if k in kv}
    return spec, scheme, extra
