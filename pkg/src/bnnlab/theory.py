"""Weight initialization and analytic variance predictors.

Layer ``l`` (1-based) maps ``K_{l-1}`` inputs to ``K_l`` outputs. Backward
predictions are reported relative to the gradient variance at the top
pre-activation ``s^L``, so entry ``L`` is always 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .autodiff import sign
from .core import RngStream
from .errors import ContractViolation, DomainError
from .normalizers import NormalizerConfig, Variant


class InitFamily(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    GLOROT_UNIFORM = "glorot_uniform"
    FAN_IN_UNIFORM = "fan_in_uniform"


@dataclass(frozen=True)
class InitScheme:
    family: InitFamily = InitFamily.UNIFORM
    variance: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "family", InitFamily(self.family))
        if self.family in (InitFamily.UNIFORM, InitFamily.GAUSSIAN) and not self.variance > 0:
            raise DomainError(f"variance must be positive, got {self.variance}")

    @classmethod
    def parse(cls, text: str) -> "InitScheme":
        """``uniform:1e-2``, ``gaussian:0.1``, ``glorot_uniform``, ``fan_in_uniform``."""
        fam, _, var = text.strip().partition(":")
        return cls(InitFamily(fam.strip()), float(var) if var else 1.0)

    @property
    def label(self) -> str:
        if self.family in (InitFamily.GLOROT_UNIFORM, InitFamily.FAN_IN_UNIFORM):
            return self.family.value
        return f"{self.family.value}:{self.variance:g}"


def glorot_variance(k_in: int, k_out: int) -> tuple[float, float]:
    """``(fan_in, fan_avg)`` variances: ``1/K_in`` and ``2/(K_in + K_out)``."""
    if k_in <= 0 or k_out <= 0:
        raise DomainError("layer dimensions must be positive")
    return 1.0 / k_in, 2.0 / (k_in + k_out)


def scheme_variance(scheme: InitScheme, k_in: int, k_out: int) -> float:
    if scheme.family is InitFamily.GLOROT_UNIFORM:
        return glorot_variance(k_in, k_out)[1]
    if scheme.family is InitFamily.FAN_IN_UNIFORM:
        return glorot_variance(k_in, k_out)[0]
    return scheme.variance


def sample_weights(scheme: InitScheme, k_in: int, k_out: int, rng: RngStream) -> np.ndarray:
    """I.i.d. zero-mean ``k_in x k_out`` weights with the scheme's variance.

    Uniform families draw ``u ~ U[-1, 1]`` and scale by ``sqrt(3 var)``; the
    Gaussian draws ``N(0, 1)`` and scales by ``sqrt(var)``. The underlying
    draw does not depend on the variance, so the same stream gives weights
    whose signs are identical for every variance.
    """
    if k_in <= 0 or k_out <= 0:
        raise DomainError("layer dimensions must be positive")
    var = scheme_variance(scheme, k_in, k_out)
    if scheme.family is InitFamily.GAUSSIAN:
        return rng.normal(0.0, 1.0, (k_in, k_out)) * math.sqrt(var)
    return rng.uniform(-1.0, 1.0, (k_in, k_out)) * math.sqrt(3.0 * var)


def binarize(w: np.ndarray) -> np.ndarray:
    return sign(w)


@dataclass(frozen=True)
class NetworkSpec:
    """Dense network shape: widths ``K_0..K_L`` plus per-layer settings.

    ``binary[l-1]``, ``normalizers[l-1]`` and ``activations[l-1]`` describe
    layer ``l``. Activations are ``sign``, ``relu`` or ``none``.
    """

    widths: tuple[int, ...]
    binary: tuple[bool, ...]
    normalizers: tuple[NormalizerConfig, ...]
    activations: tuple[str, ...]
    batch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(k) for k in self.widths))
        n = len(self.widths) - 1
        if n < 2:
            raise ContractViolation("a network needs at least two layers")
        if any(k <= 0 for k in self.widths):
            raise ContractViolation("widths must be positive")
        for name in ("binary", "normalizers", "activations"):
            if len(getattr(self, name)) != n:
                raise ContractViolation(f"{name} needs one entry per layer ({n})")
        if any(a not in ("sign", "relu", "none") for a in self.activations):
            raise ContractViolation(f"unknown activation in {self.activations}")
        if self.batch_size < 1:
            raise ContractViolation("batch size must be positive")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def binary_mlp(cls, widths: Sequence[int], normalizer: NormalizerConfig | None = None,
                   batch_size: int = 128) -> "NetworkSpec":
        """All layers binary with sign activations (the analysis setting)."""
        n = len(widths) - 1
        norm = normalizer or NormalizerConfig.identity()
        return cls(tuple(widths), (True,) * n, (norm,) * n, ("sign",) * n, batch_size)

    @classmethod
    def classifier(cls, widths: Sequence[int], normalizer: NormalizerConfig,
                   batch_size: int = 128) -> "NetworkSpec":
        """First and last layers full precision, binary layers in between;
        the final classifier is fed by a ReLU and has no normalizer."""
        n = len(widths) - 1
        if n < 3:
            raise ContractViolation("a classifier needs at least three layers")
        binary = (False,) + (True,) * (n - 2) + (False,)
        acts = ("sign",) * (n - 2) + ("relu", "none")
        norms = (normalizer,) * (n - 1) + (NormalizerConfig.identity(),)
        return cls(tuple(widths), binary, norms, acts, batch_size)

    def with_normalizer(self, normalizer: NormalizerConfig) -> "NetworkSpec":
        return replace(self, normalizers=(normalizer,) * self.depth)


def predict_forward_variance(spec: NetworkSpec, var_x: float, var_w: Sequence[float] | None = None) -> list[float]:
    """``Var(s^l) = Var(x) * prod_{l'<=l} K_{l'-1} Var(w^{l'})`` for l = 1..L.

    Activations are treated as identity (linear propagation). Binary layers
    use ``Var(w) = 1`` regardless of ``var_w``.
    """
    n = spec.depth
    var_w = list(var_w) if var_w is not None else [1.0] * n
    out, v = [], var_x
    for l in range(1, n + 1):
        vw = 1.0 if spec.binary[l - 1] else var_w[l - 1]
        v = v * spec.widths[l - 1] * vw
        out.append(v)
    return out


@dataclass(frozen=True)
class VariancePrediction:
    """Per-layer gradient variance relative to the top layer (index l-1 is layer l).

    ``var_top`` is the (measured, not predicted) top-layer gradient variance.
    """

    model: str
    relative: tuple[float, ...]
    var_top: float = 1.0

    def __post_init__(self):
        if self.relative and self.relative[-1] != 1.0:
            raise ContractViolation("top-layer entry must be 1")

    @property
    def absolute(self) -> tuple[float, ...]:
        return tuple(self.var_top * r for r in self.relative)

    def step_ratios(self) -> list[float]:
        """``V_l / V_{l+1}`` for l = 1..L-1."""
        r = self.relative
        return [r[i] / r[i + 1] for i in range(len(r) - 1)]


def predict_backward_variance_no_norm(spec: NetworkSpec, var_l: float = 1.0) -> VariancePrediction:
    """Unnormalized binary nets: ``V_l = V_L * prod_{l'=l+1}^{L} K_{l'}``."""
    if not all(spec.binary):
        raise ContractViolation("no-norm prediction assumes binary weights (Var(w) = 1)")
    n = spec.depth
    rel = [1.0] * n
    for l in range(n - 1, 0, -1):
        rel[l - 1] = rel[l] * spec.widths[l + 1]
    return VariancePrediction("no-norm", tuple(rel), var_l)


def bn_step_factor(fan_in: int, batch_size: int, shat_sq_var: float) -> float:
    """``(B^2 + 2B - 1 + Var(s_hat^2)) / (K_{l-1} B^2)`` at gamma = 1."""
    b = batch_size
    return (b * b + 2 * b - 1 + shat_sq_var) / (fan_in * b * b)


def predict_backward_variance_bn(spec: NetworkSpec, var_l: float = 1.0, batch_size: int | None = None,
                                 model: str = "leading",
                                 shat_sq_var: Callable[[int], float] | None = None) -> VariancePrediction:
    """Batch-normalized binary nets at initialization (gamma = 1, beta = 0).

    ``leading``: ``V_l = V_L * prod_{l'=l}^{L-1} K_{l'+1} / K_{l'-1}``.
    ``exact``: each step is ``K_{l'+1} * bn_step_factor(K_{l'-1}, B, V)`` with
    ``V = shat_sq_var(K_{l'-1})``.
    """
    n = spec.depth
    if any(c.variant is not Variant.FULL_BN for c in spec.normalizers[:-1]):
        raise ContractViolation("batch-norm prediction needs full_bn on every hidden layer")
    if not all(spec.binary[1:]):
        raise ContractViolation("batch-norm prediction assumes binary weights above layer 1")
    b = batch_size or spec.batch_size
    k = spec.widths
    rel = [1.0] * n
    if model == "leading":
        for l in range(n - 1, 0, -1):
            rel[l - 1] = rel[l] * k[l + 1] / k[l - 1]
        tag = "bn-leading"
    elif model == "exact":
        if shat_sq_var is None:
            raise ContractViolation("exact model needs a Var(s_hat^2) provider")
        for l in range(n - 1, 0, -1):
            rel[l - 1] = rel[l] * k[l + 1] * bn_step_factor(k[l - 1], b, shat_sq_var(k[l - 1]))
        tag = "bn-exact-prefactor"
    else:
        raise ValueError(f"unknown model {model!r}")
    return VariancePrediction(tag, tuple(rel), var_l)


def telescoped_bn_factor(widths: Sequence[int], l: int) -> Fraction:
    """Closed form of ``prod_{l'=l}^{L-1} K_{l'+1}/K_{l'-1}`` as an exact rational."""
    L = len(widths) - 1
    if l == L:
        return Fraction(1)
    return Fraction(widths[L - 1] * widths[L], widths[l - 1] * widths[l])


def bn_factor_product(widths: Sequence[int], l: int) -> Fraction:
    L = len(widths) - 1
    out = Fraction(1)
    for lp in range(l, L):
        out *= Fraction(widths[lp + 1], widths[lp - 1])
    return out
