"""Normalization variants used in the ablation: full batch norm, centering
with a fixed scale, centering only, identity (and a bias-only control).

Everything here is a pure numpy function on ``B x K`` matrices; per-neuron
quantities are ``1 x K`` rows. The autodiff tape wraps these as fused ops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractViolation, SingularityError, ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class Variant(str, Enum):
    FULL_BN = "full_bn"
    CENTER_SCALE = "center_scale"
    CENTER_ONLY = "center_only"
    IDENTITY = "identity"
    BIAS = "bias"


@dataclass(frozen=True)
class NormalizerConfig:
    """Which normalizer a layer uses.

    ``scale`` is the fixed multiplier ``c`` of CenterScale. With
    ``fan_in_scaled`` the effective multiplier is ``scale / sqrt(K_in)``, so
    ``center_scale_fan_in(1/sqrt(3))`` gives ``1/sqrt(3 K_in)``.
    """

    variant: Variant = Variant.FULL_BN
    scale: float = 1.0
    fan_in_scaled: bool = False
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.scale > 0:
            raise ContractViolation(f"scale must be positive, got {self.scale}")
        if self.variant is Variant.FULL_BN and not self.eps > 0:
            raise ContractViolation(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ContractViolation(f"momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def full_bn(cls, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        return cls(Variant.FULL_BN, eps=eps, momentum=momentum)

    @classmethod
    def center_scale(cls, c: float):
        return cls(Variant.CENTER_SCALE, scale=c)

    @classmethod
    def center_scale_fan_in(cls, multiplier: float = 1.0):
        return cls(Variant.CENTER_SCALE, scale=multiplier, fan_in_scaled=True)

    @classmethod
    def center_only(cls):
        return cls(Variant.CENTER_ONLY)

    @classmethod
    def identity(cls):
        return cls(Variant.IDENTITY)

    @classmethod
    def bias(cls):
        return cls(Variant.BIAS)

    def effective_scale(self, fan_in: int) -> float:
        if self.variant is Variant.CENTER_ONLY:
            return 1.0
        if self.fan_in_scaled:
            return self.scale / math.sqrt(fan_in)
        return self.scale

    @property
    def label(self) -> str:
        if self.variant is Variant.CENTER_SCALE:
            if self.fan_in_scaled:
                return "center_scale_fan_in" if self.scale == 1.0 else f"center_scale_fan_in*{self.scale:g}"
            return f"center_scale({self.scale:g})"
        return self.variant.value

    @classmethod
    def parse(cls, text: str) -> "NormalizerConfig":
        """Parse labels such as ``full_bn``, ``center_scale(0.125)``,
        ``center_scale_fan_in`` or ``center_scale_fan_in*0.577``."""
        t = text.strip().lower()
        if t.startswith("center_scale_fan_in"):
            rest = t[len("center_scale_fan_in"):]
            return cls.center_scale_fan_in(float(rest[1:]) if rest.startswith("*") else 1.0)
        if t.startswith("center_scale(") and t.endswith(")"):
            return cls.center_scale(float(t[len("center_scale("):-1]))
        return cls(Variant(t))


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def init(cls, k: int) -> "BNParams":
        return cls(np.ones((1, k)), np.zeros((1, k)))


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    std: np.ndarray
    batch_size: int


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, k: int) -> "RunningStats":
        return cls(np.zeros((1, k)), np.ones((1, k)))


def batch_stats(s: np.ndarray, eps: float = 0.0) -> BatchStats:
    """Per-neuron mean and ``sqrt(biased variance + eps)``."""
    b = s.shape[0]
    mu = s.mean(axis=0, keepdims=True)
    var = ((s - mu) ** 2).mean(axis=0, keepdims=True)
    return BatchStats(mu, np.sqrt(var + eps), b)


def bn_forward(s, params: BNParams, cfg: NormalizerConfig | None = None, mode: str = "train",
               running: RunningStats | None = None, eps: float | None = None):
    """Batch norm forward. Returns ``(z, stats, s_hat)``.

    ``eps`` overrides ``cfg.eps`` (``eps=0`` gives the textbook form used by
    the oracle tests).
    """
    cfg = cfg or NormalizerConfig.full_bn()
    if cfg.variant is not Variant.FULL_BN:
        raise ContractViolation(f"bn_forward needs a full_bn config, got {cfg.variant.value}")
    eps = cfg.eps if eps is None else eps
    s = np.asarray(s, dtype=np.float64)
    if params.gamma.shape != (1, s.shape[1]) or params.beta.shape != (1, s.shape[1]):
        raise ShapeError("gamma/beta must be 1 x K rows matching the input")
    if mode == "train":
        if s.shape[0] < 2:
            raise ContractViolation("train-mode batch norm needs a batch of at least 2")
        stats = batch_stats(s, eps)
    elif mode == "eval":
        if running is None:
            raise ContractViolation("eval mode needs running statistics")
        stats = BatchStats(running.mean, np.sqrt(running.var + eps), s.shape[0])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if np.any(stats.std == 0):
        raise SingularityError("zero standard deviation with eps=0")
    s_hat = (s - stats.mean) / stats.std
    z = params.gamma * s_hat + params.beta
    return z, stats, s_hat


def bn_backward_closed(s_hat, dz, params: BNParams, stats: BatchStats) -> np.ndarray:
    """Input gradient of batch norm in its three-term closed form:

        dS = gamma/sigma * (dZ - mean_b(dZ) - s_hat * mean_b(dZ * s_hat))
    """
    if s_hat.shape != dz.shape:
        raise ShapeError(f"s_hat {s_hat.shape} and dz {dz.shape} differ")
    if np.any(stats.std == 0):
        raise SingularityError("zero standard deviation")
    b = dz.shape[0]
    term_mean = dz.sum(axis=0, keepdims=True) / b
    term_proj = (dz * s_hat).sum(axis=0, keepdims=True) / b
    return (params.gamma / stats.std) * (-term_mean - s_hat * term_proj + dz)


def bn_param_grads(s_hat, dz) -> tuple[np.ndarray, np.ndarray]:
    """``(d_gamma, d_beta)`` as ``1 x K`` rows."""
    if s_hat.shape != dz.shape:
        raise ShapeError(f"s_hat {s_hat.shape} and dz {dz.shape} differ")
    return (dz * s_hat).sum(axis=0, keepdims=True), dz.sum(axis=0, keepdims=True)


def center_scale_forward(s, c: float, mode: str = "train", running: RunningStats | None = None):
    """``(s - mean) * c``; returns ``(z, mean)``. CenterOnly is ``c = 1``."""
    if not c > 0:
        raise ContractViolation(f"scale must be positive, got {c}")
    s = np.asarray(s, dtype=np.float64)
    if mode == "train":
        mu = s.mean(axis=0, keepdims=True)
    elif mode == "eval":
        if running is None:
            raise ContractViolation("eval mode needs running statistics")
        mu = running.mean
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return (s - mu) * c, mu


def center_scale_backward(dz, c: float) -> np.ndarray:
    return (dz - dz.mean(axis=0, keepdims=True)) * c


def fold_bn_to_threshold(stats: BatchStats, params: BNParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron threshold ``tau = mu - sigma*beta/gamma`` and orientation.

    With orientation +1 the sign of the BN output is +1 iff ``s >= tau``;
    with -1 (negative gamma) it is +1 iff ``s <= tau``.
    """
    if np.any(stats.std == 0):
        raise SingularityError("zero standard deviation")
    if np.any(params.gamma == 0):
        raise SingularityError("gamma == 0 makes the output constant")
    tau = stats.mean - stats.std / params.gamma * params.beta
    return tau, np.where(params.gamma > 0, 1.0, -1.0)


def rounded_threshold(tau: np.ndarray) -> np.ndarray:
    """Round-to-nearest form of the threshold (ties to even)."""
    return np.rint(tau)


def threshold_sign(s, tau, orientation) -> np.ndarray:
    """Evaluate the folded threshold unit on dot products ``s``."""
    above = np.where(orientation > 0, s >= tau, s <= tau)
    return np.where(above, 1.0, -1.0)


def update_running_stats(running: RunningStats, stats: BatchStats, momentum: float = DEFAULT_MOMENTUM,
                         eps: float = 0.0) -> RunningStats:
    """Exponential moving average ``new = (1 - m) * old + m * batch``.

    ``eps`` is subtracted from the stored variance so that ``stats.std``
    computed with ``eps`` round-trips to the biased batch variance.
    """
    if not 0.0 < momentum < 1.0:
        raise ContractViolation(f"momentum must lie in (0, 1), got {momentum}")
    var = stats.std ** 2 - eps
    return RunningStats(
        (1.0 - momentum) * running.mean + momentum * stats.mean,
        (1.0 - momentum) * running.var + momentum * var,
    )
