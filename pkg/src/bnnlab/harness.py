"""Monte-Carlo measurement of gradient variance at initialization.

Every trial draws fresh weights and inputs from its own stream
``(master_seed, trial)``, runs one forward pass, injects a unit-variance
Gaussian gradient at the top pre-activation and backpropagates it. Per-layer
moments are merged in trial order, so the report does not depend on how many
worker processes ran the trials.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import partial

import numpy as np

from . import normalizers as nz
from .autodiff import STE_IDENTITY, sign, ste_backward
from .core import RngStream, matmul
from .errors import ContractViolation
from .theory import (
    InitScheme,
    NetworkSpec,
    VariancePrediction,
    binarize,
    predict_backward_variance_bn,
    predict_backward_variance_no_norm,
    sample_weights,
)

WORKERS_ENV = "BNNLAB_WORKERS"
DEFAULT_TOLERANCE = 1.33
MIN_TRIALS = 30
EXACT_MAX_K = 30


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, default)))
    except ValueError:
        return default


@dataclass(frozen=True)
class MCConfig:
    trials: int = 200
    batch_size: int = 128
    master_seed: int = 0
    input_dist: str = "rademacher"
    # the variance recursion treats the activation derivative as 1
    ste: str = STE_IDENTITY

    def __post_init__(self):
        if self.input_dist not in ("rademacher", "gaussian"):
            raise ContractViolation(f"unknown input distribution {self.input_dist!r}")
        if self.batch_size < 2:
            raise ContractViolation("batch size must be at least 2")


# running moments -----------------------------------------------------------

def _moments(a: np.ndarray) -> tuple[int, float, float]:
    n = a.size
    mean = float(a.mean())
    return n, mean, float(((a - mean) ** 2).sum())


def _merge(x, y):
    na, ma, m2a = x
    nb, mb, m2b = y
    if na == 0:
        return y
    n = na + nb
    d = mb - ma
    return n, ma + d * nb / n, m2a + m2b + d * d * na * nb / n


# single network pass --------------------------------------------------------

def _normalize(s, cfg: nz.NormalizerConfig, fan_in: int):
    """Train-mode normalizer at init (gamma = 1, beta = 0). Returns ``(z, backward)``."""
    v = cfg.variant
    if v is nz.Variant.FULL_BN:
        params = nz.BNParams.init(s.shape[1])
        z, stats, s_hat = nz.bn_forward(s, params, cfg)
        return z, lambda g: nz.bn_backward_closed(s_hat, g, params, stats)
    if v in (nz.Variant.CENTER_SCALE, nz.Variant.CENTER_ONLY):
        c = cfg.effective_scale(fan_in)
        z, _ = nz.center_scale_forward(s, c)
        return z, lambda g: nz.center_scale_backward(g, c)
    return s, lambda g: g


def _activate(z, act):
    if act == "sign":
        return sign(z)
    if act == "relu":
        return np.where(z > 0, z, 0.0)
    return z


def sample_network(spec: NetworkSpec, scheme: InitScheme, rng: RngStream) -> list[np.ndarray]:
    """Forward-pass weights for every layer (binarized where the layer is binary)."""
    ws = []
    for l in range(1, spec.depth + 1):
        w = sample_weights(scheme, spec.widths[l - 1], spec.widths[l], rng)
        ws.append(binarize(w) if spec.binary[l - 1] else w)
    return ws


def sample_inputs(mc: MCConfig, k: int, rng: RngStream) -> np.ndarray:
    if mc.input_dist == "rademacher":
        return rng.rademacher((mc.batch_size, k))
    return rng.normal(0.0, 1.0, (mc.batch_size, k))


def forward_hidden(spec: NetworkSpec, ws: list[np.ndarray], x: np.ndarray):
    """Run layers 1..L-1 and return ``(pre-activations, post-norm, activations, backward fns)``;
    the top layer's pre-activation is appended to the first list."""
    ss, zs, xs, backs = [], [], [], []
    for l in range(1, spec.depth):
        s = matmul(x, ws[l - 1])
        z, back = _normalize(s, spec.normalizers[l - 1], spec.widths[l - 1])
        x = _activate(z, spec.activations[l - 1])
        ss.append(s)
        zs.append(z)
        xs.append(x)
        backs.append(back)
    ss.append(matmul(x, ws[-1]))
    return ss, zs, xs, backs


def _trial(spec: NetworkSpec, scheme: InitScheme, mc: MCConfig, trial: int):
    rng = RngStream(mc.master_seed, trial)
    ws = sample_network(spec, scheme, rng)
    x = sample_inputs(mc, spec.widths[0], rng)
    _, zs, _, backs = forward_hidden(spec, ws, x)
    g = rng.normal(0.0, 1.0, (mc.batch_size, spec.widths[-1]))
    out = [_moments(g)]
    for l in range(spec.depth - 1, 0, -1):
        dx = matmul(g, np.ascontiguousarray(ws[l].T))
        act = spec.activations[l - 1]
        z = zs[l - 1]
        if act == "sign":
            dz = ste_backward(z, dx, mc.ste)
        elif act == "relu":
            dz = np.where(z > 0, dx, 0.0)
        else:
            dz = dx
        g = backs[l - 1](dz)
        out.append(_moments(g))
    return out[::-1]


def _run_trials(fn, trials: int, workers: int):
    if workers <= 1 or trials < 2 * workers:
        return [fn(t) for t in range(trials)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(trials), chunksize=max(1, trials // (4 * workers))))


# reports --------------------------------------------------------------------

@dataclass(frozen=True)
class LayerVariance:
    layer: int
    width: int
    fan_in: int
    measured: float
    measured_rel: float
    pred_no_norm: float
    pred_bn_leading: float
    pred_bn_exact: float
    pred_matched: float

    @property
    def ratio(self) -> float:
        """Measured over the prediction matching the network's normalizer."""
        return self.measured_rel / self.pred_matched


@dataclass
class GradVarianceReport:
    layers: list[LayerVariance]
    matched_model: str
    metadata: dict = field(default_factory=dict)

    def measured_step_ratios(self) -> list[float]:
        """Measured ``V_l / V_{l+1}`` for every interface l = 1..L-1."""
        m = [r.measured for r in self.layers]
        return [m[i] / m[i + 1] for i in range(len(m) - 1)]

    def predicted_step_ratios(self, model: str | None = None) -> list[float]:
        p = [_pred(r, model or self.matched_model) for r in self.layers]
        return [p[i] / p[i + 1] for i in range(len(p) - 1)]

    CSV_HEADER = ("layer", "width", "fan_in", "measured_var", "measured_rel", "pred_no_norm",
                  "pred_bn_leading", "pred_bn_exact", "pred_matched", "matched_model", "ratio")

    def rows(self) -> list[dict]:
        return [
            {
                "layer": r.layer, "width": r.width, "fan_in": r.fan_in,
                "measured_var": r.measured, "measured_rel": r.measured_rel,
                "pred_no_norm": r.pred_no_norm, "pred_bn_leading": r.pred_bn_leading,
                "pred_bn_exact": r.pred_bn_exact, "pred_matched": r.pred_matched,
                "matched_model": self.matched_model, "ratio": r.ratio,
            }
            for r in self.layers
        ]


def _pred(r: LayerVariance, model: str) -> float:
    return {
        "no-norm": r.pred_no_norm,
        "bn-leading": r.pred_bn_leading,
        "bn-exact-prefactor": r.pred_bn_exact,
        "matched": r.pred_matched,
    }.get(model, r.pred_matched)


def matched_prediction(spec: NetworkSpec) -> VariancePrediction:
    """Leading-order prediction for the network's own normalizers.

    Each interface multiplies by ``K_{l+1} * gain_l`` where the gain is
    ``1/K_{l-1}`` for full BN, ``c^2`` for center/scale (``1`` for
    centering only or no normalizer).
    """
    k = spec.widths
    n = spec.depth
    rel = [1.0] * n
    kinds = set()
    for l in range(n - 1, 0, -1):
        cfg = spec.normalizers[l - 1]
        if cfg.variant is nz.Variant.FULL_BN:
            gain = 1.0 / k[l - 1]
        elif cfg.variant in (nz.Variant.CENTER_SCALE, nz.Variant.CENTER_ONLY):
            gain = cfg.effective_scale(k[l - 1]) ** 2
        else:
            gain = 1.0
        kinds.add(cfg.variant)
        rel[l - 1] = rel[l] * k[l + 1] * gain
    if kinds <= {nz.Variant.IDENTITY, nz.Variant.BIAS, nz.Variant.CENTER_ONLY}:
        tag = "no-norm"
    elif kinds == {nz.Variant.FULL_BN}:
        tag = "bn-leading"
    else:
        tag = "matched"
    return VariancePrediction(tag, tuple(rel))


def measure_gradient_variance(spec: NetworkSpec, scheme: InitScheme | None = None, mc: MCConfig | None = None,
                              workers: int | None = None) -> GradVarianceReport:
    scheme = scheme or InitScheme()
    mc = mc or MCConfig(batch_size=spec.batch_size)
    if mc.trials < MIN_TRIALS:
        raise ContractViolation(f"need at least {MIN_TRIALS} trials, got {mc.trials}")
    workers = worker_count() if workers is None else workers
    per_trial = _run_trials(partial(_trial, spec, scheme, mc), mc.trials, workers)

    n_layers = spec.depth
    acc = [(0, 0.0, 0.0)] * n_layers
    for moments in per_trial:
        acc = [_merge(a, m) for a, m in zip(acc, moments)]
    measured = [m2 / (n - 1) for n, _, m2 in acc]

    all_binary = NetworkSpec.binary_mlp(spec.widths, batch_size=mc.batch_size)
    no_norm = predict_backward_variance_no_norm(all_binary)
    bn_spec = all_binary.with_normalizer(nz.NormalizerConfig.full_bn())
    lead = predict_backward_variance_bn(bn_spec, batch_size=mc.batch_size, model="leading")
    exact = predict_backward_variance_bn(bn_spec, batch_size=mc.batch_size, model="exact",
                                         shat_sq_var=lambda k: shat_sq_variance(k, "exact") if k <= EXACT_MAX_K
                                         else shat_sq_variance_closed(k))
    matched = matched_prediction(spec)

    top = measured[-1]
    layers = [
        LayerVariance(
            layer=l, width=spec.widths[l], fan_in=spec.widths[l - 1],
            measured=measured[l - 1], measured_rel=measured[l - 1] / top,
            pred_no_norm=no_norm.relative[l - 1], pred_bn_leading=lead.relative[l - 1],
            pred_bn_exact=exact.relative[l - 1], pred_matched=matched.relative[l - 1],
        )
        for l in range(1, n_layers + 1)
    ]
    meta = {
        "trials": mc.trials, "batch_size": mc.batch_size, "master_seed": mc.master_seed,
        "input": mc.input_dist, "ste": mc.ste, "init": scheme.label,
        "normalizers": ";".join(c.label for c in spec.normalizers),
        "shat_sq_var": "population value for s/sqrt(K) with s a sum of K signs; "
                       "batch-standardized values fluctuate around it",
    }
    return GradVarianceReport(layers, matched.model, meta)


@dataclass(frozen=True)
class Verdict:
    layer: int
    model: str
    ratio: float
    tolerance: float
    passed: bool


def compare_report(report: GradVarianceReport, tolerance: float = DEFAULT_TOLERANCE,
                   model: str | None = None) -> list[Verdict]:
    """Pass iff ``measured / predicted`` lies in ``[1/tolerance, tolerance]``."""
    if not tolerance > 1:
        raise ContractViolation("tolerance must exceed 1")
    model = model or report.matched_model
    out = []
    for r in report.layers:
        ratio = r.measured_rel / _pred(r, model)
        out.append(Verdict(r.layer, model, ratio, tolerance, 1.0 / tolerance <= ratio <= tolerance))
    return out


def within_factor(measured: float, predicted: float, tolerance: float = DEFAULT_TOLERANCE) -> bool:
    return 1.0 / tolerance <= measured / predicted <= tolerance


# Var(s_hat^2) ---------------------------------------------------------------

def shat_sq_variance_fraction(k: int) -> Fraction:
    """Exact ``Var(s^2 / K)`` for ``s`` a sum of ``K`` independent signs,
    by enumerating the binomial lattice ``s = K - 2j``."""
    if k < 1:
        raise ContractViolation("K must be positive")
    if k > EXACT_MAX_K:
        raise ContractViolation(f"exact enumeration is limited to K <= {EXACT_MAX_K}; use sampled mode")
    total = 2 ** k
    m2 = Fraction(0)
    m4 = Fraction(0)
    for j in range(k + 1):
        p = Fraction(math.comb(k, j), total)
        q = Fraction((k - 2 * j) ** 2, k)
        m2 += p * q
        m4 += p * q * q
    return m4 - m2 * m2


def shat_sq_variance_closed(k: int) -> float:
    """``2 - 2/K``: fourth moment of a Rademacher sum is ``3K^2 - 2K``."""
    return 2.0 - 2.0 / k


def shat_sq_variance_sampled(k: int, rng: RngStream, samples: int = 200_000) -> tuple[float, float]:
    """Monte-Carlo estimate of ``Var(s_hat^2)`` and its standard error."""
    s = k - 2.0 * rng.generator.binomial(k, 0.5, size=samples)
    q = s * s / k
    c = q - q.mean()
    var = float((c ** 2).sum() / (samples - 1))
    m4 = float((c ** 4).mean())
    return var, math.sqrt(max(m4 - var * var, 0.0) / samples)


def shat_sq_variance(k: int, mode: str = "exact", rng: RngStream | None = None,
                     samples: int = 200_000) -> float:
    if mode == "exact":
        return float(shat_sq_variance_fraction(k))
    if mode == "sampled":
        return shat_sq_variance_sampled(k, rng or RngStream(0, k), samples)[0]
    raise ValueError(f"unknown mode {mode!r}")


# forward-pass checks --------------------------------------------------------

def measure_forward_variance(spec: NetworkSpec, scheme: InitScheme, mc: MCConfig) -> list[float]:
    """Pooled ``Var(s^l)`` with linear propagation (activations as identity)."""
    acc = [(0, 0.0, 0.0)] * spec.depth
    for t in range(mc.trials):
        rng = RngStream(mc.master_seed, t)
        ws = sample_network(spec, scheme, rng)
        x = sample_inputs(mc, spec.widths[0], rng)
        for l in range(spec.depth):
            x = matmul(x, ws[l])
            acc[l] = _merge(acc[l], _moments(x))
    return [m2 / (n - 1) for n, _, m2 in acc]


def hidden_activations(spec: NetworkSpec, ws: list[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    return forward_hidden(spec, ws, x)[2]


def scale_invariance_check(spec: NetworkSpec, c: float, seed: int = 0, layer: int = 1,
                           scheme: InitScheme | None = None) -> bool:
    """True iff scaling layer ``layer``'s latent weights by ``c`` leaves every
    hidden activation bit-identical."""
    if not c > 0:
        raise ContractViolation("c must be positive")
    scheme = scheme or InitScheme()
    rng = RngStream(seed, 0)
    latent = [sample_weights(scheme, spec.widths[l - 1], spec.widths[l], rng) for l in range(1, spec.depth + 1)]
    x = rng.normal(0.0, 1.0, (spec.batch_size, spec.widths[0]))

    def run(ws):
        fw = [binarize(w) if b else w for w, b in zip(ws, spec.binary)]
        return hidden_activations(spec, fw, x)

    scaled = list(latent)
    scaled[layer - 1] = latent[layer - 1] * c
    return all(np.array_equal(a, b) for a, b in zip(run(latent), run(scaled)))
