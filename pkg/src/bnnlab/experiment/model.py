"""Dense binary classifier built on the autodiff tape."""
from __future__ import annotations

import numpy as np

from .. import normalizers as nz
from ..autodiff import STE_CLIPPED, Tape, Var
from ..core import RngStream
from ..theory import InitScheme, NetworkSpec, sample_weights


class BinaryMLP:
    """Latent weights, normalizer parameters and running statistics for a
    :class:`NetworkSpec`. Binary layers use ``sign(W)`` in the forward pass and
    pass gradients to ``W`` through the clipped straight-through estimator."""

    def __init__(self, spec: NetworkSpec, scheme: InitScheme, rng: RngStream,
                 layer_variances: list[float] | None = None, ste: str = STE_CLIPPED,
                 fp_scheme: InitScheme | None = None):
        """``fp_scheme``, if given, initializes the full-precision layers while
        ``scheme`` (or ``layer_variances``) covers the binary ones."""
        self.spec = spec
        self.ste = ste
        self.weights = []
        for l in range(1, spec.depth + 1):
            if fp_scheme is not None and not spec.binary[l - 1]:
                s = fp_scheme
            elif layer_variances is not None:
                s = InitScheme(scheme.family, layer_variances[l - 1])
            else:
                s = scheme
            self.weights.append(sample_weights(s, spec.widths[l - 1], spec.widths[l], rng))
        self.bias = np.zeros((1, spec.widths[-1]))
        self.gamma: dict[int, np.ndarray] = {}
        self.beta: dict[int, np.ndarray] = {}
        self.running: dict[int, nz.RunningStats] = {}
        for l in range(1, spec.depth):
            cfg = spec.normalizers[l - 1]
            k = spec.widths[l]
            if cfg.variant is nz.Variant.FULL_BN:
                self.gamma[l] = np.ones((1, k))
                self.beta[l] = np.zeros((1, k))
            elif cfg.variant is nz.Variant.BIAS:
                self.beta[l] = np.zeros((1, k))
            if cfg.variant in (nz.Variant.FULL_BN, nz.Variant.CENTER_SCALE, nz.Variant.CENTER_ONLY):
                self.running[l] = nz.RunningStats.init(k)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"w{l}", w) for l, w in enumerate(self.weights, 1)]
        out += [(f"gamma{l}", g) for l, g in sorted(self.gamma.items())]
        out += [(f"beta{l}", b) for l, b in sorted(self.beta.items())]
        out.append(("bias", self.bias))
        return out

    def set_parameters(self, values: list[np.ndarray]):
        names = [n for n, _ in self.parameters()]
        for name, v in zip(names, values):
            if name == "bias":
                self.bias = v
            elif name.startswith("w"):
                self.weights[int(name[1:]) - 1] = v
            elif name.startswith("gamma"):
                self.gamma[int(name[5:])] = v
            else:
                self.beta[int(name[4:])] = v

    def clip_flags(self) -> list[bool]:
        """Which parameters are latent binary weights."""
        return [n.startswith("w") and self.spec.binary[int(n[1:]) - 1] for n, _ in self.parameters()]

    def forward(self, tape: Tape, x: np.ndarray, mode: str = "train"):
        """Returns ``(logits, leaves, pre_activations, activations, batch_stats)``.

        ``leaves`` maps parameter names to tape vars; ``batch_stats`` maps a
        layer to the statistics that update its running averages.
        """
        spec = self.spec
        leaves: dict[str, Var] = {n: tape.leaf(v, n) for n, v in self.parameters()}
        h = tape.constant(x)
        pre, acts, stats = [], [], {}
        for l in range(1, spec.depth + 1):
            w = leaves[f"w{l}"]
            if spec.binary[l - 1]:
                w = tape.sign(w, self.ste)
            s = tape.linear(h, w)
            pre.append(s)
            cfg = spec.normalizers[l - 1]
            if l == spec.depth:
                h = tape.add(s, leaves["bias"])
                break
            if cfg.variant is nz.Variant.FULL_BN:
                z, st = tape.batch_norm(s, leaves[f"gamma{l}"], leaves[f"beta{l}"], cfg, mode, self.running.get(l))
                stats[l] = (st, cfg.eps)
            elif cfg.variant in (nz.Variant.CENTER_SCALE, nz.Variant.CENTER_ONLY):
                z, mu = tape.center_scale(s, cfg.effective_scale(spec.widths[l - 1]), mode, self.running.get(l))
                stats[l] = (nz.BatchStats(mu, np.ones_like(mu), s.shape[0]), None)
            elif cfg.variant is nz.Variant.BIAS:
                z = tape.add(s, leaves[f"beta{l}"])
            else:
                z = s
            act = spec.activations[l - 1]
            if act == "sign":
                h = tape.sign(z, self.ste)
            elif act == "relu":
                h = tape.relu(z)
            else:
                h = z
            acts.append(h)
        return h, leaves, pre, acts, stats

    def update_running(self, stats):
        for l, (st, eps) in stats.items():
            cfg = self.spec.normalizers[l - 1]
            if eps is None:
                # centering variants track the mean only
                r = self.running[l]
                self.running[l] = nz.RunningStats((1 - cfg.momentum) * r.mean + cfg.momentum * st.mean, r.var)
            else:
                self.running[l] = nz.update_running_stats(self.running[l], st, cfg.momentum, eps)

    def predict(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        out = []
        for i in range(0, x.shape[0], batch):
            logits = self.forward(Tape(), x[i:i + batch], mode="eval")[0]
            out.append(np.argmax(logits.value, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
