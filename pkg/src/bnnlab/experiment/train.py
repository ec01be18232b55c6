"""Training loop: mini-batch Adam on mean cross-entropy with a step schedule."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tape
from ..core import RngStream
from ..errors import ContractViolation, NonFiniteError
from ..normalizers import NormalizerConfig
from ..theory import InitScheme, NetworkSpec
from .data import Dataset
from .model import BinaryMLP
from .optim import AdamHyper, AdamState, StepSchedule, adam_step, lr_at_epoch

log = logging.getLogger(__name__)

# stream ids under the master seed
_WEIGHTS, _TELEMETRY, _SHUFFLE = 0, 1, 100


@dataclass(frozen=True)
class TrainConfig:
    spec: NetworkSpec
    scheme: InitScheme = InitScheme()
    # full-precision layers use this scheme when set, else ``scheme``
    fp_scheme: InitScheme | None = None
    adam: AdamHyper = AdamHyper()
    schedule: StepSchedule = StepSchedule()
    epochs: int = 30
    seed: int = 0
    latent_clip: bool = True
    telemetry: bool = True
    layer_variances: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractViolation("epochs must be non-negative")
        if self.schedule.milestones and self.schedule.milestones[-1] >= max(self.epochs, 1):
            raise ContractViolation("milestones must be below the epoch count")
        if self.layer_variances is not None and len(self.layer_variances) != self.spec.depth:
            raise ContractViolation("layer_variances needs one entry per layer")

    def echo(self) -> dict:
        s = self.spec
        return {
            "widths": "-".join(map(str, s.widths)),
            "normalizer": s.normalizers[0].label,
            "batch_size": s.batch_size,
            "init": self.scheme.label,
            "fp_init": self.fp_scheme.label if self.fp_scheme else "",
            "lr": self.schedule.base_lr,
            "milestones": "-".join(map(str, self.schedule.milestones)),
            "decay": self.schedule.decay,
            "epochs": self.epochs,
            "seed": self.seed,
            "latent_clip": self.latent_clip,
        }


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: float


@dataclass
class RunRecord:
    config: dict
    epochs: list[EpochMetrics] = field(default_factory=list)
    grad_var: list[float] | None = None
    status: str = "ok"
    wall_time: float = 0.0

    @property
    def best_accuracy(self) -> float:
        return max((e.test_accuracy for e in self.epochs), default=0.0)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].test_accuracy if self.epochs else 0.0

    CSV_HEADER = ("epoch", "lr", "train_loss", "test_accuracy", "status")

    def rows(self) -> list[dict]:
        rows = [{"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss,
                 "test_accuracy": e.test_accuracy, "status": self.status} for e in self.epochs]
        if self.grad_var is not None:
            for r in rows:
                for l, v in enumerate(self.grad_var, 1):
                    r[f"grad_var_l{l}"] = v if r["epoch"] == 0 else ""
        return rows


def _accuracy(model: BinaryMLP, x, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(model.predict(x) == y))


def _loss(model: BinaryMLP, x, y, batch: int = 512) -> float:
    total = 0.0
    for i in range(0, len(y), batch):
        tape = Tape()
        logits = model.forward(tape, x[i:i + batch], mode="eval")[0]
        total += tape.softmax_cross_entropy(logits, y[i:i + batch]).value[0, 0] * len(y[i:i + batch])
    return total / max(len(y), 1)


def gradient_telemetry(model: BinaryMLP, x: np.ndarray, y: np.ndarray) -> list[float]:
    """Unbiased variance of ``dL/ds^l`` per layer on one mini-batch, no update."""
    tape = Tape()
    logits, _, pre, _, _ = model.forward(tape, x, mode="train")
    loss = tape.softmax_cross_entropy(logits, y)
    grads = tape.backward(loss)
    return [float(np.var(grads[s.id], ddof=1)) for s in pre]


def train(config: TrainConfig, data: Dataset) -> RunRecord:
    """Train a :class:`BinaryMLP`; epoch 0 is the untrained network.

    A non-finite loss or gradient ends the run with status ``diverged``.
    """
    start = time.perf_counter()
    spec = config.spec
    model = BinaryMLP(spec, config.scheme, RngStream(config.seed, _WEIGHTS),
                      list(config.layer_variances) if config.layer_variances else None,
                      fp_scheme=config.fp_scheme)
    record = RunRecord(config.echo())
    b = spec.batch_size
    n = data.x_train.shape[0]
    clip = model.clip_flags() if config.latent_clip else None
    names = [name for name, _ in model.parameters()]
    state = AdamState.zeros_like([p for _, p in model.parameters()])

    try:
        if config.telemetry:
            idx = RngStream(config.seed, _TELEMETRY).permutation(n)[:b]
            record.grad_var = gradient_telemetry(model, data.x_train[idx], data.y_train[idx])
        record.epochs.append(EpochMetrics(0, lr_at_epoch(config.schedule, 0),
                                          _loss(model, data.x_train, data.y_train),
                                          _accuracy(model, data.x_test, data.y_test)))
        for epoch in range(1, config.epochs + 1):
            lr = lr_at_epoch(config.schedule, epoch - 1)
            order = RngStream(config.seed, _SHUFFLE + epoch).permutation(n)
            losses, seen = [], 0
            for i in range(0, n - 1, b):
                idx = order[i:i + b]
                if len(idx) < 2:
                    break
                tape = Tape()
                logits, leaves, _, _, stats = model.forward(tape, data.x_train[idx], mode="train")
                loss = tape.softmax_cross_entropy(logits, data.y_train[idx])
                lv = loss.value[0, 0]
                if not np.isfinite(lv):
                    raise NonFiniteError("loss is not finite")
                grads = tape.backward(loss)
                params = [p for _, p in model.parameters()]
                g = [grads.get(leaves[name].id, np.zeros_like(p)) for name, p in zip(names, params)]
                new, state = adam_step(params, g, state, config.adam, lr, clip)
                model.set_parameters(new)
                model.update_running(stats)
                losses.append(lv * len(idx))
                seen += len(idx)
            record.epochs.append(EpochMetrics(epoch, lr, float(np.sum(losses)) / max(seen, 1),
                                              _accuracy(model, data.x_test, data.y_test)))
            log.debug("epoch %d lr %.2e loss %.4f acc %.4f", epoch, lr,
                      record.epochs[-1].train_loss, record.epochs[-1].test_accuracy)
    except (NonFiniteError, FloatingPointError) as exc:
        log.info("run diverged: %s", exc)
        record.status = "diverged"
    record.wall_time = time.perf_counter() - start
    return record
