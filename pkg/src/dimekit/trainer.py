"""Energy and force training with Adam, plus evaluation metrics."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import diffcore as dc
from .errors import InputError, TrainingDiverged
from .geometry import AtomicConfiguration
from .model import (
    ModelConfig,
    ParameterStore,
    Prediction,
    collate,
    featurize,
    forward_batch,
    init_params,
    sigma_from_raw,
    DimeNetPP,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Metrics",
    "TrainResult",
    "learning_rate",
    "loss",
    "batch_loss",
    "loss_and_grads",
    "Adam",
    "train",
    "evaluate",
    "metrics_from_predictions",
    "LOG_HEADER",
]

LOG_HEADER = ("step", "lr", "train_loss", "val_mae_E", "val_mae_F")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 3000
    decay_rate: float = 0.01  # multiplier reached after `decay_steps` post-warmup steps
    decay_steps: int = 4_000_000
    batch_size: int = 32
    max_steps: int = 10_000
    force_weight: float = 0.999
    loss_kind: str = "l1"
    seed: int = 0
    eval_every: int = 500
    eval_batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.loss_kind not in ("l1", "nll"):
            raise InputError(f"loss_kind must be 'l1' or 'nll', got {self.loss_kind!r}")
        if not 0.0 <= self.force_weight <= 1.0:
            raise InputError("force_weight must lie in [0, 1]")
        if self.peak_lr <= 0 or not 0 < self.decay_rate <= 1 or self.decay_steps < 1:
            raise InputError("learning-rate schedule parameters must be positive")
        if self.warmup_steps < 0 or self.max_steps < 0:
            raise InputError("step counts must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_batch_size < 1:
            raise InputError("batch sizes and eval interval must be >= 1")

    @property
    def energy_weight(self) -> float:
        return 1.0 - self.force_weight

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then exponential decay."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    after = step - cfg.warmup_steps
    return cfg.peak_lr * cfg.decay_rate ** (after / cfg.decay_steps)


# ---------------------------------------------------------------------------
# loss


def _need_labels(label: AtomicConfiguration, forces: bool) -> None:
    if label.energy is None:
        raise InputError("training label has no energy")
    if forces and label.forces is None:
        raise InputError("training label has no forces but force_weight > 0")


def loss(pred: Prediction, label: AtomicConfiguration, cfg: TrainConfig) -> float:
    """Loss of a single prediction (plain floats; mirrors :func:`batch_loss`)."""
    use_f = cfg.force_weight > 0
    _need_labels(label, use_f)
    f_term = 0.0
    if use_f:
        if pred.forces is None:
            raise InputError("prediction carries no forces")
        f_term = float(np.mean(np.abs(np.asarray(label.forces) - pred.forces)))
    if cfg.loss_kind == "l1":
        return cfg.energy_weight * abs(label.energy - pred.energy) + cfg.force_weight * f_term
    if pred.sigma_energy is None:
        raise InputError("NLL loss needs a prediction with sigma_energy")
    var = pred.sigma_energy**2
    return 0.5 * math.log(var) + (label.energy - pred.energy) ** 2 / (2.0 * var) + cfg.force_weight * f_term


def batch_loss(energies, forces, raw_sigma, labels_e, labels_f, cfg: TrainConfig) -> dc.Tensor:
    """Differentiable mean loss over a batch.

    The force term averages over every atom component in the batch; the
    energy term averages over configurations.
    """
    e_err = energies - dc.Tensor(labels_e)
    f_term = None
    if cfg.force_weight > 0:
        f_term = dc.mean(dc.abs(forces - dc.Tensor(labels_f))) * cfg.force_weight
    if cfg.loss_kind == "l1":
        out = dc.mean(dc.abs(e_err)) * cfg.energy_weight
    else:
        sigma = sigma_from_raw(raw_sigma)
        var = sigma * sigma
        out = dc.mean(dc.log(var) * 0.5 + e_err * e_err / (var * 2.0))
    return out if f_term is None else out + f_term


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adaptive-moment optimiser acting in place on a :class:`ParameterStore`."""

    def __init__(self, params: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ParameterStore, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    mae_E: float
    mae_F: Optional[float]
    std_mae: float
    log_mae: float
    per_target: dict = field(default_factory=dict)
    n_configs: int = 0

    def as_rows(self) -> list:
        rows = [("mae_E", self.mae_E), ("mae_F", self.mae_F), ("std_mae", self.std_mae), ("log_mae", self.log_mae)]
        for name, d in self.per_target.items():
            rows += [(f"{name}.mae", d["mae"]), (f"{name}.std", d["std"])]
        return rows


def metrics_from_predictions(preds: Sequence[Prediction], labels: Sequence[AtomicConfiguration]) -> Metrics:
    """MAE per target, and the aggregate std. MAE (percent) and log MAE.

    The targets are the energy (eV) and, when every label and prediction
    carries them, the force components (eV/Å).  ``std_mae`` is ``nan`` if a
    target's labels have zero spread; ``log_mae`` is ``-inf`` when some MAE is
    exactly zero.
    """
    if not labels:
        raise InputError("cannot evaluate on an empty dataset")
    if len(preds) != len(labels):
        raise InputError("predictions and labels differ in length")
    for c in labels:
        _need_labels(c, False)
    y_e = np.array([c.energy for c in labels])
    p_e = np.array([p.energy for p in preds])
    targets = {"energy": (np.abs(y_e - p_e), y_e)}
    have_f = all(c.forces is not None for c in labels) and all(p.forces is not None for p in preds)
    if have_f:
        y_f = np.concatenate([np.asarray(c.forces).ravel() for c in labels])
        p_f = np.concatenate([p.forces.ravel() for p in preds])
        targets["forces"] = (np.abs(y_f - p_f), y_f)
    per = {}
    for name, (err, y) in targets.items():
        per[name] = {"mae": float(err.mean()), "std": float(y.std())}
    with np.errstate(divide="ignore", invalid="ignore"):
        std_mae = float(np.mean([100.0 * d["mae"] / d["std"] if d["std"] > 0 else np.nan for d in per.values()]))
        log_mae = float(np.mean([np.log(d["mae"]) for d in per.values()]))
    return Metrics(
        mae_E=per["energy"]["mae"],
        mae_F=per["forces"]["mae"] if have_f else None,
        std_mae=std_mae,
        log_mae=log_mae,
        per_target=per,
        n_configs=len(labels),
    )


def evaluate(dataset: Sequence[AtomicConfiguration], params: ParameterStore, modelcfg: ModelConfig,
             batch_size: int = 32, forces: bool = True) -> Metrics:
    if not dataset:
        raise InputError("cannot evaluate on an empty dataset")
    preds = DimeNetPP(modelcfg, params).predict_many(dataset, forces=forces, batch_size=batch_size)
    return metrics_from_predictions(preds, dataset)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParameterStore
    best_step: int
    best_metric: float
    history: list  # rows matching LOG_HEADER
    wall_time: float
    final_params: Optional[ParameterStore] = None


class _Featurized:
    """Dataset with graphs built once; batches are assembled from cached graphs."""

    def __init__(self, configs: Sequence[AtomicConfiguration], cutoff: float):
        self.configs = list(configs)
        self.graphs = [featurize(c, cutoff) for c in self.configs]
        self.cutoff = cutoff

    def batch(self, ids):
        cs = [self.configs[i] for i in ids]
        return cs, collate(cs, self.cutoff, [self.graphs[i] for i in ids])


def loss_and_grads(batch, configs, p_tensors: dict, mcfg: ModelConfig, tcfg: TrainConfig):
    """Batch loss and its gradient with respect to every tensor in ``p_tensors``."""
    use_f = tcfg.force_weight > 0
    pos = dc.Tensor(batch.positions, requires_grad=use_f)
    energies, raw, _ = forward_batch(batch, p_tensors, mcfg, pos)
    forces = None
    labels_f = None
    if use_f:
        forces = -dc.grad(dc.sum(energies), pos, create_graph=True, allow_unused=True)
        labels_f = np.concatenate([np.asarray(c.forces) for c in configs])
    labels_e = np.array([c.energy for c in configs])
    value = batch_loss(energies, forces, raw, labels_e, labels_f, tcfg)
    names = list(p_tensors)
    grads = dc.grad(value, [p_tensors[k] for k in names], allow_unused=True)
    return float(value.data), {k: g.data for k, g in zip(names, grads)}


def _check_dataset(configs, name: str, use_f: bool) -> None:
    if not configs:
        raise InputError(f"{name} split is empty")
    for c in configs:
        _need_labels(c, use_f)


def train(
    train_set: Sequence[AtomicConfiguration],
    val_set: Sequence[AtomicConfiguration],
    modelcfg: ModelConfig,
    traincfg: TrainConfig,
    log_stream: Optional[TextIO] = None,
    init: Optional[ParameterStore] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Minimise the configured loss with Adam and return the best-validation weights.

    Validation runs every ``eval_every`` steps and after the last step; the
    selection metric is ``mae_F`` when forces are supervised, otherwise
    ``mae_E``.  If ``log_stream`` is given, one CSV row per validation is
    appended to it (header first).
    """
    use_f = traincfg.force_weight > 0
    _check_dataset(train_set, "train", use_f)
    _check_dataset(val_set, "validation", use_f)
    if traincfg.loss_kind == "nll" and not modelcfg.mve_head:
        raise InputError("NLL loss needs a model with mve_head=True")

    init_seed, shuffle_seed = np.random.SeedSequence(traincfg.seed).generate_state(2)
    params = init.copy() if init is not None else init_params(modelcfg, int(init_seed))
    start = time.perf_counter()
    if traincfg.max_steps == 0:
        return TrainResult(params, 0, math.nan, [], time.perf_counter() - start, params.copy())

    rng = np.random.default_rng(int(shuffle_seed))
    data = _Featurized(train_set, modelcfg.basis.cutoff)
    opt = Adam(params, traincfg.adam_beta1, traincfg.adam_beta2, traincfg.adam_eps)
    writer = None
    if log_stream is not None:
        writer = csv.writer(log_stream, lineterminator="\n")
        writer.writerow(LOG_HEADER)

    bs = min(traincfg.batch_size, len(train_set))
    order = rng.permutation(len(train_set))
    cursor = 0
    history = []
    best = (math.inf, 0, params.copy())
    window = []
    for step in range(traincfg.max_steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        ids = order[cursor:cursor + bs]
        cursor += bs
        configs, batch = data.batch(ids)
        value, grads = loss_and_grads(batch, configs, params.tensors(), modelcfg, traincfg)
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss at step {step}, batch ids {ids.tolist()}")
        lr = learning_rate(step, traincfg)
        opt.step(params, grads, lr)
        window.append(value)
        if callback is not None:
            callback(step, value)

        last = step + 1 == traincfg.max_steps
        if (step + 1) % traincfg.eval_every == 0 or last:
            m = evaluate(val_set, params, modelcfg, traincfg.eval_batch_size, forces=use_f)
            score = m.mae_F if use_f else m.mae_E
            row = (step + 1, lr, float(np.mean(window)), m.mae_E, m.mae_F if use_f else math.nan)
            window = []
            history.append(row)
            if writer is not None:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                log_stream.flush()
            log.info("step %d lr %.3e loss %.5f val mae_E %.5f mae_F %s", *row[:4], row[4])
            if score < best[0]:
                best = (score, step + 1, params.copy())

    return TrainResult(best[2], best[1], best[0], history, time.perf_counter() - start, params)
