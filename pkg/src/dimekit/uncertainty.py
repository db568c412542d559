"""Deep ensembles, calibration correlations and the variance-gradient identity.

The ensemble energy variance is a smooth function of the positions, and its
gradient is ``-2 Cov(E, F)`` over members.  That says nothing about the
spread of the forces themselves, which is why a mean-variance head (one
network, one ``sigma_E``) cannot supply force uncertainties while an
ensemble can.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, TextIO

import numpy as np

from . import diffcore as dc
from .errors import ContractViolation, InputError
from .geometry import AtomicConfiguration
from .model import DimeNetPP, ModelConfig, Prediction, collate, forward_batch
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

__all__ = [
    "Ensemble",
    "CalibrationReport",
    "CovIdentityResult",
    "pearson",
    "ensemble_predict",
    "ensemble_predict_many",
    "calibration",
    "write_calibration_csv",
    "write_samples_csv",
    "cov_identity_check",
    "ensemble_train",
]


@dataclass
class Ensemble:
    cfg: ModelConfig
    members: list
    seeds: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise InputError("an ensemble needs at least one member")
        ref = self.members[0]
        for m in self.members[1:]:
            if list(m) != list(ref) or any(m[k].shape != ref[k].shape for k in ref):
                raise InputError("ensemble members have incompatible parameter shapes")

    @property
    def K(self) -> int:
        return len(self.members)


def ensemble_predict_many(ens: Ensemble, configs: Sequence[AtomicConfiguration], forces: bool = True,
                          batch_size: int = 32) -> list:
    """Member means, with the unbiased member standard deviation as sigma (0 for one member)."""
    per_member = [DimeNetPP(ens.cfg, p).predict_many(configs, forces=forces, batch_size=batch_size)
                  for p in ens.members]
    out = []
    for n in range(len(configs)):
        e = np.array([pm[n].energy for pm in per_member])
        pred = Prediction(energy=float(e.mean()), sigma_energy=float(_member_std(e)))
        if forces:
            f = np.stack([pm[n].forces for pm in per_member])
            pred.forces = f.mean(axis=0)
            pred.sigma_forces = _member_std(f)
        out.append(pred)
    return out


def _member_std(x: np.ndarray) -> np.ndarray:
    """Unbiased spread over axis 0, written as a sum over member pairs.

    Same value as ``std(ddof=1)`` but exactly zero for identical members,
    which the mean-subtracted form does not guarantee.  One member gives 0.
    """
    K = x.shape[0]
    if K < 2:
        return np.zeros(x.shape[1:]) if x.ndim > 1 else np.float64(0.0)
    acc = np.zeros(x.shape[1:])
    for a in range(K):
        for b in range(a + 1, K):
            d = x[a] - x[b]
            acc = acc + d * d
    return np.sqrt(acc / (K * (K - 1)))


def ensemble_predict(ens: Ensemble, config: AtomicConfiguration, forces: bool = True) -> Prediction:
    return ensemble_predict_many(ens, [config], forces=forces)[0]


# ---------------------------------------------------------------------------
# calibration


def pearson(a, b) -> Optional[float]:
    """Pearson correlation, or ``None`` when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InputError("pearson: inputs differ in length")
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return None
    return float(np.clip((da @ db) / math.sqrt(saa * sbb), -1.0, 1.0))


@dataclass
class CalibrationReport:
    """Correlations between absolute errors and predicted sigmas.

    A correlation is ``None`` when it is undefined: either side constant, or
    the sigma it needs was never predicted.
    """

    rho_E_sigmaE: Optional[float]
    rho_F_sigmaF: Optional[float]
    rho_F_sigmaE: Optional[float]
    n_energy: int
    n_force: int
    sigma_F_available: bool
    delta_E: np.ndarray = field(repr=False, default=None)
    sigma_E: np.ndarray = field(repr=False, default=None)
    extra: dict = field(default_factory=dict)

    def rows(self) -> list:
        rows = [
            ("rho_dE_sigmaE", self.rho_E_sigmaE, self.n_energy),
            ("rho_dF_sigmaF", self.rho_F_sigmaF, self.n_force if self.sigma_F_available else 0),
            ("rho_dF_sigmaE", self.rho_F_sigmaE, self.n_force),
        ]
        rows += [(k, v, n) for k, (v, n) in self.extra.items()]
        return rows


def calibration(preds: Sequence[Prediction], labels: Sequence[AtomicConfiguration]) -> CalibrationReport:
    """Pearson correlations of absolute error with predicted uncertainty.

    Force errors and force sigmas are pooled over every Cartesian component
    of every configuration; for the force-error versus energy-sigma pairing
    each component inherits its configuration's ``sigma_E``.
    """
    if len(preds) != len(labels):
        raise InputError(f"{len(preds)} predictions but {len(labels)} labels")
    if not labels:
        raise InputError("calibration needs at least one sample")
    if any(c.energy is None for c in labels):
        raise InputError("every label needs an energy")
    d_e = np.array([abs(c.energy - p.energy) for p, c in zip(preds, labels)])
    has_se = all(p.sigma_energy is not None for p in preds)
    s_e = np.array([p.sigma_energy for p in preds], dtype=np.float64) if has_se else None
    rho_e = pearson(d_e, s_e) if has_se else None

    has_f = all(c.forces is not None for c in labels) and all(p.forces is not None for p in preds)
    has_sf = has_f and all(p.sigma_forces is not None for p in preds)
    rho_ff = rho_fe = None
    n_f = 0
    if has_f:
        d_f = np.concatenate([np.abs(np.asarray(c.forces) - p.forces).ravel() for p, c in zip(preds, labels)])
        n_f = d_f.size
        if has_sf:
            rho_ff = pearson(d_f, np.concatenate([p.sigma_forces.ravel() for p in preds]))
        if has_se:
            rho_fe = pearson(d_f, np.concatenate([np.full(c.num_atoms * 3, p.sigma_energy)
                                                  for p, c in zip(preds, labels)]))
    return CalibrationReport(rho_e, rho_ff, rho_fe, len(labels), n_f, has_sf, d_e, s_e)


def _fmt(v) -> str:
    return "undefined" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_calibration_csv(report: CalibrationReport, stream: Optional[TextIO] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "n_samples"])
    for name, value, n in report.rows():
        w.writerow([name, _fmt(value), n])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def write_samples_csv(report: CalibrationReport, stream: Optional[TextIO] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "delta_E", "sigma_E"])
    for n, d in enumerate(report.delta_E):
        s = None if report.sigma_E is None else report.sigma_E[n]
        w.writerow([n, repr(float(d)), _fmt(s)])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


# ---------------------------------------------------------------------------
# variance gradient versus energy-force covariance


@dataclass
class CovIdentityResult:
    grad_variance: np.ndarray  # d Var_k(E_k) / dx, shape (n_atoms, 3)
    minus_two_cov: np.ndarray  # -2 Cov_k(E_k, F_k), same shape
    residual: float  # max absolute difference
    relative: float  # residual / max |minus_two_cov| (0 if both vanish)


def cov_identity_check(ens: Ensemble, config: AtomicConfiguration) -> CovIdentityResult:
    """Compare both sides of ``dVar(E)/dx = -2 Cov(E, F)`` for one configuration.

    The left side differentiates the unbiased member variance of the energy
    as one function of the positions; the right side builds the unbiased
    member covariance from separately computed member forces.
    """
    K = ens.K
    if K < 2:
        raise ContractViolation("the covariance identity needs at least two members")
    batch = collate([config], ens.cfg.basis.cutoff)
    pos = dc.Tensor(batch.positions, requires_grad=True)
    energies = []
    forces = []
    for p in ens.members:
        e, _, _ = forward_batch(batch, p.tensors(requires_grad=False), ens.cfg, pos)
        e = dc.sum(e)
        energies.append(e)
        forces.append(-dc.grad(e, pos, create_graph=False, allow_unused=True).data)

    mean = energies[0]
    for e in energies[1:]:
        mean = mean + e
    mean = mean * (1.0 / K)
    var = None
    for e in energies:
        d = e - mean
        var = d * d if var is None else var + d * d
    var = var * (1.0 / (K - 1))
    lhs = dc.grad(var, pos, allow_unused=True).data

    e_np = np.array([float(e.data) for e in energies])
    f_np = np.stack(forces)
    cov = np.tensordot(e_np - e_np.mean(), f_np - f_np.mean(axis=0), axes=(0, 0)) / (K - 1)
    rhs = -2.0 * cov
    residual = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    scale = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    relative = residual / scale if scale > 0 else (0.0 if residual == 0 else math.inf)
    return CovIdentityResult(lhs, rhs, residual, relative)


# ---------------------------------------------------------------------------
# training


def ensemble_train(
    train_set: Sequence[AtomicConfiguration],
    val_set: Sequence[AtomicConfiguration],
    modelcfg: ModelConfig,
    traincfg: TrainConfig,
    K: int = 3,
    seeds: Optional[Sequence[int]] = None,
) -> Ensemble:
    """``K`` independent :func:`train` runs that differ only in their seed.

    Member ``k`` uses ``traincfg.seed + k`` unless ``seeds`` is given, so
    ``K = 1`` is exactly a plain training run.  Per-member wall times are
    kept on the result.
    """
    if K < 1:
        raise InputError("K must be >= 1")
    seeds = list(seeds) if seeds is not None else [traincfg.seed + k for k in range(K)]
    if len(seeds) != K:
        raise InputError("need exactly K seeds")
    members, times = [], []
    for k, s in enumerate(seeds):
        t0 = time.perf_counter()
        res = train(train_set, val_set, modelcfg, replace(traincfg, seed=int(s)))
        times.append(time.perf_counter() - t0)
        members.append(res.params)
        log.info("ensemble member %d/%d (seed %d) done in %.1fs", k + 1, K, s, times[-1])
    return Ensemble(modelcfg, members, seeds, times)
