"""Toy collision data: Morse clusters smashed together with velocity Verlet.

The pair potential is a Morse well plus an optional ``r^-12`` wall, multiplied by a
C2 switching function that takes it to exactly zero between ``switch_on``
and ``switch_off``.  Energies and forces of every snapshot are analytic.
No chemical fidelity is claimed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from ..errors import InputError
from ..geometry import AtomicConfiguration
from . import _verlet

log = logging.getLogger(__name__)

__all__ = [
    "ToyPotentialConfig",
    "MASSES",
    "toy_energy",
    "toy_energy_forces",
    "relax_cluster",
    "sample_cluster",
    "VerletResult",
    "velocity_verlet",
    "window_drift",
    "kinetic_energy",
    "run_collision",
    "generate_collisions",
]

# 1 eV / (Å amu) expressed in Å / fs^2
ACCEL_UNIT = 9.648533212331e-3

MASSES = {1: 1.008, 6: 12.011, 8: 15.999}

# (well depth eV, width 1/Å, equilibrium distance Å)
_DEFAULT_PAIRS = {
    (1, 1): (4.5, 1.9, 0.74),
    (1, 6): (4.3, 1.8, 1.09),
    (1, 8): (4.6, 2.2, 0.97),
    (6, 6): (3.6, 2.0, 1.54),
    (6, 8): (3.7, 2.0, 1.43),
    (8, 8): (2.0, 2.2, 1.30),
}


@dataclass(frozen=True)
class ToyPotentialConfig:
    pairs: dict = field(default_factory=lambda: dict(_DEFAULT_PAIRS))
    # the wall is off by default: at 4 eV the Morse core already keeps atoms
    # apart, and its stiffness costs far more in timestep than it buys
    repulsion: float = 0.0  # eV Å^12
    switch_on: float = 4.0
    switch_off: float = 5.0
    timestep: float = 0.001  # fs
    kinetic_energy: float = 4.0  # eV, relative motion of the two clusters
    impact_parameter: float = 0.5  # Å
    elements: tuple = (1, 6, 8)
    cluster_sizes: tuple = (2, 6)
    gap: float = 5.5  # Å, closest initial inter-cluster distance
    num_steps: int = 120_000
    snapshots_per_trajectory: int = 10
    blowup_radius: float = 100.0

    def __post_init__(self):
        for key, (de, a, re) in self.pairs.items():
            if not (de > 0 and a > 0 and re > 0):
                raise InputError(f"Morse parameters for {key} must be positive")
        if not self.timestep > 0:
            raise InputError("timestep must be positive")
        if self.repulsion < 0 or not self.switch_off > self.switch_on > 0:
            raise InputError("need repulsion >= 0 and 0 < switch_on < switch_off")
        lo, hi = self.cluster_sizes
        if not 1 <= lo <= hi:
            raise InputError("cluster_sizes must satisfy 1 <= min <= max")
        for z in self.elements:
            if z not in MASSES:
                raise InputError(f"no mass for element Z={z}")

    def pair_table(self, z: np.ndarray):
        """Arrays ``(D, a, r_e)`` for every unordered pair ``i < j``."""
        i, j = np.triu_indices(len(z), k=1)
        keys = [tuple(sorted((int(z[a]), int(z[b])))) for a, b in zip(i, j)]
        try:
            par = np.array([self.pairs[k] for k in keys]).reshape(-1, 3)
        except KeyError as exc:
            raise InputError(f"no Morse parameters for pair {exc.args[0]}") from None
        return i, j, par[:, 0], par[:, 1], par[:, 2]

    def perturbed(self, depth_scale: float = 1.05, width_scale: float = 0.97) -> "ToyPotentialConfig":
        """A second, slightly different potential for relabelling snapshots."""
        pairs = {k: (d * depth_scale, a * width_scale, r) for k, (d, a, r) in self.pairs.items()}
        return replace(self, pairs=pairs)


class _PairPotential:
    """Pair parameters for a fixed list of atoms, reused across integration steps."""

    def __init__(self, cfg: ToyPotentialConfig, z):
        self.cfg = cfg
        self.n = len(z)
        self.i, self.j, self.de, self.a, self.re = cfg.pair_table(np.asarray(z))

    def terms(self, pos):
        cfg = self.cfg
        diff = pos[self.i] - pos[self.j]
        r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        ex = np.exp(-self.a * (r - self.re))
        phi = self.de * (ex * ex - 2.0 * ex)
        dphi = 2.0 * self.a * self.de * (ex - ex * ex)
        if cfg.repulsion:
            r6 = r**-6
            phi = phi + cfg.repulsion * r6 * r6
            dphi = dphi - 12.0 * cfg.repulsion * r6 * r6 / r
        width = cfg.switch_off - cfg.switch_on
        t = np.clip((r - cfg.switch_on) / width, 0.0, 1.0)
        s = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t)
        ds = -30.0 * t * t * (1.0 - t) ** 2 / width
        return diff, r, phi * s, dphi * s + phi * ds

    def energy(self, pos) -> float:
        if self.n < 2:
            return 0.0
        return float(np.sum(self.terms(pos)[2]))

    def energy_forces(self, pos):
        pos = np.asarray(pos, dtype=np.float64)
        if self.n < 2:
            return 0.0, np.zeros_like(pos)
        diff, r, v, dv = self.terms(pos)
        fij = -(dv / r)[:, None] * diff
        forces = np.empty_like(pos)
        for c in range(3):
            forces[:, c] = np.bincount(self.i, fij[:, c], self.n) - np.bincount(self.j, fij[:, c], self.n)
        return float(np.sum(v)), forces


def toy_energy(cfg: ToyPotentialConfig, z, pos) -> float:
    return _PairPotential(cfg, z).energy(np.asarray(pos, float))


def toy_energy_forces(cfg: ToyPotentialConfig, z, pos):
    """Potential energy (eV) and exact forces ``-dV/dx`` (eV/Å)."""
    return _PairPotential(cfg, z).energy_forces(pos)


def relax_cluster(cfg: ToyPotentialConfig, z, pos, gtol: float = 1e-11):
    """Local minimisation; returns positions with residual forces near zero."""
    shape = pos.shape
    pot = _PairPotential(cfg, z)

    def fun(x):
        e, f = pot.energy_forces(x.reshape(shape))
        return e, -f.ravel()

    res = minimize(fun, pos.ravel(), jac=True, method="L-BFGS-B",
                   options={"gtol": gtol, "ftol": 0.0, "maxiter": 5000, "maxcor": 30})
    x = res.x.reshape(shape)
    # a few Newton-free polishing passes; L-BFGS sometimes stops at ~1e-8
    for _ in range(3):
        _, f = pot.energy_forces(x)
        if np.abs(f).max() < 1e-9:
            break
        res = minimize(fun, x.ravel(), jac=True, method="BFGS", options={"gtol": gtol, "maxiter": 2000})
        x = res.x.reshape(shape)
    return x - x.mean(axis=0)


def sample_cluster(cfg: ToyPotentialConfig, rng: np.random.Generator):
    """A random small cluster relaxed into a local minimum of the toy potential."""
    lo, hi = cfg.cluster_sizes
    n = int(rng.integers(lo, hi + 1))
    z = rng.choice(np.asarray(cfg.elements), size=n)
    # grow the cluster atom by atom so nothing starts outside the switch region
    pos = np.zeros((n, 3))
    for a in range(1, n):
        anchor = pos[rng.integers(a)]
        d = rng.normal(size=3)
        pos[a] = anchor + 1.2 * d / np.linalg.norm(d)
    return z, relax_cluster(cfg, z, pos)


def _masses(z):
    return np.array([MASSES[int(v)] for v in z])


def kinetic_energy(z, vel) -> float:
    return float(0.5 * np.sum(_masses(z)[:, None] * vel * vel) / ACCEL_UNIT)


@dataclass
class VerletResult:
    """Outcome of :func:`velocity_verlet`.

    ``total_energy[s]`` is kinetic plus potential energy after step ``s``;
    ``frames`` maps each recorded step to its ``(positions, velocities)``.
    A run that blew up has ``completed = False`` and a truncated trace.
    """

    completed: bool
    positions: np.ndarray
    velocities: np.ndarray
    total_energy: np.ndarray
    frames: dict


def velocity_verlet(cfg: ToyPotentialConfig, z, pos, vel, num_steps: int, record=()) -> VerletResult:
    """Integrate ``num_steps`` steps of size ``cfg.timestep`` from ``(pos, vel)``.

    Steps listed in ``record`` (0 is the initial state) are copied into the
    result.  Stops early when a coordinate leaves ``cfg.blowup_radius``.
    """
    z = np.asarray(z)
    pos = np.array(pos, dtype=np.float64, order="C")
    vel = np.array(vel, dtype=np.float64, order="C")
    if pos.shape != (len(z), 3) or vel.shape != pos.shape:
        raise InputError("positions and velocities must have shape (n_atoms, 3)")
    steps = np.unique(np.asarray(list(record), dtype=np.int64))
    if steps.size and (steps[0] < 0 or steps[-1] > num_steps):
        raise InputError("recorded steps must lie in [0, num_steps]")
    m = _masses(z)
    i, j, de, a, re = cfg.pair_table(z)
    rec_pos = np.empty((steps.size, len(z), 3))
    rec_vel = np.empty_like(rec_pos)
    trace = np.full(num_steps + 1, np.nan)
    ok = _verlet.integrate(
        pos, vel, ACCEL_UNIT / m, i.astype(np.int64), j.astype(np.int64),
        np.ascontiguousarray(de), np.ascontiguousarray(a), np.ascontiguousarray(re),
        float(cfg.repulsion), float(cfg.switch_on), float(cfg.switch_off), float(cfg.timestep),
        int(num_steps), steps, float(cfg.blowup_radius), rec_pos, rec_vel, trace, 0.5 * m / ACCEL_UNIT,
    )
    frames = {int(s): (rec_pos[k], rec_vel[k]) for k, s in enumerate(steps)} if ok else {}
    return VerletResult(bool(ok), pos, vel, trace, frames)


def window_drift(total_energy, window: int = 1000) -> float:
    """Largest ``|E(t + k) - E(t)|`` with ``0 <= k <= window`` along an energy trace."""
    e = np.asarray(total_energy, dtype=np.float64)
    if e.size < 2:
        return 0.0
    w = min(window, e.size - 1) + 1
    # forward-looking running extremes over the next `w` samples
    hi = maximum_filter1d(e, w, origin=-(w // 2), mode="nearest")
    lo = minimum_filter1d(e, w, origin=-(w // 2), mode="nearest")
    return float(max(np.max(hi - e), np.max(e - lo)))


def _setup_collision(cfg: ToyPotentialConfig, rng: np.random.Generator):
    za, xa = sample_cluster(cfg, rng)
    zb, xb = sample_cluster(cfg, rng)
    xa = Rotation.random(random_state=rng).apply(xa)
    xb = Rotation.random(random_state=rng).apply(xb)
    # push B along +x until the closest pair is `gap` apart
    offset = np.array([0.0, cfg.impact_parameter, 0.0])
    shift = cfg.gap + xa[:, 0].max() - xb[:, 0].min()
    xb_placed = xb + offset + np.array([shift, 0.0, 0.0])
    d = np.linalg.norm(xa[:, None] - xb_placed[None], axis=-1).min()
    while d < cfg.gap:
        shift += cfg.gap - d + 1e-3
        xb_placed = xb + offset + np.array([shift, 0.0, 0.0])
        d = np.linalg.norm(xa[:, None] - xb_placed[None], axis=-1).min()
    z = np.concatenate([za, zb])
    pos = np.concatenate([xa, xb_placed])
    ma, mb = _masses(za).sum(), _masses(zb).sum()
    mu = ma * mb / (ma + mb)
    v_rel = np.sqrt(2.0 * cfg.kinetic_energy / mu * ACCEL_UNIT)
    vel = np.zeros_like(pos)
    vel[: len(za), 0] = v_rel * mb / (ma + mb)
    vel[len(za):, 0] = -v_rel * ma / (ma + mb)
    com = (_masses(z)[:, None] * pos).sum(0) / _masses(z).sum()
    return z, pos - com, vel


def run_collision(cfg: ToyPotentialConfig, rng: np.random.Generator, label_cfg: Optional[ToyPotentialConfig] = None):
    """One trajectory; returns the list of labelled snapshots or ``None`` on blow-up."""
    z, pos, vel = _setup_collision(cfg, rng)
    picks = np.sort(rng.choice(cfg.num_steps + 1, size=cfg.snapshots_per_trajectory, replace=False))
    run = velocity_verlet(cfg, z, pos, vel, cfg.num_steps, picks)
    if not run.completed:
        return None
    labeller = _PairPotential(label_cfg if label_cfg is not None else cfg, z)
    snaps = []
    for step in picks:
        x = run.frames[int(step)][0]
        e, f = labeller.energy_forces(x)
        snaps.append(AtomicConfiguration(z.copy(), x.copy(), energy=e, forces=f, info={"step": int(step)}))
    return snaps


def generate_collisions(
    cfg: ToyPotentialConfig,
    n_snapshots: int,
    seed: int = 0,
    label_cfg: Optional[ToyPotentialConfig] = None,
    workers: int = 1,
    max_attempts: int = 10,
) -> list[AtomicConfiguration]:
    """``n_snapshots`` labelled configurations from independent collision trajectories.

    Each trajectory draws from its own child seed of ``seed`` so the output
    does not depend on ``workers``.  Blown-up trajectories are resampled
    (with a fresh child seed) and counted in the log.
    """
    if n_snapshots < 0:
        raise InputError("n_snapshots must be >= 0")
    per = cfg.snapshots_per_trajectory
    n_traj = -(-n_snapshots // per) if n_snapshots else 0
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_traj)

    def one(k):
        seq = children[k]
        for attempt in range(max_attempts):
            out = run_collision(cfg, np.random.default_rng(seq), label_cfg)
            if out is not None:
                for s in out:
                    s.info["trajectory"] = k
                return out, attempt
            seq = seq.spawn(1)[0]
        raise InputError(f"trajectory {k} blew up {max_attempts} times")

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(n_traj)))
    else:
        results = [one(k) for k in range(n_traj)]
    discarded = sum(r[1] for r in results)
    if discarded:
        log.info("discarded %d blown-up trajectories", discarded)
    snaps = [s for r in results for s in r[0]]
    return snaps[:n_snapshots]
