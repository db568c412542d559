"""Directed interaction graphs and triplet enumeration for atomic configurations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateGeometryError, InputError, ContractViolation

__all__ = [
    "AtomicConfiguration",
    "EdgeSet",
    "TripletSet",
    "build_edges",
    "build_triplets",
    "compute_angles",
    "graph_stats",
]


@dataclass
class AtomicConfiguration:
    """Atomic numbers and Cartesian positions (Å), optionally labelled.

    ``energy`` is in eV and ``forces`` in eV/Å.
    """

    atomic_numbers: np.ndarray
    positions: np.ndarray
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        z = np.asarray(self.atomic_numbers)
        if z.ndim != 1 or z.size == 0:
            raise InputError("atomic_numbers must be a non-empty 1-D sequence")
        if z.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(z, 1), 0)):
                raise InputError("atomic numbers must be integers")
        z = z.astype(np.int64)
        if np.any(z < 1):
            raise InputError("atomic numbers must be >= 1")
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.shape != (z.size, 3):
            raise InputError(f"positions must have shape ({z.size}, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise InputError("positions contain non-finite values")
        self.atomic_numbers = z
        self.positions = pos
        if self.energy is not None:
            self.energy = float(self.energy)
        if self.forces is not None:
            f = np.asarray(self.forces, dtype=np.float64)
            if f.shape != pos.shape:
                raise InputError(f"forces must have shape {pos.shape}, got {f.shape}")
            self.forces = f

    @property
    def num_atoms(self) -> int:
        return len(self.atomic_numbers)

    def copy(self, **changes) -> "AtomicConfiguration":
        kw = dict(
            atomic_numbers=self.atomic_numbers.copy(),
            positions=self.positions.copy(),
            energy=self.energy,
            forces=None if self.forces is None else self.forces.copy(),
            info=dict(self.info),
        )
        kw.update(changes)
        return AtomicConfiguration(**kw)


@dataclass
class EdgeSet:
    """Directed pairs ``j -> i`` within the cutoff.

    Edges are ordered lexicographically by ``(sender, receiver)``.
    ``vectors`` holds the unit vectors pointing from ``j`` to ``i``.
    """

    senders: np.ndarray
    receivers: np.ndarray
    distances: np.ndarray
    vectors: np.ndarray
    num_atoms: int
    cutoff: float

    def __len__(self) -> int:
        return len(self.senders)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))


@dataclass
class TripletSet:
    """Pairs of edges ``(k -> j, j -> i)`` with ``k != i``.

    ``idx_kj`` and ``idx_ji`` index into the owning :class:`EdgeSet`;
    ordering is by ``idx_ji`` then ``idx_kj``.
    """

    idx_kj: np.ndarray
    idx_ji: np.ndarray
    angles: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.idx_ji)


def _pair_displacements(pos: np.ndarray, senders: np.ndarray, receivers: np.ndarray):
    diff = pos[receivers] - pos[senders]
    return diff, np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _brute_force_pairs(pos: np.ndarray, cutoff: float):
    n = len(pos)
    j, i = np.nonzero(~np.eye(n, dtype=bool))
    _, d = _pair_displacements(pos, j, i)
    keep = d <= cutoff
    return j[keep], i[keep]


def _cell_list_pairs(pos: np.ndarray, cutoff: float):
    cells = np.floor((pos - pos.min(axis=0)) / cutoff).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for a, c in enumerate(map(tuple, cells)):
        buckets.setdefault(c, []).append(a)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    js, is_ = [], []
    for c, members in buckets.items():
        neigh = []
        for o in offsets:
            neigh.extend(buckets.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]), ()))
        neigh = np.asarray(neigh, dtype=np.int64)
        for a in members:
            cand = neigh[neigh != a]
            js.append(np.full(len(cand), a, dtype=np.int64))
            is_.append(cand)
    j = np.concatenate(js) if js else np.zeros(0, np.int64)
    i = np.concatenate(is_) if is_ else np.zeros(0, np.int64)
    # identical distance formula to the brute-force path keeps membership bit-identical
    _, d = _pair_displacements(pos, j, i)
    keep = d <= cutoff
    j, i = j[keep], i[keep]
    order = np.lexsort((i, j))
    return j[order], i[order]


def build_edges(config: AtomicConfiguration, cutoff: float, method: str = "brute") -> EdgeSet:
    """All ordered pairs ``(j, i)``, ``j != i``, with distance at most ``cutoff``.

    ``method="cells"`` uses a cell list; the edge set is identical to the
    brute-force O(N^2) search.
    """
    if not cutoff > 0:
        raise InputError(f"cutoff must be positive, got {cutoff}")
    pos = np.asarray(config.positions, dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise InputError("positions contain non-finite values")
    if method == "brute":
        j, i = _brute_force_pairs(pos, cutoff)
    elif method == "cells":
        j, i = _cell_list_pairs(pos, cutoff)
    else:
        raise ContractViolation(f"unknown neighbour search method {method!r}")
    diff, d = _pair_displacements(pos, j, i)
    if np.any(d == 0.0):
        bad = int(np.argmin(d))
        raise DegenerateGeometryError(f"atoms {j[bad]} and {i[bad]} occupy the same position")
    return EdgeSet(
        senders=j,
        receivers=i,
        distances=d,
        vectors=diff / d[:, None],
        num_atoms=len(pos),
        cutoff=float(cutoff),
    )


def build_triplets(edges: EdgeSet) -> TripletSet:
    """Enumerate every (incoming ``k -> j``, outgoing ``j -> i``) edge pair with ``k != i``."""
    n_edges = len(edges)
    if n_edges == 0:
        return TripletSet(np.zeros(0, np.int64), np.zeros(0, np.int64))
    # incoming edges of each atom, ascending edge index
    by_receiver = np.argsort(edges.receivers, kind="stable")
    in_deg = np.bincount(edges.receivers, minlength=edges.num_atoms)
    start = np.concatenate([[0], np.cumsum(in_deg)])

    j_of_ji = edges.senders
    reps = in_deg[j_of_ji]
    idx_ji = np.repeat(np.arange(n_edges), reps)
    # position within the incoming list of atom j for each repeated row
    offset = np.arange(len(idx_ji)) - np.repeat(np.cumsum(reps) - reps, reps)
    idx_kj = by_receiver[start[j_of_ji[idx_ji]] + offset]
    keep = edges.senders[idx_kj] != edges.receivers[idx_ji]
    return TripletSet(idx_kj=idx_kj[keep], idx_ji=idx_ji[keep])


def compute_angles(
    config: AtomicConfiguration, edges: EdgeSet, triplets: TripletSet
) -> TripletSet:
    """Fill in the angle at ``j`` between ``x_i - x_j`` and ``x_k - x_j``."""
    n_edges = len(edges)
    for idx in (triplets.idx_kj, triplets.idx_ji):
        if idx.size and (idx.min() < 0 or idx.max() >= n_edges):
            raise ContractViolation("triplet refers to a non-existent edge")
    pos = config.positions
    j = edges.senders[triplets.idx_ji]
    i = edges.receivers[triplets.idx_ji]
    k = edges.senders[triplets.idx_kj]
    a = pos[i] - pos[j]
    b = pos[k] - pos[j]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateGeometryError("zero-length bond vector in triplet")
    cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    return TripletSet(idx_kj=triplets.idx_kj, idx_ji=triplets.idx_ji, angles=angles)


def graph_stats(config: AtomicConfiguration, cutoff: float) -> dict:
    """Counts of atoms, directed edges and triplets, and their ratios."""
    edges = build_edges(config, cutoff)
    trip = build_triplets(edges)
    n = config.num_atoms
    return {
        "atoms": n,
        "edges": len(edges),
        "triplets": len(trip),
        "edges_per_atom": len(edges) / n,
        "triplets_per_edge": len(trip) / len(edges) if len(edges) else 0.0,
    }
