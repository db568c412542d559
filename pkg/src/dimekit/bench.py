"""Wall-clock comparison of the Hadamard and bilinear interaction blocks."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .basis import angular_t, bessel_radial_t, radial_basis_t, spherical_basis_t
from .geometry import AtomicConfiguration
from .model import (
    ModelConfig,
    collate,
    featurize,
    init_params,
    interaction_block_bilinear,
    interaction_block_pp,
    interaction_flops,
)

__all__ = ["BenchRow", "synthetic_batch", "bench_interactions"]


@dataclass
class BenchRow:
    variant: str
    n_triplets: int
    n_edges: int
    seconds: float  # median over repeats
    seconds_per_triplet: float
    macs_per_triplet: int


def synthetic_batch(min_triplets: int, cutoff: float, seed: int = 0, atoms: int = 40, box: float = 7.0):
    """Random dense configurations collated until the batch holds ``min_triplets`` triplets."""
    rng = np.random.default_rng(seed)
    configs, graphs = [], []
    total = 0
    while total < min_triplets:
        pos = rng.uniform(0.0, box, size=(atoms, 3))
        z = rng.integers(1, 9, size=atoms)
        configs.append(AtomicConfiguration(z, pos))
        graphs.append(featurize(configs[-1], cutoff))
        total += len(graphs[-1].idx_ji)
    return collate(configs, cutoff, graphs)


def _features(batch, cfg: ModelConfig):
    with dc.no_grad():
        pos = dc.Tensor(batch.positions)
        vec = dc.gather(pos, batch.receivers) - dc.gather(pos, batch.senders)
        dist = dc.sqrt(dc.sum(vec * vec, axis=1))
        v_ji = dc.gather(vec, batch.idx_ji)
        v_kj = dc.gather(vec, batch.idx_kj)
        cos_a = -dc.sum(v_ji * v_kj, axis=1) / (dc.gather(dist, batch.idx_ji) * dc.gather(dist, batch.idx_kj))
        rbf = radial_basis_t(dist, cfg.basis)
        sbf = spherical_basis_t(bessel_radial_t(dist, cfg.basis), angular_t(cos_a, cfg.basis.num_spherical),
                                batch.idx_kj, cfg.basis)
    return rbf, sbf


def bench_interactions(cfg: ModelConfig = ModelConfig(), min_triplets: int = 100_000, repeats: int = 3,
                       seed: int = 0) -> list:
    """Forward wall time of one interaction block of each kind on the same graph."""
    batch = synthetic_batch(min_triplets, cfg.basis.cutoff, seed)
    rbf, sbf = _features(batch, cfg)
    m = dc.Tensor(np.random.default_rng(seed).standard_normal((batch.num_edges, cfg.hidden_dim)))
    flops = interaction_flops(cfg)
    rows = []
    for kind, block in (("hadamard", interaction_block_pp), ("bilinear", interaction_block_bilinear)):
        kcfg = replace(cfg, interaction_kind=kind, num_blocks=1)
        p = init_params(kcfg, seed).tensors(requires_grad=False)
        times = []
        with dc.no_grad():
            block(m, rbf, sbf, batch.idx_kj, batch.idx_ji, p, "int0", kcfg)  # warm caches
            for _ in range(repeats):
                t0 = time.perf_counter()
                block(m, rbf, sbf, batch.idx_kj, batch.idx_ji, p, "int0", kcfg)
                times.append(time.perf_counter() - t0)
        sec = float(np.median(times))
        rows.append(BenchRow(kind, batch.num_triplets, batch.num_edges, sec, sec / batch.num_triplets,
                             flops[kind]["interaction"]))
    return rows
