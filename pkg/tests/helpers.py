"""Shared builders for the test-suite."""

from __future__ import annotations

import numpy as np

from dimekit import AtomicConfiguration, ModelConfig, ParameterStore
from dimekit.model import init_params


def random_config(rng, n_atoms=None, elements=(1, 6, 8), box=None, min_dist=0.8, with_labels=False):
    """Random positions with no pair closer than ``min_dist``."""
    n = int(rng.integers(5, 13)) if n_atoms is None else n_atoms
    box = box if box is not None else 1.6 * n ** (1 / 3) + 1.0
    pos = np.zeros((0, 3))
    while len(pos) < n:
        cand = rng.uniform(0.0, box, size=3)
        if len(pos) == 0 or np.min(np.linalg.norm(pos - cand, axis=1)) > min_dist:
            pos = np.vstack([pos, cand])
    z = rng.choice(np.asarray(elements), size=n)
    if with_labels:
        return AtomicConfiguration(z, pos, energy=float(rng.normal()), forces=rng.normal(size=(n, 3)))
    return AtomicConfiguration(z, pos)


def small_cfg(**kw) -> ModelConfig:
    base = dict(hidden_dim=16, out_emb_dim=16, triplet_dim=8, num_blocks=2)
    base.update(kw)
    return ModelConfig(**base)


def live_params(cfg: ModelConfig, seed: int = 0, scale: float = 0.5) -> ParameterStore:
    """Initial weights with the zero-initialised output layers replaced by random ones."""
    p = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for k in p:
        if k.endswith("final.W") or k.endswith("sigma.W"):
            p[k] = rng.normal(0.0, scale, size=p[k].shape)
    return p


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
