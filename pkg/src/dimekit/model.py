"""DimeNet++ energy model with force readout and an optional mean-variance head.

Messages live on directed edges ``j -> i``.  Each interaction block gates
the incoming message with a learned function of the radial basis, projects
it down to ``triplet_dim``, multiplies it elementwise with a learned
function of the spherical basis for every triplet ``k -> j -> i``, sums
over ``k`` and projects back up.  The original DimeNet bilinear block is
kept as ``interaction_kind="bilinear"`` for speed comparisons.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .basis import (
    BasisConfig,
    angular_t,
    bessel_radial_t,
    radial_basis_t,
    spherical_basis_t,
)
from .errors import ContractViolation, InputError
from .geometry import AtomicConfiguration, build_edges, build_triplets

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "Prediction",
    "MolGraph",
    "GraphBatch",
    "featurize",
    "collate",
    "init_params",
    "embedding_block",
    "interaction_block_pp",
    "interaction_block_bilinear",
    "output_block",
    "forward_batch",
    "forward",
    "predict_forces",
    "mve_forward",
    "DimeNetPP",
    "interaction_flops",
    "SIGMA_EPS",
]

SIGMA_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 128
    out_emb_dim: int = 256
    triplet_dim: int = 64
    num_blocks: int = 4
    basis: BasisConfig = field(default_factory=BasisConfig)
    num_elements: int = 10
    mve_head: bool = False
    interaction_kind: str = "hadamard"
    basis_mlp_layers: int = 2
    num_bilinear: int = 8
    num_output_layers: int = 3
    num_residual: int = 2

    def __post_init__(self):
        dims = (self.hidden_dim, self.out_emb_dim, self.triplet_dim, self.num_elements, self.num_bilinear)
        if min(dims) < 1:
            raise InputError("all model dimensions must be >= 1")
        if self.triplet_dim > self.hidden_dim:
            raise InputError("triplet_dim must not exceed hidden_dim")
        if self.num_blocks < 1:
            raise InputError("num_blocks must be >= 1")
        if self.interaction_kind not in ("hadamard", "bilinear"):
            raise InputError(f"unknown interaction_kind {self.interaction_kind!r}")
        if self.basis_mlp_layers not in (1, 2):
            raise InputError("basis_mlp_layers must be 1 or 2")
        if isinstance(self.basis, dict):
            object.__setattr__(self, "basis", BasisConfig(**self.basis))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "basis" in d and isinstance(d["basis"], dict):
            extra = set(d["basis"]) - {f.name for f in dataclasses.fields(BasisConfig)}
            if extra:
                raise InputError(f"unknown basis config keys: {sorted(extra)}")
            d["basis"] = BasisConfig(**d["basis"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ParameterStore(dict):
    """Ordered mapping ``name -> float64 array`` holding every learnable weight."""

    def copy(self) -> "ParameterStore":
        return ParameterStore((k, v.copy()) for k, v in self.items())

    def tensors(self, requires_grad: bool = True) -> dict:
        return {k: dc.Tensor(v, requires_grad=requires_grad) for k, v in self.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values()])

    def equal(self, other: "ParameterStore") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )


@dataclass
class Prediction:
    energy: float
    forces: Optional[np.ndarray] = None
    sigma_energy: Optional[float] = None
    sigma_forces: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.sigma_energy is not None and self.sigma_energy < 0:
            raise ContractViolation("sigma_energy must be non-negative")
        if self.sigma_forces is not None and np.any(self.sigma_forces < 0):
            raise ContractViolation("sigma_forces must be non-negative")


# ---------------------------------------------------------------------------
# parameters


def _glorot_orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 2.0):
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if fan_in >= fan_out else q.T
    w = w[:fan_in, :fan_out]
    var = w.var()
    if var > 0:
        w = w * np.sqrt(scale / ((fan_in + fan_out) * var))
    return w


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    """Fresh weights; final output layers start at zero so initial energies vanish."""
    rng = np.random.default_rng(seed)
    H, O, T = cfg.hidden_dim, cfg.out_emb_dim, cfg.triplet_dim
    nr, nsbf = cfg.basis.num_radial, cfg.basis.sbf_dim
    p = ParameterStore()

    def dense(name, fan_in, fan_out, bias=True):
        p[f"{name}.W"] = _glorot_orthogonal(rng, fan_in, fan_out)
        if bias:
            p[f"{name}.b"] = np.zeros(fan_out)

    p["emb.atom"] = rng.uniform(-np.sqrt(3), np.sqrt(3), size=(cfg.num_elements, H))
    dense("emb.rbf", nr, H, bias=False)
    dense("emb.dense", 3 * H, H)

    for b in range(cfg.num_blocks):
        pre = f"int{b}"
        dense(f"{pre}.ji", H, H)
        dense(f"{pre}.kj", H, H)
        if cfg.interaction_kind == "hadamard":
            if cfg.basis_mlp_layers == 2:
                dense(f"{pre}.rbf1", nr, H)
                dense(f"{pre}.rbf2", H, H, bias=False)
                dense(f"{pre}.sbf1", nsbf, T)
                dense(f"{pre}.sbf2", T, T, bias=False)
            else:
                dense(f"{pre}.rbf1", nr, H, bias=False)
                dense(f"{pre}.sbf1", nsbf, T, bias=False)
            dense(f"{pre}.down", H, T, bias=False)
            dense(f"{pre}.up", T, H, bias=False)
        else:
            dense(f"{pre}.rbf", nr, H, bias=False)
            dense(f"{pre}.sbf", nsbf, cfg.num_bilinear, bias=False)
            p[f"{pre}.bilinear"] = rng.normal(0.0, 2.0 / H, size=(H, cfg.num_bilinear, H))
        dense(f"{pre}.skip", H, H)
        for r in range(cfg.num_residual):
            dense(f"{pre}.res{r}.a", H, H)
            dense(f"{pre}.res{r}.b", H, H)

    for o in range(cfg.num_blocks + 1):
        pre = f"out{o}"
        dense(f"{pre}.rbf", nr, H, bias=False)
        dense(f"{pre}.up", H, O, bias=False)
        for k in range(cfg.num_output_layers):
            dense(f"{pre}.dense{k}", O, O, bias=False)
        p[f"{pre}.final.W"] = np.zeros((O, 1))
        if cfg.mve_head:
            p[f"{pre}.sigma.W"] = np.zeros((O, 1))
    return p


# ---------------------------------------------------------------------------
# graphs


@dataclass
class MolGraph:
    """Index structure of one configuration (independent of the exact positions)."""

    senders: np.ndarray
    receivers: np.ndarray
    idx_kj: np.ndarray
    idx_ji: np.ndarray
    num_atoms: int


def featurize(config: AtomicConfiguration, cutoff: float) -> MolGraph:
    edges = build_edges(config, cutoff)
    trip = build_triplets(edges)
    return MolGraph(edges.senders, edges.receivers, trip.idx_kj, trip.idx_ji, config.num_atoms)


class GraphBatch:
    """Several configurations concatenated with offset indices."""

    def __init__(self, atomic_numbers, positions, senders, receivers, idx_kj, idx_ji, atom_mol, num_mols):
        self.atomic_numbers = np.asarray(atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(positions, dtype=np.float64)
        n = len(self.atomic_numbers)
        e = len(senders)
        self.num_atoms = n
        self.num_edges = e
        self.num_mols = int(num_mols)
        self.senders = dc.SegmentIndex(senders, n)
        self.receivers = dc.SegmentIndex(receivers, n)
        self.idx_kj = dc.SegmentIndex(idx_kj, e)
        self.idx_ji = dc.SegmentIndex(idx_ji, e)
        self.atom_mol = dc.SegmentIndex(atom_mol, self.num_mols)

    @property
    def num_triplets(self) -> int:
        return len(self.idx_ji)


def collate(
    configs: Sequence[AtomicConfiguration],
    cutoff: float,
    graphs: Optional[Sequence[MolGraph]] = None,
) -> GraphBatch:
    if graphs is None:
        graphs = [featurize(c, cutoff) for c in configs]
    zs, pos, snd, rcv, kj, ji, mol = [], [], [], [], [], [], []
    atom_off = edge_off = 0
    for m, (c, g) in enumerate(zip(configs, graphs)):
        zs.append(c.atomic_numbers)
        pos.append(c.positions)
        snd.append(g.senders + atom_off)
        rcv.append(g.receivers + atom_off)
        kj.append(g.idx_kj + edge_off)
        ji.append(g.idx_ji + edge_off)
        mol.append(np.full(c.num_atoms, m, dtype=np.int64))
        atom_off += c.num_atoms
        edge_off += len(g.senders)

    def cat(parts):
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)

    return GraphBatch(
        cat(zs),
        np.concatenate(pos) if pos else np.zeros((0, 3)),
        cat(snd),
        cat(rcv),
        cat(kj),
        cat(ji),
        cat(mol),
        len(configs),
    )


# ---------------------------------------------------------------------------
# blocks


def _dense(x, p, name, act=True):
    y = x @ p[f"{name}.W"]
    b = p.get(f"{name}.b")
    if b is not None:
        y = y + b
    return dc.silu(y) if act else y


def _basis_mlp(x, p, pre, kind, cfg):
    if cfg.basis_mlp_layers == 2:
        return _dense(_dense(x, p, f"{pre}.{kind}1"), p, f"{pre}.{kind}2", act=False)
    return _dense(x, p, f"{pre}.{kind}1", act=False)


def embedding_block(z_index: np.ndarray, rbf, senders, receivers, p) -> dc.Tensor:
    """Initial message per directed edge from both element embeddings and the RBF."""
    table = p["emb.atom"]
    h_j = dc.gather(table, z_index[senders.ids])
    h_i = dc.gather(table, z_index[receivers.ids])
    rbf_h = rbf @ p["emb.rbf.W"]
    return _dense(dc.concat([h_j, h_i, rbf_h], axis=1), p, "emb.dense")


def _update(m, x_ji, agg, p, pre, cfg):
    h = x_ji + agg
    h = _dense(h, p, f"{pre}.skip") + m
    for r in range(cfg.num_residual):
        h = h + _dense(_dense(h, p, f"{pre}.res{r}.a"), p, f"{pre}.res{r}.b")
    return h


def interaction_block_pp(m, rbf, sbf, idx_kj, idx_ji, p, pre, cfg: ModelConfig):
    """Hadamard interaction block; ``idx_kj`` / ``idx_ji`` are SegmentIndex over edges."""
    x_ji = _dense(m, p, f"{pre}.ji")
    x_kj = _dense(m, p, f"{pre}.kj")
    gated = x_kj * _basis_mlp(rbf, p, pre, "rbf", cfg)
    q = gated @ p[f"{pre}.down.W"]
    per_triplet = dc.gather(q, idx_kj) * _basis_mlp(sbf, p, pre, "sbf", cfg)
    agg = dc.segment_sum(per_triplet, idx_ji)
    return _update(m, x_ji, agg @ p[f"{pre}.up.W"], p, pre, cfg)


def interaction_block_bilinear(m, rbf, sbf, idx_kj, idx_ji, p, pre, cfg: ModelConfig):
    """Original DimeNet block: bilinear form between gated message and projected SBF."""
    H, nb = cfg.hidden_dim, p[f"{pre}.bilinear"].shape[1]
    x_ji = _dense(m, p, f"{pre}.ji")
    x_kj = _dense(m, p, f"{pre}.kj")
    gated = x_kj * (rbf @ p[f"{pre}.rbf.W"])
    sb = sbf @ p[f"{pre}.sbf.W"]
    w = dc.reshape(p[f"{pre}.bilinear"], (H, nb * H))
    u = dc.reshape(dc.gather(gated, idx_kj) @ w, (-1, nb, H))
    per_triplet = dc.sum(u * dc.reshape(sb, (-1, nb, 1)), axis=1)
    agg = dc.segment_sum(per_triplet, idx_ji)
    return _update(m, x_ji, agg, p, pre, cfg)


def output_block(m, rbf, receivers, p, pre, cfg: ModelConfig) -> dc.Tensor:
    """Per-atom outputs, shape ``(n_atoms, 1)`` or ``(n_atoms, 2)`` with the MVE head."""
    gated = m * (rbf @ p[f"{pre}.rbf.W"])
    h = dc.segment_sum(gated, receivers) @ p[f"{pre}.up.W"]
    for k in range(cfg.num_output_layers):
        h = _dense(h, p, f"{pre}.dense{k}")
    out = h @ p[f"{pre}.final.W"]
    if cfg.mve_head:
        out = dc.concat([out, h @ p[f"{pre}.sigma.W"]], axis=1)
    return out


def _check_elements(z: np.ndarray, cfg: ModelConfig) -> None:
    if z.size and (z.min() < 1 or z.max() > cfg.num_elements):
        raise InputError(
            f"element Z={int(z.max())} outside supported range 1..{cfg.num_elements}"
        )


def forward_batch(batch: GraphBatch, p: dict, cfg: ModelConfig, positions: Optional[dc.Tensor] = None):
    """Run the network on a batch.

    Returns ``(energies, raw_sigma, per_atom)``: per-configuration energies,
    the summed second head before the softplus (``None`` without MVE) and
    the per-atom outputs summed over all output blocks.
    """
    _check_elements(batch.atomic_numbers, cfg)
    pos = dc.Tensor(batch.positions) if positions is None else positions
    bcfg = cfg.basis
    vec = dc.gather(pos, batch.receivers) - dc.gather(pos, batch.senders)
    dist = dc.sqrt(dc.sum(vec * vec, axis=1))
    if batch.num_triplets:
        v_ji = dc.gather(vec, batch.idx_ji)
        v_kj = dc.gather(vec, batch.idx_kj)
        d_ji = dc.gather(dist, batch.idx_ji)
        d_kj = dc.gather(dist, batch.idx_kj)
        # angle at j between (x_i - x_j) and (x_k - x_j) = -(x_j - x_k)
        cos_a = -dc.sum(v_ji * v_kj, axis=1) / (d_ji * d_kj)
    else:
        cos_a = dc.Tensor(np.zeros(0))

    rbf = radial_basis_t(dist, bcfg)
    sbf = spherical_basis_t(
        bessel_radial_t(dist, bcfg), angular_t(cos_a, bcfg.num_spherical), batch.idx_kj, bcfg
    )
    z_index = batch.atomic_numbers - 1

    block = interaction_block_pp if cfg.interaction_kind == "hadamard" else interaction_block_bilinear
    m = embedding_block(z_index, rbf, batch.senders, batch.receivers, p)
    per_atom = output_block(m, rbf, batch.receivers, p, "out0", cfg)
    for b in range(cfg.num_blocks):
        m = block(m, rbf, sbf, batch.idx_kj, batch.idx_ji, p, f"int{b}", cfg)
        per_atom = per_atom + output_block(m, rbf, batch.receivers, p, f"out{b + 1}", cfg)

    mol_sum = dc.segment_sum(per_atom, batch.atom_mol)
    energies = dc.reshape(mol_sum[:, 0:1], (-1,))
    raw_sigma = dc.reshape(mol_sum[:, 1:2], (-1,)) if cfg.mve_head else None
    return energies, raw_sigma, per_atom


def sigma_from_raw(raw: dc.Tensor) -> dc.Tensor:
    return dc.softplus(raw) + SIGMA_EPS


def _as_tensors(params) -> dict:
    if isinstance(params, ParameterStore):
        return params.tensors(requires_grad=False)
    return {k: v if isinstance(v, dc.Tensor) else dc.Tensor(v) for k, v in params.items()}


def forward(config: AtomicConfiguration, params, cfg: ModelConfig) -> float:
    """Predicted energy (eV) of one configuration."""
    batch = collate([config], cfg.basis.cutoff)
    with dc.no_grad():
        e, _, _ = forward_batch(batch, _as_tensors(params), cfg)
    return float(e.data[0])


def _predict_batch(batch: GraphBatch, params, cfg: ModelConfig, forces: bool = True):
    p = _as_tensors(params)
    if not forces:
        with dc.no_grad():
            e, raw, _ = forward_batch(batch, p, cfg)
        sig = None if raw is None else sigma_from_raw(raw).data
        return e.data.copy(), None, sig
    pos = dc.Tensor(batch.positions, requires_grad=True)
    e, raw, _ = forward_batch(batch, p, cfg, pos)
    g = dc.grad(dc.sum(e), pos, allow_unused=True)
    sig = None
    if raw is not None:
        with dc.no_grad():
            sig = sigma_from_raw(raw.detach()).data
    return e.data.copy(), -g.data, sig


def predict_forces(config: AtomicConfiguration, params, cfg: ModelConfig) -> Prediction:
    """Energy and forces ``-dE/dx``."""
    batch = collate([config], cfg.basis.cutoff)
    e, f, _ = _predict_batch(batch, params, cfg, forces=True)
    return Prediction(energy=float(e[0]), forces=f)


def mve_forward(config: AtomicConfiguration, params, cfg: ModelConfig, forces: bool = True) -> Prediction:
    """Mean and standard deviation of the energy; forces from the mean only.

    No force uncertainty is produced: the derivative of the predicted
    variance is not a force variance.
    """
    if not cfg.mve_head:
        raise ContractViolation("mve_forward requires a model built with mve_head=True")
    batch = collate([config], cfg.basis.cutoff)
    e, f, s = _predict_batch(batch, params, cfg, forces=forces)
    return Prediction(energy=float(e[0]), forces=f, sigma_energy=float(s[0]))


class DimeNetPP:
    """Convenience wrapper bundling a config and its parameters."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), params: Optional[ParameterStore] = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    def energy(self, config: AtomicConfiguration) -> float:
        return forward(config, self.params, self.cfg)

    def predict(self, config: AtomicConfiguration, forces: bool = True) -> Prediction:
        return self.predict_many([config], forces=forces)[0]

    def predict_many(self, configs: Sequence[AtomicConfiguration], forces: bool = True, batch_size: int = 32) -> list:
        out = []
        for start in range(0, len(configs), batch_size):
            chunk = list(configs[start:start + batch_size])
            batch = collate(chunk, self.cfg.basis.cutoff)
            e, f, s = _predict_batch(batch, self.params, self.cfg, forces=forces)
            off = 0
            for n, c in enumerate(chunk):
                out.append(
                    Prediction(
                        energy=float(e[n]),
                        forces=None if f is None else f[off:off + c.num_atoms].copy(),
                        sigma_energy=None if s is None else float(s[n]),
                    )
                )
                off += c.num_atoms
        return out


def interaction_flops(cfg: ModelConfig) -> dict:
    """Multiply-accumulate counts per triplet for the two interaction variants.

    ``interaction`` counts only the message/basis combination that differs
    between the blocks (bilinear contraction versus Hadamard product);
    ``per_triplet_stage`` adds the basis projection evaluated per triplet.
    """
    H, T, nb, nsbf = cfg.hidden_dim, cfg.triplet_dim, cfg.num_bilinear, cfg.basis.sbf_dim
    had_sbf = nsbf * T + (T * T if cfg.basis_mlp_layers == 2 else 0)
    return {
        "bilinear": {"interaction": H * nb * H + nb * H, "per_triplet_stage": H * nb * H + nb * H + nsbf * nb},
        "hadamard": {"interaction": T, "per_triplet_stage": T + had_sbf},
    }
