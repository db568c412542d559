"""Per-element reference energies, atomization energies and dataset manifests."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import InputError
from ..geometry import AtomicConfiguration
from .extxyz import SYMBOLS

__all__ = [
    "DatasetManifest",
    "element_counts",
    "fit_reference_energies",
    "atomization_energies",
    "shift_energies",
    "dataset_stats",
    "write_stats_csv",
    "split_dataset",
]


@dataclass
class DatasetManifest:
    split: str
    record_count: int
    cutoff: float
    elements: list
    reference_energies: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def check(self, configs: Sequence[AtomicConfiguration]) -> None:
        if len(configs) != self.record_count:
            raise InputError(
                f"manifest lists {self.record_count} records, file has {len(configs)}"
            )
        present = {SYMBOLS[z - 1] for c in configs for z in c.atomic_numbers}
        if self.reference_energies and not present <= set(self.reference_energies):
            raise InputError(f"reference energies missing for {sorted(present - set(self.reference_energies))}")


def element_counts(configs: Sequence[AtomicConfiguration], elements: Optional[Sequence[int]] = None):
    """Design matrix ``n[m, e]``: how many atoms of ``elements[e]`` configuration ``m`` holds."""
    if elements is None:
        elements = sorted({int(z) for c in configs for z in c.atomic_numbers})
    col = {z: e for e, z in enumerate(elements)}
    n = np.zeros((len(configs), len(elements)))
    for m, c in enumerate(configs):
        for z in c.atomic_numbers:
            if int(z) not in col:
                raise InputError(f"element Z={int(z)} has no reference energy")
            n[m, col[int(z)]] += 1
    return n, list(elements)


def fit_reference_energies(configs: Sequence[AtomicConfiguration]) -> dict:
    """Least-squares per-element energies ``{Z: eV}`` minimising the atomization residual."""
    if not configs:
        raise InputError("cannot fit reference energies on an empty dataset")
    if any(c.energy is None for c in configs):
        raise InputError("every configuration needs an energy label")
    n, elements = element_counts(configs)
    y = np.array([c.energy for c in configs])
    _, s, vt = np.linalg.svd(n, full_matrices=True)
    tol = max(n.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < len(elements):
        null = vt[rank:]
        bad = [SYMBOLS[elements[e] - 1] for e in range(len(elements)) if np.any(np.abs(null[:, e]) > 1e-8)]
        raise InputError(f"reference energies not identifiable for elements {bad}")
    coef, *_ = np.linalg.lstsq(n, y, rcond=None)
    return {int(z): float(v) for z, v in zip(elements, coef)}


def atomization_energies(configs: Sequence[AtomicConfiguration], offsets: dict) -> np.ndarray:
    n, elements = element_counts(configs, sorted(offsets))
    ref = np.array([offsets[z] for z in elements])
    return np.array([c.energy for c in configs]) - n @ ref


def shift_energies(configs: Sequence[AtomicConfiguration], offsets: dict) -> list:
    """Copies of ``configs`` with energies replaced by atomization energies."""
    e_at = atomization_energies(configs, offsets)
    return [c.copy(energy=float(e)) for c, e in zip(configs, e_at)]


def dataset_stats(configs: Sequence[AtomicConfiguration], offsets: dict, bins=20):
    """Histogram of atomization energy per atom.

    Returns ``(edges, counts, values)``.  A dataset whose values are all
    equal yields a single unit-width bin centred on that value.
    """
    values = atomization_energies(configs, offsets) / np.array([c.num_atoms for c in configs])
    if values.size and values.min() == values.max():
        v = float(values[0])
        return np.array([v - 0.5, v + 0.5]), np.array([values.size]), values
    counts, edges = np.histogram(values, bins=bins)
    return edges, counts, values


def write_stats_csv(edges, counts, stream=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([f"{lo:.10g}", f"{hi:.10g}", int(c)])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def split_dataset(configs: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and cut into consecutive splits with the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(len(configs))
    bounds = np.round(np.cumsum((0,) + tuple(fractions)) * len(configs)).astype(int)
    return [[configs[i] for i in order[lo:hi]] for lo, hi in zip(bounds[:-1], bounds[1:])]
