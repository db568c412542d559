"""Dataset I/O, reference energies, statistics and the toy collision generator."""

from .extxyz import SYMBOLS, parse_extxyz, read_extxyz_file, symbol_to_z, write_extxyz, write_extxyz_file
from .reference import (
    DatasetManifest,
    atomization_energies,
    dataset_stats,
    element_counts,
    fit_reference_energies,
    shift_energies,
    split_dataset,
    write_stats_csv,
)
from .toy import (
    ToyPotentialConfig,
    generate_collisions,
    kinetic_energy,
    relax_cluster,
    run_collision,
    sample_cluster,
    toy_energy,
    toy_energy_forces,
    velocity_verlet,
    VerletResult,
    window_drift,
)

__all__ = [
    "SYMBOLS",
    "parse_extxyz",
    "read_extxyz_file",
    "symbol_to_z",
    "write_extxyz",
    "write_extxyz_file",
    "DatasetManifest",
    "atomization_energies",
    "dataset_stats",
    "element_counts",
    "fit_reference_energies",
    "shift_energies",
    "split_dataset",
    "write_stats_csv",
    "ToyPotentialConfig",
    "generate_collisions",
    "kinetic_energy",
    "relax_cluster",
    "run_collision",
    "sample_cluster",
    "toy_energy",
    "toy_energy_forces",
    "velocity_verlet",
    "VerletResult",
    "window_drift",
]
