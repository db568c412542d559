"""Toy collisions, end to end.

Two small clusters of H, C and O are relaxed into Morse minima, thrown at
each other, and integrated with velocity Verlet.  Snapshots along the way
carry exact analytic energies and forces.  A small DimeNet++ is fitted to
those forces for a few hundred steps and then asked about the test split.

    python3 demos/toy_collisions.py            # under a minute on one core
"""

import numpy as np

from dimekit.datakit import (
    ToyPotentialConfig,
    dataset_stats,
    fit_reference_energies,
    generate_collisions,
    shift_energies,
    split_dataset,
    velocity_verlet,
    window_drift,
)
from dimekit.datakit import toy
from dimekit.model import DimeNetPP, ModelConfig
from dimekit.trainer import TrainConfig, evaluate, train

cfg = ToyPotentialConfig()

# --- one trajectory, watched closely -------------------------------------
z, pos, vel = toy._setup_collision(cfg, np.random.default_rng(1))
run = velocity_verlet(cfg, z, pos, vel, cfg.num_steps, record=range(0, cfg.num_steps + 1, 20_000))
print(f"{len(z)} atoms, {cfg.num_steps} steps of {cfg.timestep} fs")
print(f"worst energy change inside any 1000-step window: {window_drift(run.total_energy):.2e} eV")
for step, (x, _) in sorted(run.frames.items()):
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    print(f"  t = {step * cfg.timestep:6.1f} fs   closest pair {d.min():.3f} A")

# --- a small corpus ------------------------------------------------------
snaps = generate_collisions(cfg, 400, seed=0)
offsets = fit_reference_energies(snaps)
print("\nper-element reference energies (eV):", {k: round(v, 3) for k, v in offsets.items()})
edges, counts, _ = dataset_stats(snaps, offsets, bins=8)
for lo, hi, c in zip(edges[:-1], edges[1:], counts):
    print(f"  {lo:8.3f} .. {hi:8.3f} eV/atom  {'#' * int(c // 4)}")

train_set, val_set, test_set = split_dataset(shift_energies(snaps, offsets), seed=0)

# --- fit ---------------------------------------------------------------
mcfg = ModelConfig(hidden_dim=32, out_emb_dim=64, triplet_dim=16, num_blocks=2)
tcfg = TrainConfig(max_steps=300, warmup_steps=50, decay_steps=300, decay_rate=0.1, batch_size=8, eval_every=100)
result = train(train_set, val_set, mcfg, tcfg)
for step, lr, loss, mae_e, mae_f in result.history:
    print(f"step {step:4d}  lr {lr:.1e}  train loss {loss:.3f}  val mae_F {mae_f:.3f} eV/A")

zero_force = np.mean(np.abs(np.concatenate([c.forces.ravel() for c in test_set])))
m = evaluate(test_set, result.params, mcfg)
print(f"\ntest mae_F {m.mae_F:.3f} eV/A   (predicting zero force: {zero_force:.3f})")

pred = DimeNetPP(mcfg, result.params).predict(test_set[0])
print("first test snapshot, predicted vs true force on atom 0:")
print("  ", np.round(pred.forces[0], 3), np.round(test_set[0].forces[0], 3))
