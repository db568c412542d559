"""Hadamard versus bilinear interaction block, timed on the same triplets.

The bilinear block contracts every triplet against an H x n_bilinear x H
tensor; the Hadamard block does one elementwise product in the
down-projected triplet space.  Both run here on one synthetic graph with
at least 1e5 triplets, forward only.

    python3 demos/interaction_cost.py
"""

from threadpoolctl import threadpool_limits

from dimekit.bench import bench_interactions
from dimekit.model import ModelConfig, interaction_flops

cfg = ModelConfig(hidden_dim=128, triplet_dim=64)
with threadpool_limits(limits=1):
    rows = bench_interactions(cfg, min_triplets=100_000, repeats=3)

for r in rows:
    print(f"{r.variant:9s} {r.n_triplets:7d} triplets  {r.seconds * 1e3:8.1f} ms  "
          f"{r.seconds_per_triplet * 1e9:7.1f} ns/triplet  {r.macs_per_triplet:7d} MAC/triplet")
by = {r.variant: r for r in rows}
print(f"time ratio bilinear / hadamard: {by['bilinear'].seconds_per_triplet / by['hadamard'].seconds_per_triplet:.1f}")

flops = interaction_flops(cfg)
print("multiply-accumulates in the combination step alone:",
      flops["bilinear"]["interaction"], "vs", flops["hadamard"]["interaction"])
