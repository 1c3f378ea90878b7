"""Look inside the specification encoder: equivalence classes and interpolation.

Run: python3 demos/04_encoding_space.py CHECKPOINT
CHECKPOINT is any final.npz written by training on the 5x5 two-objective world.
"""
import sys

import numpy as np

from logicmorl import agent as ag
from logicmorl import analysis
from logicmorl import cli
from logicmorl import neural as nn
from logicmorl import speclang as sl

agent, cfg, _ = cli.load_agent(sys.argv[1])
net = agent.net

# Semantically equivalent strings should land near each other.
buckets = analysis.equivalence_buckets(cfg.n_objectives, n_buckets=8, per_bucket=50, seed=0, draws=60_000)
specs = [s for b in buckets for s in b]
labels = np.repeat(np.arange(len(buckets)), 50)
enc = cli.encode_specs(net, specs)
print(f"nearest-centroid purity over {len(buckets)} equivalence classes: "
      f"{analysis.nearest_centroid_purity(enc, labels):.3f}")
for b in buckets:
    print("  e.g.", " || ".join(sl.render(s) for s in b[:2]))

# Blend two encodings and watch the greedy value map move between them.
a, b = sl.parse("o1"), sl.parse("-o1")
rows = cli.encode_specs(net, [a, b])
states = np.eye(agent.world.n_states)
for w in np.linspace(0.0, 1.0, 5):
    mix = (1 - w) * rows[0] + w * rows[1]
    with nn.no_grad():
        q = net.head(states, nn.Tensor(mix[None]), np.zeros(len(states), dtype=int)).data
    print(f"\nblend {w:.2f} of 'o1' -> '-o1', max_a Q:")
    print(np.array2string(q.max(axis=1).reshape(agent.world.height, agent.world.width), precision=1))
