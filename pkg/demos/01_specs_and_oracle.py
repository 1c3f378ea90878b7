"""Logical specifications on a small gridworld, scored by the exact oracle.

Run: python3 demos/01_specs_and_oracle.py
"""
import numpy as np

from logicmorl import gridworld as gw
from logicmorl import oracle as orc
from logicmorl import speclang as sl

ARROWS = "^v<>"

world = gw.build("small", 3, seed=0)
print("5x5 world with objectives:", ", ".join(gw.OBJECTIVE_NAMES[:3]))
for k, name in enumerate(gw.OBJECTIVE_NAMES[:3]):
    print(f"\n{name} reward map (o{k + 1}):")
    print(np.array2string(world.reward_maps[k], precision=2))

# A specification is parsed once, then scalarizes any reward vector.
spec = sl.parse("o1 & o2 >= 1 | o3 >= 0.9")
print("\nspec:", sl.render(spec), "| tokens:", len(sl.tokenize(spec)))
print("scalar reward per cell:")
print(np.array2string(sl.evaluate(world.reward_table(), spec).reshape(5, 5), precision=2))

for text in ("o1", "o2 >= 1", "o3", "o1 & o3"):
    ref = orc.reference(world, sl.parse(text))
    policy = orc.solve(orc.ScalarMDP.from_spec(world, sl.parse(text))).policy
    print(f"\n{text!r}: oracle return {ref.oracle_return:.2f}, uniform-random return {ref.random_return:.2f}")
    for row in policy:
        print("  " + " ".join(ARROWS[a] for a in row))
