"""Specialize a generalist to a single specification and compare with learning from scratch.

Run: python3 demos/03_warm_start.py [generalist_steps]   (default 30000)
"""
import sys
import tempfile
from pathlib import Path

from logicmorl import neural as nn
from logicmorl.config import RunConfig
from logicmorl.trainer import run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 30_000
spec = "o1 & o2 >= 0.5"
with tempfile.TemporaryDirectory() as tmp:
    base = RunConfig(size="small", n_objectives=2, specset_count=12_500, total_steps=steps,
                     eval_every=steps, eval_panel=20, checkpoint_steps=[])
    print(f"1) generalist: {steps} steps over the training specs")
    run_training(base, Path(tmp) / "generalist")
    generalist = nn.load_checkpoint(Path(tmp) / "generalist" / "final.npz")

    tune = RunConfig(size="small", n_objectives=2, fixed_spec=spec, total_steps=40_000,
                     eval_every=500, stop_score=0.9, checkpoint_steps=[], seed=1)
    for label, init in (("fresh", None), ("warm", generalist)):
        res = run_training(tune, init_checkpoint=init)
        reached = res.steps_to_reach(0.9)
        print(f"2) {label:5s} agent on {spec!r}: zero-shot {res.evals[0][1].mean():.2f}, "
              f"score 0.9 reached at step {reached}")
