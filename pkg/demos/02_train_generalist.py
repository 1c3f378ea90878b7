"""Train one specification-conditioned agent and score it zero-shot on held-out specs.

Run: python3 demos/02_train_generalist.py [steps]   (default 30000, a few minutes)
The full-size run behind the acceptance gates uses 200000 steps.
"""
import sys

import numpy as np

from logicmorl.config import RunConfig
from logicmorl.trainer import run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 30_000
cfg = RunConfig(size="small", n_objectives=2, specset_count=12_500, total_steps=steps,
                eval_every=max(steps // 6, 1000), eval_panel=50, checkpoint_steps=[])
print(f"training {steps} steps on {int(cfg.specset_count * cfg.specset_split)} specs with a length curriculum")
res = run_training(cfg, progress=print)

scores = res.final_scores
print(f"\nzero-shot mean normalized score on {len(scores)} held-out specs: {scores.mean():.3f}")
order = np.argsort(scores)
print("hardest:")
for i in order[:3]:
    print(f"  {scores[i]:6.2f}  {res.panel.labels[i]}")
print("easiest:")
for i in order[-3:]:
    print(f"  {scores[i]:6.2f}  {res.panel.labels[i]}")
