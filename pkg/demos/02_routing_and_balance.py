"""
Routing specialization and the load-balancing penalty
======================================================

Each nation has two strong experts. A trained hard top-2 router should send
most of a nation's traffic to one of them, and the balance penalty keeps any
single expert from taking nearly all top-1 traffic.
"""

import dataclasses

import numpy as np

from hetmoe import config as C
from hetmoe.datagen import generate, skill_rows_for
from hetmoe.router import top1
from hetmoe.trainer import forward, prepare, split_indices, train

cfg = C.load_config(None, ["dataset.n_samples=10000", "training.epochs=6"], seed=2)
spec = C.dataset_spec(cfg)
reg = C.registry(cfg)
samples = generate(spec)
s = C.model_settings(cfg, strategy="hard", fusion="concat")
data = prepare(samples, reg, s)
test = data.take(split_indices(data)["test"])
skills = skill_rows_for(spec, len(reg))

# %% planted skills, one row per expert
for e, row in enumerate(skills):
    print(f"expert {e}:", " ".join(f"{c}={row[c]:.1f}" for c in spec.nations))

# %% per-nation top-1 dispatch with and without the penalty
for lam in (0.01, 0.0):
    tcfg = dataclasses.replace(C.training_config(cfg), lambda_lb=lam)
    model = train(samples, tcfg, reg, s, prepared=data).model
    first = top1(forward(model, test, exact=True)["probs"])
    print(f"\nlambda_lb={lam}  overall dispatch {np.bincount(first, minlength=len(reg)) / len(first)}")
    for i, c in enumerate(spec.nations):
        counts = np.bincount(first[test.nation_idx == i], minlength=len(reg))
        print(f"  {c}: top expert {int(np.argmax(counts))}  counts {counts.tolist()}")
