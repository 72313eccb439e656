"""Exhaustive ensemble selection on synthetic cross-validated predictions.

Eight noisy predictors of different quality are ranked, the best subset of
the top candidates is found per task, and the nested protocol shows the
optimism of selecting and evaluating on the same patients.

    python3 demos/ensemble_selection.py
"""

from __future__ import annotations

import numpy as np

from lvquant.data import make_fold_plan
from lvquant.ensemble import nested_protocol, select_all_tasks
from lvquant.evaluate import PredictionSet

rng = np.random.default_rng(0)
patients = [f"P{i:03d}" for i in range(1, 57)]
ids = [p for p in patients for _ in range(20)]
frames = np.tile(np.arange(20), len(patients))
truth = rng.uniform(10, 2000, size=(len(ids), 11))
gt = PredictionSet("ground_truth", ids, frames, truth, np.eye(2)[rng.integers(0, 2, len(ids))])

sets = {}
for i in range(8):
    p = np.clip(gt.probs[:, 0] + rng.normal(0, 0.45, len(ids)), 0, 1)
    noise = rng.normal(rng.normal(0, 10), 15 + 5 * i, truth.shape)
    sets[f"model{i}"] = PredictionSet(f"model{i}", ids, frames, truth + noise, np.c_[p, 1 - p])

for task, sel in select_all_tasks(sets, gt).items():
    print(
        f"{task:<6} members {', '.join(sel.members):<28} error {sel.selection_error:8.3f}"
        f"  (average of all {sel.full_average_error:8.3f}, best single {sel.best_singleton_error:8.3f})"
    )

nested = nested_protocol(sets, gt, make_fold_plan(patients, 0))
print("\nnested: select on half A, evaluate on half B")
for task, sel in nested.items():
    print(f"{task:<6} half A {sel.selection_error:8.3f}  half B {sel.evaluation_error:8.3f}")
