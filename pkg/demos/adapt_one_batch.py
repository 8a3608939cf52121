"""One SVWA step on a corrupted batch, next to TENT and the unadapted model.

Pretrains a small model for a few epochs first (about half a minute).
Run with ``python demos/adapt_one_batch.py``.
"""

import numpy as np

from svwa import harness as H
from svwa.adaptation import AdaptConfig, canonical_points, make_branches, svwa_adapt, tent_adapt
from svwa.corruptions import CorruptionSpec, corrupt_all
from svwa.model import forward_logits
from svwa.numerics import EVAL, TRAIN

cfg = H.ExperimentConfig(train_per_class=60, test_per_class=16, n_points=512, fps_points=128, epochs=6)
dataset = H.resolve_dataset(cfg)
state, history = H.run_pretrain(cfg, dataset)
print(f"clean accuracy after {cfg.epochs} epochs: {history[-1]['clean_accuracy']:.3f}")

batch = corrupt_all(dataset.split("test"), CorruptionSpec("gaussian", 5, seed=1))
labels = np.array([c.label for c in batch])
canon = canonical_points(batch, cfg.fps_points, prediction_seed=0, batch_index=0)


def accuracy(logits):
    return float(np.mean(logits.argmax(axis=1) == labels))


logits, _ = forward_logits(state, canon, EVAL)
print(f"source-only (running statistics): {accuracy(logits):.3f}")
logits, _ = forward_logits(state, canon, TRAIN)
print(f"batch statistics, no update:      {accuracy(logits):.3f}")

adapt = AdaptConfig(nv=6)
tent, step = tent_adapt(state, canon, adapt.optimizer(state.get_norm_params()))
logits, _ = forward_logits(state, canon, TRAIN, tent)
print(f"tent, one step:                    {accuracy(logits):.3f}  entropy {step.entropy_before:.4f} -> {step.entropy_after:.4f}")

model = state.copy()
_, branches, record = svwa_adapt(model, batch, adapt, make_branches(state, adapt))
print(f"svwa, six variations averaged:     {record.accuracy:.3f}  entropy {record.entropy_before:.4f} -> {record.entropy_after:.4f}")
print("branch entropies before their step:", np.round(record.branch_entropies, 4).tolist())

# each branch moved gamma/beta a little differently; the average sits between them
name = model.norm_names()[0]
spread = np.std([b.norm_params[name] for b in branches], axis=0).max()
moved = np.abs(model.params[name] - state.params[name]).max()
print(f"{name}: largest move {moved:.2e}, largest spread across branches {spread:.2e}")
