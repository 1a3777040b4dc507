"""Training a tiny 2Mamba model on associative recall.

Run with ``python3 demos/05_training.py`` (about two minutes on one core).
"""

# %% [markdown]
# The task shows key/value pairs, then a delimiter and a query key. The
# model has to emit the matching value. Only the final position is scored,
# so chance accuracy is one over the number of value symbols.

# %%
from seqmix.harness import RECALL_THRESHOLD, generate_batch, recall_config, recall_task, train

task = recall_task()
tok, tgt, mask = generate_batch(task, 1, rng=0)
print("tokens:", tok[0][-20:])
print("answer:", tgt[0][mask[0]])

# %% [markdown]
# The documented configuration is a two-layer model with d_model 64, four
# heads and AdamW at 3e-3. Training stops at the first evaluation above the
# threshold.

# %%
cfg = recall_config()
record = train(cfg, task, out_dir="runs/recall", log=print, target_acc=RECALL_THRESHOLD)
print(record.summary())

# %% [markdown]
# ``runs/recall`` now holds ``config.json``, ``loss.csv`` and the weights.
# The same run from the shell:
#
#     seqmix train --preset twomamba --task assoc_recall --stop-at 0.9 --out runs/recall
