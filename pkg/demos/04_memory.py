"""When does a second-order state beat a KV cache?

Run with ``python3 demos/04_memory.py``.
"""

# %% [markdown]
# A KV cache stores 2 d numbers per token for each head, so it grows
# linearly. The second-order state has a fixed size that depends only on d.
# The crossover is the first sequence length at which the cache is larger.

# %%
from seqmix import crossover, memcurve, term_count

for d in (16, 32, 64, 128):
    print(f"d={d:4d}: phi2 length {term_count(d):6d}, crossover at N={crossover(d)}")

# %% [markdown]
# The closed-form counts are also measured. ``memcurve`` runs the stateful
# paths and records how many scalars each step keeps alive, then checks they
# match the formulas exactly.

# %%
rep = memcurve(64, 1100, measure=True)
for row in rep.rows[1055:1060]:
    print(row)
print("first N where the cache is larger:", rep.first_exceedance())
print("all measured traces equal the formulas:", all(r["match"] == 1 for r in rep.rows))

# %% [markdown]
# The full table for plotting comes from the command line:
#
#     seqmix memcurve --d 64 --nmax 2048 --out memcurve.csv
