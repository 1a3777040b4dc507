"""Attention kernels and decay masks, one piece at a time.

Run with ``python3 demos/01_kernels_and_masks.py``.
"""

# %% [markdown]
# Every variant in the package computes a causal score matrix, optionally
# multiplies it by a decay mask, optionally normalizes each row, and then
# mixes the values. We start with the decay mask.

# %%
import numpy as np

from seqmix import attention_kernel, preset
from seqmix.forward import linear_attention_kv_first, linear_attention_qk_first, softmax_attention
from seqmix.maskgen import decay_matrix_from_logits

rng = np.random.default_rng(0)
H, N, d = 1, 6, 4

# Per-token decay logits are non-positive, so the mask entries lie in (0, 1].
a = -rng.uniform(0.1, 0.8, (H, N))
dm = decay_matrix_from_logits(a)
np.set_printoptions(precision=3, suppress=True)
print("decay mask for one head:\n", dm.dense[0])

# %% [markdown]
# Entry (i, j) is exp(sum of a over j+1..i). It is 1 on the diagonal, decays
# towards the past and is exactly zero above the diagonal.

# %%
assert np.all(np.triu(dm.dense[0], 1) == 0.0)
assert np.allclose(np.diag(dm.dense[0]), 1.0)

# %% [markdown]
# Linear attention can be evaluated in two orders. Forming ``Q K^T`` first
# costs O(N^2 d); accumulating ``K^T V`` prefix sums costs O(N d^2). Both
# give the same numbers.

# %%
Q, K, V = (rng.standard_normal((H, 64, 8)) for _ in range(3))
a1, a2 = linear_attention_qk_first(Q, K, V), linear_attention_kv_first(Q, K, V)
print("max gap between the two orders:", np.max(np.abs(a1 - a2)))

# %% [markdown]
# The same kernel entry point covers squared and exponential scores. With
# row normalization the squared kernel becomes 2Mamba's mixing rule, and the
# exponential kernel with no decay is plain causal softmax attention.

# %%
Q, K, V = (rng.standard_normal((H, N, d)) for _ in range(3))
out, cache = attention_kernel(Q, K, V, dm.a_cs, "squared", True, return_cache=True)
print("row sums of the normalized squared scores:", cache.Y_N[0].sum(-1))

soft = attention_kernel(Q, K, V, None, "exponential", True)
print("matches causal softmax:", np.allclose(soft, softmax_attention(Q, K, V), rtol=0, atol=1e-12))

# %% [markdown]
# The named presets bundle these choices. Printing one shows each switch.

# %%
for name in ("linear", "mamba2s", "twomamba", "twomamba_e"):
    print(name, preset(name))
