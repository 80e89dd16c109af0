"""Implicit prompts: how visual patches vote for each prompt vector."""
import numpy as np

from icipnet.autodiff import Tensor
from icipnet.icip import aggregate_prompts, prompt_attention, prompt_similarity
from icipnet.rng import Rng

rng = Rng(1)
B, P, M, D = 1, 6, 3, 4
Vhat = Tensor(rng.normal((B, P, D)))
T = Tensor(rng.child(1).normal((M, D)))

alpha = prompt_attention(prompt_similarity(Vhat, T))
print("alpha, one column per prompt:\n", np.round(alpha.data[0], 3))
print("column sums:", alpha.data[0].sum(axis=0))

# each enriched prompt is its original vector plus a convex mix of patches
T_o = aggregate_prompts(alpha, Vhat, T)
shift = T_o.data[0] - T.data
lo, hi = Vhat.data[0].min(axis=0), Vhat.data[0].max(axis=0)
print("shift stays inside the patch envelope:", bool(np.all((shift >= lo - 1e-12) & (shift <= hi + 1e-12))))

# with blank patches the prompts pass through unchanged
blank = Tensor(np.zeros((B, P, D)))
print("blank image leaves prompts intact:",
      np.array_equal(aggregate_prompts(prompt_attention(prompt_similarity(blank, T)), blank, T).data[0], T.data))
