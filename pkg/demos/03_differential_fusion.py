"""Differential correlation: two score maps, one subtracted from the other."""
import numpy as np

from icipnet.autodiff import Tensor
from icipnet.bif import correlation, lambda_init
from icipnet.rng import Rng

rng = Rng(2)
G = 4
Q1, K1 = Tensor(rng.normal((1, 5, G))), Tensor(rng.normal((1, 3, G)))
Q2, K2 = Tensor(rng.child(1).normal((1, 5, G))), Tensor(rng.child(2).normal((1, 3, G)))
lv = Tensor([[0.8]])

F = correlation(Q1, K1, Q2, K2, lv, G)
print("F = S1 - lambda * S2, patches x keys:\n", np.round(F.data[0], 3))

# identical subspaces with lambda 1 cancel exactly: common-mode noise removed
print("identical subspaces cancel:", not correlation(Q1, K1, Q1, K1, Tensor([[1.0]]), G).data.any())

# the row-softmax variant keeps each map a distribution before subtracting
Fs = correlation(Q1, K1, Q2, K2, lv, G, softmax=True)
print("softmax variant row sums (1 - lambda):", np.round(Fs.data[0].sum(axis=-1), 12))

print("lambda_base by stage:", [round(lambda_init(i), 4) for i in range(1, 5)])
