"""Tape gradients, a finite-difference check, and what a broken rule looks like."""
import numpy as np

from icipnet import autodiff as ad
from icipnet.autodiff import Tensor, inject_sign_flip
from icipnet.gradcheck import gradcheck
from icipnet.rng import Rng

rng = Rng(0)
x = Tensor(rng.normal((3, 4)), requires_grad=True)
w = Tensor(rng.normal((4, 2)), requires_grad=True)

# a small scalar function: mean of tanh(x @ w)
f = lambda: ad.mean(ad.tanh(ad.matmul(x, w)))  # noqa: E731

print("loss:", f().item())
print("relative error, tape vs central differences:", gradcheck(f, [x, w]))

# the tanh derivative is 1 - tanh^2; flip its sign and the check notices
with inject_sign_flip("tanh"):
    print("same check with a sign-flipped tanh rule:", gradcheck(f, [x, w]))

# non-finite values stop the tape at the op that produced them
try:
    ad.exp(Tensor(np.array([1000.0])))
except ad.NonFiniteError as err:
    print("overflow caught:", err)
