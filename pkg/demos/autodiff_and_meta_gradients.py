"""
Reverse-mode gradients, second order and meta-gradients
=======================================================

The autodiff module differentiates float64 numpy computations.  Here we take
a second derivative, route a gradient through a straight-through node and
differentiate a loss through one unrolled gradient step.
"""
import numpy as np

from bilevel_genrec import autodiff as ad
from bilevel_genrec.autodiff import ParameterSet, Tensor

# %%
# Second order: keep the graph of the first backward pass.
x = Tensor(np.array(1.5), requires_grad=True)
y = ad.power(x, 3.0)
(dy,) = ad.grad(y, [x], create_graph=True)
(d2y,) = ad.grad(dy, [x])
print("d/dx x^3 =", dy.item(), " d2/dx2 x^3 =", d2y.item())  # 6.75, 9.0

# %%
# Straight-through: the value is the hard input, the gradient goes to the soft one.
soft = Tensor(np.array([0.2, 0.7, 0.1]), requires_grad=True)
hard = Tensor(np.array([0.0, 1.0, 0.0]))
out = ad.straight_through(hard, soft)
(g,) = ad.grad(ad.sum(ad.mul(out, Tensor(np.array([1.0, 2.0, 3.0])))), [soft])
print("value:", out.data, " gradient on soft:", g.data)

# %%
# Meta-gradient.  With inner = outer = (theta - phi)^2 and one SGD step of
# size 0.1, theta' = theta - 0.2 (theta - phi) and the outer loss is
# 0.64 (theta - phi)^2, so at theta = 1, phi = 0 the derivative is -1.28.
def loss(phi, theta):
    return ad.sum(ad.power(ad.sub(theta["t"], phi["p"]), 2.0))


theta = ParameterSet({"t": np.array(1.0)})
phi = ParameterSet({"p": np.array(0.0)})
for mode in ("unroll", "hvp"):
    g = ad.unrolled_gradient(loss, loss, theta, phi, lr=0.1, mode=mode)
    print(f"{mode:6s} d outer / d phi = {g['p'].item():+.6f}")
