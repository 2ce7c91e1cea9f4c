"""A guided tour of the reverse-mode autodiff core.

Run with:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from canopyheights.tensor import Tensor, grad_check

print("=" * 60)
print("1. Tensors carry values and, on request, gradients")
print("=" * 60)

x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
y = (x * x + 2.0 * x).sum()          # d/dx (x^2 + 2x) = 2x + 2
y.backward()
print("x      =", x.data)
print("value  =", y.item())
print("grad   =", x.grad, " (expected", 2.0 * x.data + 2.0, ")")

print()
print("=" * 60)
print("2. The tape handles reuse: one node feeding two paths")
print("=" * 60)

x = Tensor(np.array(3.0), requires_grad=True)
a = x * 2.0
out = a * x + a                      # 2x^2 + 2x -> d/dx = 4x + 2
out.backward()
print("d/dx (2x^2 + 2x) at x=3 :", x.grad, " (expected 14)")

print()
print("=" * 60)
print("3. detach() stops gradients without copying semantics")
print("=" * 60)

x = Tensor(np.array([2.0]), requires_grad=True)
out = (x.detach() * x).sum()         # only the second factor is live
out.backward()
print("grad through one live path:", x.grad, " (expected [2.])")

print()
print("=" * 60)
print("4. Every primitive is validated against finite differences")
print("=" * 60)

def f(v):
    return (v.exp() * v.clamp_min(0.1)).sum()

err = grad_check(f, Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 4)),
                           requires_grad=True))
print("max relative gradient error:", err, " (must be < 1e-4)")
