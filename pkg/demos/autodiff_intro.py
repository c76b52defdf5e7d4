#!/usr/bin/env python3
"""A guided tour of the tape-based autodiff engine.

Everything the network trains with reduces to a handful of array ops on
5-D (N, C, D, H, W) tensors.  This script builds a tiny expression, runs
the backward pass, and checks a few gradient entries against central
finite differences -- the same procedure the bundled gradient checker
automates for every operator.
"""

import numpy as np

from banet.autodiff import Tape, Tensor, add, backward, mul, scalar_mul, sum_all
from banet.gradcheck import run_suite, format_results
from banet.ops import ConvParams, conv3d


def scalar_demo():
    print("=== a hand-built expression ===")
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 2, 2, 2)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (1, 2, 2, 2, 2)), requires_grad=True)

    def loss_value():
        # loss = sum( (x*w + 0.5*x)^2 )
        y = add(mul(x, w), scalar_mul(x, 0.5))
        return sum_all(mul(y, y))

    with Tape():
        loss = loss_value()
        backward(loss)
    print(f"loss = {loss.item():.6f}")

    # probe one coordinate of dloss/dx with central differences
    i = (0, 1, 0, 1, 0)
    step = 1e-6
    orig = x.data[i]
    x.data[i] = orig + step
    up = loss_value().item()
    x.data[i] = orig - step
    down = loss_value().item()
    x.data[i] = orig
    fd = (up - down) / (2 * step)
    print(f"dloss/dx{list(i)}: tape {x.grad[i]:+.6f}  finite-diff {fd:+.6f}")


def conv_demo():
    print("\n=== gradients through a convolution ===")
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.1, requires_grad=True)
    b = Tensor(np.zeros((1, 3, 1, 1, 1)), requires_grad=True)
    params = ConvParams(w, b, stride=(1, 1, 1), padding=(1, 1, 1))

    with Tape():
        out = conv3d(x, params)
        loss = sum_all(mul(out, out))
        backward(loss)
    print(f"output shape {out.shape}, loss {loss.item():.4f}")
    print(f"|dloss/dweight| mean {np.abs(w.grad).mean():.4f}, "
          f"|dloss/dinput| mean {np.abs(x.grad).mean():.4f}")


def full_suite():
    print("\n=== the full finite-difference suite ===")
    print(format_results(run_suite(seed=0)))


if __name__ == "__main__":
    scalar_demo()
    conv_demo()
    full_suite()
