#!/usr/bin/env python3
"""Print finite-difference agreement of the MLP backward pass and the relaxed rate gradient."""
import numpy as np

from cdnnsched import neural as nn
from cdnnsched.rates import relaxed_sum_rate_with_grad


def flat(p):
    return np.concatenate([a.ravel() for a in p.arrays()])


def main(n=20, seed=0):
    rng = np.random.default_rng(seed)
    arch = nn.MlpArchitecture((4, 30, 30, 30, 1), 0.0)
    for i in range(n):
        params = nn.init_params(arch, rng)
        x = rng.standard_normal((4, 4))
        _, cache = nn.forward(params, x)
        a = flat(nn.backward(params, cache, np.ones((4, 1))))
        b = flat(nn.finite_diff_grad(lambda p: float(nn.forward(p, x)[0].sum()), params))
        k = 1 + i % 4
        g, f = rng.exponential(size=(k, k)), rng.uniform(size=k)
        ga = relaxed_sum_rate_with_grad(g, f)[1]
        gb = nn.finite_diff_grad(lambda v: float(relaxed_sum_rate_with_grad(g, v)[0]), f)
        print(f"net {i:2d}: mlp {np.linalg.norm(a - b) / np.linalg.norm(b):.2e}  "
              f"rate K={k} {np.linalg.norm(ga - gb) / np.linalg.norm(gb):.2e}")


if __name__ == "__main__":
    main()
