"""Fused numba loops for the elementwise-heavy primitives.

Each kernel is a straight loop over float64 arrays with a fixed summation
order, so results are deterministic run to run.
"""

import math

from numba import njit

@njit(cache=True)
def causal_softmax_inplace(s):
    """Row softmax of (N, T, T) scores over columns j <= i; zeros above the diagonal."""
    N, T, _ = s.shape
    for n in range(N):
        for i in range(T):
            m = s[n, i, 0]
            for j in range(1, i + 1):
                if s[n, i, j] > m:
                    m = s[n, i, j]
            tot = 0.0
            for j in range(i + 1):
                e = math.exp(s[n, i, j] - m)
                s[n, i, j] = e
                tot += e
            inv = 1.0 / tot
            for j in range(i + 1):
                s[n, i, j] *= inv
            for j in range(i + 1, T):
                s[n, i, j] = 0.0


@njit(cache=True)
def causal_softmax_backward_inplace(p, dp, c):
    """dp <- c * p * (dp - rowsum(dp * p)) on the causal triangle."""
    N, T, _ = p.shape
    for n in range(N):
        for i in range(T):
            r = 0.0
            for j in range(i + 1):
                r += dp[n, i, j] * p[n, i, j]
            for j in range(i + 1):
                dp[n, i, j] = p[n, i, j] * (dp[n, i, j] - r) * c
            for j in range(i + 1, T):
                dp[n, i, j] = 0.0
