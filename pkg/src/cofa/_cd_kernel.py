"""Compiled inner solver for the L1-penalised weighted least-squares
subproblem of penalised logistic regression (one IRLS step)."""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def weighted_lasso_cd(Xs, w, z, beta, b0, lam, tol, max_pass):
    """Cyclic coordinate descent with active-set cycling.

    Minimises ``(1/2n) sum w_i (z_i - b0 - x_i.beta)^2 + lam * |beta|_1`` over
    standardised columns ``Xs``; ``beta`` is updated in place. Returns the
    new intercept and the number of passes.
    """
    n, p = Xs.shape
    r = np.empty(n)
    for i in range(n):
        eta = b0
        for j in range(p):
            if beta[j] != 0.0:
                eta += Xs[i, j] * beta[j]
        r[i] = z[i] - eta
    v = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += w[i] * Xs[i, j] * Xs[i, j]
        v[j] = acc / n
    wsum = 0.0
    for i in range(n):
        wsum += w[i]

    active = np.zeros(p, dtype=np.bool_)
    passes = 0
    full = True
    while passes < max_pass:
        passes += 1
        max_change = 0.0
        for j in range(p):
            if not full and not active[j]:
                continue
            if v[j] <= 0.0:
                continue
            g = 0.0
            for i in range(n):
                g += w[i] * Xs[i, j] * r[i]
            g = g / n + v[j] * beta[j]
            if g > lam:
                new = (g - lam) / v[j]
            elif g < -lam:
                new = (g + lam) / v[j]
            else:
                new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                for i in range(n):
                    r[i] -= delta * Xs[i, j]
                beta[j] = new
                if abs(delta) > max_change:
                    max_change = abs(delta)
            if new != 0.0:
                active[j] = True
        # unpenalised intercept
        acc = 0.0
        for i in range(n):
            acc += w[i] * r[i]
        d0 = acc / wsum
        if d0 != 0.0:
            b0 += d0
            for i in range(n):
                r[i] -= d0
            if abs(d0) > max_change:
                max_change = abs(d0)
        if max_change < tol:
            if full:
                break
            full = True
        else:
            full = False
    return b0, passes
