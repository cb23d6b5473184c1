"""Covariance-update coordinate descent for penalized quadratic objectives.

Minimises  g'Gg - 2c'g + sum_j (l1_j |g_j| + l2_j g_j^2)  over g.
The coordinate minimiser is  S(r_j, l1_j / 2) / (G_jj + l2_j)  with
r_j = c_j - sum_{k != j} G_jk g_k and S the soft-threshold operator.
"""

from numba import njit


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _objective(g, c, grad, l1, l2):
    # g'Gg - 2c'g with Gg = c - grad
    f = 0.0
    for j in range(g.size):
        f += -g[j] * c[j] - g[j] * grad[j] + l1[j] * abs(g[j]) + l2[j] * g[j] * g[j]
    return f


@njit(cache=True)
def cd_solve(G, c, l1, l2, g0, tol, max_sweeps):
    """Returns (g, sweeps, converged, monotone, max_fixed_point_residual)."""
    p = c.size
    g = g0.copy()
    grad = c - G @ g
    f_old = _objective(g, c, grad, l1, l2)
    monotone = True
    converged = False
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        max_delta = 0.0
        for j in range(p):
            denom = G[j, j] + l2[j]
            if denom <= 0.0:
                new = 0.0
            else:
                r = grad[j] + G[j, j] * g[j]
                new = _soft(r, 0.5 * l1[j]) / denom
            delta = new - g[j]
            if delta != 0.0:
                g[j] = new
                for k in range(p):
                    grad[k] -= G[k, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        f_new = _objective(g, c, grad, l1, l2)
        if f_new > f_old + 1e-12 * max(1.0, abs(f_old)):
            monotone = False
        f_old = f_new
        if max_delta <= tol:
            converged = True
            break
    return g, sweeps, converged, monotone, fixed_point_residual(G, c, l1, l2, g)


@njit(cache=True)
def fixed_point_residual(G, c, l1, l2, g):
    """Largest distance of any coordinate from its coordinate-wise optimum."""
    grad = c - G @ g
    worst = 0.0
    for j in range(g.size):
        denom = G[j, j] + l2[j]
        if denom <= 0.0:
            opt = 0.0
        else:
            opt = _soft(grad[j] + G[j, j] * g[j], 0.5 * l1[j]) / denom
        d = abs(opt - g[j])
        if d > worst:
            worst = d
    return worst
