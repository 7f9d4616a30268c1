"""Compiled kernels for the two-component normal mixture.

Parameter order is ``(pi1, mu1, sd1, mu2, sd2)``.  All functions work on the
score ``G = sum_i grad log f_i`` and ``H = sum_i hess log f_i`` so that the
negative log-likelihood gradient is ``-G`` and its Hessian ``-H``.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
PI_FLOOR = 1e-6


@njit(cache=True)
def log_consts(theta):
    """Per-parameter constants ``log(pi_j / sd_j) - log(2 pi) / 2``."""
    c1 = math.log(theta[0]) - math.log(theta[2]) - 0.5 * LOG_2PI
    c2 = math.log1p(-theta[0]) - math.log(theta[4]) - 0.5 * LOG_2PI
    return c1, c2


@njit(cache=True)
def _point_core(theta, c1, c2, xi):
    z1 = (xi - theta[1]) / theta[2]
    z2 = (xi - theta[3]) / theta[4]
    a1 = c1 - 0.5 * z1 * z1
    a2 = c2 - 0.5 * z2 * z2
    if a1 >= a2:
        e = math.exp(a2 - a1)
        lse = a1 + math.log1p(e)
        r1 = 1.0 / (1.0 + e)
        r2 = e * r1
    else:
        e = math.exp(a1 - a2)
        lse = a2 + math.log1p(e)
        r2 = 1.0 / (1.0 + e)
        r1 = e * r2
    return z1, z2, lse, r1, r2


@njit(cache=True)
def add_point(theta, c1, c2, xi, sign, g, h):
    """Add ``sign`` times the score and Hessian of ``log f(xi)`` into ``g``, ``h``.

    ``c1, c2`` come from :func:`log_consts`.  Returns ``log f(xi)``.
    """
    p, s1, s2 = theta[0], theta[2], theta[4]
    z1, z2, lse, r1, r2 = _point_core(theta, c1, c2, xi)
    d1 = (1.0 / p, z1 / s1, (z1 * z1 - 1.0) / s1, 0.0, 0.0)
    d2 = (-1.0 / (1.0 - p), 0.0, 0.0, z2 / s2, (z2 * z2 - 1.0) / s2)
    gi = (r1 * d1[0] + r2 * d2[0], r1 * d1[1], r1 * d1[2], r2 * d2[3], r2 * d2[4])
    for a in range(5):
        g[a] += sign * gi[a]
        for b in range(a, 5):
            v = sign * (r1 * d1[a] * d1[b] + r2 * d2[a] * d2[b] - gi[a] * gi[b])
            h[a, b] += v
            if b != a:
                h[b, a] += v
    # second derivatives of the component log densities
    h[0, 0] += sign * (-r1 / (p * p) - r2 / ((1.0 - p) * (1.0 - p)))
    h[1, 1] += sign * (-r1 / (s1 * s1))
    h[1, 2] += sign * (-2.0 * r1 * z1 / (s1 * s1))
    h[2, 1] += sign * (-2.0 * r1 * z1 / (s1 * s1))
    h[2, 2] += sign * (r1 * (1.0 - 3.0 * z1 * z1) / (s1 * s1))
    h[3, 3] += sign * (-r2 / (s2 * s2))
    h[3, 4] += sign * (-2.0 * r2 * z2 / (s2 * s2))
    h[4, 3] += sign * (-2.0 * r2 * z2 / (s2 * s2))
    h[4, 4] += sign * (r2 * (1.0 - 3.0 * z2 * z2) / (s2 * s2))
    return lse


@njit(cache=True)
def point_logf(theta, xi):
    c1, c2 = log_consts(theta)
    return _point_core(theta, c1, c2, xi)[2]


@njit(cache=True)
def totals(theta, x):
    """Sum of ``log f_i``, its gradient and Hessian over all points."""
    p, s1, s2 = theta[0], theta[2], theta[4]
    c1, c2 = log_consts(theta)
    ip = 1.0 / p
    iq = -1.0 / (1.0 - p)
    logf = 0.0
    g = np.zeros(5)
    # a: component second moments plus curvature (the (0, 0) entry cancels exactly),
    # b: outer products of the per-point score
    a = np.zeros((5, 5))
    b = np.zeros((5, 5))
    for i in range(x.shape[0]):
        z1, z2, lse, r1, r2 = _point_core(theta, c1, c2, x[i])
        logf += lse
        u1 = z1 / s1
        v1 = (z1 * z1 - 1.0) / s1
        u2 = z2 / s2
        v2 = (z2 * z2 - 1.0) / s2
        gi = (r1 * ip + r2 * iq, r1 * u1, r1 * v1, r2 * u2, r2 * v2)
        for j in range(5):
            g[j] += gi[j]
            for k in range(j, 5):
                b[j, k] += gi[j] * gi[k]
        a[0, 1] += r1 * ip * u1
        a[0, 2] += r1 * ip * v1
        a[0, 3] += r2 * iq * u2
        a[0, 4] += r2 * iq * v2
        a[1, 1] += r1 * (u1 * u1 - 1.0 / (s1 * s1))
        a[1, 2] += r1 * (u1 * v1 - 2.0 * z1 / (s1 * s1))
        a[2, 2] += r1 * (v1 * v1 + (1.0 - 3.0 * z1 * z1) / (s1 * s1))
        a[3, 3] += r2 * (u2 * u2 - 1.0 / (s2 * s2))
        a[3, 4] += r2 * (u2 * v2 - 2.0 * z2 / (s2 * s2))
        a[4, 4] += r2 * (v2 * v2 + (1.0 - 3.0 * z2 * z2) / (s2 * s2))
    h = np.empty((5, 5))
    for j in range(5):
        for k in range(j, 5):
            h[j, k] = a[j, k] - b[j, k]
            h[k, j] = h[j, k]
    return logf, g, h


@njit(cache=True)
def objective(theta, x, wterm):
    c1, c2 = log_consts(theta)
    v = 0.0
    for i in range(x.shape[0]):
        v -= _point_core(theta, c1, c2, x[i])[2]
    for a in range(5):
        v += wterm[a] * theta[a]
    return v


# ---------------------------------------------------------------- initialization


@njit(cache=True)
def _quantile_sorted(xs, q):
    pos = q * (xs.shape[0] - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, xs.shape[0] - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


@njit(cache=True)
def kmeans_init(x, lower_sd):
    """Two-cluster 1-d Lloyd from the quartiles, then cluster moments.

    Component 1 is the cluster with the larger center.
    """
    xs = np.sort(x)
    n = xs.shape[0]
    lo = _quantile_sorted(xs, 0.25)
    hi = _quantile_sorted(xs, 0.75)
    split = 0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        k = np.searchsorted(xs, mid, side="right")
        if k == 0 or k == n:
            split = k
            break
        new_lo = xs[:k].mean()
        new_hi = xs[k:].mean()
        split = k
        if new_lo == lo and new_hi == hi:
            break
        lo, hi = new_lo, new_hi
    theta = np.empty(5)
    if split == 0 or split == n:
        theta[0] = 0.5
        theta[1] = xs.mean()
        theta[3] = xs.mean()
        theta[2] = max(xs.std(), lower_sd)
        theta[4] = theta[2]
        return theta
    low = xs[:split]
    high = xs[split:]
    theta[0] = min(max(high.shape[0] / n, PI_FLOOR), 1.0 - PI_FLOOR)
    theta[1] = high.mean()
    theta[2] = max(high.std(), lower_sd)
    theta[3] = low.mean()
    theta[4] = max(low.std(), lower_sd)
    return theta


@njit(cache=True)
def em(x, theta0, n_iter, lower_sd):
    theta = theta0.copy()
    n = x.shape[0]
    for _ in range(n_iter):
        m1, m2 = theta[1], theta[3]
        c1, c2 = log_consts(theta)
        w1 = 0.0
        s1 = 0.0
        q1 = 0.0
        s2 = 0.0
        q2 = 0.0
        for i in range(n):
            r1 = _point_core(theta, c1, c2, x[i])[3]
            e1 = x[i] - m1
            e2 = x[i] - m2
            w1 += r1
            s1 += r1 * e1
            q1 += r1 * e1 * e1
            s2 += (1.0 - r1) * e2
            q2 += (1.0 - r1) * e2 * e2
        w2 = n - w1
        if w1 <= 1e-12 or w2 <= 1e-12:
            break
        # shifted moments keep the variance update stable
        v1 = max(q1 / w1 - (s1 / w1) ** 2, 0.0)
        v2 = max(q2 / w2 - (s2 / w2) ** 2, 0.0)
        theta[0] = min(max(w1 / n, PI_FLOOR), 1.0 - PI_FLOOR)
        theta[1] = m1 + s1 / w1
        theta[2] = max(math.sqrt(v1), lower_sd)
        theta[3] = m2 + s2 / w2
        theta[4] = max(math.sqrt(v2), lower_sd)
    return theta


# ---------------------------------------------------------------- projected Newton


@njit(cache=True)
def _bounds(lower_sd):
    lb = np.array([PI_FLOOR, -np.inf, lower_sd, -np.inf, lower_sd])
    ub = np.array([1.0 - PI_FLOOR, np.inf, np.inf, np.inf, np.inf])
    return lb, ub


@njit(cache=True)
def _project(theta, lb, ub):
    out = theta.copy()
    for a in range(5):
        out[a] = min(max(out[a], lb[a]), ub[a])
    return out


@njit(cache=True)
def _proj_grad_norm(theta, g, lb, ub):
    s = 0.0
    for a in range(5):
        ga = g[a]
        if theta[a] <= lb[a] and ga > 0.0:
            ga = 0.0
        if theta[a] >= ub[a] and ga < 0.0:
            ga = 0.0
        s += ga * ga
    return math.sqrt(s)


@njit(cache=True)
def _cholesky_ok(m):
    k = m.shape[0]
    ell = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            s = m[i, j]
            for t in range(j):
                s -= ell[i, t] * ell[j, t]
            if i == j:
                if not s > 0.0:
                    return False, ell
                ell[i, i] = math.sqrt(s)
            else:
                ell[i, j] = s / ell[j, j]
    return True, ell


@njit(cache=True)
def _chol_solve(ell, b):
    k = b.shape[0]
    y = np.zeros(k)
    for i in range(k):
        s = b[i]
        for t in range(i):
            s -= ell[i, t] * y[t]
        y[i] = s / ell[i, i]
    out = np.zeros(k)
    for i in range(k - 1, -1, -1):
        s = y[i]
        for t in range(i + 1, k):
            s -= ell[t, i] * out[t]
        out[i] = s / ell[i, i]
    return out


@njit(cache=True)
def _newton_direction(hess, g, free):
    """Newton step on the free coordinates, shifting the Hessian until PD."""
    idx = np.flatnonzero(free)
    k = idx.shape[0]
    p = np.zeros(5)
    for a in range(5):
        if not free[a]:
            p[a] = -g[a] / max(abs(hess[a, a]), 1.0)
    if k == 0:
        return p
    sub = np.empty((k, k))
    rhs = np.empty(k)
    dmax = 0.0
    for i in range(k):
        rhs[i] = -g[idx[i]]
        dmax = max(dmax, abs(hess[idx[i], idx[i]]))
        for j in range(k):
            sub[i, j] = hess[idx[i], idx[j]]
    tau = 0.0
    for _ in range(60):
        m = sub.copy()
        for i in range(k):
            m[i, i] += tau
        ok, ell = _cholesky_ok(m)
        if ok:
            step = _chol_solve(ell, rhs)
            for i in range(k):
                p[idx[i]] = step[i]
            return p
        tau = max(2.0 * tau, 1e-3 * max(dmax, 1.0))
    for i in range(k):
        p[idx[i]] = rhs[i] / max(dmax, 1.0)
    return p


@njit(cache=True)
def projected_newton(x, wterm, lower_sd, init, max_iter, tol_stop, tol_kkt, use_newton):
    """Minimize ``-log f(x; theta) + wterm @ theta`` over the box.

    Returns ``(theta, iterations, converged)`` where convergence means a
    projected-gradient norm at most ``tol_kkt * (1 + ||grad||)``.
    """
    lb, ub = _bounds(lower_sd)
    theta = _project(init, lb, ub)
    it = 0
    for it in range(1, max_iter + 1):
        logf, gs, hs = totals(theta, x)
        g = wterm - gs
        hess = -hs
        fval = -logf + (wterm * theta).sum()
        pgn = _proj_grad_norm(theta, g, lb, ub)
        gn = math.sqrt((g * g).sum())
        if pgn <= tol_stop * (1.0 + gn):
            break
        eps = min(1e-6, pgn)
        free = np.ones(5, dtype=np.bool_)
        for a in range(5):
            if theta[a] <= lb[a] + eps and g[a] > 0.0:
                free[a] = False
            if theta[a] >= ub[a] - eps and g[a] < 0.0:
                free[a] = False
        if use_newton:
            p = _newton_direction(hess, g, free)
        else:
            p = -g / max(1.0, math.sqrt((hess * hess).sum()))
        alpha = 1.0
        moved = False
        for _ in range(60):
            cand = _project(theta + alpha * p, lb, ub)
            decrease = (g * (cand - theta)).sum()
            if decrease < 0.0 and objective(cand, x, wterm) <= fval + 1e-4 * decrease:
                moved = True
                break
            alpha *= 0.5
        if not moved:
            break
        step = math.sqrt(((cand - theta) ** 2).sum())
        theta = cand
        if step <= 1e-15 * (1.0 + math.sqrt((theta * theta).sum())):
            break
    logf, gs, hs = totals(theta, x)
    g = wterm - gs
    pgn = _proj_grad_norm(theta, g, lb, ub)
    converged = pgn <= tol_kkt * (1.0 + math.sqrt((g * g).sum()))
    return theta, it, converged


@njit(cache=True)
def fit(x, wterm, lower_sd, em_iters, max_iter, tol_stop, tol_kkt, use_newton):
    """Deterministic estimator: quartile k-means, EM, projected Newton."""
    theta0 = em(x, kmeans_init(x, lower_sd), em_iters, lower_sd)
    return projected_newton(x, wterm, lower_sd, theta0, max_iter, tol_stop, tol_kkt, use_newton)


# ---------------------------------------------------------------- certificates


@njit(cache=True)
def box_ssosp(theta, g, hess, lower_sd, tol_act, tol_kkt, tol_pd):
    """SSOSP check for the two lower bounds ``sd_j >= lower_sd``.

    Returns ``(ok, active_mask)`` with the mask over the 5 coordinates.
    """
    active = np.zeros(5, dtype=np.bool_)
    for a in (2, 4):
        slack = theta[a] - lower_sd
        if slack < -tol_act:
            return False, active
        if slack <= tol_act:
            active[a] = True
    r2 = 0.0
    gn2 = 0.0
    for a in range(5):
        gn2 += g[a] * g[a]
        if active[a]:
            r2 += min(g[a], 0.0) ** 2
        else:
            r2 += g[a] * g[a]
    if math.sqrt(r2) > tol_kkt * (1.0 + math.sqrt(gn2)):
        return False, active
    ok, _ = _free_logdet(hess, active, tol_pd)
    return ok, active


@njit(cache=True)
def _free_logdet(hess, active, shift):
    """Cholesky log-determinant of ``hess`` on the inactive coordinates.

    The matrix is tested after subtracting ``shift`` from its diagonal; the
    returned log-determinant is for the unshifted matrix.
    """
    idx = np.flatnonzero(~active)
    k = idx.shape[0]
    if k == 0:
        return True, 0.0
    m = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            m[i, j] = hess[idx[i], idx[j]]
    if shift > 0.0:
        t = m.copy()
        for i in range(k):
            t[i, i] -= shift
        ok, _ = _cholesky_ok(t)
        if not ok:
            return False, -np.inf
    ok, ell = _cholesky_ok(m)
    if not ok:
        return False, -np.inf
    ld = 0.0
    for i in range(k):
        ld += 2.0 * math.log(ell[i, i])
    return True, ld


@njit(cache=True)
def membership(x, gs_x, theta_hat, g_hat, active_hat, lower_sd, em_iters, max_iter,
               tol_stop, tol_act, tol_kkt, tol_pd, tol_member, use_newton):
    """Refit at the implied noise and compare with ``theta_hat``."""
    wterm = g_hat + gs_x
    theta, _, conv = fit(x, wterm, lower_sd, em_iters, max_iter, tol_stop, tol_kkt, use_newton)
    if not conv:
        return False
    _, gs, hs = totals(theta, x)
    ok, active = box_ssosp(theta, wterm - gs, -hs, lower_sd, tol_act, tol_kkt, tol_pd)
    if not ok:
        return False
    for a in range(5):
        if active[a] != active_hat[a]:
            return False
    dist = math.sqrt(((theta - theta_hat) ** 2).sum())
    return dist <= tol_member * (1.0 + math.sqrt((theta_hat * theta_hat).sum()))


# ---------------------------------------------------------------- Metropolis-Hastings


@njit(cache=True)
def subset_from_uniforms(perm, u):
    """Partial Fisher-Yates: the first ``len(u)`` entries of ``perm`` become the subset.

    ``perm`` must hold a permutation on entry; call :func:`undo_subset` to restore it.
    """
    n = perm.shape[0]
    swaps = np.empty(u.shape[0], dtype=np.int64)
    for k in range(u.shape[0]):
        j = k + min(int(u[k] * (n - k)), n - k - 1)
        swaps[k] = j
        tmp = perm[k]
        perm[k] = perm[j]
        perm[j] = tmp
    return swaps


@njit(cache=True)
def undo_subset(perm, swaps):
    for k in range(swaps.shape[0] - 1, -1, -1):
        j = swaps[k]
        tmp = perm[k]
        perm[k] = perm[j]
        perm[j] = tmp


@njit(cache=True)
def draw_coordinate(theta, u_comp, z):
    if u_comp < theta[0]:
        return theta[1] + theta[2] * z
    return theta[3] + theta[4] * z


@njit(cache=True)
def _log_target(gs, hs, g_hat, active, scale):
    ok, ld = _free_logdet(-hs, active, 0.0)
    if not ok:
        return -np.inf
    s = 0.0
    for a in range(5):
        r = g_hat[a] + gs[a]
        s += r * r
    return -scale * s + ld


@njit(cache=True)
def run_chain(x0, theta_hat, g_hat, active, sigma, lower_sd, u_sub, u_comp, zs, u_acc,
              check_membership, em_iters, max_iter, tol_stop, tol_act, tol_kkt, tol_pd,
              tol_member, use_newton):
    """Run ``len(u_acc)`` MH steps from ``x0`` using a pre-drawn random tape.

    The proposal resamples ``s`` coordinates from the fitted mixture, so the
    proposal ratio cancels the likelihood ratio on the resampled coordinates
    and only the gradient-mismatch and determinant terms remain.
    Returns ``(x, accepted, tried_refits)``.
    """
    n = x0.shape[0]
    d = 5
    scale = d / (2.0 * sigma * sigma)
    x = x0.copy()
    _, gs, hs = totals(theta_hat, x)
    cur = _log_target(gs, hs, g_hat, active, scale)
    perm = np.arange(n)
    c1, c2 = log_consts(theta_hat)
    s = u_sub.shape[1]
    accepted = 0
    refits = 0
    new_vals = np.empty(s)
    for step in range(u_acc.shape[0]):
        swaps = subset_from_uniforms(perm, u_sub[step])
        g2 = gs.copy()
        h2 = hs.copy()
        for k in range(s):
            i = perm[k]
            new_vals[k] = draw_coordinate(theta_hat, u_comp[step, k], zs[step, k])
            add_point(theta_hat, c1, c2, x[i], -1.0, g2, h2)
            add_point(theta_hat, c1, c2, new_vals[k], 1.0, g2, h2)
        lr = _log_target(g2, h2, g_hat, active, scale) - cur
        log_u = math.log(u_acc[step]) if u_acc[step] > 0.0 else -np.inf
        if lr > log_u - 1e-6:
            prop = x.copy()
            for k in range(s):
                prop[perm[k]] = new_vals[k]
            _, g3, h3 = totals(theta_hat, prop)
            new_target = _log_target(g3, h3, g_hat, active, scale)
            if log_u < new_target - cur:
                ok = True
                if check_membership:
                    refits += 1
                    ok = membership(prop, g3, theta_hat, g_hat, active, lower_sd, em_iters,
                                    max_iter, tol_stop, tol_act, tol_kkt, tol_pd, tol_member,
                                    use_newton)
                if ok:
                    x = prop
                    gs = g3
                    hs = h3
                    cur = new_target
                    accepted += 1
        undo_subset(perm, swaps)
    return x, accepted, refits


@njit(cache=True)
def step_acceptance(x0, theta_hat, g_hat, active, sigma, lower_sd, u_sub, u_comp, zs,
                    check_membership, em_iters, max_iter, tol_stop, tol_act, tol_kkt,
                    tol_pd, tol_member, use_newton):
    """Acceptance probability of one proposal (tape row 0), indicator included."""
    n = x0.shape[0]
    scale = 5.0 / (2.0 * sigma * sigma)
    _, gs, hs = totals(theta_hat, x0)
    cur = _log_target(gs, hs, g_hat, active, scale)
    perm = np.arange(n)
    subset_from_uniforms(perm, u_sub)
    prop = x0.copy()
    for k in range(u_sub.shape[0]):
        prop[perm[k]] = draw_coordinate(theta_hat, u_comp[k], zs[k])
    _, g3, h3 = totals(theta_hat, prop)
    lr = _log_target(g3, h3, g_hat, active, scale) - cur
    if lr == -np.inf:
        return 0.0
    a = 1.0 if lr >= 0.0 else math.exp(lr)
    if check_membership and a > 0.0:
        if not membership(prop, g3, theta_hat, g_hat, active, lower_sd, em_iters, max_iter,
                          tol_stop, tol_act, tol_kkt, tol_pd, tol_member, use_newton):
            return 0.0
    return a
