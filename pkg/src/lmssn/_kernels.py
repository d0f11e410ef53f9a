"""Compiled inner loops: LMSSN forward simulation, adjoint recursion,
grid mean-min distance and Gaussian KDE log-density.

All reductions run in a fixed sequential order so results do not depend on
threading or call order.
"""

import math

import numba
import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


@numba.njit(cache=True, nogil=True)
def _nrbf(z, centers, sigmas, out):
    m, d = centers.shape
    emax = -np.inf
    for j in range(m):
        e = 0.0
        for i in range(d):
            t = (z[i] - centers[j, i]) / sigmas[j, i]
            e += t * t
        e = -0.5 * e
        out[j] = e
        if e > emax:
            emax = e
    total = 0.0
    for j in range(m):
        out[j] = math.exp(out[j] - emax)
        total += out[j]
    for j in range(m):
        out[j] /= total


@numba.njit(cache=True, nogil=True)
def nrbf_weights(Z, centers, sigmas):
    n = Z.shape[0]
    W = np.empty((n, centers.shape[0]))
    for k in range(n):
        _nrbf(Z[k], centers, sigmas, W[k])
    return W


@numba.njit(cache=True, nogil=True)
def simulate(A, B, O, cx, sx, C, D, P, cy, sy, off, rng, x0, u, guard):
    """Free-run simulation. Returns (X, yhat, k_fail); k_fail = -1 if finite."""
    n = u.shape[0]
    nx = x0.shape[0]
    d = nx + 1
    mx = A.shape[0]
    my = C.shape[0]
    X = np.zeros((n, d))
    yhat = np.zeros(n)
    phx = np.empty(mx)
    phy = np.empty(my)
    z = np.empty(d)
    x = x0.copy()
    xn = np.empty(nx)
    for k in range(n):
        for i in range(nx):
            X[k, i] = x[i]
        X[k, nx] = u[k]
        for i in range(d):
            z[i] = (X[k, i] - off[i]) / rng[i]
        _nrbf(z, cx, sx, phx)
        _nrbf(z, cy, sy, phy)
        y = 0.0
        for j in range(my):
            loc = D[j] * u[k] + P[j]
            for i in range(nx):
                loc += C[j, i] * x[i]
            y += phy[j] * loc
        yhat[k] = y
        for i in range(nx):
            xn[i] = 0.0
        for j in range(mx):
            w = phx[j]
            for i in range(nx):
                loc = B[j, i] * u[k] + O[j, i]
                for l in range(nx):
                    loc += A[j, i, l] * x[l]
                xn[i] += w * loc
        for i in range(nx):
            v = xn[i]
            if not (abs(v) <= guard):
                return X, yhat, k
            x[i] = v
        if not math.isfinite(y):
            return X, yhat, k
    return X, yhat, -1


@numba.njit(cache=True, nogil=True)
def adjoint(A, B, O, cx, sx, C, D, P, cy, sy, off, rng, X, ybar, zbar):
    """Reverse accumulation through the state recursion.

    ybar[k] is dF/dyhat[k]; zbar[k] is the direct dF/dz[k] on the scaled
    extended point (the input column is ignored). Returns gradients with
    the shapes of A, B, O, C, D, P and the initial state.
    """
    n, d = X.shape
    nx = d - 1
    mx = A.shape[0]
    my = C.shape[0]
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gO = np.zeros_like(O)
    gC = np.zeros_like(C)
    gD = np.zeros_like(D)
    gP = np.zeros_like(P)
    phx = np.empty(mx)
    phy = np.empty(my)
    bx = np.zeros(mx)
    by = np.zeros(my)
    z = np.empty(d)
    xbar_next = np.zeros(nx)
    xbar = np.zeros(nx)
    dz = np.zeros(d)
    for k in range(n - 1, -1, -1):
        u = X[k, nx]
        for i in range(d):
            z[i] = (X[k, i] - off[i]) / rng[i]
        _nrbf(z, cx, sx, phx)
        _nrbf(z, cy, sy, phy)
        yb = ybar[k]
        for i in range(nx):
            xbar[i] = zbar[k, i] / rng[i]
        for i in range(d):
            dz[i] = 0.0
        # state map
        for j in range(mx):
            w = phx[j]
            s = 0.0
            for i in range(nx):
                g = xbar_next[i]
                loc = B[j, i] * u + O[j, i]
                for l in range(nx):
                    loc += A[j, i, l] * X[k, l]
                    gA[j, i, l] += w * g * X[k, l]
                    xbar[l] += w * A[j, i, l] * g
                gB[j, i] += w * g * u
                gO[j, i] += w * g
                s += g * loc
            bx[j] = s
        # output map
        for j in range(my):
            w = phy[j]
            loc = D[j] * u + P[j]
            for i in range(nx):
                loc += C[j, i] * X[k, i]
                gC[j, i] += w * yb * X[k, i]
                xbar[i] += w * yb * C[j, i]
            gD[j] += w * yb * u
            gP[j] += w * yb
            by[j] = yb * loc
        # validity functions: dPhi_j/dz = Phi_j (g_j - sum_l Phi_l g_l)
        mean = 0.0
        for j in range(mx):
            mean += phx[j] * bx[j]
        for j in range(mx):
            coef = phx[j] * (bx[j] - mean)
            for i in range(nx):
                dz[i] -= coef * (z[i] - cx[j, i]) / (sx[j, i] * sx[j, i])
        mean = 0.0
        for j in range(my):
            mean += phy[j] * by[j]
        for j in range(my):
            coef = phy[j] * (by[j] - mean)
            for i in range(nx):
                dz[i] -= coef * (z[i] - cy[j, i]) / (sy[j, i] * sy[j, i])
        for i in range(nx):
            xbar_next[i] = xbar[i] + dz[i] / rng[i]
    return gA, gB, gO, gC, gD, gP, xbar_next.copy()


@numba.njit(cache=True, nogil=True)
def nearest(Z, G):
    """Per grid node: index of nearest cloud point (lowest index on ties)
    and the distance to it."""
    ng, d = G.shape
    n = Z.shape[0]
    idx = np.empty(ng, dtype=np.int64)
    dist = np.empty(ng)
    for j in range(ng):
        best = np.inf
        bk = 0
        for k in range(n):
            s = 0.0
            for i in range(d):
                t = Z[k, i] - G[j, i]
                s += t * t
            if s < best:
                best = s
                bk = k
        idx[j] = bk
        dist[j] = math.sqrt(best)
    return idx, dist


@numba.njit(cache=True, nogil=True)
def kde_logpdf(Q, S, h):
    """Log-density of a product-Gaussian KDE built on S, evaluated at Q."""
    nq, d = Q.shape
    n = S.shape[0]
    norm = math.log(n) + 0.5 * d * _LOG_2PI
    for i in range(d):
        norm += math.log(h[i])
    out = np.empty(nq)
    e = np.empty(n)
    for q in range(nq):
        emax = -np.inf
        for k in range(n):
            s = 0.0
            for i in range(d):
                t = (Q[q, i] - S[k, i]) / h[i]
                s += t * t
            e[k] = -0.5 * s
            if e[k] > emax:
                emax = e[k]
        acc = 0.0
        for k in range(n):
            acc += math.exp(e[k] - emax)
        out[q] = emax + math.log(acc) - norm
    return out
