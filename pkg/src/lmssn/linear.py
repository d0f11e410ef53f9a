"""Linear initial model: ARX least squares, canonical state space form and
gramian balancing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (GaussianValidity, NrbfNetwork, ScalingTransform, make_model,
                    simulate)


@dataclass(frozen=True)
class LinearSS:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0
    Ts: float = 1.0

    @property
    def n_x(self):
        return self.A.shape[0]

    def simulate(self, u, x0=None):
        x = np.zeros(self.n_x) if x0 is None else np.array(x0, dtype=float)
        y = np.empty(len(u))
        for k, uk in enumerate(u):
            y[k] = self.C @ x + self.D * uk
            x = self.A @ x + self.B * uk
        return y

    def markov(self, n):
        """Impulse response h(0..n-1)."""
        h = np.empty(n)
        h[0] = self.D
        v = self.B.copy()
        for k in range(1, n):
            h[k] = self.C @ v
            v = self.A @ v
        return h


@dataclass(frozen=True)
class GramianPair:
    Wc: np.ndarray
    Wo: np.ndarray


def estimate_linear_ss(u, y, n_x, Ts=1.0):
    """Least-squares ARX(n_x, n_x) fit in observer canonical form.

    y(k) + a_1 y(k-1) + ... + a_n y(k-n) = b_1 u(k-1) + ... + b_n u(k-n)
    """
    u = np.asarray(u, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    N = len(y)
    if N <= 10 * n_x:
        raise ValueError(f"need more than {10 * n_x} samples for order {n_x}")
    rows = N - n_x
    Phi = np.empty((rows, 2 * n_x))
    for i in range(1, n_x + 1):
        Phi[:, i - 1] = -y[n_x - i:N - i]
        Phi[:, n_x + i - 1] = u[n_x - i:N - i]
    target = y[n_x:]
    if np.linalg.matrix_rank(Phi) < Phi.shape[1]:
        raise np.linalg.LinAlgError("ARX regressor matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Phi, target, rcond=None)
    normal = Phi.T @ (Phi @ coef - target)
    scale = max(np.linalg.norm(Phi.T @ target), np.linalg.norm(Phi.T @ Phi) * np.linalg.norm(coef), 1e-300)
    if np.linalg.norm(normal) > 1e-8 * scale:
        raise np.linalg.LinAlgError("ARX normal equations not satisfied")
    a, b = coef[:n_x], coef[n_x:]
    return canonical_ss(a, b, Ts)


def canonical_ss(a, b, Ts=1.0):
    """Observer canonical form of (b_1 z^{n-1} + ... + b_n) / (z^n + a_1 z^{n-1} + ... + a_n)."""
    a = np.asarray(a, dtype=float)
    n = len(a)
    A = np.zeros((n, n))
    A[:, 0] = -a
    A[:n - 1, 1:] = np.eye(n - 1)
    C = np.zeros(n)
    C[0] = 1.0
    return LinearSS(A, np.asarray(b, dtype=float).copy(), C, 0.0, Ts)


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def solve_discrete_lyapunov(A, Q, tol=1e-14, max_iter=100):
    """Solve ``A X A' - X + Q = 0`` by the doubling iteration."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if spectral_radius(A) >= 1:
        raise np.linalg.LinAlgError("A must be Schur stable")
    X = Q.copy()
    Ak = A.copy()
    for _ in range(max_iter):
        inc = Ak @ X @ Ak.T
        X = X + inc
        Ak = Ak @ Ak
        if np.linalg.norm(inc) <= tol * max(np.linalg.norm(X), 1e-300):
            break
    return 0.5 * (X + X.T)


def gramians(ss):
    Wc = solve_discrete_lyapunov(ss.A, np.outer(ss.B, ss.B))
    Wo = solve_discrete_lyapunov(ss.A.T, np.outer(ss.C, ss.C))
    return GramianPair(Wc, Wo)


def balance(ss, cond_limit=1e12):
    """Square-root balancing. Returns ``(balanced, T)`` with x = T x_bal."""
    if spectral_radius(ss.A) >= 1:
        raise np.linalg.LinAlgError("cannot balance an unstable system")
    gp = gramians(ss)
    for name, W in (("controllability", gp.Wc), ("observability", gp.Wo)):
        c = np.linalg.cond(W)
        if not c < cond_limit:
            raise np.linalg.LinAlgError(
                f"{name} gramian is near singular (condition number {c:.3g}); "
                "realization is not minimal")
    L = np.linalg.cholesky(gp.Wc)
    M = L.T @ gp.Wo @ L
    M = 0.5 * (M + M.T)
    ev, U = np.linalg.eigh(M)
    order = np.argsort(ev)[::-1]
    ev, U = ev[order], U[:, order]
    # fix eigenvector signs deterministically
    U = U * np.where(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])] < 0, -1.0, 1.0)
    hsv = np.sqrt(ev)
    T = L @ U / np.sqrt(hsv)
    Ti = np.linalg.solve(T, np.eye(len(T)))
    bal = LinearSS(Ti @ ss.A @ T, Ti @ ss.B, ss.C @ T, ss.D, ss.Ts)
    return bal, T


def hankel_singular_values(ss):
    gp = gramians(ss)
    return np.sort(np.sqrt(np.abs(np.linalg.eigvals(gp.Wc @ gp.Wo))))[::-1]


def to_lmssn(ss, u, k_sigma=1.0 / 3.0):
    """Single-LM LMSSN equal to ``ss``; the scaling spans its simulated
    trajectory under input ``u``."""
    n = ss.n_x
    d = n + 1
    region = GaussianValidity(np.full(d, 0.5), np.full(d, k_sigma))
    net = NrbfNetwork((region,))
    model = make_model(ss.A[None], ss.B[None], np.zeros((1, n)), ss.C[None],
                       [ss.D], [0.0], net, net, ScalingTransform.identity(d))
    X, _ = simulate(model, u)
    return model.with_scaling(ScalingTransform.from_cloud(X))
