"""Local model state space network (LMSSN).

State and output are blends of local affine models,

    x(k+1) = sum_j (A_j x(k) + b_j u(k) + o_j) * Phi^x_j(z(k))
    y(k)   = sum_j (c_j' x(k) + d_j u(k) + p_j) * Phi^y_j(z(k))

where z(k) is the extended point [x(k), u(k)] mapped to the unit cube by a
fixed affine scaling and Phi are normalized Gaussians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels

SCHEMA_VERSION = 1
DEFAULT_GUARD = 1e6


class DivergenceError(FloatingPointError):
    """Raised when a simulated state leaves the guard bound or turns non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


@dataclass(frozen=True)
class StateLocalModel:
    A: np.ndarray
    b: np.ndarray
    o: np.ndarray


@dataclass(frozen=True)
class OutputLocalModel:
    c: np.ndarray
    d: float
    p: float


@dataclass(frozen=True)
class GaussianValidity:
    center: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        if c.shape != s.shape or c.ndim != 1:
            raise ValueError("center and sigma must be 1-D arrays of equal length")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("sigma must be strictly positive")
        if not np.all((c >= 0) & (c <= 1)):
            raise ValueError("center must lie in the unit cube")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "sigma", s)


@dataclass(frozen=True)
class NrbfNetwork:
    members: tuple

    @property
    def centers(self):
        return np.array([m.center for m in self.members])

    @property
    def sigmas(self):
        return np.array([m.sigma for m in self.members])

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class ScalingTransform:
    """Componentwise map ``(u_ext - offset) / range`` onto the unit cube."""

    offset: np.ndarray
    range: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offset, dtype=float)
        rng = np.asarray(self.range, dtype=float)
        if off.shape != rng.shape:
            raise ValueError("offset and range must have the same shape")
        if np.any(rng <= 0) or not np.all(np.isfinite(rng)):
            raise ValueError("range entries must be strictly positive")
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "range", rng)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    @classmethod
    def from_cloud(cls, X, floor=1e-6):
        X = np.asarray(X, dtype=float)
        lo = X.min(axis=0)
        rng = X.max(axis=0) - lo
        return cls(lo, np.maximum(rng, floor))


def scale_point(t, u_ext):
    return (np.asarray(u_ext, dtype=float) - t.offset) / t.range


def unscale_point(t, z):
    return np.asarray(z, dtype=float) * t.range + t.offset


def nrbf_evaluate(network, z):
    """Normalized Gaussian weights of ``network`` at unit-cube point(s) ``z``.

    Accepts a single point of shape (d,) or a batch (n, d).
    """
    z = np.asarray(z, dtype=float)
    centers, sigmas = network.centers, network.sigmas
    if z.shape[-1] != centers.shape[1]:
        raise ValueError(
            f"point has dimension {z.shape[-1]}, network expects {centers.shape[1]}"
        )
    W = _kernels.nrbf_weights(np.atleast_2d(z), centers, sigmas)
    return W[0] if z.ndim == 1 else W


@dataclass(frozen=True)
class LmssnModel:
    n_x: int
    state_lms: tuple
    output_lms: tuple
    state_validity: NrbfNetwork
    output_validity: NrbfNetwork
    scaling: ScalingTransform
    x0: np.ndarray = None
    n_u: int = 1
    guard: float = DEFAULT_GUARD
    train_x0: bool = False

    def __post_init__(self):
        if self.x0 is None:
            object.__setattr__(self, "x0", np.zeros(self.n_x))
        if len(self.state_lms) != len(self.state_validity):
            raise ValueError("number of state local models != state validity members")
        if len(self.output_lms) != len(self.output_validity):
            raise ValueError("number of output local models != output validity members")
        d = self.n_x + self.n_u
        for net in (self.state_validity, self.output_validity):
            if net.centers.shape[1] != d:
                raise ValueError("validity dimension does not match n_x + n_u")
        for lm in self.state_lms:
            if lm.A.shape != (self.n_x, self.n_x):
                raise ValueError("A_j has wrong shape")
            if not (np.all(np.isfinite(lm.A)) and np.all(np.isfinite(lm.b))
                    and np.all(np.isfinite(lm.o))):
                raise ValueError("state local model has non-finite entries")

    @property
    def n_lm_x(self):
        return len(self.state_lms)

    @property
    def n_lm_y(self):
        return len(self.output_lms)

    @property
    def dim(self):
        return self.n_x + self.n_u

    def arrays(self):
        """Kernel-ready parameter arrays."""
        A = np.array([lm.A for lm in self.state_lms], dtype=float)
        B = np.array([lm.b for lm in self.state_lms], dtype=float)
        O = np.array([lm.o for lm in self.state_lms], dtype=float)
        C = np.array([lm.c for lm in self.output_lms], dtype=float)
        D = np.array([lm.d for lm in self.output_lms], dtype=float)
        P = np.array([lm.p for lm in self.output_lms], dtype=float)
        return A, B, O, C, D, P

    def validity_arrays(self):
        return (self.state_validity.centers, self.state_validity.sigmas,
                self.output_validity.centers, self.output_validity.sigmas)

    def with_scaling(self, scaling):
        return replace(self, scaling=scaling)


def make_model(A, B, O, C, D, P, state_validity, output_validity, scaling,
               x0=None, **kwargs):
    """Assemble an :class:`LmssnModel` from stacked parameter arrays."""
    A = np.asarray(A, dtype=float)
    n_x = A.shape[1]
    state = tuple(
        StateLocalModel(np.array(A[j]), np.array(B[j], dtype=float),
                        np.array(O[j], dtype=float))
        for j in range(A.shape[0])
    )
    out = tuple(
        OutputLocalModel(np.array(C[j], dtype=float), float(D[j]), float(P[j]))
        for j in range(len(C))
    )
    return LmssnModel(n_x, state, out, state_validity, output_validity, scaling,
                      x0=None if x0 is None else np.asarray(x0, dtype=float),
                      **kwargs)


def step(model, x, u):
    """One recursion step. Returns ``(x_next, y)``."""
    x = np.asarray(x, dtype=float)
    z = scale_point(model.scaling, np.append(x, u))
    wx = nrbf_evaluate(model.state_validity, z)
    wy = nrbf_evaluate(model.output_validity, z)
    x_next = np.zeros(model.n_x)
    for w, lm in zip(wx, model.state_lms):
        x_next += w * (lm.A @ x + lm.b * u + lm.o)
    y = sum(w * (lm.c @ x + lm.d * u + lm.p) for w, lm in zip(wy, model.output_lms))
    if not (np.all(np.isfinite(x_next)) and np.isfinite(y)):
        raise DivergenceError(0, "non-finite value in model step")
    return x_next, float(y)


def _simulate_raw(model, u, x0=None):
    u = np.ascontiguousarray(u, dtype=float)
    A, B, O, C, D, P = model.arrays()
    cx, sx, cy, sy = model.validity_arrays()
    x0 = model.x0 if x0 is None else x0
    return _kernels.simulate(A, B, O, cx, sx, C, D, P, cy, sy,
                             model.scaling.offset, model.scaling.range,
                             np.asarray(x0, dtype=float), u, float(model.guard))


def simulate(model, u_seq):
    """Free-run simulation from ``model.x0``.

    Returns
    -------
    X : ndarray, shape (N, n_x + 1)
        Raw extended points [x(k), u(k)].
    y_hat : ndarray, shape (N,)

    Raises
    ------
    DivergenceError
        If a state magnitude exceeds ``model.guard`` or becomes non-finite.
    """
    u_seq = np.asarray(u_seq, dtype=float).ravel()
    if u_seq.size < 1:
        raise ValueError("input sequence must have at least one sample")
    X, yhat, k_fail = _simulate_raw(model, u_seq)
    if k_fail >= 0:
        raise DivergenceError(k_fail)
    return X, yhat


def loss_sse(y, y_hat):
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    e = y - y_hat
    return float(e @ e)


def local_pole_radius(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.all(np.isfinite(A)):
        raise np.linalg.LinAlgError("non-finite entries in A")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def pole_radii(model):
    return [local_pole_radius(lm.A) for lm in model.state_lms]


# -- parameter vector -------------------------------------------------------

@dataclass(frozen=True)
class ParameterLayout:
    """Flat order: per state LM ``A`` (row-major), ``b``, ``o``; then per output
    LM ``c``, ``d``, ``p``; then ``x0`` if trainable."""

    n_x: int
    n_lm_x: int
    n_lm_y: int
    with_x0: bool = False

    @property
    def size(self):
        nx = self.n_x
        n = self.n_lm_x * (nx * nx + 2 * nx) + self.n_lm_y * (nx + 2)
        return n + (nx if self.with_x0 else 0)

    @classmethod
    def of(cls, model):
        return cls(model.n_x, model.n_lm_x, model.n_lm_y, model.train_x0)


def pack_arrays(A, B, O, C, D, P, x0=None):
    parts = []
    for j in range(A.shape[0]):
        parts += [A[j].ravel(), B[j], O[j]]
    for j in range(C.shape[0]):
        parts += [C[j], [D[j]], [P[j]]]
    if x0 is not None:
        parts.append(x0)
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack_arrays(theta, layout):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size != layout.size:
        raise ValueError(f"parameter vector has length {theta.size}, layout needs {layout.size}")
    nx, mx, my = layout.n_x, layout.n_lm_x, layout.n_lm_y
    A = np.empty((mx, nx, nx))
    B = np.empty((mx, nx))
    O = np.empty((mx, nx))
    C = np.empty((my, nx))
    D = np.empty(my)
    P = np.empty(my)
    i = 0
    for j in range(mx):
        A[j] = theta[i:i + nx * nx].reshape(nx, nx)
        i += nx * nx
        B[j] = theta[i:i + nx]
        i += nx
        O[j] = theta[i:i + nx]
        i += nx
    for j in range(my):
        C[j] = theta[i:i + nx]
        i += nx
        D[j] = theta[i]
        P[j] = theta[i + 1]
        i += 2
    x0 = theta[i:i + nx].copy() if layout.with_x0 else None
    return A, B, O, C, D, P, x0


def pack_parameters(model):
    arrays = model.arrays()
    return pack_arrays(*arrays, x0=model.x0 if model.train_x0 else None)


def unpack_parameters(theta, model):
    """Return a copy of ``model`` carrying the parameters in ``theta``."""
    layout = ParameterLayout.of(model)
    A, B, O, C, D, P, x0 = unpack_arrays(theta, layout)
    return make_model(A, B, O, C, D, P, model.state_validity, model.output_validity,
                      model.scaling, x0=model.x0 if x0 is None else x0,
                      n_u=model.n_u, guard=model.guard, train_x0=model.train_x0)


# -- JSON -------------------------------------------------------------------

def model_to_dict(model):
    return {
        "schema": "lmssn-model",
        "version": SCHEMA_VERSION,
        "n_x": model.n_x,
        "n_u": model.n_u,
        "guard": model.guard,
        "train_x0": model.train_x0,
        "x0": model.x0.tolist(),
        "state_lms": [{"A": lm.A.tolist(), "b": lm.b.tolist(), "o": lm.o.tolist()}
                      for lm in model.state_lms],
        "output_lms": [{"c": lm.c.tolist(), "d": lm.d, "p": lm.p}
                       for lm in model.output_lms],
        "state_validity": [{"center": m.center.tolist(), "sigma": m.sigma.tolist()}
                           for m in model.state_validity.members],
        "output_validity": [{"center": m.center.tolist(), "sigma": m.sigma.tolist()}
                            for m in model.output_validity.members],
        "scaling": {"offset": model.scaling.offset.tolist(),
                    "range": model.scaling.range.tolist()},
    }


def model_from_dict(doc):
    if doc.get("schema") != "lmssn-model":
        raise ValueError("not an lmssn-model document")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema version {doc.get('version')}")

    def net(items):
        return NrbfNetwork(tuple(GaussianValidity(np.array(m["center"]), np.array(m["sigma"]))
                                 for m in items))

    return LmssnModel(
        n_x=doc["n_x"],
        state_lms=tuple(StateLocalModel(np.array(m["A"], dtype=float),
                                        np.array(m["b"], dtype=float),
                                        np.array(m["o"], dtype=float))
                        for m in doc["state_lms"]),
        output_lms=tuple(OutputLocalModel(np.array(m["c"], dtype=float),
                                          float(m["d"]), float(m["p"]))
                         for m in doc["output_lms"]),
        state_validity=net(doc["state_validity"]),
        output_validity=net(doc["output_validity"]),
        scaling=ScalingTransform(np.array(doc["scaling"]["offset"]),
                                 np.array(doc["scaling"]["range"])),
        x0=np.array(doc["x0"], dtype=float),
        n_u=doc.get("n_u", 1),
        guard=doc.get("guard", DEFAULT_GUARD),
        train_x0=doc.get("train_x0", False),
    )


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
