"""BFGS minimization of the simulation-error objective with exact gradients.

The gradient is obtained by reverse accumulation through the N-step state
recursion, including the psi_p penalty whose gradient enters through each
grid node's nearest trajectory point.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from .model import (ParameterLayout, make_model, pack_arrays, pack_parameters,
                    unpack_arrays, local_pole_radius)
from .regularization import PenaltyMode
from .spacefill import chv, kld_uniform, make_grid

log = logging.getLogger(__name__)


class Reason(str, enum.Enum):
    LOSS_TOL = "LossTol"
    GRAD_TOL = "GradTol"
    MIN_STEP = "MinStep"
    MAX_ITER = "MaxIter"
    DIVERGENCE = "Divergence"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class OptimizerConfig:
    loss_tol: float = 1e-9
    grad_tol: float = 1e-6
    min_step: float = 1e-12
    max_iter: int = 5000
    c1: float = 1e-4
    c2: float = 0.9
    initial_step: float = 1.0
    max_line_search: int = 40
    track_indicators: bool = True

    def __post_init__(self):
        for name in ("loss_tol", "grad_tol", "min_step", "initial_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Objective on a fixed model skeleton (validity functions and scaling
    frozen); only the flat parameter vector varies."""

    skeleton: object
    u: np.ndarray
    y: np.ndarray
    penalty: PenaltyMode = field(default_factory=PenaltyMode)
    grid: object = None

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=float).ravel()
        y = np.ascontiguousarray(self.y, dtype=float).ravel()
        if u.shape != y.shape:
            raise ValueError("u and y must have equal length")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if self.grid is None:
            object.__setattr__(self, "grid", make_grid(self.skeleton.dim, 5))
        object.__setattr__(self, "layout", ParameterLayout.of(self.skeleton))
        object.__setattr__(self, "_validity", tuple(
            np.ascontiguousarray(a) for a in self.skeleton.validity_arrays()))

    def with_penalty(self, penalty):
        return replace(self, penalty=penalty)

    def theta0(self):
        return pack_parameters(self.skeleton)

    def model(self, theta):
        A, B, O, C, D, P, x0 = unpack_arrays(theta, self.layout)
        sk = self.skeleton
        return make_model(A, B, O, C, D, P, sk.state_validity, sk.output_validity,
                          sk.scaling, x0=sk.x0 if x0 is None else x0, n_u=sk.n_u,
                          guard=sk.guard, train_x0=sk.train_x0)

    def pole_radii(self, theta):
        A = unpack_arrays(theta, self.layout)[0]
        try:
            return [local_pole_radius(a) for a in A]
        except np.linalg.LinAlgError:
            return [float("inf")] * len(A)

    # -- core evaluation ---------------------------------------------------

    def _forward(self, theta):
        A, B, O, C, D, P, x0 = unpack_arrays(theta, self.layout)
        if x0 is None:
            x0 = self.skeleton.x0
        cx, sx, cy, sy = self._validity
        sc = self.skeleton.scaling
        X, yhat, k_fail = _kernels.simulate(A, B, O, cx, sx, C, D, P, cy, sy,
                                            sc.offset, sc.range, np.asarray(x0, float),
                                            self.u, float(self.skeleton.guard))
        return (A, B, O, C, D, P), X, yhat, k_fail

    def scaled(self, X):
        sc = self.skeleton.scaling
        return (X - sc.offset) / sc.range

    def evaluate(self, theta):
        """Objective value and its parts.

        Returns ``(value, parts)`` where ``parts`` holds ``J``, ``psi_p`` and
        ``diverged``; a divergent simulation yields ``value = inf``.
        """
        _, X, yhat, k_fail = self._forward(theta)
        if k_fail >= 0:
            return math.inf, {"J": math.inf, "psi_p": math.nan, "diverged": True}
        e = self.y - yhat
        J = float(e @ e)
        Z = self.scaled(X)
        _, dist = _kernels.nearest(Z, self.grid.points)
        psi = _ordered_mean(dist)
        value = J + self.penalty.value(psi) if self.penalty.active else J
        return value, {"J": J, "psi_p": psi, "diverged": False, "Z": Z}

    def value_and_gradient(self, theta):
        arrays, X, yhat, k_fail = self._forward(theta)
        if k_fail >= 0:
            return math.inf, None, {"J": math.inf, "psi_p": math.nan, "diverged": True}
        e = self.y - yhat
        J = float(e @ e)
        Z = self.scaled(X)
        zbar = np.zeros_like(Z)
        psi = math.nan
        if self.penalty.active:
            G = self.grid.points
            idx, dist = _kernels.nearest(Z, G)
            psi = _ordered_mean(dist)
            value = J + self.penalty.value(psi)
            coef = self.penalty.derivative(psi) / self.grid.n_g
            if coef != 0.0:
                mask = dist > 0.0
                contrib = (Z[idx[mask]] - G[mask]) / dist[mask, None]
                np.add.at(zbar, idx[mask], coef * contrib)
        else:
            value = J
        ybar = -2.0 * e
        A, B, O, C, D, P = arrays
        cx, sx, cy, sy = self._validity
        sc = self.skeleton.scaling
        gA, gB, gO, gC, gD, gP, gx0 = _kernels.adjoint(
            A, B, O, cx, sx, C, D, P, cy, sy, sc.offset, sc.range, X, ybar, zbar)
        grad = pack_arrays(gA, gB, gO, gC, gD, gP,
                           x0=gx0 if self.layout.with_x0 else None)
        return value, grad, {"J": J, "psi_p": psi, "diverged": False, "Z": Z}


def _ordered_mean(v):
    s = 0.0
    for x in v:
        s += x
    return s / len(v)


def evaluate_objective(spec, theta):
    return spec.evaluate(theta)


def gradient_reverse(spec, theta):
    value, grad, parts = spec.value_and_gradient(theta)
    if grad is None:
        raise FloatingPointError("objective diverged; gradient undefined")
    return grad


def gradient_fd(fun, theta, h=1e-6):
    """Central differences of a scalar function (or ObjectiveSpec) at theta."""
    if not h > 0:
        raise ValueError("h must be positive")
    if isinstance(fun, ObjectiveSpec):
        spec = fun
        fun = lambda t: spec.evaluate(t)[0]  # noqa: E731
    theta = np.array(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (fun(tp) - fun(tm)) / (2 * h)
    return g


# -- run logging ------------------------------------------------------------

RUNLOG_COLUMNS = ("iteration", "J", "psi_p", "kld", "chv", "objective",
                  "grad_norm", "step")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("iteration indices must increase")
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["iteration"]] + [repr(float(r[c])) for c in RUNLOG_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                row = {c: float(rec[c]) for c in RUNLOG_COLUMNS[1:]}
                out.append(iteration=int(rec["iteration"]), **row)
        return out

    def summary(self):
        if not self.rows:
            return {}
        first, last = self.rows[0], self.rows[-1]
        return {"iterations": last["iteration"],
                "initial": {k: float(first[k]) for k in RUNLOG_COLUMNS[1:]},
                "final": {k: float(last[k]) for k in RUNLOG_COLUMNS[1:]}}


@dataclass(frozen=True)
class TerminationReport:
    reason: Reason
    iterations: int
    final_objective: float

    def to_dict(self):
        d = asdict(self)
        d["reason"] = str(self.reason)
        return d


def _log_row(runlog, spec, it, value, parts, gnorm, step, config):
    if not parts.get("diverged") and math.isnan(parts["psi_p"]):
        parts["psi_p"] = _ordered_mean(_kernels.nearest(parts["Z"], spec.grid.points)[1])
    if config.track_indicators and not parts.get("diverged"):
        Z = parts["Z"]
        kld = kld_uniform(Z, spec.grid)
        vol = chv(Z)
    else:
        kld = vol = math.nan
    runlog.append(iteration=it, J=parts["J"], psi_p=parts["psi_p"], kld=kld,
                  chv=vol, objective=value, grad_norm=gnorm, step=step)


# -- line search ------------------------------------------------------------

def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolant, or None if not well defined."""
    d1 = da + db - 3 * (fa - fb) / (a - b)
    if not math.isfinite(d1) or abs(d1) > 1e150:
        return None
    disc = d1 * d1 - da * db
    if disc < 0 or not math.isfinite(disc):
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _quad_min(a, fa, da, b, fb):
    """Minimizer of the quadratic matching f(a), f'(a) and f(b)."""
    h = b - a
    curv = (fb - fa - da * h) / (h * h)
    if not curv > 0:
        return None
    return a - da / (2.0 * curv)


def line_search(fg, x, p, f0, g0, config):
    """Strong-Wolfe line search (bracketing then zoom).

    ``fg(x)`` returns ``(f, g, parts)`` with ``f = inf`` for infeasible points,
    which are treated as overshooting. Returns ``(alpha, f, g, parts)`` or
    ``None`` on failure.
    """
    c1, c2 = config.c1, config.c2
    d0 = float(g0 @ p)
    cache = {}

    def phi(a):
        if a not in cache:
            f, g, parts = fg(x + a * p)
            d = float(g @ p) if g is not None else math.nan
            cache[a] = (f, g, parts, d)
        return cache[a]

    def armijo(a, f):
        return f <= f0 + c1 * a * d0

    def zoom(lo, hi):
        f_lo, _, _, d_lo = phi(lo) if lo > 0 else (f0, g0, None, d0)
        for _ in range(config.max_line_search):
            f_hi, _, _, d_hi = phi(hi)
            width = abs(hi - lo)
            if width * np.max(np.abs(p)) < 1e-16:
                break
            a = None
            if not math.isfinite(f_hi):
                a = lo + 0.1 * (hi - lo)
            else:
                if math.isfinite(d_hi):
                    a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
                if a is None:
                    a = _quad_min(lo, f_lo, d_lo, hi, f_hi)
                lo_b, hi_b = min(lo, hi) + 0.1 * width, max(lo, hi) - 0.1 * width
                if a is None or not (lo_b <= a <= hi_b):
                    a = min(max(a if a is not None else 0.5 * (lo + hi), lo_b), hi_b)
            f_a, g_a, parts_a, d_a = phi(a)
            if not math.isfinite(f_a) or not armijo(a, f_a) or f_a >= f_lo:
                hi = a
            else:
                if abs(d_a) <= -c2 * d0:
                    return a
                if d_a * (hi - lo) >= 0:
                    hi = lo
                lo, f_lo, d_lo = a, f_a, d_a
        # fall back to the best sufficient-decrease point found
        return lo if lo > 0 else None

    a_prev, f_prev = 0.0, f0
    a = config.initial_step
    result = None
    for i in range(config.max_line_search):
        f_a, g_a, _, d_a = phi(a)
        if not math.isfinite(f_a) or not armijo(a, f_a) or (i > 0 and f_a >= f_prev):
            result = zoom(a_prev, a)
            break
        if abs(d_a) <= -c2 * d0:
            result = a
            break
        if d_a >= 0:
            result = zoom(a, a_prev)
            break
        a_prev, f_prev = a, f_a
        a = 2.0 * a
    if result is None:
        return None
    f, g, parts, _ = phi(result)
    return result, f, g, parts


# -- BFGS -------------------------------------------------------------------

def minimize(spec, theta0, config=None):
    """Quasi-Newton (BFGS) minimization.

    ``spec`` is an :class:`ObjectiveSpec` or a callable ``theta -> (f, g)``.
    Returns ``(theta, RunLog, TerminationReport)``. Row 0 of the log is the
    starting point.
    """
    config = config or OptimizerConfig()
    if isinstance(spec, ObjectiveSpec):
        fg = spec.value_and_gradient
        logger = lambda rl, it, f, parts, gn, st: _log_row(rl, spec, it, f, parts, gn, st, config)  # noqa: E731
    else:
        def fg(t, _f=spec):
            f, g = _f(t)
            return f, g, {"J": f, "psi_p": math.nan}

        def logger(rl, it, f, parts, gn, st):
            rl.append(iteration=it, J=f, psi_p=math.nan, kld=math.nan, chv=math.nan,
                      objective=f, grad_norm=gn, step=st)

    x = np.array(theta0, dtype=float)
    n = x.size
    runlog = RunLog()
    f, g, parts = fg(x)
    if not math.isfinite(f) or g is None:
        runlog.append(iteration=0, J=math.inf, psi_p=math.nan, kld=math.nan,
                      chv=math.nan, objective=math.inf, grad_norm=math.nan, step=0.0)
        return x, runlog, TerminationReport(Reason.DIVERGENCE, 0, math.inf)
    gnorm = float(np.linalg.norm(g))
    logger(runlog, 0, f, parts, gnorm, 0.0)
    if gnorm <= config.grad_tol:
        return x, runlog, TerminationReport(Reason.GRAD_TOL, 0, f)

    H = np.eye(n)
    scaled = False
    reason = Reason.MAX_ITER
    it = 0
    while it < config.max_iter:
        p = -H @ g
        if not float(g @ p) < 0:
            H = np.eye(n)
            p = -g
        ls = line_search(fg, x, p, f, g, config)
        if ls is None:
            reason = Reason.MIN_STEP
            break
        alpha, f_new, g_new, parts = ls
        s = alpha * p
        yv = g_new - g
        x = x + s
        rel = (f - f_new) / max(abs(f), abs(f_new), 1e-300)
        f, g = f_new, g_new
        gnorm = float(np.linalg.norm(g))
        step = float(np.linalg.norm(s))
        it += 1
        logger(runlog, it, f, parts, gnorm, step)

        sy = float(s @ yv)
        if sy > 1e-10:
            if not scaled:
                H = np.eye(n) * (sy / float(yv @ yv))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ yv
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s))
        else:
            H = np.eye(n)
            scaled = False

        if gnorm <= config.grad_tol:
            reason = Reason.GRAD_TOL
            break
        if rel <= config.loss_tol:
            reason = Reason.LOSS_TOL
            break
        if step <= config.min_step:
            reason = Reason.MIN_STEP
            break
    return x, runlog, TerminationReport(reason, it, f)


# -- helpers ----------------------------------------------------------------

def thread_count():
    try:
        return max(1, int(os.environ.get("LMSSN_THREADS", "0"))) or 1
    except ValueError:
        return 1


def run_in_pool(fn, items, threads=None):
    """Map ``fn`` over ``items`` keeping input order."""
    threads = thread_count() if threads is None else max(1, int(threads))
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def write_run(runlog, report, prefix):
    runlog.to_csv(f"{prefix}.csv")
    with open(f"{prefix}.json", "w") as fh:
        json.dump({"termination": report.to_dict(), **runlog.summary()}, fh, indent=1)
