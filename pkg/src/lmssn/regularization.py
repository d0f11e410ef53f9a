"""Space-filling penalties on the simulated state trajectory and lambda studies.

Two penalties are supported on top of the simulation error ``J``:

* ``psi2``:   J + lam * psi_p**2
* ``target``: J + lam * (psi_p - psi_target)**2
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PSI2_GRID = tuple(10.0 ** e for e in range(-4, 5))
TARGET_GRID = tuple(10.0 ** e for e in range(-1, 7))
DEFAULT_TARGET_LAMBDA = 1e3


@dataclass(frozen=True)
class PenaltyMode:
    kind: str = "none"
    lam: float = 0.0
    psi_target: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "psi2", "target"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.psi_target >= 0:
            raise ValueError("psi_target must be >= 0")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def psi_squared(cls, lam):
        return cls("psi2", float(lam))

    @classmethod
    def target_deviation(cls, lam, psi_target):
        return cls("target", float(lam), float(psi_target))

    @property
    def active(self):
        return self.kind != "none"

    def value(self, psi):
        if self.kind == "psi2":
            return self.lam * psi * psi
        if self.kind == "target":
            dev = psi - self.psi_target
            return self.lam * dev * dev
        return 0.0

    def derivative(self, psi):
        """d(penalty)/d(psi)."""
        if self.kind == "psi2":
            return 2.0 * self.lam * psi
        if self.kind == "target":
            return 2.0 * self.lam * (psi - self.psi_target)
        return 0.0

    def with_lambda(self, lam):
        return PenaltyMode(self.kind, float(lam), self.psi_target)


@dataclass
class SweepRow:
    lam: float
    J: float
    psi_p: float
    iterations: int
    reason: str
    pole_radii: list = field(default_factory=list)
    psi_target: float = float("nan")

    @property
    def stable(self):
        return bool(self.pole_radii) and max(self.pole_radii) < 1.0

    @property
    def deviation(self):
        return abs(self.psi_p - self.psi_target)


@dataclass
class SweepResult:
    mode: str
    rows: list

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    CSV_HEADER = ("lambda", "J", "psi_p", "psi_deviation", "iterations", "reason",
                  "max_pole_radius", "stable")

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_HEADER)
            for r in self.rows:
                rad = max(r.pole_radii) if r.pole_radii else math.nan
                w.writerow([repr(float(v)) for v in (r.lam, r.J, r.psi_p, r.deviation)]
                           + [r.iterations, r.reason, repr(float(rad)), int(r.stable)])


def lambda_sweep(spec, theta0, lambdas, mode="psi2", psi_target=0.0, config=None,
                 threads=1):
    """Optimize ``spec`` once per lambda from the same ``theta0``.

    ``spec`` is an :class:`~lmssn.optimizer.ObjectiveSpec`; its penalty is
    replaced per row. Divergent runs are recorded and the sweep continues.
    """
    from .optimizer import OptimizerConfig, minimize, run_in_pool

    lambdas = sorted(float(v) for v in lambdas)
    if not lambdas:
        raise ValueError("lambda grid is empty")
    if any(v < 0 for v in lambdas):
        raise ValueError("lambda values must be nonnegative")
    config = config or OptimizerConfig()
    theta0 = np.array(theta0, dtype=float)
    theta0.setflags(write=False)

    def penalty_for(lam):
        if mode == "target":
            return PenaltyMode.target_deviation(lam, psi_target)
        if mode == "psi2":
            return PenaltyMode.psi_squared(lam)
        raise ValueError(f"sweep mode must be 'psi2' or 'target', got {mode!r}")

    def run(lam):
        sp = spec.with_penalty(penalty_for(lam))
        theta, runlog, report = minimize(sp, theta0, config)
        last = runlog.rows[-1]
        return SweepRow(lam, last["J"], last["psi_p"], report.iterations,
                        report.reason, sp.pole_radii(theta),
                        psi_target if mode == "target" else float("nan"))

    rows = run_in_pool(run, lambdas, threads)
    return SweepResult(mode, rows)


def recommend_lambda(sweep, psi_reference, lower=1.0):
    """Smallest lambda > ``lower`` whose final psi_p is at most
    ``psi_reference``; otherwise the lambda with psi_p closest to it."""
    rows = sorted(sweep.rows, key=lambda r: r.lam)
    if not rows:
        raise ValueError("empty sweep")
    for r in rows:
        if r.lam > lower and r.psi_p <= psi_reference:
            return r.lam
    finite = [r for r in rows if math.isfinite(r.psi_p)] or rows
    best = min(finite, key=lambda r: (abs(r.psi_p - psi_reference), r.lam))
    log.warning("no lambda > %g reaches psi_p <= %.4g; falling back to closest "
                "match lambda=%g (psi_p=%.4g)", lower, psi_reference, best.lam, best.psi_p)
    return best.lam


def spearman(a, b):
    """Spearman rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)
