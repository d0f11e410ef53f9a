"""LOLIMOT growth of an LMSSN: axis-orthogonal halving of the worst region
in the unit-cube extended input/state space, with split adaptation and a
validation-error stopping rule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .linear import balance, estimate_linear_ss, to_lmssn
from .model import (DivergenceError, GaussianValidity, NrbfNetwork,
                    ScalingTransform, StateLocalModel, nrbf_evaluate, pole_radii,
                    scale_point, simulate)
from .optimizer import ObjectiveSpec, OptimizerConfig, minimize, run_in_pool
from .regularization import PenaltyMode
from .spacefill import make_grid, psi_p

log = logging.getLogger(__name__)

K_SIGMA = 1.0 / 3.0
RANGE_FLOOR = 1e-6


@dataclass(frozen=True)
class Region:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("region needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, d):
        return cls(np.zeros(d), np.ones(d))

    @property
    def d(self):
        return self.lower.size

    @property
    def volume(self):
        return float(np.prod(self.upper - self.lower))

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def split(self, dim, ratio=0.5):
        cut = self.lower[dim] + ratio * (self.upper[dim] - self.lower[dim])
        hi1 = self.upper.copy()
        hi1[dim] = cut
        lo2 = self.lower.copy()
        lo2[dim] = cut
        return Region(self.lower, hi1), Region(lo2, self.upper)


@dataclass(frozen=True)
class PartitionTree:
    """Binary tree of regions; ``leaves`` lists them in left-to-right order,
    which is also the local-model order."""

    region: Region
    children: tuple = ()
    dim: int = -1

    @classmethod
    def root(cls, d):
        return cls(Region.unit(d))

    @property
    def is_leaf(self):
        return not self.children

    def leaves(self):
        if self.is_leaf:
            return [self.region]
        return self.children[0].leaves() + self.children[1].leaves()

    def __len__(self):
        return len(self.leaves())

    def split_leaf(self, index, dim, ratio=0.5):
        """New tree with leaf ``index`` halved along ``dim``."""
        tree, rest = self._split(index, dim, ratio)
        if rest >= 0:
            raise IndexError("leaf index out of range")
        return tree

    def _split(self, index, dim, ratio):
        if self.is_leaf:
            if index == 0:
                lo, hi = self.region.split(dim, ratio)
                return PartitionTree(self.region, (PartitionTree(lo), PartitionTree(hi)), dim), -1
            return self, index - 1
        left, index = self.children[0]._split(index, dim, ratio)
        if index < 0:
            return replace(self, children=(left, self.children[1])), -1
        right, index = self.children[1]._split(index, dim, ratio)
        return replace(self, children=(left, right)), index

    def to_dict(self):
        if self.is_leaf:
            return {"lower": self.region.lower.tolist(), "upper": self.region.upper.tolist()}
        return {"lower": self.region.lower.tolist(), "upper": self.region.upper.tolist(),
                "dim": self.dim, "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class SplitCandidate:
    leaf: int
    dim: int
    ratio: float
    children: tuple


@dataclass(frozen=True)
class ValidationPolicy:
    threshold: float = 0.25
    patience: int = 3
    snr_db: float = 40.0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def tolerance(self, y_train):
        """Absolute RMSE improvement needed to count as progress."""
        return self.threshold * float(np.std(y_train)) * 10.0 ** (-self.snr_db / 20.0)


# -- elementary operations ----------------------------------------------------

def region_to_validity(region, k_sigma=K_SIGMA):
    if not k_sigma > 0:
        raise ValueError("k_sigma must be positive")
    return GaussianValidity(region.center, k_sigma * (region.upper - region.lower))


def partition_network(tree, k_sigma=K_SIGMA):
    return NrbfNetwork(tuple(region_to_validity(r, k_sigma) for r in tree.leaves()))


def propose_splits(tree, leaf, ratio=0.5):
    region = tree.leaves()[leaf]
    return [SplitCandidate(leaf, i, ratio, region.split(i, ratio)) for i in range(region.d)]


def validity_weights(model, X):
    Z = scale_point(model.scaling, X)
    return nrbf_evaluate(model.state_validity, Z)


def worst_region(model, u, y):
    """Leaf with the largest validity-weighted squared simulation error."""
    X, yhat = simulate(model, u)
    W = validity_weights(model, X)
    e2 = (np.asarray(y, dtype=float) - yhat) ** 2
    scores = e2 @ W
    return int(np.argmax(scores)), scores


def split_adapt(model, tree, u, k_sigma=K_SIGMA):
    """Rescale so the current trajectory spans the unit cube, then re-place
    every validity function from its region."""
    X, _ = simulate(model, u)
    lo = X.min(axis=0)
    rng = X.max(axis=0) - lo
    if np.any(rng < RANGE_FLOOR):
        log.warning("trajectory has (near) zero range in dimension(s) %s; flooring at %g",
                    np.flatnonzero(rng < RANGE_FLOOR).tolist(), RANGE_FLOOR)
        rng = np.maximum(rng, RANGE_FLOOR)
    net = partition_network(tree, k_sigma)
    return replace(model, scaling=ScalingTransform(lo, rng), state_validity=net,
                   output_validity=net)


def spawn_children(model, tree, candidate, k_sigma=K_SIGMA):
    """Split ``candidate.leaf``; both children start as copies of the parent LM.

    Returns ``(new_model, new_tree)``.
    """
    j = candidate.leaf
    new_tree = tree.split_leaf(j, candidate.dim, candidate.ratio)
    net = partition_network(new_tree, k_sigma)
    s = list(model.state_lms)
    s.insert(j + 1, StateLocalModel(s[j].A.copy(), s[j].b.copy(), s[j].o.copy()))
    o = list(model.output_lms)
    o.insert(j + 1, replace(o[j], c=o[j].c.copy()))
    return replace(model, state_lms=tuple(s), output_lms=tuple(o), state_validity=net,
                   output_validity=net), new_tree


def reactivation_report(model, u):
    """Per-LM maximum validity weight over the trajectory; LMs never above 0.5
    are flagged as interpolation-only."""
    X, _ = simulate(model, u)
    W = validity_weights(model, X)
    peak = W.max(axis=0)
    return [{"lm": j, "max_weight": float(p), "interpolation_only": bool(p < 0.5)}
            for j, p in enumerate(peak)]


def rmse(model, u, y):
    """Simulation RMSE, or ``nan`` if the model diverges on ``u``."""
    try:
        _, yhat = simulate(model, u)
    except DivergenceError:
        return math.nan
    e = np.asarray(y, dtype=float) - yhat
    return float(np.sqrt(np.mean(e * e)))


def initial_model(u, y, n_x, Ts=1.0, k_sigma=K_SIGMA):
    """Balanced linear LMSSN from an ARX fit on (u, y)."""
    ss = estimate_linear_ss(u, y, n_x, Ts)
    bal, _ = balance(ss)
    return to_lmssn(bal, u, k_sigma)


# -- training loop -------------------------------------------------------------

@dataclass(frozen=True)
class LolimotConfig:
    n_x: int = 2
    max_splits: int = 10
    k_sigma: float = K_SIGMA
    penalty: PenaltyMode = field(default_factory=PenaltyMode)
    psi_target_from_initial: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    policy: ValidationPolicy = field(default_factory=ValidationPolicy)
    grid_m: int = 5
    threads: int = None
    split_dims: tuple = None


@dataclass
class CandidateRun:
    dim: int
    J: float
    objective: float
    runlog: object
    report: object
    model: object = None
    tree: object = None


@dataclass
class SplitRecord:
    index: int
    model: object
    tree: object
    rmse_train: float
    rmse_val: float
    rmse_test: float
    pole_radii: list
    leaf: int = -1
    dim: int = -1
    candidates: list = field(default_factory=list)
    rmse_test_missing: bool = False

    @property
    def stable(self):
        """Finite simulation on validation (and test, when given)."""
        return math.isfinite(self.rmse_val) and (
            self.rmse_test_missing or math.isfinite(self.rmse_test))

    @property
    def chosen(self):
        for c in self.candidates:
            if c.dim == self.dim:
                return c
        return None


@dataclass
class LolimotResult:
    records: list
    best: int
    tolerance: float
    penalty: PenaltyMode
    stop_reason: str

    @property
    def best_record(self):
        return self.records[self.best]

    @property
    def accepted_splits(self):
        return len(self.records) - 1


def _score(model, parts):
    out = []
    for p in parts:
        out.append(math.nan if p is None else rmse(model, p.u, p.y))
    return out


def lolimot_train(train, val, config=None, test=None, on_split=None):
    """Grow an LMSSN on ``train`` and pick the simplest adequate model on ``val``.

    ``train``, ``val``, ``test`` are :class:`~lmssn.datasets.Dataset`-like
    objects with ``u`` and ``y``. Returns a :class:`LolimotResult` whose
    record 0 is the initial linear model.
    """
    config = config or LolimotConfig()
    grid = make_grid(config.n_x + 1, config.grid_m)
    model = initial_model(train.u, train.y, config.n_x, getattr(train, "Ts", 1.0),
                          config.k_sigma)
    tree = PartitionTree.root(model.dim)
    penalty = config.penalty
    if config.psi_target_from_initial and penalty.kind == "target":
        X0, _ = simulate(model, train.u)
        penalty = replace(penalty, psi_target=psi_p(scale_point(model.scaling, X0), grid))
    tol = config.policy.tolerance(train.y)

    def record(idx, model, tree, leaf=-1, dim=-1, cands=()):
        tr, va, te = _score(model, (train, val, test))
        rec = SplitRecord(idx, model, tree, tr, va, te, pole_radii(model), leaf, dim,
                          list(cands), rmse_test_missing=test is None)
        if on_split is not None:
            on_split(rec)
        return rec

    records = [record(0, model, tree)]
    best_val = records[0].rmse_val
    stagnant = 0
    stop = "max_splits"
    for s in range(1, config.max_splits + 1):
        try:
            adapted = split_adapt(model, tree, train.u, config.k_sigma)
            leaf, _ = worst_region(adapted, train.u, train.y)
        except DivergenceError:
            stop = "diverged"
            break
        cands = propose_splits(tree, leaf)
        if config.split_dims is not None:
            cands = [c for c in cands if c.dim in config.split_dims]

        def run(cand, adapted=adapted, tree=tree):
            m, t = spawn_children(adapted, tree, cand, config.k_sigma)
            spec = ObjectiveSpec(m, train.u, train.y, penalty, grid)
            theta, runlog, report = minimize(spec, spec.theta0(), config.optimizer)
            last = runlog.rows[-1]
            return CandidateRun(cand.dim, last["J"], report.final_objective, runlog,
                                report, spec.model(theta), t)

        runs = run_in_pool(run, cands, config.threads)
        finite = [r for r in runs if math.isfinite(r.J)]
        if not finite:
            stop = "diverged"
            break
        chosen = min(finite, key=lambda r: (r.J, r.dim))
        model, tree = chosen.model, chosen.tree
        rec = record(s, model, tree, leaf, chosen.dim, runs)
        records.append(rec)
        log.info("split %d: leaf %d dim %d  J=%.4g  val=%.4g", s, leaf, chosen.dim,
                 chosen.J, rec.rmse_val)
        if math.isfinite(rec.rmse_val) and rec.rmse_val < best_val - tol:
            best_val = rec.rmse_val
            stagnant = 0
        else:
            stagnant += 1
        if stagnant >= config.policy.patience:
            stop = "patience"
            break

    best = select_best(records, tol)
    return LolimotResult(records, best, tol, penalty, stop)


def select_best(records, tol):
    """Simplest record whose validation RMSE is within ``tol`` of the best."""
    ok = [r for r in records if r.stable]
    if not ok:
        return 0
    best_val = min(r.rmse_val for r in ok)
    for r in ok:
        if r.rmse_val <= best_val + tol:
            return r.index
    return ok[0].index


def stagnation_stop(val_rmse, tol, patience):
    """Outer iteration at which the patience rule stops for a given sequence of
    validation RMSEs (index 0 is the initial model), or ``None``."""
    best = val_rmse[0]
    stagnant = 0
    for i, v in enumerate(val_rmse[1:], start=1):
        if v < best - tol:
            best, stagnant = v, 0
        else:
            stagnant += 1
        if stagnant >= patience:
            return i
    return None


def first_split_problem(train, n_x=2, dim=0, penalty=None, grid_m=5, k_sigma=K_SIGMA):
    """Objective of the first LOLIMOT split along ``dim`` from the balanced
    linear model, plus that initial model's psi_p."""
    model = initial_model(train.u, train.y, n_x, getattr(train, "Ts", 1.0), k_sigma)
    tree = PartitionTree.root(model.dim)
    grid = make_grid(model.dim, grid_m)
    X0, _ = simulate(model, train.u)
    psi0 = psi_p(scale_point(model.scaling, X0), grid)
    cand = propose_splits(tree, 0)[dim]
    spawned, _ = spawn_children(model, tree, cand, k_sigma)
    spec = ObjectiveSpec(spawned, train.u, train.y, penalty or PenaltyMode(), grid)
    return spec, psi0
