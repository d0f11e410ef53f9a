"""Command line front end.

Exit codes: 0 success, 2 usage/config error, 3 unstable selected model,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets
from .lolimot import (LolimotConfig, ValidationPolicy, first_split_problem,
                      lolimot_train)
from .model import DivergenceError, save_model
from .optimizer import OptimizerConfig, write_run
from .regularization import PSI2_GRID, TARGET_GRID, PenaltyMode, lambda_sweep
from .spacefill import chv, kld_uniform, make_grid, psi_p

log = logging.getLogger("lmssn")

EXIT_OK, EXIT_USAGE, EXIT_UNSTABLE, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    dataset: str = None
    n_x: int = 2
    mode: str = "none"
    lam: float = 0.0
    psi_target: float = None
    max_splits: int = 10
    patience: int = 3
    threshold: float = 0.25
    snr_db: float = 40.0
    grid_m: int = 5
    k_sigma: float = 1.0 / 3.0
    seed: int = 0
    out: str = "run"
    normalize: str = "none"
    split_dim: int = 0
    lambdas: list = None
    loss_tol: float = 1e-9
    grad_tol: float = 1e-6
    min_step: float = 1e-12
    max_iter: int = 5000
    track_indicators: bool = True
    threads: int = None

    def validate(self):
        if self.mode not in ("none", "psi2", "target"):
            raise UsageError(f"mode must be none, psi2 or target, not {self.mode!r}")
        if self.normalize not in ("none", "zscore"):
            raise UsageError("normalize must be 'none' or 'zscore'")
        if self.n_x < 1 or self.grid_m < 2 or self.max_splits < 0:
            raise UsageError("n_x >= 1, grid_m >= 2 and max_splits >= 0 required")
        if self.lam < 0 or (self.psi_target is not None and self.psi_target < 0):
            raise UsageError("lambda and psi_target must be nonnegative")
        if self.dataset is None:
            raise UsageError("no dataset given")
        try:
            self.optimizer()
            self.policy()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return self

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return dataclasses.asdict(self)

    def optimizer(self):
        return OptimizerConfig(loss_tol=self.loss_tol, grad_tol=self.grad_tol,
                               min_step=self.min_step, max_iter=self.max_iter,
                               track_indicators=self.track_indicators)

    def policy(self):
        return ValidationPolicy(self.threshold, self.patience, self.snr_db)

    def penalty(self, psi_initial=None):
        if self.mode == "psi2":
            return PenaltyMode.psi_squared(self.lam)
        if self.mode == "target":
            target = self.psi_target if self.psi_target is not None else psi_initial
            return PenaltyMode.target_deviation(self.lam, target or 0.0)
        return PenaltyMode.none()


def _load_config(args):
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    cfg = RunConfig.from_dict(doc)
    for flag, key in (("dataset", "dataset"), ("lam", "lam"), ("mode", "mode"),
                      ("psi_target", "psi_target"), ("max_splits", "max_splits"),
                      ("grid_m", "grid_m"), ("seed", "seed"), ("out", "out"),
                      ("n_x", "n_x")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    return cfg.validate()


def _load_splits(cfg):
    path = Path(cfg.dataset)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    try:
        ds = datasets.read_dataset(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    norm = datasets.Standardizer()
    if cfg.normalize == "zscore":
        norm = datasets.Standardizer.fit(ds.part("train"))
        ds = norm.apply(ds)
    parts = {name: ds.part(name) if name in ds.splits else None
             for name in datasets.SPLITS}
    if parts["train"] is None:
        raise UsageError("dataset has no training split")
    if parts["val"] is None:
        parts["val"] = parts["train"]
    return parts, norm


def _write_snapshot(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    gen = datasets.GENERATORS[args.generator]
    ds = gen(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.generator}_seed{args.seed}.csv"
    datasets.write_dataset(ds, path)
    print(path)
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    parts, norm = _load_splits(cfg)
    out = Path(cfg.out)
    _write_snapshot(cfg, out)
    lcfg = LolimotConfig(
        n_x=cfg.n_x, max_splits=cfg.max_splits, k_sigma=cfg.k_sigma,
        penalty=cfg.penalty(0.0),
        psi_target_from_initial=cfg.mode == "target" and cfg.psi_target is None,
        optimizer=cfg.optimizer(), policy=cfg.policy(), grid_m=cfg.grid_m,
        threads=cfg.threads)
    try:
        result = lolimot_train(parts["train"], parts["val"], lcfg, test=parts["test"])
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC

    scale = norm.y_std
    for rec in result.records:
        save_model(rec.model, out / f"model_split{rec.index:02d}.json")
        for cand in rec.candidates:
            write_run(cand.runlog, cand.report, str(out / f"runlog_split{rec.index:02d}_dim{cand.dim}"))
    best = result.best_record
    save_model(best.model, out / "model.json")
    with open(out / "splits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("split", "leaf", "dim", "rmse_train", "rmse_val", "rmse_test",
                    "stable", "max_pole_radius", "best"))
        for rec in result.records:
            w.writerow((rec.index, rec.leaf, rec.dim, repr(rec.rmse_train * scale),
                        repr(rec.rmse_val * scale), repr(rec.rmse_test * scale),
                        int(rec.stable), repr(max(rec.pole_radii)),
                        int(rec.index == result.best)))
    unstable = not best.stable
    summary = {
        "mode": cfg.mode,
        "lambda": cfg.lam,
        "psi_target": result.penalty.psi_target if cfg.mode == "target" else None,
        "accepted_splits": result.accepted_splits,
        "best_split": result.best,
        "stop_reason": result.stop_reason,
        "tolerance": result.tolerance * scale,
        "best_rmse_test": best.rmse_test * scale,
        "best_pole_radii": best.pole_radii,
        "unstable_splits": [r.index for r in result.records if not r.stable],
        "best_unstable": unstable,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return EXIT_UNSTABLE if unstable else EXIT_OK


def _parse_lambdas(text):
    if text is None:
        return None
    vals = [v for v in text.replace(";", ",").split(",") if v.strip()]
    try:
        return [float(v) for v in vals]
    except ValueError as exc:
        raise UsageError(f"bad lambda list: {text!r}") from exc


def cmd_sweep(args):
    cfg = _load_config(args)
    mode = cfg.mode if cfg.mode != "none" else "psi2"
    lambdas = _parse_lambdas(args.lambdas)
    if lambdas is None:
        lambdas = cfg.lambdas if cfg.lambdas is not None else list(
            PSI2_GRID if mode == "psi2" else TARGET_GRID)
    if not lambdas:
        raise UsageError("lambda grid is empty")
    if any(v < 0 for v in lambdas):
        raise UsageError("lambda values must be nonnegative")
    parts, _ = _load_splits(cfg)
    out = Path(cfg.out)
    _write_snapshot(cfg, out)
    spec, psi0 = first_split_problem(parts["train"], cfg.n_x, cfg.split_dim,
                                     grid_m=cfg.grid_m, k_sigma=cfg.k_sigma)
    target = cfg.psi_target if cfg.psi_target is not None else psi0
    sweep = lambda_sweep(spec, spec.theta0(), lambdas, mode, target, cfg.optimizer(),
                         threads=cfg.threads)
    sweep.to_csv(out / "sweep.csv")
    (out / "sweep.json").write_text(json.dumps(
        {"mode": mode, "psi_initial": psi0, "psi_target": target}, indent=1))
    print(out / "sweep.csv")
    return EXIT_OK


def _read_points(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"trajectory file not found: {path}")
    with open(path) as fh:
        first = fh.readline()
    skip = 1 if any(c.isalpha() and c not in "eE" for c in first) else 0
    try:
        pts = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    except ValueError as exc:
        raise UsageError(f"cannot parse trajectory: {exc}") from exc
    if pts.size == 0:
        raise UsageError("trajectory file is empty")
    return pts


def metrics_for(points, grid_m=5):
    grid = make_grid(points.shape[1], grid_m)
    return {"n_points": int(points.shape[0]), "dim": int(points.shape[1]),
            "grid_m": grid_m, "n_grid": grid.n_g, "psi_p": psi_p(points, grid),
            "kld": kld_uniform(points, grid), "chv": chv(points)}


def cmd_metrics(args):
    pts = _read_points(args.trajectory)
    res = metrics_for(pts, args.grid_m if args.grid_m is not None else 5)
    text = json.dumps(res, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _write_table(table, path, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for i in range(len(table[columns[0]])):
            w.writerow([repr(float(table[c][i])) for c in columns])


def normalize_by_max(v):
    v = np.asarray(v, dtype=float)
    finite = v[np.isfinite(v)]
    if finite.size == 0:
        return np.full_like(v, np.nan)
    m = np.max(np.abs(finite))
    return v / m if m > 0 else v.copy()


def cmd_report(args):
    from . import plotting

    run = Path(args.run_dir)
    if not run.is_dir():
        raise UsageError(f"not a directory: {run}")
    logs = sorted(run.glob("runlog_*.csv"))
    splits = run / "splits.csv"
    sweep = run / "sweep.csv"
    if not logs and not splits.exists() and not sweep.exists():
        raise UsageError(f"no run artifacts in {run}")
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in logs:
        t = _read_table(path)
        if not t:
            continue
        for key in ("J", "psi_p", "kld", "chv"):
            t[f"{key}_norm"] = normalize_by_max(t[key])
        cols = ["iteration", "J", "psi_p", "kld", "chv", "J_norm", "psi_p_norm",
                "kld_norm", "chv_norm"]
        dest = out / f"indicators_{path.stem.removeprefix('runlog_')}.csv"
        _write_table(t, dest, cols)
        written += [dest, plotting.indicator_figure(t, dest.with_suffix(".png"))]
    if splits.exists():
        t = _read_table(splits)
        dest = out / "rmse_per_split.csv"
        _write_table(t, dest, ["split", "rmse_train", "rmse_val", "rmse_test", "stable",
                               "max_pole_radius", "best"])
        best = int(t["split"][np.argmax(t["best"])]) if np.any(t["best"]) else None
        written += [dest, plotting.split_rmse_figure(t, dest.with_suffix(".png"), best)]
    if sweep.exists():
        t = _read_table_loose(sweep)
        dest = out / "sweep.csv"
        _write_table(t, dest, ["lambda", "J", "psi_p", "psi_deviation", "iterations"])
        written += [dest, plotting.sweep_figure(t, dest.with_suffix(".png"))]
    for p in written:
        print(p)
    return EXIT_OK


def _read_table_loose(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for k in rows[0]:
        try:
            out[k] = np.array([float(r[k]) for r in rows])
        except ValueError:
            continue
    return out


# -- entry point --------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lmssn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a benchmark dataset")
    g.add_argument("generator", choices=sorted(datasets.GENERATORS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--dataset")
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--mode", choices=("none", "psi2", "target"))
        sp.add_argument("--psi-target", dest="psi_target", type=float)
        sp.add_argument("--max-splits", dest="max_splits", type=int)
        sp.add_argument("--grid-m", dest="grid_m", type=int)
        sp.add_argument("--n-x", dest="n_x", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    t = sub.add_parser("train", help="LOLIMOT training")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="lambda study on the first split")
    common(s)
    s.add_argument("--lambdas", help="comma separated lambda grid")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("metrics", help="space-filling indicators of a point cloud")
    m.add_argument("trajectory")
    m.add_argument("--grid-m", dest="grid_m", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)

    r = sub.add_parser("report", help="consolidated CSVs and figures for a run")
    r.add_argument("run_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lmssn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"lmssn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
