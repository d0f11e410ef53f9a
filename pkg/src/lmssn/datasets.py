"""Benchmark data: second-order process with nonlinear feedback, Bouc-Wen
hysteretic oscillator, multisine excitation and CSV/JSON dataset files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numba
import numpy as np

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    u: np.ndarray
    y: np.ndarray
    Ts: float
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.u.shape != self.y.shape:
            raise ValueError("u and y must have equal length")
        if not self.Ts > 0:
            raise ValueError("sample time must be positive")
        if not self.splits:
            self.splits = {"train": (0, len(self.u))}

    def __len__(self):
        return len(self.u)

    def part(self, name):
        if name not in self.splits:
            raise KeyError(f"dataset has no {name!r} split")
        a, b = self.splits[name]
        return Dataset(self.u[a:b], self.y[a:b], self.Ts, {"train": (0, b - a)},
                       dict(self.meta))

    @classmethod
    def concat(cls, parts, Ts, meta=None):
        u, y, splits, start = [], [], {}, 0
        for name, ds in parts.items():
            u.append(ds.u)
            y.append(ds.y)
            splits[name] = (start, start + len(ds))
            start += len(ds)
        return cls(np.concatenate(u), np.concatenate(y), Ts, splits, meta or {})


# -- excitation -------------------------------------------------------------

def multisine(N, f_min, f_max, amplitude, seed=0, Ts=1.0):
    """Random-phase multisine with flat amplitude on the DFT lines inside
    [f_min, f_max], scaled to the requested RMS. Periodic in N samples."""
    if N < 1:
        raise ValueError("N must be positive")
    rng = np.random.default_rng(seed)
    df = 1.0 / (N * Ts)
    lines = np.arange(1, (N - 1) // 2 + 1)
    lines = lines[(lines * df >= f_min) & (lines * df <= f_max)]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(lines))
    if len(lines) == 0:
        return np.zeros(N)
    spec = np.zeros(N // 2 + 1, dtype=complex)
    spec[lines] = np.exp(1j * phases)
    s = np.fft.irfft(spec, n=N)
    return s * (amplitude / np.sqrt(np.mean(s ** 2)))


# -- integrators --------------------------------------------------------------

FEEDBACK = {"exp": 0, "scaled_exp": 1}


@numba.njit(cache=True)
def _demo_rhs(s, u, a0, a1, b0, fam, fs):
    y, v = s[0], s[1]
    if fam == 0:
        f = math.exp(y) - 1.0
    else:
        f = (math.exp(fs * y) - 1.0) / fs
    return np.array([v, b0 * u - a1 * v - a0 * f])


@numba.njit(cache=True)
def _demo_rk4(u, Ts, sub, a0, a1, b0, fam, fs, y0, v0):
    n = u.shape[0]
    out = np.empty(n)
    s = np.array([y0, v0])
    h = Ts / sub
    for k in range(n):
        out[k] = s[0]
        for _ in range(sub):
            k1 = _demo_rhs(s, u[k], a0, a1, b0, fam, fs)
            k2 = _demo_rhs(s + 0.5 * h * k1, u[k], a0, a1, b0, fam, fs)
            k3 = _demo_rhs(s + 0.5 * h * k2, u[k], a0, a1, b0, fam, fs)
            k4 = _demo_rhs(s + h * k3, u[k], a0, a1, b0, fam, fs)
            s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not (abs(s[0]) < 1e6 and abs(s[1]) < 1e6):
            return out, k
    return out, -1


@numba.njit(cache=True)
def _bw_rhs(s, u, m, c, kk, alpha, beta, gamma, delta, nu):
    y, v, z = s[0], s[1], s[2]
    az = abs(z)
    zdot = alpha * v - beta * (gamma * abs(v) * az ** (nu - 1.0) * z + delta * v * az ** nu)
    return np.array([v, (u - c * v - kk * y - z) / m, zdot])


@numba.njit(cache=True)
def _bw_rk4(u, Ts, sub, m, c, kk, alpha, beta, gamma, delta, nu, y0, v0, z0):
    n = u.shape[0]
    out = np.empty(n)
    s = np.array([y0, v0, z0])
    h = Ts / sub
    for k in range(n):
        out[k] = s[0]
        for _ in range(sub):
            k1 = _bw_rhs(s, u[k], m, c, kk, alpha, beta, gamma, delta, nu)
            k2 = _bw_rhs(s + 0.5 * h * k1, u[k], m, c, kk, alpha, beta, gamma, delta, nu)
            k3 = _bw_rhs(s + 0.5 * h * k2, u[k], m, c, kk, alpha, beta, gamma, delta, nu)
            k4 = _bw_rhs(s + h * k3, u[k], m, c, kk, alpha, beta, gamma, delta, nu)
            s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not (abs(s[0]) < 1e6 and abs(s[1]) < 1e9 and abs(s[2]) < 1e12):
            return out, k
    return out, -1


# -- demo process -------------------------------------------------------------

@dataclass(frozen=True)
class DemoProcessParams:
    """y'' + a1 y' + a0 f(y) = b0 u with f(y) = exp(y) - 1 by default."""

    a0: float = 15.0
    a1: float = 3.0
    b0: float = 15.0
    feedback: str = "exp"
    feedback_scale: float = 1.0
    Ts: float = 0.05

    def __post_init__(self):
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        if self.feedback not in FEEDBACK:
            raise ValueError(f"unknown feedback family {self.feedback!r}")

    def f(self, y):
        if self.feedback == "exp":
            return np.expm1(y)
        return np.expm1(self.feedback_scale * y) / self.feedback_scale


def simulate_demo_process(params, u, oversample=10, y0=0.0, v0=0.0):
    """Sampled output under zero-order-hold input, RK4 at ``Ts / oversample``."""
    u = np.ascontiguousarray(u, dtype=float)
    y, k_fail = _demo_rk4(u, params.Ts, int(oversample), params.a0, params.a1,
                          params.b0, FEEDBACK[params.feedback],
                          float(params.feedback_scale), float(y0), float(v0))
    if k_fail >= 0:
        raise FloatingPointError(f"demo process blew up at t = {k_fail * params.Ts:g} s")
    return y


@dataclass(frozen=True)
class DemoConfig:
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 1000
    f_min: float = 0.0
    f_max: float = 2.0
    offset: float = 0.5
    amplitude: float = 0.5


def generate_demo(seed=0, params=None, config=None):
    """Train/val/test records of the demo process, each started from rest.

    The input is a multisine normalized to peak ``amplitude`` around
    ``offset`` (default: the interval [0, 1]).
    """
    params = params or DemoProcessParams()
    config = config or DemoConfig()
    parts = {}
    for i, (name, n) in enumerate(zip(SPLITS, (config.n_train, config.n_val, config.n_test))):
        s = multisine(n, config.f_min, config.f_max, 1.0, seed=seed * 1000 + i, Ts=params.Ts)
        u = config.offset + config.amplitude * s / np.max(np.abs(s))
        parts[name] = Dataset(u, simulate_demo_process(params, u), params.Ts)
    meta = {"generator": "demo", "seed": seed,
            "params": params.__dict__.copy(), "config": config.__dict__.copy()}
    return Dataset.concat(parts, params.Ts, meta)


# -- Bouc-Wen -----------------------------------------------------------------

@dataclass(frozen=True)
class BoucWenParams:
    """m y'' + c y' + k y + z = u,
    z' = alpha y' - beta (gamma |y'| |z|^(nu-1) z + delta y' |z|^nu)."""

    mass: float = 2.0
    damping: float = 10.0
    stiffness: float = 5e4
    alpha: float = 5e4
    beta: float = 1e3
    gamma: float = 0.8
    delta: float = -1.1
    nu: float = 1.0
    Ts: float = 1.0 / 750.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")

    @classmethod
    def from_config(cls, name="boucwen_v1.json"):
        doc = json.loads(resources.files("lmssn.data").joinpath(name).read_text())
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in keys}), doc.get("excitation", {})


BOUCWEN_OVERSAMPLE = 40


def simulate_boucwen(params, u, oversample=BOUCWEN_OVERSAMPLE, y0=0.0, v0=0.0, z0=0.0):
    """Sampled displacement under zero-order-hold input.

    The |y'| terms make the right-hand side non-smooth, which drops RK4 to
    roughly second order; hence the finer default internal step.
    """
    u = np.ascontiguousarray(u, dtype=float)
    y, k_fail = _bw_rk4(u, params.Ts, int(oversample), params.mass, params.damping,
                        params.stiffness, params.alpha, params.beta, params.gamma,
                        params.delta, params.nu, float(y0), float(v0), float(z0))
    if k_fail >= 0:
        raise FloatingPointError(f"Bouc-Wen simulation blew up at t = {k_fail * params.Ts:g} s")
    return y


@dataclass(frozen=True)
class BoucWenConfig:
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 1000
    f_min: float = 5.0
    f_max: float = 150.0
    rms: float = 50.0
    snr_db: float = None


def generate_boucwen(seed=0, params=None, config=None):
    if params is None:
        params, exc = BoucWenParams.from_config()
        config = config or BoucWenConfig(**{k: v for k, v in (
            ("f_min", exc.get("f_min")), ("f_max", exc.get("f_max")),
            ("rms", exc.get("rms"))) if v is not None})
    config = config or BoucWenConfig()
    rng = np.random.default_rng(seed + 7919)
    parts = {}
    for i, (name, n) in enumerate(zip(SPLITS, (config.n_train, config.n_val, config.n_test))):
        u = multisine(n, config.f_min, config.f_max, config.rms, seed=seed * 1000 + i, Ts=params.Ts)
        y = simulate_boucwen(params, u)
        if config.snr_db is not None:
            y = y + rng.normal(0.0, np.std(y) * 10 ** (-config.snr_db / 20), size=n)
        parts[name] = Dataset(u, y, params.Ts)
    meta = {"generator": "boucwen", "seed": seed,
            "params": params.__dict__.copy(), "config": config.__dict__.copy()}
    return Dataset.concat(parts, params.Ts, meta)


GENERATORS = {"demo": generate_demo, "boucwen": generate_boucwen}


# -- files --------------------------------------------------------------------

def sidecar_path(path):
    p = Path(path)
    return p.with_suffix(".json")


def write_dataset(ds, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("k", "u", "y"))
        for k, (u, y) in enumerate(zip(ds.u, ds.y)):
            w.writerow((k, repr(float(u)), repr(float(y))))
    side = {"Ts": ds.Ts, "splits": {k: list(v) for k, v in ds.splits.items()}, **ds.meta}
    with open(sidecar_path(path), "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def read_dataset(path):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"k", "u", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"dataset file lacks column(s): {sorted(missing)}")
        u, y = [], []
        for rec in reader:
            u.append(float(rec["u"]))
            y.append(float(rec["y"]))
    side = {}
    if sidecar_path(path).exists():
        side = json.loads(sidecar_path(path).read_text())
    Ts = float(side.pop("Ts", 1.0))
    splits = {k: tuple(v) for k, v in side.pop("splits", {}).items()}
    return Dataset(np.array(u), np.array(y), Ts, splits, side)


@dataclass(frozen=True)
class Standardizer:
    u_mean: float = 0.0
    u_std: float = 1.0
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, ds):
        return cls(float(ds.u.mean()), float(ds.u.std()) or 1.0,
                   float(ds.y.mean()), float(ds.y.std()) or 1.0)

    def apply(self, ds):
        return Dataset((ds.u - self.u_mean) / self.u_std, (ds.y - self.y_mean) / self.y_std,
                       ds.Ts, dict(ds.splits), dict(ds.meta))
