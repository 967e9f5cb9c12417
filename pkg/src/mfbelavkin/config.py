"""Experiment configuration: TOML files resolved into an ExperimentConfig."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .kernels import KernelError, kernel_from_entries, photon_exchange_kernel, zero_kernel
from .models import MODEL_NAMES, ModelParams
from .quantum import PRESETS, InvalidState, bloch_compose, validate_density

PRESET_ALIASES = {"σx": "sigma_x", "σy": "sigma_y", "σz": "sigma_z", "ρg": "rho_g", "ρe": "rho_e"}
CONTROL_LAWS = ("zero", "constant", "stabilize")


class ConfigInvalid(ValueError):
    def __init__(self, field_name: str, reason: str):
        self.field = field_name
        self.reason = reason
        super().__init__(f"{field_name}: {reason}")


@dataclass(frozen=True)
class ControlConfig:
    law: str = "zero"
    c1: float = 7.6
    c2: float = 5.0
    target: str = "rho_e"
    value: float = 0.0


@dataclass
class ExperimentConfig:
    """A fully resolved experiment definition.  Every field has a concrete value;
    ``to_dict`` gives the canonical form written to the manifest and hashed."""

    experiment: str
    seed: int
    model: str = "meanfield"
    T: float = 10.0
    dt: float = 1e-3
    eta: float = 1.0
    H: np.ndarray = field(default_factory=lambda: PRESETS["sigma_z"].copy())
    Hhat: np.ndarray = field(default_factory=lambda: PRESETS["sigma_x"].copy())
    L: np.ndarray = field(default_factory=lambda: PRESETS["sigma_z"].copy())
    kernel: str | list = "photon_exchange"
    initial: np.ndarray = field(default_factory=lambda: np.full((2, 2), 0.5, dtype=complex))
    control: ControlConfig = field(default_factory=ControlConfig)
    n_paths: int = 100
    N: int = 10000
    Ns: tuple = (2, 4, 8)
    record_every: int = 10
    save_paths: int = 100
    form: str = "paper"
    threshold: float = 0.95
    tol: float = 5e-3
    max_iter: int = 20
    n_samples: int = 100000
    dims: tuple = (2, 3, 4)
    out: str | None = None

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def model_params(self) -> ModelParams:
        return ModelParams(self.H, self.Hhat, self.L, self.eta, resolve_kernel(self.kernel, self.d))

    def to_dict(self) -> dict:
        """The config in the input layout, with every default filled in; it reloads to the same config."""
        c = self.control
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "model": self.model,
            "record_every": self.record_every,
            "grid": {"T": self.T, "dt": self.dt},
            "params": {
                "eta": self.eta,
                "H": matrix_to_pairs(self.H),
                "Hhat": matrix_to_pairs(self.Hhat),
                "L": matrix_to_pairs(self.L),
                "kernel": self.kernel,
            },
            "initial": {"state": matrix_to_pairs(self.initial)},
            "control": {"type": c.law, "c1": c.c1, "c2": c.c2, "target": c.target, "value": c.value},
            "run": {
                "n_paths": self.n_paths,
                "N": self.N,
                "Ns": list(self.Ns),
                "save_paths": self.save_paths,
                "form": self.form,
                "threshold": self.threshold,
                "tol": self.tol,
                "max_iter": self.max_iter,
                "n_samples": self.n_samples,
                "dims": list(self.dims),
            },
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def matrix_to_pairs(m) -> list:
    m = np.asarray(m, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in m]


def parse_matrix(value, field_name: str) -> np.ndarray:
    """A preset name or a nested list of [re, im] pairs (plain reals also accepted)."""
    if isinstance(value, str):
        name = PRESET_ALIASES.get(value, value)
        if name not in PRESETS:
            raise ConfigInvalid(field_name, f"unknown preset {value!r}; known: {', '.join(sorted(PRESETS))}")
        return PRESETS[name].astype(complex).copy()
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(field_name, f"not a matrix: {exc}") from None
    if a.ndim == 3 and a.shape[-1] == 2:
        a = a[..., 0] + 1j * a[..., 1]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigInvalid(field_name, f"expected a square matrix of [re, im] pairs, got shape {a.shape}")
    return a.astype(complex)


def resolve_kernel(spec, d: int):
    if spec == "photon_exchange":
        if d != 2:
            raise ConfigInvalid("params.kernel", "photon_exchange needs d = 2")
        return photon_exchange_kernel()
    if spec == "zero":
        return zero_kernel(d)
    if isinstance(spec, list):
        try:
            return kernel_from_entries(spec, d)
        except KernelError as exc:
            raise ConfigInvalid("params.kernel", str(exc)) from None
    raise ConfigInvalid("params.kernel", f"expected 'photon_exchange', 'zero' or a list of entries, got {spec!r}")


def _take(table: dict, key: str, kind, prefix: str, default=None):
    if key not in table:
        return default
    v = table[key]
    name = f"{prefix}{key}"
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigInvalid(name, f"expected an integer, got {v!r}")
        return v
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigInvalid(name, f"expected a number, got {v!r}")
        return float(v)
    if kind is str:
        if not isinstance(v, str):
            raise ConfigInvalid(name, f"expected a string, got {v!r}")
        return v
    return v


def config_from_dict(raw: dict, known_experiments=None) -> ExperimentConfig:
    """Validate a parsed TOML document and fill in defaults."""
    experiment = _take(raw, "experiment", str, "")
    if experiment is None:
        raise ConfigInvalid("experiment", "missing")
    if known_experiments is not None and experiment not in known_experiments:
        raise ConfigInvalid("experiment", f"unknown experiment {experiment!r}")
    seed = _take(raw, "seed", int, "")
    if seed is None:
        raise ConfigInvalid("seed", "missing (no wall-clock default)")
    if seed < 0 or seed >= 2**64:
        raise ConfigInvalid("seed", "must be a 64-bit unsigned integer")
    cfg = ExperimentConfig(experiment=experiment, seed=seed)
    cfg.model = _take(raw, "model", str, "", cfg.model)
    if cfg.model not in MODEL_NAMES:
        raise ConfigInvalid("model", f"unknown model {cfg.model!r}; choose from {', '.join(MODEL_NAMES)}")
    cfg.out = _take(raw, "out", str, "", None)
    cfg.record_every = _take(raw, "record_every", int, "", cfg.record_every)
    if cfg.record_every < 1:
        raise ConfigInvalid("record_every", "must be >= 1")

    grid = raw.get("grid", {})
    cfg.T = _take(grid, "T", float, "grid.", cfg.T)
    cfg.dt = _take(grid, "dt", float, "grid.", cfg.dt)
    if not cfg.dt > 0:
        raise ConfigInvalid("grid.dt", "must be positive")
    if cfg.T < 0:
        raise ConfigInvalid("grid.T", "must be non-negative")
    n = round(cfg.T / cfg.dt)
    if abs(n * cfg.dt - cfg.T) > 1e-12 * max(1.0, cfg.T):
        raise ConfigInvalid("grid.T", "must be a whole number of steps dt")

    params = raw.get("params", {})
    cfg.eta = _take(params, "eta", float, "params.", cfg.eta)
    if not 0.0 < cfg.eta <= 1.0:
        raise ConfigInvalid("params.eta", "must lie in (0, 1]")
    for key in ("H", "Hhat", "L"):
        if key in params:
            setattr(cfg, key, parse_matrix(params[key], f"params.{key}"))
    d = cfg.H.shape[0]
    for key in ("Hhat", "L"):
        if getattr(cfg, key).shape[0] != d:
            raise ConfigInvalid(f"params.{key}", f"dimension differs from H (d = {d})")
    cfg.kernel = params.get("kernel", "photon_exchange" if d == 2 else "zero")
    try:
        cfg.model_params()
    except ConfigInvalid:
        raise
    except (ValueError, InvalidState) as exc:
        raise ConfigInvalid("params", str(exc)) from None

    init = raw.get("initial", {})
    if "bloch" in init and "state" in init:
        raise ConfigInvalid("initial", "give either state or bloch, not both")
    if "bloch" in init:
        try:
            cfg.initial = bloch_compose(np.asarray(init["bloch"], dtype=float))
        except ValueError as exc:
            raise ConfigInvalid("initial.bloch", str(exc)) from None
    elif "state" in init:
        cfg.initial = parse_matrix(init["state"], "initial.state")
    elif d != 2:
        cfg.initial = np.eye(d, dtype=complex) / d
    if cfg.initial.shape != (d, d):
        raise ConfigInvalid("initial", f"state must be {d} x {d}")
    try:
        cfg.initial = np.array(validate_density(cfg.initial, 1e-9))
    except InvalidState as exc:
        raise ConfigInvalid("initial", str(exc)) from None

    ctl = raw.get("control", {})
    if "type" in ctl and "law" in ctl:
        raise ConfigInvalid("control.type", "give either type or law, not both")
    law = _take(ctl, "type", str, "control.", None) or _take(ctl, "law", str, "control.", "zero")
    if law not in CONTROL_LAWS:
        raise ConfigInvalid("control.type", f"unknown law {law!r}; choose from {', '.join(CONTROL_LAWS)}")
    target = _take(ctl, "target", str, "control.", "rho_e")
    if PRESET_ALIASES.get(target, target) not in PRESETS:
        raise ConfigInvalid("control.target", f"unknown preset {target!r}")
    cfg.control = ControlConfig(
        law=law,
        c1=_take(ctl, "c1", float, "control.", 7.6),
        c2=_take(ctl, "c2", float, "control.", 5.0),
        target=PRESET_ALIASES.get(target, target),
        value=_take(ctl, "value", float, "control.", 0.0),
    )

    run = raw.get("run", {})
    for key, kind in (("n_paths", int), ("N", int), ("save_paths", int), ("max_iter", int), ("n_samples", int)):
        val = _take(run, key, kind, "run.", getattr(cfg, key))
        if val < 0 or (key != "save_paths" and val < 1):
            raise ConfigInvalid(f"run.{key}", "must be positive")
        setattr(cfg, key, val)
    for key in ("threshold", "tol"):
        setattr(cfg, key, _take(run, key, float, "run.", getattr(cfg, key)))
    if cfg.tol <= 0:
        raise ConfigInvalid("run.tol", "must be positive")
    cfg.form = _take(run, "form", str, "run.", cfg.form)
    if cfg.form not in ("paper", "derived"):
        raise ConfigInvalid("run.form", "must be 'paper' or 'derived'")
    for key in ("Ns", "dims"):
        if key in run:
            val = run[key]
            if not isinstance(val, list) or not val or not all(isinstance(v, int) and v >= 1 for v in val):
                raise ConfigInvalid(f"run.{key}", "expected a non-empty list of positive integers")
            setattr(cfg, key, tuple(val))
    unknown = set(raw) - {"experiment", "seed", "model", "out", "record_every", "grid", "params", "initial", "control", "run"}
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown key")
    return cfg


def load_config(path, known_experiments=None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid("path", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid("syntax", str(exc)) from None
    return config_from_dict(raw, known_experiments)
