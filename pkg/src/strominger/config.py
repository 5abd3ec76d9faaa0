"""Run configuration: a flat ``[run]`` section of typed keys.

Example::

    [run]
    n = 8
    active = x1, x2
    rank = 2
    alpha_target = 1e-2
    manufactured = true
    amplitude = 1e-2
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace

from .continuation import ContinuationConfig
from .spectral_forms import AXES, Lattice

MODES = ("verify", "linearize", "residual", "squareroot", "solve", "solve-coupled")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mode: str = "verify"
    n: int = 8
    active: tuple = ("x1", "x2")
    rank: int = 2
    seed: int = 0
    out: str = "run"
    input: str = ""
    omega: complex = 1.0 + 0.0j
    weak_gauge: bool = False
    # verify
    tol: float = 1e-9
    fault_lambda: float = 1.0
    # linearize
    dense_n: int = 4
    fhat_scale: float = 1.0
    # solve
    manufactured: bool = True
    amplitude: float = 1e-2
    profile: str = "smooth"
    alpha_start: float = 0.0
    alpha_target: float = 1e-2
    step: float = 2.5e-3
    min_step: float = 1e-6
    newton_tol: float = 1e-9
    max_newton_iters: int = 25
    newton_mode: str = "jfnk"
    predictor: str = "secant"
    krylov_tol: float = 1e-9
    fd_step: float = 1e-4
    positivity_floor: float = 1e-12
    ellipticity_eps: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.n < 2 or self.n % 2:
            raise ConfigError(f"n must be an even integer >= 2, got {self.n}")
        bad = [a for a in self.active if a not in AXES]
        if bad or not self.active:
            raise ConfigError(f"active axes must be a non-empty subset of {AXES}, got {self.active}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.mode in ("residual", "squareroot") and not self.input:
            raise ConfigError(f"mode {self.mode!r} needs an input file")
        if self.profile not in ("smooth", "linear", "constant"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.amplitude < 0:
            raise ConfigError("amplitude must be non-negative")

    def lattice(self, n: int | None = None) -> Lattice:
        return Lattice(self.n if n is None else n, tuple(self.active))

    def continuation(self) -> ContinuationConfig:
        try:
            return ContinuationConfig(
                alpha_start=self.alpha_start, alpha_target=self.alpha_target, step=self.step,
                min_step=self.min_step, newton_tol=self.newton_tol, max_newton_iters=self.max_newton_iters,
                newton_mode=self.newton_mode, predictor=self.predictor, krylov_tol=self.krylov_tol,
                fd_step=self.fd_step, positivity_floor=self.positivity_floor, ellipticity_eps=self.ellipticity_eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["active"] = list(self.active)
        d["omega"] = [self.omega.real, self.omega.imag]
        return d


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown key {key!r}")
    default = _FIELDS[key].default
    try:
        if key == "active":
            return tuple(a.strip() for a in raw.split(",") if a.strip())
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, complex):
            return complex(raw.replace(" ", ""))
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def load_config(path=None, mode: str = "verify", overrides: dict | None = None) -> RunConfig:
    """Defaults, then the ``[run]`` section of ``path``, then ``overrides``."""
    values = {}
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        extra = [s for s in cp.sections() if s != "run"]
        if extra:
            raise ConfigError(f"{path}: unknown section(s) {extra}; only [run] is allowed")
        if cp.has_section("run"):
            for k, v in cp.items("run"):
                values[k] = parse_value(k, v)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "mode" in values and values["mode"] != mode:
        raise ConfigError(f"config mode {values['mode']!r} does not match subcommand {mode!r}")
    values["mode"] = mode
    try:
        return replace(RunConfig(), **values) if values else RunConfig()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
