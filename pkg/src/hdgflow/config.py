"""Run configuration: TOML parsing, validation, defaults, and echo output.

The grammar is plain TOML restricted to scalars and the nested tables
listed in SimConfig; the echoed file round-trips bit-exactly through
parse_config.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import tomli


class ConfigError(Exception):
    pass


@dataclass
class TracerConfig:
    enabled: bool = False
    degree: int = None  # defaults to k when left unset
    ic: str = "gaussian"  # gaussian | sine


@dataclass
class MGConfig:
    smooth_steps: int = 2
    chebyshev_order: int = 2


@dataclass
class SolverConfig:
    pressure_rtol: float = 1e-12
    velocity_rtol: float = 1e-10
    maxit: int = 200
    mg: MGConfig = field(default_factory=MGConfig)


@dataclass
class OutputConfig:
    dir: str = "out"
    vtu_every: int = 0  # 0 disables snapshots
    csv: bool = True


@dataclass
class SimConfig:
    testcase: str = "taylor_green"
    n: int = 8
    k: int = 1
    tableau: str = "imex_euler"
    T: float = 1.0
    dt: float = None
    n_t: int = None
    n_R: int = 2
    alpha: float = 1.0
    tau: float = 1.0
    flux: str = "upwind"
    kappa: float = 0.5
    rho: float = np.pi / 15.0
    delta: float = 0.05
    tracer: TracerConfig = field(default_factory=TracerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def delta_up(self):
        return 1.0 if self.flux == "upwind" else 0.0


def _apply(obj, table, prefix=""):
    for key, value in table.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown key '{prefix}{key}'")
        current = getattr(obj, key)
        if isinstance(value, dict):
            if not hasattr(current, "__dataclass_fields__"):
                raise ConfigError(f"'{prefix}{key}' is not a section")
            _apply(current, value, prefix=f"{prefix}{key}.")
        else:
            setattr(obj, key, value)


def _validate(cfg):
    def bad(key, why):
        raise ConfigError(f"invalid '{key}': {why}")

    if cfg.testcase not in ("taylor_green", "shear_flow"):
        bad("testcase", f"'{cfg.testcase}' not a known testcase")
    if cfg.n < 2:
        bad("n", "grid size must be at least 2")
    if cfg.k not in (1, 2, 3):
        bad("k", "polynomial degree must be 1, 2 or 3")
    if cfg.flux not in ("upwind", "central"):
        bad("flux", f"'{cfg.flux}' not a known flux")
    if cfg.T <= 0:
        bad("T", "final time must be positive")
    if cfg.n_R < 1:
        bad("n_R", "at least one defect-correction sweep is required")
    for key in ("pressure_rtol", "velocity_rtol"):
        if getattr(cfg.solver, key) <= 0:
            bad(f"solver.{key}", "tolerance must be positive")
    if cfg.solver.maxit < 1:
        bad("solver.maxit", "must be positive")
    if cfg.tracer.ic not in ("gaussian", "sine"):
        bad("tracer.ic", f"'{cfg.tracer.ic}' not a known profile")

    # timestep bookkeeping: dt * n_t = T, derive whichever is missing
    if cfg.dt is None and cfg.n_t is None:
        cfg.n_t = cfg.n
        cfg.dt = cfg.T / cfg.n_t
    elif cfg.dt is None:
        if cfg.n_t < 0:
            bad("n_t", "must be non-negative")
        cfg.dt = cfg.T / cfg.n_t if cfg.n_t > 0 else cfg.T
    elif cfg.n_t is None:
        if cfg.dt <= 0:
            bad("dt", "must be positive")
        cfg.n_t = int(round(cfg.T / cfg.dt))
    elif abs(cfg.dt * cfg.n_t - cfg.T) > 1e-12 * max(cfg.T, 1.0):
        bad("dt", f"dt * n_t = {cfg.dt * cfg.n_t!r} but T = {cfg.T!r}")
    if cfg.tracer.degree is None:
        cfg.tracer.degree = cfg.k
    return cfg


def load_table(source):
    """Raw TOML table from a file path or inline text."""
    text = source
    if "\n" not in source and not source.lstrip().startswith("["):
        try:
            with open(source) as fh:
                text = fh.read()
        except FileNotFoundError:
            pass  # treat as inline text (e.g. a single assignment)
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc


def from_table(table):
    cfg = SimConfig()
    _apply(cfg, table)
    return _validate(cfg)


def parse_config(source):
    """Build a SimConfig from a file path or inline TOML text."""
    return from_table(load_table(source))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"%s"' % value
    return str(value)


def echo_config(cfg):
    """Serialise the effective configuration; parses back to an equal config."""
    d = asdict(cfg)
    lines = []
    sections = []
    for key, value in d.items():
        if isinstance(value, dict):
            sections.append((key, value))
        else:
            lines.append(f"{key} = {_fmt(value)}")
    for name, table in sections:
        lines.append(f"\n[{name}]")
        for key, value in table.items():
            if isinstance(value, dict):
                lines.append(f"\n[{name}.{key}]")
                for k2, v2 in value.items():
                    lines.append(f"{k2} = {_fmt(v2)}")
            else:
                lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"
