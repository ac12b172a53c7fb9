"""Run configuration: an INI file whose values are JSON literals.

Example::

    [system]
    matrix = [[3]]
    digits = [[0], [2]]
    mode = exact-integer

    [norm]
    variant = exact

    [measure]
    depth = 14

Values that fail to parse as JSON are kept as bare strings, so ``mode =
exact-integer`` and ``mode = "exact-integer"`` are equivalent.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, SelfAffineError
from .io import content_hash
from .linalg import MODES, ExpandingSystem, make_system
from .pseudo_norm import VARIANTS


@dataclass
class SystemSection:
    matrix: list = field(default_factory=list)
    digits: list = field(default_factory=list)
    mode: str | None = None
    tau: float = 1e-9
    theta: float | None = None


@dataclass
class NormSection:
    variant: str = "mollified"
    delta: float = 0.25
    grid_step: float | None = None
    quad_nodes: int | None = None
    max_interp_error: float = 0.05


@dataclass
class BudgetSection:
    max_depth: int = 12
    points: int = 10**7
    states: int = 10**6


@dataclass
class MeasureSection:
    depth: int | None = None
    schedule: list | None = None
    family: str = "both"
    fold: int = 10
    sigma_depth: int | None = None
    refine: int = 4
    lo_windows: int = 512
    max_centers: int = 2048


@dataclass
class DensitySection:
    depth: int | None = None
    family: str = "both"
    trace_point: list | None = None
    radii: list = field(default_factory=lambda: [0.5, 0.25, 0.125])
    dim_depth: int | None = None


@dataclass
class RenderSection:
    depth: int = 8
    samples: int = 0
    width: int = 512
    height: int = 512
    format: str = "pgm"


@dataclass
class ProbeSection:
    points: str | None = None
    samples: int = 64
    eps: float = 0.1


SECTIONS = {
    "system": SystemSection,
    "norm": NormSection,
    "budgets": BudgetSection,
    "measure": MeasureSection,
    "density": DensitySection,
    "render": RenderSection,
    "probe": ProbeSection,
}


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    norm: NormSection = field(default_factory=NormSection)
    budgets: BudgetSection = field(default_factory=BudgetSection)
    measure: MeasureSection = field(default_factory=MeasureSection)
    density: DensitySection = field(default_factory=DensitySection)
    render: RenderSection = field(default_factory=RenderSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    seed: int = 0
    threads: int = 1
    out: str = "out"
    base_dir: str = "."

    def resolved(self) -> dict:
        """Every setting that can change an output, with defaults filled in.

        ``threads`` and ``out`` are left out: outputs do not depend on them.
        """
        d = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        d["seed"] = self.seed
        return d

    @property
    def hash(self) -> str:
        return content_hash(self.resolved())

    def build_system(self) -> ExpandingSystem:
        """Validate the matrix and digits and return the system.

        Raises
        ------
        ConfigError
            Wrapping any validation failure (not expanding, singular, bad
            digits, unknown mode).
        """
        s = self.system
        try:
            return make_system(s.matrix, s.digits, mode=s.mode, tau=s.tau, theta=s.theta)
        except ConfigError:
            raise
        except (SelfAffineError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid system: {exc}") from exc


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _fill(cls, items: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**{k: _value(v) for k, v in items.items()})


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    """Parse INI text into a :class:`RunConfig` and check value ranges."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    cfg = RunConfig(base_dir=str(base_dir))
    for name in cp.sections():
        if name == "run":
            for k, v in cp.items(name):
                if k not in ("seed", "threads", "out"):
                    raise ConfigError(f"unknown key in [run]: {k}")
                setattr(cfg, k, _value(v))
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        setattr(cfg, name, _fill(SECTIONS[name], dict(cp.items(name)), name))
    check(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, base_dir=p.parent)


def check(cfg: RunConfig) -> None:
    """Range checks that do not need the linear algebra."""
    s = cfg.system
    if not s.matrix or not s.digits:
        raise ConfigError("[system] needs both matrix and digits")
    if s.mode is not None and s.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if not isinstance(s.tau, (int, float)) or s.tau <= 0:
        raise ConfigError("tau must be a positive number")
    if cfg.norm.variant not in VARIANTS:
        raise ConfigError(f"norm variant must be one of {VARIANTS}")
    if not 0 < cfg.norm.delta < 0.5:
        raise ConfigError("delta must lie in (0, 1/2)")
    b = cfg.budgets
    for k in ("max_depth", "points", "states"):
        v = getattr(b, k)
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"budgets.{k} must be a positive integer")
    if cfg.measure.family not in ("boxes", "balls", "both"):
        raise ConfigError("measure.family must be boxes, balls or both")
    if cfg.render.format not in ("pgm", "ppm"):
        raise ConfigError("render.format must be pgm or ppm")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
