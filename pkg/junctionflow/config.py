"""Configuration management for junctionflow."""

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from junctionflow.edge_transport import BoundaryData
from junctionflow.errors import (
    ConfigError,
    ConservationViolated,
    ExpressionError,
    MatchingViolated,
    MOrderTooSmall,
    SupportViolation,
    WrongSign,
)
from junctionflow.expressions import Expression
from junctionflow.geometry import EDGES, NetworkSpec, check_network, transverse_axes
from junctionflow.orders import minimal_M
from junctionflow.velocity import EdgeVelocity, VelocityField, check_conservation

SCHEMA_VERSION = 1
MODES = ("expand", "reference", "verify", "sweep")

DEFAULT_CONFIG: Dict[str, Dict[str, str]] = {
    "run": {
        "schema_version": "1",
        "mode": "expand",
        "seed": "0",
        "threads": "1",
        "M": "2",
    },
    "network": {
        "eps": "0.1",
        "alpha": "0.5",
        "gamma": "0.85",
        "T": "1.0",
        "ell0": "0.3",
        "ell1": "1.0",
        "ell2": "1.0",
        "ell3": "1.0",
        "h1": "0.2",
        "h2": "0.2",
        "h3": "0.2",
        "node_shape": "cube",
    },
    "velocity": {
        "v1": "-2",
        "v2": "1",
        "v3": "1",
        "vbar1": "0; 0",
        "vbar2": "0; 0",
        "vbar3": "0; 0",
        "delta1": "0.25",
        "delta2": "0.25",
        "delta3": "0.25",
    },
    "data": {
        "q1": "step(t, 0, 0.5)",
        "q2": "0.5*step(t, 0, 0.5)",
        "q3": "0.5*step(t, 0, 0.5)",
        "phi0": "0.5*step(t, 0, 0.5)*step(-xi1, 0.2, 0.25)",
        "phi1": "step(t, 0, 0.5)*plateau(x, 0.3, 0.4, 0.6, 0.7)",
        "phi2": "step(t, 0, 0.5)*plateau(x, 0.3, 0.4, 0.6, 0.7)",
        "phi3": "step(t, 0, 0.5)*plateau(x, 0.3, 0.4, 0.6, 0.7)",
    },
    "numerics": {
        "edge_nx": "100",
        "edge_nt": "201",
        "n_quad": "16",
        "disk_nr": "16",
        "disk_ntheta": "32",
        "node_spacing": "0.05",
        "trunc_len": "3.0",
        "node_samples": "32",
        "node_solver": "direct",
        "node_tol": "1e-10",
        "solvability_tol": "1e-6",
        "truncation_tol": "1e-4",
        "truncation_check": "warn",
        "derivative_mode": "solve",
        "delta": "auto",
        "ref_cells_per_radius": "6",
        "ref_dt": "0.01",
        "ref_scheme": "euler",
        "ref_limiter": "true",
    },
    "verification": {
        "eps_list": "0.3, 0.2, 0.15",
        "M_list": "1",
        "samples": "10000",
        "slope_tol": "0.25",
        "self_check": "false",
    },
    "output": {
        "out_dir": "results",
        "formats": "csv",
        "monitor_points": "0.5, 0, 0; 0, 0.5, 0; 0, 0, 0.5",
    },
}


class Config:
    """Configuration manager: a sectioned key-value file addressed by dotted keys."""

    def __init__(self, config_file: Optional[Path] = None):
        """Initialize configuration manager."""
        if config_file is None:
            config_file = Path.home() / ".junctionflow" / "config.ini"
        self.config_file = Path(config_file)
        self.config_dir = self.config_file.parent
        self._parser = self._new_parser()
        self.load()

    @staticmethod
    def _new_parser() -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
        parser.optionxform = str  # type: ignore[assignment,method-assign]
        return parser

    @staticmethod
    def _split(key: str) -> Tuple[str, str]:
        if "." not in key:
            raise ConfigError(f"Config keys are 'section.name', got '{key}'")
        section, name = key.split(".", 1)
        return section, name

    def load(self) -> None:
        """Load configuration from file."""
        self._parser = self._new_parser()
        if self.config_file.exists():
            try:
                self._parser.read(self.config_file)
            except configparser.Error as e:
                raise ConfigError(f"Cannot parse {self.config_file}: {e}") from e

    def save(self) -> None:
        """Save configuration to file."""
        self.config_dir.mkdir(parents=True, exist_ok=True)
        with open(self.config_file, "w") as f:
            self._parser.write(f)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value."""
        section, name = self._split(key)
        if self._parser.has_option(section, name):
            return self._parser.get(section, name)
        return default

    def set(self, key: str, value: Any) -> None:
        """Set configuration value."""
        section, name = self._split(key)
        if not self._parser.has_section(section):
            self._parser.add_section(section)
        self._parser.set(section, name, str(value))
        self.save()

    def delete(self, key: str) -> None:
        """Delete configuration value."""
        section, name = self._split(key)
        if self._parser.has_option(section, name):
            self._parser.remove_option(section, name)
            self.save()

    def lookup(self, key: str) -> str:
        """Value of a key, falling back to the default scenario."""
        section, name = self._split(key)
        value = self.get(key)
        if value is None:
            value = DEFAULT_CONFIG.get(section, {}).get(name)
        if value is None:
            raise ConfigError(f"Missing config key '{key}'")
        return str(value).strip()

    def as_dict(self) -> Dict[str, Dict[str, str]]:
        return {s: dict(self._parser.items(s)) for s in self._parser.sections()}


def write_default_config(path: Path) -> Path:
    """Write the default scenario to path."""
    config = Config(path)
    for section, values in DEFAULT_CONFIG.items():
        for name, value in values.items():
            if not config._parser.has_section(section):
                config._parser.add_section(section)
            config._parser.set(section, name, value)
    config.save()
    return config.config_file


# ---------------------------------------------------------------- validated run settings


@dataclass(frozen=True)
class Numerics:
    """Grid sizes, tolerances and solver choices."""

    edge_nx: int = 100
    edge_nt: int = 201
    n_quad: int = 16
    disk_nr: int = 16
    disk_ntheta: int = 32
    node_spacing: float = 0.05
    trunc_len: float = 3.0
    node_samples: int = 32
    node_solver: str = "direct"
    node_tol: float = 1e-10
    solvability_tol: float = 1e-6
    truncation_tol: float = 1e-4
    truncation_check: str = "warn"
    derivative_mode: str = "solve"
    delta: Optional[float] = None
    ref_cells_per_radius: int = 6
    ref_dt: float = 0.01
    ref_scheme: str = "euler"
    ref_limiter: bool = True

    def base_delta(self, spec: NetworkSpec) -> float:
        return self.delta if self.delta is not None else min(spec.ell) / 10.0


@dataclass(frozen=True)
class Verification:
    eps_list: Tuple[float, ...] = (0.3, 0.2, 0.15)
    M_list: Tuple[int, ...] = (1,)
    samples: int = 10000
    slope_tol: float = 0.25
    self_check: bool = False


@dataclass(frozen=True)
class Output:
    out_dir: Path = Path("results")
    formats: Tuple[str, ...] = ("csv",)
    monitor_points: Tuple[Tuple[float, float, float], ...] = ((0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5))


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, checked against the model assumptions."""

    network: NetworkSpec
    velocity: VelocityField
    data: BoundaryData
    mode: str = "expand"
    M: int = 2
    seed: int = 0
    threads: int = 1
    numerics: Numerics = field(default_factory=Numerics)
    verification: Verification = field(default_factory=Verification)
    output: Output = field(default_factory=Output)
    source: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def with_overrides(
        self,
        mode: Optional[str] = None,
        out_dir: Optional[Path] = None,
        eps: Optional[float] = None,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
    ) -> "RunConfig":
        network = self.network if eps is None else self.network.with_eps(eps)
        if eps is not None:
            check_network(network)
        velocity = self.velocity if eps is None else replace(self.velocity, spec=network)
        return replace(
            self,
            network=network,
            velocity=velocity,
            mode=self.mode if mode is None else mode,
            seed=self.seed if seed is None else seed,
            threads=self.threads if threads is None else threads,
            output=self.output if out_dir is None else replace(self.output, out_dir=Path(out_dir)),
        )


def _number(config: Config, key: str, kind: type = float) -> Any:
    text = config.lookup(key)
    try:
        return kind(float(text)) if kind is int else kind(text)
    except ValueError as e:
        raise ConfigError(f"'{key}' must be a {kind.__name__}, got '{text}'") from e


def _flag(config: Config, key: str) -> bool:
    text = config.lookup(key).lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"'{key}' must be a boolean, got '{text}'")


def _expression(config: Config, key: str, variables: Tuple[str, ...]) -> Expression:
    try:
        return Expression(config.lookup(key), variables)
    except ExpressionError as e:
        raise ExpressionError(f"{key}: {e}") from e


def _vanishes(expr: Expression, tol: float = 1e-12, **values: Any) -> bool:
    return bool(np.all(np.abs(expr(**values)) <= tol))


def _network(config: Config) -> NetworkSpec:
    spec = NetworkSpec(
        ell0=_number(config, "network.ell0"),
        ell=tuple(_number(config, f"network.ell{i}") for i in EDGES),  # type: ignore[arg-type]
        h=tuple(_number(config, f"network.h{i}") for i in EDGES),  # type: ignore[arg-type]
        eps=_number(config, "network.eps"),
        alpha=_number(config, "network.alpha"),
        gamma=_number(config, "network.gamma"),
        T=_number(config, "network.T"),
        node_shape=config.lookup("network.node_shape"),
    )
    check_network(spec)
    return spec


def _velocity(config: Config, spec: NetworkSpec, delta: float) -> VelocityField:
    edges = []
    for i in EDGES:
        axial = _expression(config, f"velocity.v{i}", ("x",))
        pair = config.lookup(f"velocity.vbar{i}").split(";")
        if len(pair) != 2:
            raise ConfigError(f"velocity.vbar{i} must hold two expressions separated by ';'")
        vbar = tuple(Expression(p.strip(), ("x", "y1", "y2")) for p in pair)
        plateau = _number(config, f"velocity.delta{i}")
        if plateau <= 0 or plateau >= spec.length(i):
            raise ConfigError(f"velocity.delta{i} must lie in (0, ell{i})")

        xs = np.linspace(0.0, spec.length(i), 401)
        v = axial(x=xs)
        if (i == 1 and np.any(v >= 0)) or (i != 1 and np.any(v <= 0)):
            raise WrongSign(f"v{i} must be {'negative' if i == 1 else 'positive'} on [0, ell{i}]")
        near = xs[xs <= plateau]
        if np.ptp(axial(x=near)) > 1e-12 * max(1.0, abs(v[0])):
            raise SupportViolation(f"v{i} must be constant on [0, delta{i}] = [0, {plateau}]")

        r = np.linspace(0.0, spec.radius(i), 5)
        th = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
        rr, tt = np.meshgrid(r, th)
        y1, y2 = rr.ravel() * np.cos(tt.ravel()), rr.ravel() * np.sin(tt.ravel())
        quiet = np.concatenate([near, xs[xs >= spec.length(i) - 2 * delta]])
        for comp in vbar:
            if not _vanishes(comp, x=quiet[:, None], y1=y1[None, :], y2=y2[None, :]):
                raise SupportViolation(f"vbar{i} must vanish near the node and near the base of edge {i}")
        edges.append(EdgeVelocity(i, axial, vbar, float(v[0]), plateau))  # type: ignore[arg-type]

    speeds = [e.const_near_node for e in edges]
    try:
        check_conservation(spec, speeds)
    except ConservationViolated as e:
        raise ConservationViolated(f"{e} (weighted flux balance at the node)", defect=e.defect) from e
    return VelocityField(spec, tuple(edges))  # type: ignore[arg-type]


def _data(config: Config, spec: NetworkSpec, velocity: VelocityField, delta: float) -> BoundaryData:
    q = tuple(_expression(config, f"data.q{i}", ("t",)) for i in EDGES)
    phi = tuple(_expression(config, f"data.phi{i}", ("theta", "x", "t")) for i in EDGES)
    phi0 = _expression(config, "data.phi0", ("xi1", "xi2", "xi3", "t"))
    ts = np.linspace(0.0, spec.T, 201)

    for i, qi in zip(EDGES, q):
        if np.any(qi(t=ts) < -1e-14):
            raise ConfigError(f"q{i} must be nonnegative")
        if not (_vanishes(qi, t=0.0) and _vanishes(qi.diff("t"), t=0.0)):
            raise MatchingViolated(f"q{i} and its first derivative must vanish at t = 0")

    theta = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)[:, None]
    for i, phi_i in zip(EDGES, phi):
        xs = np.linspace(0.0, spec.length(i), 201)[None, :]
        if not _vanishes(phi_i, theta=theta, x=xs, t=0.0):
            raise MatchingViolated(f"phi{i} must vanish at t = 0")
        plateau = velocity.edge(i).node_support
        ends = np.concatenate(
            [xs[0][xs[0] <= plateau], xs[0][xs[0] >= spec.length(i) - 2 * delta]]
        )[None, :, None]
        if not _vanishes(phi_i, theta=theta[..., None], x=ends, t=ts[None, None, ::20]):
            raise SupportViolation(f"phi{i} must vanish near both ends of edge {i}")

    face = np.linspace(-spec.ell0, spec.ell0, 25)
    a, b = np.meshgrid(face, face)
    for i in EDGES:
        axis = i - 1
        ta, tb = transverse_axes(i)
        for sign in (1.0, -1.0):
            pts = np.zeros((a.size, 3))
            pts[:, axis] = sign * spec.ell0
            pts[:, ta], pts[:, tb] = a.ravel(), b.ravel()
            if not _vanishes(phi0, xi1=pts[:, 0], xi2=pts[:, 1], xi3=pts[:, 2], t=0.0):
                raise MatchingViolated("phi0 must vanish at t = 0")
            if sign > 0:
                near = np.hypot(pts[:, ta], pts[:, tb]) <= spec.radius(i) * 1.05
                sel = pts[near]
                for tk in ts[::20]:
                    if not _vanishes(phi0, xi1=sel[:, 0], xi2=sel[:, 1], xi3=sel[:, 2], t=tk):
                        raise SupportViolation(f"phi0 must vanish near port {i}")
    return BoundaryData(q, phi, phi0, spec.h)  # type: ignore[arg-type]


def _numerics(config: Config) -> Numerics:
    delta_text = config.lookup("numerics.delta")
    numerics = Numerics(
        edge_nx=_number(config, "numerics.edge_nx", int),
        edge_nt=_number(config, "numerics.edge_nt", int),
        n_quad=_number(config, "numerics.n_quad", int),
        disk_nr=_number(config, "numerics.disk_nr", int),
        disk_ntheta=_number(config, "numerics.disk_ntheta", int),
        node_spacing=_number(config, "numerics.node_spacing"),
        trunc_len=_number(config, "numerics.trunc_len"),
        node_samples=_number(config, "numerics.node_samples", int),
        node_solver=config.lookup("numerics.node_solver"),
        node_tol=_number(config, "numerics.node_tol"),
        solvability_tol=_number(config, "numerics.solvability_tol"),
        truncation_tol=_number(config, "numerics.truncation_tol"),
        truncation_check=config.lookup("numerics.truncation_check"),
        derivative_mode=config.lookup("numerics.derivative_mode"),
        delta=None if delta_text == "auto" else _number(config, "numerics.delta"),
        ref_cells_per_radius=_number(config, "numerics.ref_cells_per_radius", int),
        ref_dt=_number(config, "numerics.ref_dt"),
        ref_scheme=config.lookup("numerics.ref_scheme"),
        ref_limiter=_flag(config, "numerics.ref_limiter"),
    )
    if numerics.node_solver not in ("bicgstab", "gmres", "direct"):
        raise ConfigError(f"unknown node_solver '{numerics.node_solver}'")
    if numerics.truncation_check not in ("warn", "error"):
        raise ConfigError(f"unknown truncation_check '{numerics.truncation_check}'")
    if numerics.derivative_mode not in ("solve", "finite-difference"):
        raise ConfigError(f"unknown derivative_mode '{numerics.derivative_mode}'")
    if numerics.ref_scheme not in ("euler", "bdf2"):
        raise ConfigError(f"unknown ref_scheme '{numerics.ref_scheme}'")
    if numerics.node_samples < 3 or numerics.edge_nt < 7 or numerics.edge_nx < 6:
        raise ConfigError("grids too small: need node_samples >= 3, edge_nt >= 7, edge_nx >= 6")
    if numerics.disk_ntheta % 2 or numerics.disk_nr < 4:
        raise ConfigError("disk_ntheta must be even and disk_nr >= 4")
    return numerics


def _float_list(text: str) -> Tuple[float, ...]:
    items = [p.strip() for p in text.split(",") if p.strip()]
    try:
        return tuple(float(p) for p in items)
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of numbers, got '{text}'") from e


def _points(text: str) -> Tuple[Tuple[float, float, float], ...]:
    points = []
    for item in (p for p in text.split(";") if p.strip()):
        coords = _float_list(item)
        if len(coords) != 3:
            raise ConfigError(f"monitor points need three coordinates, got '{item.strip()}'")
        points.append(coords)
    return tuple(points)  # type: ignore[return-value]


def validate(config: Config) -> RunConfig:
    """Parse and check a configuration; raise the named error of the first violated assumption."""
    version = _number(config, "run.schema_version", int)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    mode = config.lookup("run.mode")
    if mode not in MODES:
        raise ConfigError(f"unknown mode '{mode}', expected one of {', '.join(MODES)}")

    spec = _network(config)
    M = _number(config, "run.M", int)
    if M < minimal_M(spec.alpha):
        raise MOrderTooSmall(
            f"M = {M} is too small for alpha = {spec.alpha}: "
            f"need M > 3/2 (1 - floor(alpha)), i.e. M >= {minimal_M(spec.alpha)}"
        )
    numerics = _numerics(config)
    delta = numerics.base_delta(spec)
    if not 0 < delta < min(spec.ell) / 4:
        raise ConfigError(f"delta = {delta} must lie in (0, min(ell)/4)")
    velocity = _velocity(config, spec, delta)
    data = _data(config, spec, velocity, delta)

    eps_list = _float_list(config.lookup("verification.eps_list"))
    if any(not 0 < e < 1 for e in eps_list):
        raise ConfigError("verification.eps_list entries must lie in (0, 1)")
    M_list = tuple(int(m) for m in _float_list(config.lookup("verification.M_list")))
    if any(m < 1 for m in M_list):
        raise MOrderTooSmall("verification.M_list entries must be >= 1")
    verification = Verification(
        eps_list=eps_list,
        M_list=M_list,
        samples=_number(config, "verification.samples", int),
        slope_tol=_number(config, "verification.slope_tol"),
        self_check=_flag(config, "verification.self_check"),
    )
    output = Output(
        out_dir=Path(config.lookup("output.out_dir")),
        formats=tuple(f.strip() for f in config.lookup("output.formats").split(",") if f.strip()),
        monitor_points=_points(config.lookup("output.monitor_points")),
    )
    return RunConfig(
        network=spec,
        velocity=velocity,
        data=data,
        mode=mode,
        M=M,
        seed=_number(config, "run.seed", int),
        threads=max(1, _number(config, "run.threads", int)),
        numerics=numerics,
        verification=verification,
        output=output,
        source=config.as_dict(),
    )


def load_run_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return validate(Config(path))
