"""Scenario files: a line-oriented ``key = value`` format with ``[section]`` headers.

Example::

    [model]
    v_star = 10

    [routing]
    family = gaussian
    amplitude = 0.004

Blank lines and ``#`` comments are ignored.  Every key except ``model.v_star``
is optional; the defaults are the ``DEFAULTS`` table below, except that unset
``lyapunov.d1`` and ``lyapunov.d2`` become 2 mu* and 2 / mu*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .analysis import LyapunovSpec
from .model import ModelParams, compute_equilibrium, require_congested
from .simulator import PROFILES, SimConfig

ROUTING_FAMILIES = ("zero", "constant", "gaussian", "table")
CONTROL_METHODS = ("flat", "chain")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:" + (f"{line}: " if line is not None else " ")
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.detail = message
        self.line = line


@dataclass(frozen=True)
class RoutingSpec:
    family: str = "zero"
    amplitude: float = 0.0
    center: float | None = None  # gaussian only; default L/2
    width: float | None = None  # gaussian only; default L/10
    table: tuple[tuple[float, float], ...] | None = None

    def kwargs(self) -> dict:
        if self.family == "table":
            return {"table": list(self.table or ())}
        if self.family == "gaussian":
            return {"amplitude": self.amplitude, "center": self.center, "width": self.width}
        return {"amplitude": self.amplitude}


@dataclass(frozen=True)
class InitialSpec:
    profile: str = "bump"
    amplitude: float | None = None  # None: half the admissible bound eps


@dataclass(frozen=True)
class Scenario:
    params: ModelParams
    v_star: float
    routing: RoutingSpec = field(default_factory=RoutingSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    lyapunov: LyapunovSpec = field(default_factory=LyapunovSpec)
    out_dir: str = "out"
    strict: bool = False
    control: str = "flat"

    def equilibrium(self):
        return compute_equilibrium(self.params, self.v_star)


# section -> key -> (type, default); None default marks "required" for v_star only
DEFAULTS: dict[str, dict[str, tuple[str, object]]] = {
    "model": {"v_f": ("float", 40.0), "rho_m": ("float", 0.12), "gamma": ("float", 1.0), "tau": ("float", 60.0),
              "L": ("float", 500.0), "v_star": ("float", None)},
    "routing": {"family": ("str", "zero"), "amplitude": ("float", 0.0), "center": ("float?", None),
                "width": ("float?", None), "table": ("table", None)},
    "initial": {"profile": ("str", "bump"), "amplitude": ("float?", None)},
    "sim": {"N": ("int", 400), "cfl": ("float", 0.9), "t_final": ("float", 80.0), "record_every": ("int", 10),
            "k3": ("float", 1.0), "routing_on": ("bool", True), "strict_admissibility": ("bool", False),
            "control": ("str", "flat")},
    "lyapunov": {"delta1": ("float", 0.002), "delta2": ("float", 0.002), "delta3": ("float", 0.002),
                 "delta4": ("float", 0.002), "d1": ("float?", None), "d2": ("float?", None)},
    "output": {"dir": ("str", "out")},
}


def _convert(kind: str, raw: str, line: int, key: str):
    try:
        if kind in ("float", "float?"):
            if kind == "float?" and raw.lower() == "none":
                return None
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == "int":
            return int(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if kind == "table":
            pairs = []
            for item in raw.split(","):
                y, a = item.split(":")
                pairs.append((float(y), float(a)))
            if not all(math.isfinite(v) for p in pairs for v in p):
                raise ValueError
            return tuple(pairs)
        return raw
    except ValueError:
        hint = {"table": "comma-separated y:a pairs", "bool": "true/false"}.get(kind, f"a finite {kind.rstrip('?')}")
        raise ConfigError(f"{key} = {raw!r} is not {hint}", line) from None


def parse_text(text: str) -> Scenario:
    values: dict[str, dict[str, object]] = {s: {} for s in DEFAULTS}
    lines: dict[tuple[str, str], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno)
            section = stripped[1:-1].strip()
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]; expected one of {sorted(DEFAULTS)}", lineno)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, raw_value = (s.strip() for s in stripped.split("=", 1))
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        values[section][key] = _convert(DEFAULTS[section][key][0], raw_value, lineno, key)
        lines[(section, key)] = lineno

    def get(section, key):
        return values[section].get(key, DEFAULTS[section][key][1])

    def fail(msg, section, key):
        raise ConfigError(msg, lines.get((section, key)))

    if "v_star" not in values["model"]:
        raise ConfigError("missing required key v_star in [model]")
    try:
        params = ModelParams(v_f=get("model", "v_f"), rho_m=get("model", "rho_m"),
                             gamma_exp=get("model", "gamma"), tau=get("model", "tau"), L=get("model", "L"))
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None
    v_star = get("model", "v_star")
    try:
        require_congested(compute_equilibrium(params, v_star))
    except ValueError as exc:
        fail(str(exc), "model", "v_star")

    family = get("routing", "family")
    if family not in ROUTING_FAMILIES:
        fail(f"routing family {family!r} not in {ROUTING_FAMILIES}", "routing", "family")
    table = get("routing", "table")
    if family == "table" and (table is None or len(table) < 2):
        fail("routing family 'table' needs at least two y:a pairs in 'table'", "routing", "family")
    width = get("routing", "width")
    if width is not None and width <= 0:
        fail("gaussian width must be positive", "routing", "width")
    routing = RoutingSpec(family=family, amplitude=get("routing", "amplitude"), center=get("routing", "center"),
                          width=width, table=table)

    profile = get("initial", "profile")
    if profile not in PROFILES:
        fail(f"initial profile {profile!r} not in {PROFILES}", "initial", "profile")
    initial = InitialSpec(profile=profile, amplitude=get("initial", "amplitude"))

    control = get("sim", "control")
    if control not in CONTROL_METHODS:
        fail(f"control evaluation {control!r} not in {CONTROL_METHODS}", "sim", "control")
    try:
        sim = SimConfig(N=get("sim", "N"), cfl=get("sim", "cfl"), t_final=get("sim", "t_final"),
                        record_every=get("sim", "record_every"), k3=get("sim", "k3"),
                        routing_on=get("sim", "routing_on"))
    except ValueError as exc:
        raise ConfigError(f"[sim] {exc}") from None

    eq = compute_equilibrium(params, v_star)
    weights = {k: get("lyapunov", k) for k in DEFAULTS["lyapunov"]}
    # unset d1, d2 default to twice their lower limits mu* and 1/mu*
    if weights["d1"] is None:
        weights["d1"] = 2.0 * eq.mu_star
    if weights["d2"] is None:
        weights["d2"] = 2.0 / eq.mu_star
    lyap = LyapunovSpec(**weights)
    try:
        lyap.validate(eq)
    except ValueError as exc:
        raise ConfigError(f"[lyapunov] {exc}") from None

    return Scenario(params=params, v_star=v_star, routing=routing, initial=initial, sim=sim, lyapunov=lyap,
                    out_dir=get("output", "dir"), strict=get("sim", "strict_admissibility"), control=control)


def parse_config(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from None
    try:
        return parse_text(text)
    except ConfigError as exc:
        raise ConfigError(exc.detail, exc.line, path=str(path)) from None


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(f"{y!r}:{a!r}" for y, a in value)
    return str(value)


def dump_scenario(sc: Scenario) -> str:
    """Config text that parses back to ``sc``; None-valued optional keys are omitted."""
    p = sc.params
    sections = {
        "model": {"v_f": p.v_f, "rho_m": p.rho_m, "gamma": p.gamma_exp, "tau": p.tau, "L": p.L, "v_star": sc.v_star},
        "routing": {"family": sc.routing.family, "amplitude": sc.routing.amplitude, "center": sc.routing.center,
                    "width": sc.routing.width, "table": sc.routing.table},
        "initial": {"profile": sc.initial.profile, "amplitude": sc.initial.amplitude},
        "sim": {"N": sc.sim.N, "cfl": sc.sim.cfl, "t_final": sc.sim.t_final, "record_every": sc.sim.record_every,
                "k3": sc.sim.k3, "routing_on": sc.sim.routing_on, "strict_admissibility": sc.strict,
                "control": sc.control},
        "lyapunov": {f.name: getattr(sc.lyapunov, f.name) for f in fields(sc.lyapunov)},
        "output": {"dir": sc.out_dir},
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items.items() if v is not None)
        out.append("")
    return "\n".join(out)
