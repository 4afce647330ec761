"""Scenario configuration: schema, defaults, validation, YAML round-trip.

A scenario file is a nested mapping with sections for the curve, the swarm,
the mission, the tracker, the network, failures, targets, and engine
options. Parsing validates everything it can and reports the full list of
problems at once instead of stopping at the first. Fields marked "auto" in
the file (or simply omitted) are derived: the sensing radius from the
detection bound, the cycle count p from the stability window, kappa from
gcd(N, p), and integration substeps from the coupling-stability guard.
"""

import math
from dataclasses import dataclass, replace

import yaml

from .coordination import EquilibriumSpec, SwarmParams, stable_p_set
from .curve import LissajousParams
from .netsim import NetworkConfig
from .planning import MissionSpec, default_p, inflated_radius, min_radius_detection
from .tracker import MpcConfig

FAILURE_KINDS = ("type2", "absent", "stall")
TRACKER_MODES = ("mpc", "ideal")


class ConfigError(ValueError):
    """Carries every schema problem found in one parse pass."""

    def __init__(self, errors):
        self.errors = tuple(errors)
        lines = "\n".join(f"  - {e}" for e in self.errors)
        super().__init__(f"invalid scenario config:\n{lines}")


@dataclass(frozen=True)
class FailureEvent:
    robot: int
    start: float
    duration: float
    kind: str = "type2"


@dataclass(frozen=True)
class TargetSpec:
    count: int = 0
    speed: float = 1.0


@dataclass(frozen=True)
class SimOptions:
    """Engine knobs that are not part of the physical problem statement."""

    tracker_mode: str = "mpc"
    openloop: bool = False
    resilience: bool = True
    preseed_spacing: bool = False
    spoof_stalled: bool = False
    comm_period: int = 10            # ticks between phase broadcasts
    control_period: int = 0          # ticks between tracker solves; 0 = auto
    measurement_noise: float = 0.1   # m, added to positions before projection
    disturbance: float = 0.0         # m/s^2, seeded lateral acceleration noise
    z_safety: bool = True
    z_threshold: float = 0.0         # m, 0 = twice the encumbrance bound
    z_offset: float = 1.0            # m
    coverage_cell: float = 0.0       # m, 0 = sized from the mission extent
    coverage_period: int = 10        # ticks between coverage grid updates
    coverage_radius: float = 0.0     # m, 0 = the mission sensing radius
    log_period: int = 1              # ticks between trace rows
    initial_perturbation: float = 0.0  # rad, uniform +- on starting phases
    p_out: tuple = ()                # parking point; () = outside corner
    exit_speed: float = 5.0          # m/s toward p_out in ideal mode
    rejoin_phase_rate: float = 0.0   # rad/s steering cap; 0 = 10 * omega
    tau_fail: float = 1.0            # s of silence that flags a neighbor
    eps_th: float = 0.0              # rad rejoin guard; 0 = 15% of spacing
    capture_threshold: float = 0.05  # residual gate for spacing captures
    alpha: float = 0.05              # spacing estimate smoothing weight


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    curve: LissajousParams
    swarm: SwarmParams
    eq: EquilibriumSpec
    mission: MissionSpec
    tracker: MpcConfig
    network: NetworkConfig
    failures: tuple
    targets: TargetSpec
    duration: float
    seed: int
    options: SimOptions
    override_guarantees: bool = False


_MISSING = object()
_AUTO = "auto"


class _Reader:
    """Pulls typed values out of one nested mapping, accumulating errors."""

    def __init__(self, data, errors):
        self.data = data
        self.errors = errors

    def section(self, name):
        sec = self.data.get(name, {})
        if sec is None:
            sec = {}
        if not isinstance(sec, dict):
            self.errors.append(f"{name}: expected a mapping")
            sec = {}
        return sec

    def value(self, sec, path, key, kind, default=_MISSING, low=None,
              strict_low=False, allow_auto=False):
        full = f"{path}.{key}" if path else key
        if key not in sec:
            if default is _MISSING:
                self.errors.append(f"{full}: required key missing")
                return None
            return default
        raw = sec[key]
        if allow_auto and raw == _AUTO:
            return _AUTO
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            raw = float(raw)
        if kind is int and isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        if not isinstance(raw, kind) or isinstance(raw, bool) and kind is not bool:
            self.errors.append(f"{full}: expected {kind.__name__}, got {raw!r}")
            return None if default is _MISSING else default
        if low is not None and (raw < low or (strict_low and raw == low)):
            op = ">" if strict_low else ">="
            self.errors.append(f"{full}: must be {op} {low}, got {raw}")
            return None if default is _MISSING else default
        return raw


def _build_dataclass(factory, kwargs, path, errors):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        errors.append(f"{path}: {exc}")
        return None


def build_config(data):
    """Validate a raw mapping and assemble a ScenarioConfig.

    Raises ConfigError listing every problem found.
    """
    errors = []
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a mapping"])
    known = {
        "name", "curve", "swarm", "mission", "tracker", "network",
        "failures", "failures_auto", "targets", "duration", "seed",
        "options", "override_guarantees",
    }
    for key in data:
        if key not in known:
            errors.append(f"{key}: unknown top-level key")
    r = _Reader(data, errors)

    name = r.value(data, "", "name", str, default="scenario")
    duration = r.value(data, "", "duration", float, low=0.0, strict_low=True)
    seed = r.value(data, "", "seed", int, default=0)
    override = r.value(data, "", "override_guarantees", bool, default=False)

    for section, allowed in (
        ("curve", {"A", "B", "C", "a", "b", "c", "phi"}),
        ("swarm", {"n", "omega", "coupling", "dt", "substeps", "p", "theta0"}),
        ("mission", {"r_s", "eta", "kappa"}),
        ("network", {"base_delay", "jitter", "drop_prob", "seed",
                     "per_link_overrides"}),
        ("targets", {"count", "speed"}),
    ):
        for key in r.section(section):
            if key not in allowed:
                errors.append(f"{section}.{key}: unknown field")

    csec = r.section("curve")
    curve_kwargs = {
        "A": r.value(csec, "curve", "A", float, low=0.0, strict_low=True),
        "B": r.value(csec, "curve", "B", float, low=0.0, strict_low=True),
        "C": r.value(csec, "curve", "C", float, default=0.0),
        "a": r.value(csec, "curve", "a", int, low=1),
        "b": r.value(csec, "curve", "b", int, low=1),
        "c": r.value(csec, "curve", "c", int, default=0),
        "phi": r.value(csec, "curve", "phi", float, default=0.0),
    }
    curve = None
    if not any(v is None for v in curve_kwargs.values()):
        curve = _build_dataclass(LissajousParams, curve_kwargs, "curve", errors)

    ssec = r.section("swarm")
    n = r.value(ssec, "swarm", "n", int, low=2)
    omega = r.value(ssec, "swarm", "omega", float, low=0.0, strict_low=True)
    coupling = r.value(ssec, "swarm", "coupling", float, low=0.0)
    dt = r.value(ssec, "swarm", "dt", float, low=0.0, strict_low=True)
    theta0 = r.value(ssec, "swarm", "theta0", float, default=0.0)
    p = r.value(ssec, "swarm", "p", int, default=_AUTO, allow_auto=True)
    substeps = r.value(ssec, "swarm", "substeps", int, default=_AUTO,
                       low=1, allow_auto=True)

    msec = r.section("mission")
    eta = r.value(msec, "mission", "eta", float, default=1.0)
    kappa = r.value(msec, "mission", "kappa", int, default=_AUTO,
                    low=1, allow_auto=True)
    r_s = r.value(msec, "mission", "r_s", float, default=_AUTO,
                  low=0.0, strict_low=True, allow_auto=True)

    eq = None
    swarm = None
    if None not in (n, omega, coupling, dt):
        if kappa == _AUTO and p == _AUTO:
            kappa = 1
        if p == _AUTO:
            try:
                p = default_p(n, kappa)
            except ValueError as exc:
                errors.append(f"swarm.p: {exc}")
        if p is not None and p != _AUTO:
            if n >= 2 and p not in stable_p_set(n):
                errors.append(
                    f"swarm.p: p={p} is not a stable cycle count for n={n}"
                )
            else:
                eq = _build_dataclass(
                    EquilibriumSpec,
                    {"n_robots": n, "p": p, "theta0": theta0},
                    "swarm", errors,
                )
        if kappa == _AUTO and eq is not None:
            kappa = eq.kappa
        if eq is not None and kappa is not None and kappa != eq.kappa:
            errors.append(
                f"mission.kappa: {kappa} contradicts gcd(n, p) = {eq.kappa}"
            )
        if substeps == _AUTO:
            substeps = max(1, math.ceil(coupling * dt / 0.5))
        if substeps is not None:
            swarm = _build_dataclass(
                SwarmParams,
                {"n_robots": n, "omega": omega, "coupling": coupling,
                 "dt": dt, "substeps": substeps},
                "swarm", errors,
            )

    mission = None
    if curve is not None and eq is not None and None not in (eta, r_s, kappa):
        if r_s == _AUTO:
            try:
                r_s = inflated_radius(
                    min_radius_detection(curve.A, curve.B, n, kappa), eta
                )
            except ValueError as exc:
                errors.append(f"mission.r_s: {exc}")
        if r_s is not None and r_s != _AUTO:
            mission = _build_dataclass(
                MissionSpec,
                {"A": curve.A, "B": curve.B, "r_s": r_s,
                 "eta": eta, "kappa": kappa},
                "mission", errors,
            )

    tsec = r.section("tracker")
    tracker_kwargs = {}
    for fname, ftype in (
        ("horizon", int), ("dt", float), ("q_pos", float), ("q_vel", float),
        ("r_jerk", float), ("v_max", float), ("a_max", float),
        ("j_max", float), ("eps", float), ("max_iter", int),
        ("rho", float), ("sigma", float), ("alpha", float),
    ):
        if fname in tsec:
            val = r.value(tsec, "tracker", fname, ftype)
            if val is not None:
                tracker_kwargs[fname] = val
    for key in tsec:
        if key not in MpcConfig.__dataclass_fields__:
            errors.append(f"tracker.{key}: unknown field")
    tracker = _build_dataclass(MpcConfig, tracker_kwargs, "tracker", errors)

    nsec = r.section("network")
    net_kwargs = {
        "base_delay": r.value(nsec, "network", "base_delay", float,
                              default=0.0, low=0.0),
        "jitter": r.value(nsec, "network", "jitter", float,
                          default=0.0, low=0.0),
        "drop_prob": r.value(nsec, "network", "drop_prob", float, default=0.0),
        "seed": r.value(nsec, "network", "seed", int,
                        default=seed if seed is not None else 0),
    }
    overrides = nsec.get("per_link_overrides")
    if overrides is not None:
        net_kwargs["per_link_overrides"] = _parse_link_overrides(
            overrides, errors
        )
    network = None
    if not any(v is None for v in net_kwargs.values()):
        network = _build_dataclass(NetworkConfig, net_kwargs, "network", errors)

    failures = _parse_failures(r, data, n, duration, errors)

    gsec = r.section("targets")
    targets = _build_dataclass(
        TargetSpec,
        {"count": r.value(gsec, "targets", "count", int, default=0, low=0),
         "speed": r.value(gsec, "targets", "speed", float, default=1.0,
                          low=0.0)},
        "targets", errors,
    )
    if targets is not None and None in (targets.count, targets.speed):
        targets = TargetSpec()

    options = _parse_options(r, errors)

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(
        name=name, curve=curve, swarm=swarm, eq=eq, mission=mission,
        tracker=tracker, network=network, failures=failures, targets=targets,
        duration=duration, seed=seed, options=options,
        override_guarantees=override,
    )


def _parse_link_overrides(raw, errors):
    out = {}
    if not isinstance(raw, dict):
        errors.append("network.per_link_overrides: expected a mapping")
        return None
    for key, val in raw.items():
        try:
            src, dst = (int(part) for part in str(key).split("-"))
        except ValueError:
            errors.append(
                f"network.per_link_overrides: key {key!r} is not 'src-dst'"
            )
            continue
        if not isinstance(val, dict):
            errors.append(f"network.per_link_overrides.{key}: expected a mapping")
            continue
        out[(src, dst)] = {str(k): float(v) for k, v in val.items()}
    return out


def _parse_failures(r, data, n, duration, errors):
    events = []
    raw = data.get("failures", [])
    if raw is None:
        raw = []
    if not isinstance(raw, list):
        errors.append("failures: expected a list")
        raw = []
    for idx, item in enumerate(raw):
        path = f"failures[{idx}]"
        if not isinstance(item, dict):
            errors.append(f"{path}: expected a mapping")
            continue
        robot = r.value(item, path, "robot", int, low=0)
        start = r.value(item, path, "start", float, low=0.0)
        dur = r.value(item, path, "duration", float, default=math.inf, low=0.0)
        kind = r.value(item, path, "kind", str, default="type2")
        if kind not in FAILURE_KINDS:
            errors.append(f"{path}.kind: {kind!r} not one of {FAILURE_KINDS}")
            continue
        if None in (robot, start, dur):
            continue
        if n is not None and robot >= n:
            errors.append(f"{path}.robot: {robot} out of range for n={n}")
            continue
        events.append(FailureEvent(robot, start, dur, kind))

    auto = data.get("failures_auto")
    if auto is not None:
        if not isinstance(auto, dict):
            errors.append("failures_auto: expected a mapping")
        else:
            count = r.value(auto, "failures_auto", "count", int, default=0, low=0)
            start = r.value(auto, "failures_auto", "start", float,
                            default=0.0, low=0.0)
            kind = r.value(auto, "failures_auto", "kind", str, default="absent")
            if kind not in FAILURE_KINDS:
                errors.append(
                    f"failures_auto.kind: {kind!r} not one of {FAILURE_KINDS}"
                )
            elif count and n:
                if count >= n:
                    errors.append(
                        f"failures_auto.count: {count} must be below n={n}"
                    )
                else:
                    # spread the failed ids evenly around the ring
                    for k in range(count):
                        events.append(FailureEvent(
                            robot=(k * n) // count, start=start,
                            duration=math.inf, kind=kind,
                        ))
    events.sort(key=lambda e: (e.start, e.robot))
    seen = set()
    for e in events:
        if e.kind != "stall":
            if e.robot in seen:
                errors.append(
                    f"failures: robot {e.robot} scheduled to fail twice"
                )
            seen.add(e.robot)
    return tuple(events)


def _parse_options(r, errors):
    osec = r.section("options")
    defaults = SimOptions()
    kwargs = {}
    for fname, ftype in (
        ("tracker_mode", str), ("openloop", bool), ("resilience", bool),
        ("preseed_spacing", bool), ("spoof_stalled", bool),
        ("comm_period", int), ("control_period", int),
        ("measurement_noise", float), ("disturbance", float),
        ("z_safety", bool), ("z_threshold", float), ("z_offset", float),
        ("coverage_cell", float), ("coverage_period", int),
        ("coverage_radius", float),
        ("log_period", int), ("initial_perturbation", float),
        ("exit_speed", float), ("rejoin_phase_rate", float),
        ("tau_fail", float), ("eps_th", float),
        ("capture_threshold", float), ("alpha", float),
    ):
        if fname in osec:
            val = r.value(osec, "options", fname, ftype)
            if val is not None:
                kwargs[fname] = val
    if "p_out" in osec:
        raw = osec["p_out"]
        if isinstance(raw, (list, tuple)) and len(raw) == 3:
            kwargs["p_out"] = tuple(float(v) for v in raw)
        else:
            errors.append("options.p_out: expected [x, y, z]")
    for key in osec:
        if key not in SimOptions.__dataclass_fields__:
            errors.append(f"options.{key}: unknown option")
    opts = replace(defaults, **kwargs)
    if opts.tracker_mode not in TRACKER_MODES:
        errors.append(
            f"options.tracker_mode: {opts.tracker_mode!r} not one of "
            f"{TRACKER_MODES}"
        )
    for fname in ("comm_period", "coverage_period", "log_period"):
        if getattr(opts, fname) < 1:
            errors.append(f"options.{fname}: must be >= 1")
    if opts.measurement_noise < 0 or opts.disturbance < 0:
        errors.append("options: noise magnitudes must be >= 0")
    return opts


def parse_config(path):
    """Load and validate one scenario file."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return build_config(data)


def to_dict(config):
    """Serialize back to the mapping form; parse(to_dict(c)) == c."""
    c = config
    out = {
        "name": c.name,
        "curve": {
            "A": c.curve.A, "B": c.curve.B, "C": c.curve.C,
            "a": c.curve.a, "b": c.curve.b, "c": c.curve.c,
            "phi": c.curve.phi,
        },
        "swarm": {
            "n": c.swarm.n_robots, "omega": c.swarm.omega,
            "coupling": c.swarm.coupling, "dt": c.swarm.dt,
            "substeps": c.swarm.substeps, "p": c.eq.p,
            "theta0": c.eq.theta0,
        },
        "mission": {
            "r_s": c.mission.r_s, "eta": c.mission.eta,
            "kappa": c.mission.kappa,
        },
        "tracker": {
            name: getattr(c.tracker, name)
            for name in MpcConfig.__dataclass_fields__
        },
        "network": {
            "base_delay": c.network.base_delay, "jitter": c.network.jitter,
            "drop_prob": c.network.drop_prob, "seed": c.network.seed,
        },
        "failures": [
            {"robot": e.robot, "start": e.start, "duration": e.duration,
             "kind": e.kind}
            for e in c.failures
        ],
        "targets": {"count": c.targets.count, "speed": c.targets.speed},
        "duration": c.duration,
        "seed": c.seed,
        "options": {
            name: (list(v) if isinstance(v := getattr(c.options, name), tuple)
                   else v)
            for name in SimOptions.__dataclass_fields__
        },
        "override_guarantees": c.override_guarantees,
    }
    if c.network.per_link_overrides:
        out["network"]["per_link_overrides"] = {
            f"{src}-{dst}": dict(params)
            for (src, dst), params in c.network.per_link_overrides.items()
        }
    if not out["options"]["p_out"]:
        del out["options"]["p_out"]
    return out


def write_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(config), fh, sort_keys=False)


def sweepable_fields(data):
    """Dotted paths of every numeric leaf in a scenario mapping."""
    out = []

    def walk(node, prefix):
        for key, val in node.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            if isinstance(val, dict):
                walk(val, path)
            elif isinstance(val, (int, float)) and not isinstance(val, bool):
                out.append(path)

    walk(data, "")
    if "failures_auto" not in data:
        out.append("failures_auto.count")
    return sorted(out)


def set_path(data, path, value):
    """Assign a dotted path inside a nested mapping, creating sections."""
    parts = path.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise KeyError(path)
    node[parts[-1]] = value
