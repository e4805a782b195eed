"""Configuration files, experiment drivers and VTK / CSV output.

A configuration is an INI file::

    [domain]
    x_range = 0, 1
    y_range = 0, 2
    y_interface = 1
    conduit = bottom
    nx = 64

    [model]
    rho1 = 1
    rho2 = 50
    M = 0.1
    gamma = 0.01
    epsilon = 0.02
    K = 0.05

    [scheme]
    dt = 0.005
    T = 2.0

    [initial]
    type = square_bubble
    center = 0.5, 0.5
    half_width = 0.15

Unknown sections or keys are rejected, and every physical constraint is
checked before anything is computed.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .diagnostics import (
    ConvergenceTable,
    EnergyRecord,
    difference_norms,
    energy_record,
    phase_centroid,
)
from .fem import DiscreteField, ElementKind, FunctionSpace
from .mesh import CONDUIT, DomainLayout, Mesh, MeshError, build_layered_mesh
from .physics import ModelParams, ParameterError, SchemeParams
from .scheme import Discretization, SimState, advance, initial_state

log = logging.getLogger(__name__)

MODES = ("run", "converge_space", "converge_time", "compare_schemes")
INITIAL_KINDS = ("uniform", "square_bubble", "circle_bubble", "manufactured")


class ConfigError(ValueError):
    """Malformed or physically inconsistent configuration."""


# --------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class InitialCondition:
    kind: str = "uniform"
    phi0: float = -1.0
    center: tuple[float, float] = (0.5, 0.5)
    half_width: float = 0.15
    radius: float = 0.2


@dataclass(frozen=True)
class OutputOptions:
    directory: str = "out"
    vtk_every: int = 0
    energy_csv: str = "energy.csv"


@dataclass(frozen=True)
class ConvergenceOptions:
    """Levels for the two convergence studies.

    ``levels`` are the mesh divisions per unit length for the space study;
    the time study runs on ``1/time_level`` with ``dt0 / 2**k``,
    ``k = 0 .. n_dt - 1``.
    """

    levels: tuple[int, ...] = (4, 8, 16, 32)
    dt: float = 2.5e-4
    T: float = 0.2
    time_level: int = 32
    dt0: float = 0.02
    n_dt: int = 6


@dataclass(frozen=True)
class Config:
    layout: DomainLayout
    nx: int
    ny: int
    model: ModelParams
    scheme: SchemeParams
    initial: InitialCondition = InitialCondition()
    output: OutputOptions = OutputOptions()
    convergence: ConvergenceOptions = ConvergenceOptions()
    mode: str = "run"

    def build_mesh(self, nx: int | None = None, ny: int | None = None) -> Mesh:
        return build_layered_mesh(nx or self.nx, ny or self.ny, self.layout)


# --------------------------------------------------------------------------
# parsing

_KEYS = {
    "domain": {"x_range", "y_range", "y_interface", "conduit", "nx", "ny"},
    "model": {"rho1", "rho2", "nu", "nu1", "nu2", "m", "m_c", "m_m", "gamma", "epsilon", "k",
              "alpha_bjs", "gravity", "rho_ref"},
    "scheme": {"dt", "t", "beta", "xi", "zeta", "scheme", "rel_tol", "solver", "picard_tol",
               "picard_maxiter"},
    "initial": {"type", "phi0", "center", "half_width", "radius"},
    "output": {"directory", "vtk_every", "energy_csv"},
    "convergence": {"levels", "dt", "t", "time_level", "dt0", "n_dt"},
    "run": {"mode"},
}


def _floats(text: str, key: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} values, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"{key}: values must be finite")
    return vals


def _float(text: str, key: str) -> float:
    return _floats(text, key, 1)[0]


def _int(text: str, key: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _pair_or_single(sec, single: str, a: str, b: str):
    if single in sec and (a in sec or b in sec):
        raise ConfigError(f"give either {single} or {a}/{b}, not both")
    if single in sec:
        return _float(sec[single], single)
    if a in sec or b in sec:
        if not (a in sec and b in sec):
            raise ConfigError(f"{a} and {b} must be given together")
        return (_float(sec[a], a), _float(sec[b], b))
    return None


def parse_config(text: str) -> Config:
    """Parse and validate INI text; missing values take the documented defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in cp.sections():
        if name not in _KEYS:
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(cp[name]) - _KEYS[name]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    get = lambda s: cp[s] if cp.has_section(s) else {}  # noqa: E731

    d = get("domain")
    try:
        layout = DomainLayout(
            x_range=_floats(d["x_range"], "x_range", 2) if "x_range" in d else (0.0, 1.0),
            y_range=_floats(d["y_range"], "y_range", 2) if "y_range" in d else (0.0, 2.0),
            y_interface=_float(d["y_interface"], "y_interface") if "y_interface" in d else 1.0,
            conduit_position=d.get("conduit", "top").strip(),
        )
    except MeshError as exc:
        raise ConfigError(str(exc)) from None
    width = layout.x_range[1] - layout.x_range[0]
    height = layout.y_range[1] - layout.y_range[0]
    nx = _int(d["nx"], "nx") if "nx" in d else 32
    ny = _int(d["ny"], "ny") if "ny" in d else max(1, round(nx * height / width))
    if nx < 1 or ny < 2:
        raise ConfigError("nx must be >= 1 and ny >= 2")

    m = get("model")
    kw: dict = {}
    for key in ("rho1", "rho2", "gamma", "epsilon", "alpha_bjs", "rho_ref"):
        if key in m:
            kw[key] = _float(m[key], key)
    nu = _pair_or_single(m, "nu", "nu1", "nu2")
    if nu is not None:
        kw["nu"] = nu
    M = _pair_or_single(m, "m", "m_c", "m_m")
    if M is not None:
        kw["M"] = M
    if "k" in m:
        k = _floats(m["k"], "K")
        if len(k) == 1:
            kw["K"] = k[0] * np.eye(2)
        elif len(k) == 4:
            kw["K"] = np.array(k).reshape(2, 2)
        else:
            raise ConfigError("K: give one value (isotropic) or four (row-major 2x2)")
    if "gravity" in m:
        kw["gravity"] = _floats(m["gravity"], "gravity", 2)
    try:
        model = ModelParams(**kw)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None

    s = get("scheme")
    skw: dict = {}
    for key, name in (("dt", "dt"), ("t", "T"), ("beta", "beta"), ("xi", "xi"), ("zeta", "zeta"),
                      ("rel_tol", "rel_tol"), ("picard_tol", "picard_tol")):
        if key in s:
            skw[name] = _float(s[key], name)
    for key in ("scheme", "solver"):
        if key in s:
            skw[key] = s[key].strip()
    if "picard_maxiter" in s:
        skw["picard_maxiter"] = _int(s["picard_maxiter"], "picard_maxiter")
    skw.setdefault("dt", 0.005)
    skw.setdefault("T", skw["dt"])
    if "solver" in skw and skw["solver"] not in ("direct", "iterative"):
        raise ConfigError(f"solver must be 'direct' or 'iterative', got {skw['solver']!r}")
    if "rel_tol" in skw and not 0 < skw["rel_tol"] < 1:
        raise ConfigError("rel_tol must lie in (0, 1)")
    try:
        scheme = SchemeParams(**skw).resolved(model)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None

    i = get("initial")
    kind = i.get("type", "uniform").strip()
    if kind not in INITIAL_KINDS:
        raise ConfigError(f"initial type must be one of {', '.join(INITIAL_KINDS)}, got {kind!r}")
    ikw: dict = {"kind": kind}
    if "phi0" in i:
        ikw["phi0"] = _float(i["phi0"], "phi0")
    if "center" in i:
        ikw["center"] = _floats(i["center"], "center", 2)
    for key in ("half_width", "radius"):
        if key in i:
            ikw[key] = _float(i[key], key)
            if ikw[key] <= 0:
                raise ConfigError(f"{key} must be positive")
    initial = InitialCondition(**ikw)
    _check_bubble(initial, layout)

    o = get("output")
    output = OutputOptions(
        directory=o.get("directory", "out").strip(),
        vtk_every=_int(o["vtk_every"], "vtk_every") if "vtk_every" in o else 0,
        energy_csv=o.get("energy_csv", "energy.csv").strip(),
    )
    if output.vtk_every < 0:
        raise ConfigError("vtk_every must be >= 0")

    c = get("convergence")
    ckw: dict = {}
    if "levels" in c:
        levels = tuple(_int(v, "levels") for v in c["levels"].replace(",", " ").split())
        if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])) or min(levels) < 1:
            raise ConfigError("levels must be at least two increasing positive integers")
        ckw["levels"] = levels
    for key, name in (("dt", "dt"), ("t", "T"), ("dt0", "dt0")):
        if key in c:
            ckw[name] = _float(c[key], name)
            if ckw[name] <= 0:
                raise ConfigError(f"convergence {name} must be positive")
    for key in ("time_level", "n_dt"):
        if key in c:
            ckw[key] = _int(c[key], key)
    conv = ConvergenceOptions(**ckw)
    if conv.n_dt < 3:
        raise ConfigError("n_dt must be >= 3 (two Cauchy differences give one order)")
    if conv.time_level < 1:
        raise ConfigError("time_level must be positive")

    mode = get("run").get("mode", "run").strip()
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    return Config(layout, nx, ny, model, scheme, initial, output, conv, mode)


def load_config(path: str | Path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# --------------------------------------------------------------------------
# initial data


def _check_bubble(ic: InitialCondition, layout: DomainLayout) -> None:
    if ic.kind not in ("square_bubble", "circle_bubble"):
        return
    r = ic.radius if ic.kind == "circle_bubble" else ic.half_width
    (x0, x1), (y0, y1) = layout.x_range, layout.y_range
    cx, cy = ic.center
    if cx - r < x0 or cx + r > x1 or cy - r < y0 or cy + r > y1:
        raise ConfigError(f"bubble at {ic.center} with size {r} does not fit inside the domain")


def phase_profile(initial: InitialCondition, epsilon: float) -> Callable:
    """phi0(x, y) for a uniform state or a tanh-smoothed bubble of phase 1."""
    cx, cy = initial.center
    width = math.sqrt(2.0) * epsilon
    if initial.kind == "uniform":
        return lambda x, y: np.full(np.broadcast(x, y).shape, initial.phi0)
    if initial.kind == "circle_bubble":
        return lambda x, y: np.tanh((initial.radius - np.hypot(x - cx, y - cy)) / width)
    if initial.kind == "square_bubble":
        # signed L-infinity distance, positive inside the square
        return lambda x, y: np.tanh(
            (initial.half_width - np.maximum(np.abs(x - cx), np.abs(y - cy))) / width
        )
    raise ConfigError(f"no closed-form phase profile for initial type {initial.kind!r}")


def initial_phase(config: Config, mesh: Mesh, space: FunctionSpace | None = None) -> DiscreteField:
    """Nodal P2 interpolant of the configured initial phase."""
    _check_bubble(config.initial, config.layout)
    space = space or FunctionSpace(mesh, ElementKind.P2_SCALAR)
    if space.mesh is not mesh:
        raise ValueError("space lives on a different mesh")
    if config.initial.kind == "manufactured":
        from .mms import ExactSolution

        return DiscreteField.interpolate(space, ExactSolution(config.model).at(0.0).value("phi"))
    return DiscreteField.interpolate(space, phase_profile(config.initial, config.model.epsilon))


def build_problem(config: Config, nx: int | None = None, ny: int | None = None, scheme=None):
    """(disc, initial state, forcing) for ``config``; forcing is None unless
    the initial type is ``manufactured``."""
    mesh = config.build_mesh(nx, ny)
    disc = Discretization(mesh, config.model)
    if config.initial.kind == "manufactured":
        from .mms import ExactSolution, MMSForcing, exact_initial_state

        exact = ExactSolution(config.model)
        return disc, exact_initial_state(disc, exact), MMSForcing(disc, exact)
    # velocity, pressures and chemical potential start at zero
    return disc, initial_state(disc, initial_phase(config, mesh, disc.Y)), None


# --------------------------------------------------------------------------
# VTK output


def _vtk_array(values: np.ndarray) -> str:
    return "\n".join(" ".join(format(float(v), ".10g") for v in row) for row in np.atleast_2d(values))


def write_vtk_grid(path: str | Path, mesh: Mesh, point_scalars: dict | None = None,
                   point_vectors: dict | None = None, cell_scalars: dict | None = None,
                   title: str = "chnsd") -> Path:
    """Legacy ASCII unstructured grid of linear triangles."""
    path = Path(path)
    n, t = mesh.n_nodes, mesh.n_triangles
    pts = np.column_stack([mesh.nodes, np.zeros(n)])
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double", _vtk_array(pts)]
    cells = np.column_stack([np.full(t, 3), mesh.triangles])
    lines += [f"CELLS {t} {4 * t}", "\n".join(" ".join(map(str, r)) for r in cells)]
    lines += [f"CELL_TYPES {t}", "\n".join(["5"] * t)]
    if cell_scalars:
        lines.append(f"CELL_DATA {t}")
        for name, v in cell_scalars.items():
            v = np.asarray(v, dtype=float)
            if v.shape != (t,):
                raise ValueError(f"cell data {name!r} has shape {v.shape}, expected ({t},)")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", _vtk_array(v[:, None])]
    if point_scalars or point_vectors:
        lines.append(f"POINT_DATA {n}")
        for name, v in (point_scalars or {}).items():
            v = np.asarray(v, dtype=float)
            if v.shape != (n,):
                raise ValueError(f"point data {name!r} has shape {v.shape}, expected ({n},)")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", _vtk_array(v[:, None])]
        for name, v in (point_vectors or {}).items():
            v = np.asarray(v, dtype=float)
            if v.shape != (n, 2):
                raise ValueError(f"vector data {name!r} has shape {v.shape}, expected ({n}, 2)")
            lines += [f"VECTORS {name} double", _vtk_array(np.column_stack([v, np.zeros(n)]))]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def _at_vertices(f: DiscreteField, out: np.ndarray) -> None:
    nodes, dofs = f.space.vertex_dofs()
    if f.space.ncomp == 2:
        out[nodes, 0] = f.coefficients[dofs]
        out[nodes, 1] = f.coefficients[dofs + f.space.n_scalar]
    else:
        out[nodes] = f.coefficients[dofs]


def write_vtk(state: SimState, mesh: Mesh, path: str | Path) -> Path:
    """Vertex values of phi, w, the pressure and the velocity.

    Interface vertices carry the free-flow values (p_c, u_c); the matrix
    side shows p_m and the recovered Darcy velocity.
    """
    if state.phi.space.mesh is not mesh:
        raise ValueError("state does not live on this mesh")
    n = mesh.n_nodes
    phi, w, p = np.zeros(n), np.zeros(n), np.zeros(n)
    vel = np.zeros((n, 2))
    _at_vertices(state.phi, phi)
    _at_vertices(state.w, w)
    _at_vertices(state.p_m, p)
    if state.u_m is not None:
        _at_vertices(state.u_m, vel)
    _at_vertices(state.p_c, p)
    _at_vertices(state.u_c, vel)
    return write_vtk_grid(
        path, mesh,
        point_scalars={"phi": phi, "w": w, "p": p},
        point_vectors={"velocity": vel},
        cell_scalars={"region": (mesh.region != CONDUIT).astype(float)},
        title=f"chnsd state t={state.t:.10g} step={state.step}",
    )


# --------------------------------------------------------------------------
# energy CSV

ENERGY_HEADER = ",".join(EnergyRecord.FIELDS)


def write_energy_csv(records: Iterable[EnergyRecord], path: str | Path) -> Path:
    records = list(records)
    ts = [r.t for r in records]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("energy records must have strictly increasing t")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(EnergyRecord.FIELDS)
        for r in records:
            wr.writerow([format(getattr(r, k), ".17g") for k in EnergyRecord.FIELDS])
    return path


def read_energy_csv(path: str | Path) -> list[EnergyRecord]:
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != list(EnergyRecord.FIELDS):
            raise ValueError(f"unexpected energy CSV header {header}")
        return [EnergyRecord(*(float(v) for v in row)) for row in rd if row]


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    mode: str
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _input_hash(disc: Discretization, state: SimState, model: ModelParams, scheme: SchemeParams) -> str:
    h = hashlib.sha256()
    for arr in (disc.mesh.nodes, disc.mesh.triangles, state.phi.coefficients, state.w.coefficients,
                state.u_c.coefficients, state.p_c.coefficients, state.p_m.coefficients):
        h.update(np.ascontiguousarray(arr).tobytes())
    params = {k: np.asarray(v).tolist() for k, v in asdict(model).items()}
    params.update({k: v for k, v in asdict(scheme).items() if k != "scheme"})
    h.update(json.dumps(params, sort_keys=True).encode())
    return h.hexdigest()


def run_trajectory(disc: Discretization, state: SimState, scheme: SchemeParams, forcing=None,
                   n_steps: int | None = None, on_step: Callable | None = None) -> tuple[SimState, list]:
    """Advance and collect one EnergyRecord per time level (initial one included).

    ``on_step(state, record)`` is called for the initial state and after
    every step.
    """
    scheme = scheme.resolved(disc.model)
    n_steps = scheme.n_steps if n_steps is None else n_steps
    records = [energy_record(disc, state, scheme)]
    if on_step:
        on_step(state, records[-1])
    for _ in range(n_steps):
        new = advance(disc, state, scheme, forcing)
        records.append(energy_record(disc, new, scheme, prev=state))
        if on_step:
            on_step(new, records[-1])
        state = new
    return state, records


def _run(config: Config, out: Path) -> ExperimentResult:
    disc, state, forcing = build_problem(config)
    res = ExperimentResult("run")
    vtk_dir = out / "vtk"
    every = config.output.vtk_every
    t0 = time.perf_counter()

    def on_step(s, rec):
        if every and s.step % every == 0:
            res.artifacts.setdefault("vtk", []).append(write_vtk(s, disc.mesh, vtk_dir / f"state_{s.step:06d}.vtk"))
        if s.step and s.step % 50 == 0:
            log.info("step %d t=%.4g E=%.6e (%.1fs)", s.step, s.t, rec.E, time.perf_counter() - t0)

    final, records = run_trajectory(disc, state, config.scheme, forcing, on_step=on_step)
    res.artifacts["energy_csv"] = write_energy_csv(records, out / config.output.energy_csv)
    res.summary.update(steps=final.step, t=final.t, E0=records[0].E, E=records[-1].E,
                       mass_drift=records[-1].phase_mass - records[0].phase_mass,
                       centroid=phase_centroid(disc, final).tolist())
    if forcing is not None:
        from .mms import mms_errors

        res.summary["errors"] = mms_errors(disc, final, forcing.exact)
    return res


def _require_manufactured(config: Config) -> None:
    if config.initial.kind != "manufactured":
        raise ConfigError(f"{config.mode} needs [initial] type = manufactured")


def converge_space(config: Config) -> ConvergenceTable:
    """Errors at T on meshes 1/n for n in ``config.convergence.levels``."""
    from .mms import mms_errors

    _require_manufactured(config)
    cv = config.convergence
    scheme = replace(config.scheme, dt=cv.dt, T=cv.T)
    width = config.layout.x_range[1] - config.layout.x_range[0]
    height = config.layout.y_range[1] - config.layout.y_range[0]
    table = ConvergenceTable(label="h")
    for n in cv.levels:
        t0 = time.perf_counter()
        nx, ny = round(n * width), round(n * height)
        disc, state, forcing = build_problem(config, nx, ny)
        final, _ = run_trajectory(disc, state, scheme, forcing)
        errs = mms_errors(disc, final, forcing.exact)
        table.add(1.0 / n, **errs)
        log.info("h=1/%d done in %.1fs: %s", n, time.perf_counter() - t0,
                 " ".join(f"{k}={v:.3e}" for k, v in errs.items()))
    return table


def converge_time(config: Config) -> ConvergenceTable:
    """Cauchy differences ||v^{dt} - v^{dt/2}|| (L2) for phi, p_m and u_c at T."""
    _require_manufactured(config)
    cv = config.convergence
    width = config.layout.x_range[1] - config.layout.x_range[0]
    height = config.layout.y_range[1] - config.layout.y_range[0]
    nx, ny = round(cv.time_level * width), round(cv.time_level * height)
    # one discretization for all levels so the fields can be subtracted
    disc, state, forcing = build_problem(config, nx, ny)
    finals = []
    for k in range(cv.n_dt):
        dt = cv.dt0 / 2**k
        final, _ = run_trajectory(disc, state.copy(), replace(config.scheme, dt=dt, T=cv.T), forcing)
        finals.append((final, dt))
        log.info("dt=%.4g done", dt)
    table = ConvergenceTable(label="dt")
    for (a, dt), (b, _) in zip(finals, finals[1:]):
        table.add(dt, phi=difference_norms(a.phi, b.phi)[0], p_m=difference_norms(a.p_m, b.p_m)[0],
                  u_c=difference_norms(a.u_c, b.u_c)[0])
    return table


@dataclass
class SchemeComparison:
    records: dict
    finals: dict
    disc: Discretization
    input_hash: str

    def phase_difference(self) -> float:
        """L2 norm of phi_coupled - phi_decoupled at the final time."""
        return difference_norms(self.finals["coupled"].phi, self.finals["decoupled"].phi)[0]


def compare_schemes(config: Config, n_steps: int | None = None) -> SchemeComparison:
    disc, state, forcing = build_problem(config)
    records, finals, hashes = {}, {}, set()
    for name in ("coupled", "decoupled"):
        scheme = replace(config.scheme, scheme=name)
        hashes.add(_input_hash(disc, state, config.model, scheme))
        finals[name], records[name] = run_trajectory(disc, state.copy(), scheme, forcing, n_steps=n_steps)
    if len(hashes) != 1:
        raise RuntimeError("schemes were not run on identical inputs")
    return SchemeComparison(records, finals, disc, hashes.pop())


def run_experiment(config: Config, out_dir: str | Path | None = None) -> ExperimentResult:
    """Run the configured mode and write its artifacts below ``out_dir``.

    Solver failures propagate as ``StepFailure`` (step index and substep in
    the message).
    """
    out = Path(out_dir if out_dir is not None else config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    if config.mode == "run":
        return _run(config, out)
    if config.mode in ("converge_space", "converge_time"):
        table = converge_space(config) if config.mode == "converge_space" else converge_time(config)
        res = ExperimentResult(config.mode)
        res.artifacts["table_csv"] = out / f"{config.mode}.csv"
        table.to_csv(res.artifacts["table_csv"])
        res.summary["table"] = table.format()
        return res
    if config.mode == "compare_schemes":
        cmp = compare_schemes(config)
        res = ExperimentResult("compare_schemes")
        for name, recs in cmp.records.items():
            res.artifacts[f"energy_{name}"] = write_energy_csv(recs, out / f"energy_{name}.csv")
        res.summary.update(input_hash=cmp.input_hash, phase_difference=cmp.phase_difference())
        return res
    raise ConfigError(f"unknown mode {config.mode!r}")
