"""Scenario files: schema validation and resolution into models, sets and a specification."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import stl
from .dynamics import DOFS_FULL, DOFS_PLANAR, RigidBodyModel
from .ekf import EkfConfig
from .planner import PlanningProblem
from .polytope import Polytope, inscribed_polytope, inscribed_sphere_radius

DOF_INDEX = {"x": 0, "y": 1, "z": 2, "roll": 3, "pitch": 4, "yaw": 5}
PLANAR_DIMS = {"x", "y", "yaw"}


class ScenarioError(ValueError):
    pass


def _schema(name: str) -> dict:
    return json.loads(resources.files("drvalidate").joinpath(f"schemas/{name}.schema.json").read_text())


def shipped_scenarios() -> list[str]:
    root = resources.files("drvalidate").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_path(name_or_path: str | Path) -> Path | None:
    """A file path as given, else a shipped scenario with that name (or None)."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    if stem in shipped_scenarios():
        return Path(str(resources.files("drvalidate").joinpath(f"scenarios/{stem}.json")))
    return None


@dataclass(frozen=True)
class Platform:
    model: RigidBodyModel
    U: np.ndarray  # body wrench bound, 6
    D: np.ndarray  # disturbance bound, 6

    @property
    def dofs(self) -> list[int]:
        return list(self.model.dofs)

    def input_set(self) -> Polytope:
        return Polytope.box(self.U[self.dofs])

    def dbar(self) -> np.ndarray:
        return self.D[self.dofs]


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    raw: dict
    dims: tuple[str, ...]
    spec: stl.Formula
    regions: dict[str, stl.Region]
    t_f: float
    plan_dt: float
    x0: np.ndarray
    workspace_lo: np.ndarray
    workspace_hi: np.ndarray
    final_region: stl.Region | None
    final_rest: bool
    space: Platform
    underwater: Platform
    K: np.ndarray
    mpc: dict
    ekf: EkfConfig
    injection: dict
    measurement_noise: float
    seed: int
    validation_substeps: int = 1
    source: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return int(round(self.t_f / self.plan_dt))

    def planner_inputs(self) -> Polytope:
        return planner_input_set(self.space, self.dims)

    def planning_problem(self, **overrides) -> PlanningProblem:
        n = len(self.dims)
        idx = [DOF_INDEX[d] for d in self.dims]
        inertia = np.concatenate([[self.space.model.mass] * 3, np.diag(self.space.model.M)[3:]])[idx]
        final_lo = final_hi = None
        if self.final_region is not None:
            lo, hi = self.final_region.bounds()
            final_lo = np.full(n, -np.inf)
            final_hi = np.full(n, np.inf)
            for d, a, b in zip(self.final_region.dims, lo, hi):
                final_lo[self.dims.index(d)] = a
                final_hi[self.dims.index(d)] = b
        Ksub = self.K[np.ix_(idx, idx)]
        args = dict(spec=self.spec, dims=self.dims, inertia=inertia, U=self.planner_inputs(), K=Ksub,
                    dbar=self.space.D[idx], dt=self.plan_dt, N=self.N,
                    x0=np.concatenate([self.x0, np.zeros(n)]), workspace_lo=self.workspace_lo,
                    workspace_hi=self.workspace_hi, final_lo=final_lo, final_hi=final_hi,
                    final_rest=self.final_rest)
        args.update(overrides)
        return PlanningProblem(**args)

    def K_for(self, platform: Platform) -> np.ndarray:
        return self.K[np.ix_(platform.dofs, platform.dofs)]


def planner_input_set(platform: Platform, dims) -> Polytope:
    """Conservative box over the planning dims that every attitude of the body can realize.

    Forces (and torques) live in body axes that rotate with the attitude, so the
    body-frame box is replaced by the cube inscribed in its inscribed ball, in as
    many dimensions as the rotation mixes.
    """
    planar = platform.model.dofs == DOFS_PLANAR
    half = np.zeros(6)
    for block, mixed in ((slice(0, 3), 2 if planar else 3), (slice(3, 6), 1 if planar else 3)):
        active = [i for i in range(6)[block] if i in platform.model.dofs]
        if not active:
            continue
        if planar and block.start == 0:
            active = [0, 1]
        r = inscribed_sphere_radius(Polytope.box(platform.U[active]))
        half[active] = inscribed_polytope(r, "cube", mixed).b[0]
    idx = [DOF_INDEX[d] for d in dims]
    return Polytope.box(half[idx])


def _model(d: dict, dofs) -> RigidBodyModel:
    kw = {k: d[k] for k in ("added_mass", "damping_linear", "damping_quadratic", "weight", "buoyancy",
                            "r_g", "r_b") if k in d}
    return RigidBodyModel(d["kind"], d["mass"], d["inertia"], dofs=dofs, **kw)


def from_dict(raw: dict, source: str = "") -> Scenario:
    try:
        jsonschema.validate(raw, _schema("scenario"))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{source or 'scenario'}: schema violation at {path}: {exc.message}") from None
    try:
        dims = tuple(stl.canonical_dim(d) for d in raw["dims"])
        n = len(dims)
        for key in ("x0",):
            if len(raw[key]) != n:
                raise ScenarioError(f"{key} has {len(raw[key])} entries for {n} dims")
        for key in ("lo", "hi"):
            if len(raw["workspace"][key]) != n:
                raise ScenarioError(f"workspace.{key} has {len(raw['workspace'][key])} entries for {n} dims")
        regions = {}
        for r in raw["regions"]:
            if r["name"] in regions:
                raise ScenarioError(f"duplicate region {r['name']!r}")
            reg = stl.Region(r["name"], tuple(r["center"]), tuple(r["widths"]), tuple(r["dims"]))
            missing = set(reg.dims) - set(dims)
            if missing:
                raise ScenarioError(f"region {reg.name!r} uses dims {sorted(missing)} outside {list(dims)}")
            regions[reg.name] = reg
        bindings = {name: reg.formula(dims) for name, reg in regions.items()}
        spec = stl.parse_spec(raw["spec"], bindings)
        if stl.horizon(spec) > raw["t_f"] + 1e-9:
            raise ScenarioError(f"specification horizon {stl.horizon(spec)} exceeds t_f {raw['t_f']}")
        final = raw.get("final", {})
        final_region = None
        if "region" in final:
            if final["region"] not in regions:
                raise ScenarioError(f"unresolved final region {final['region']!r}")
            final_region = regions[final["region"]]
        ratio = raw["t_f"] / raw["plan_dt"]
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("t_f must be a multiple of plan_dt")
        planar = set(dims) <= PLANAR_DIMS
        dofs = DOFS_PLANAR if planar else DOFS_FULL
        platforms = {}
        for key in ("space", "underwater"):
            d = raw[key]
            platforms[key] = Platform(_model(d, dofs), np.asarray(d["U"], float), np.asarray(d["D"], float))
        if platforms["space"].model.kind == "underwater" or platforms["underwater"].model.kind != "underwater":
            raise ScenarioError("space platform must be a space model and underwater platform an underwater model")
        K = np.asarray(raw["K"], float) if "K" in raw else np.eye(6)
        if K.shape != (6, 6):
            raise ScenarioError("K must be 6x6")
        mpc = dict(raw["mpc"])
        na = len(dofs)
        for key in ("q_config", "q_rate", "r"):
            if len(mpc[key]) != na:
                raise ScenarioError(f"mpc.{key} needs {na} entries (one per active degree of freedom)")
        ekf = EkfConfig(**raw.get("ekf", {}))
        injection = raw.get("injection", {"kind": "fraction", "fraction": 0.0})
        _check_injection(injection)
    except (stl.STLError, TypeError) as exc:
        raise ScenarioError(f"{source or 'scenario'}: {exc}") from None
    return Scenario(
        name=raw["name"], raw=raw, dims=dims, spec=spec, regions=regions, t_f=float(raw["t_f"]),
        plan_dt=float(raw["plan_dt"]), x0=np.asarray(raw["x0"], float),
        workspace_lo=np.asarray(raw["workspace"]["lo"], float),
        workspace_hi=np.asarray(raw["workspace"]["hi"], float),
        final_region=final_region, final_rest=bool(final.get("rest", False)),
        space=platforms["space"], underwater=platforms["underwater"], K=K, mpc=mpc, ekf=ekf,
        injection=injection, measurement_noise=float(raw.get("measurement_noise", 0.0)),
        seed=int(raw.get("seed", 0)),
        validation_substeps=int(raw.get("validation_substeps", 1)), source=source)


def _check_injection(inj: dict) -> None:
    kind = inj["kind"]
    need = {"fraction": ["fraction"], "constant": ["space", "underwater"], "piecewise": ["segments"],
            "noise": ["fraction", "bandwidth"]}[kind]
    for key in need:
        if key not in inj:
            raise ScenarioError(f"injection kind {kind!r} needs {key!r}")
    if kind == "piecewise":
        ts = [s["t"] for s in inj["segments"]]
        if not ts or ts[0] != 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ScenarioError("piecewise segments must start at t=0 and increase")


def load_scenario(path: str | Path, **overrides) -> Scenario:
    """Load and resolve a scenario file (or a shipped scenario by name).

    ``overrides`` replace top-level JSON fields before validation.
    """
    p = resolve_path(path)
    if p is None:
        raise ScenarioError(f"scenario {str(path)!r} not found (shipped: {', '.join(shipped_scenarios())})")
    text = p.read_text()
    if not text.strip():
        raise ScenarioError(f"{p}: empty file")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: invalid JSON: {exc}") from None
    raw.update(overrides)
    return from_dict(raw, str(p))


def angle_dims(dims) -> list[int]:
    return [i for i, d in enumerate(dims) if DOF_INDEX[d] >= 3]


def wrap_angle(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi
