"""End-to-end pipeline: plan, transfer, closed-loop simulation on both platforms, validation.

Each platform runs an MPC on the space model (in underwater-equivalent mode for the
underwater plant), a disturbance EKF on the space model that feeds the MPC, and
for the underwater plant a second EKF on the underwater model whose estimate is
checked against the disturbance bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import milp, planner, stl, transfer
from .dynamics import NU, Q, quat_to_euler, rk4_step
from .ekf import DisturbanceEkf
from .mpc import MpcConfig, MpcController, Reference
from .planner import Plan
from .polytope import Polytope, tighten
from .scenario import DOF_INDEX, Platform, Scenario, _schema, wrap_angle

PLATFORMS = ("space", "underwater")
CONTAINMENT_TOL = 1e-9
DIM_NAMES = ("x", "y", "z", "roll", "pitch", "yaw")
WRENCH_NAMES = ("fx", "fy", "fz", "tx", "ty", "tz")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Traces


@dataclass
class Trace:
    platform: str
    dt: float
    t: np.ndarray  # (n,)
    x: np.ndarray  # (n, 13)
    u_cmd: np.ndarray  # (n, 6) space-model wrench from the MPC
    u_applied: np.ndarray  # (n, 6) wrench applied to the plant at the start of the hold
    d_true: np.ndarray  # (n, 6) injected disturbance
    dhat_ff: np.ndarray  # (n, 6) space-model estimate fed forward
    dhat: np.ndarray  # (n, 6) estimate checked against the bound (plant's own model)
    ok: np.ndarray
    relaxed: np.ndarray
    scaled: np.ndarray

    GROUPS = (("x", 13), ("u_cmd", 6), ("u_applied", 6), ("d_true", 6), ("dhat_ff", 6), ("dhat", 6))
    STATE_NAMES = ("px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz")

    @classmethod
    def columns(cls) -> list[str]:
        cols = ["t"] + list(cls.STATE_NAMES)
        for name, _ in cls.GROUPS[1:]:
            cols += [f"{name}_{w}" for w in WRENCH_NAMES]
        return cols + ["ok", "relaxed", "scaled"]

    def table(self) -> np.ndarray:
        return np.column_stack([self.t, self.x, self.u_cmd, self.u_applied, self.d_true, self.dhat_ff,
                                self.dhat, self.ok, self.relaxed, self.scaled]).astype(float)

    @classmethod
    def from_table(cls, platform: str, data: np.ndarray) -> "Trace":
        data = np.atleast_2d(data)
        out, c = {}, 1
        for name, width in cls.GROUPS:
            out[name] = data[:, c:c + width]
            c += width
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(platform, dt, t, ok=data[:, c] > 0.5, relaxed=data[:, c + 1] > 0.5,
                   scaled=data[:, c + 2] > 0.5, **out)

    def configs(self, dims) -> np.ndarray:
        """Executed configuration in planner coordinates (positions and ZYX Euler angles)."""
        eul = np.array([quat_to_euler(q) for q in self.x[:, Q]])
        full = np.column_stack([self.x[:, :3], eul])
        return full[:, [DOF_INDEX[d] for d in dims]]


# ---------------------------------------------------------------------------
# Disturbance injection


class Injection:
    """Injected disturbance per tick, bounded by ``|fraction| * bound`` on every axis."""

    def __init__(self, spec: dict, bound, dt: float, rng: np.random.Generator, constant=None):
        self.spec = spec
        self.bound = np.asarray(bound, float)
        self.dt = dt
        self.rng = rng
        self.constant = None if constant is None else np.asarray(constant, float)
        self._state = np.zeros(6)

    def box(self) -> np.ndarray:
        s = self.spec
        if s["kind"] == "piecewise":
            return max(abs(seg["fraction"]) for seg in s["segments"]) * self.bound
        if s["kind"] == "constant":
            return np.abs(self.constant)
        return abs(s["fraction"]) * self.bound

    def at(self, t: float) -> np.ndarray:
        s = self.spec
        kind = s["kind"]
        if kind == "fraction":
            return s["fraction"] * self.bound
        if kind == "constant":
            return self.constant
        if kind == "piecewise":
            frac = [seg["fraction"] for seg in s["segments"] if seg["t"] <= t + 1e-12][-1]
            return frac * self.bound
        # first-order low-pass filtered Gaussian noise, clipped to the declared box
        a = math.exp(-2.0 * math.pi * s["bandwidth"] * self.dt)
        self._state = a * self._state + math.sqrt(1.0 - a * a) * self.rng.standard_normal(6)
        box = self.box()
        return np.clip(0.5 * box * self._state, -box, box)


def make_injection(spec: dict, platform_name: str, platform: Platform, alpha: float, dt: float,
                   rng: np.random.Generator) -> Injection:
    mask = np.zeros(6)
    mask[platform.dofs] = 1.0
    constant = np.asarray(spec[platform_name], float) * mask if spec["kind"] == "constant" else None
    return Injection(spec, alpha * platform.D * mask, dt, rng, constant)


# ---------------------------------------------------------------------------
# Closed loop


def mpc_step_size(plan_dt: float, nominal: float) -> float:
    """Largest step not above ``nominal`` that divides the plan's sample spacing."""
    return plan_dt / math.ceil(plan_dt / nominal - 1e-9)


def workspace_set(sc: Scenario, dofs) -> Polytope | None:
    lo, hi, rows = [], [], []
    for i, dof in enumerate(dofs):
        if dof < 3 and DIM_NAMES[dof] in sc.dims:
            j = sc.dims.index(DIM_NAMES[dof])
            lo.append(sc.workspace_lo[j])
            hi.append(sc.workspace_hi[j])
            rows.append(i)
    trans = [d for d in dofs if d < 3]
    if not rows or len(rows) != len(trans):
        return None
    return Polytope.box(hi, lo)


def simulate_closed_loop(sc: Scenario, platform: str, plan: Plan, alpha: float, seed: int,
                         feedback_equivalence: bool = True) -> Trace:
    """Fixed-step loop: measure, estimate, solve the MPC, transform, disturb, integrate."""
    if platform not in PLATFORMS:
        raise ValueError(f"unknown platform {platform!r}")
    rng = np.random.default_rng(seed)
    m_sp = sc.space.model
    plat = sc.space if platform == "space" else sc.underwater
    plant = plat.model
    dt = mpc_step_size(plan.dt, sc.mpc["dt"])
    ticks = int(round(plan.N * plan.dt / dt))
    Qw = np.concatenate([sc.mpc["q_config"], sc.mpc["q_rate"]])
    P = Qw * sc.mpc.get("q_terminal", 1.0)
    common = dict(N=sc.mpc["N"], dt=dt, Q=Qw, R=sc.mpc["r"], P=P, workspace=workspace_set(sc, m_sp.dofs))
    underwater_fe = platform == "underwater" and feedback_equivalence
    if platform == "space":
        cfg = MpcConfig(U=sc.space.input_set(), **common)
        ctrl = MpcController(cfg, m_sp, plan)
    elif underwater_fe:
        cfg = MpcConfig(U=None, mode="underwater_equivalent", U_uw=plat.input_set(), **common)
        ctrl = MpcController(cfg, m_sp, plan, plant)
    else:
        cfg = MpcConfig(U=plat.input_set(), **common)
        ctrl = MpcController(cfg, m_sp, plan)
    injection = make_injection(sc.injection, platform, plat, alpha, dt, rng)

    x = Reference(plan, m_sp).state(0.0)
    ekf_ff = DisturbanceEkf(m_sp, sc.ekf, nu0=x[NU])
    ekf_check = ekf_ff if platform == "space" else DisturbanceEkf(plant, sc.ekf, nu0=x[NU])
    rows = {k: [] for k in ("x", "u_cmd", "u_applied", "d_true", "dhat_ff", "dhat", "ok", "relaxed", "scaled")}
    prev_cmd = prev_applied = None
    u_box = plat.input_set()
    for k in range(ticks + 1):
        z = x[NU] + (rng.normal(0.0, sc.measurement_noise, 6) if sc.measurement_noise > 0 else 0.0)
        if prev_cmd is None:
            ekf_ff.update(z)
            if ekf_check is not ekf_ff:
                ekf_check.update(z)
        else:
            ekf_ff.step(prev_cmd, x[Q], z, dt)
            if ekf_check is not ekf_ff:
                ekf_check.step(prev_applied, x[Q], z, dt)
        sol = ctrl.step(x, k, ekf_ff.disturbance())
        scaled = False
        if underwater_fe:
            law, applied, scaled = ctrl.wrench_law(sol), sol.u_uw, sol.scaled
        else:
            applied = sol.u0 * plant.mask
            wa = applied[plat.dofs]
            if not u_box.contains(wa, tol=1e-9):
                applied = applied * u_box.radial_scale(wa)
                scaled = True
            law = applied
        d = injection.at(k * dt) if k < ticks else np.zeros(6)
        for key, val in (("x", x), ("u_cmd", sol.u0), ("u_applied", applied), ("d_true", d),
                         ("dhat_ff", ekf_ff.disturbance()), ("dhat", ekf_check.disturbance()),
                         ("ok", sol.ok), ("relaxed", sol.relaxed), ("scaled", scaled)):
            rows[key].append(val)
        if k == ticks:
            break
        x = rk4_step(plant, x, law, d, dt)
        prev_cmd, prev_applied = sol.u0, applied
    arr = {k: np.array(v) for k, v in rows.items()}
    return Trace(platform, dt, np.arange(ticks + 1) * dt, **arr)


# ---------------------------------------------------------------------------
# Validation


def predicate_dims(spec: stl.Formula, n: int) -> list[int]:
    used = set()
    for p in stl.predicates(spec):
        used.update(i for i, a in enumerate(p.a) if a != 0)
    return sorted(used) if used else list(range(n))


def executed_configs(trace: Trace, plan: Plan, ref: Reference) -> tuple[np.ndarray, np.ndarray]:
    """Executed and planned configurations per tick, angles unwrapped onto the plan."""
    exe = trace.configs(plan.dims)
    planned = np.array([ref.config(t) for t in trace.t])
    for i, d in enumerate(plan.dims):
        if DOF_INDEX[d] >= 3:
            exe[:, i] = planned[:, i] + wrap_angle(exe[:, i] - planned[:, i])
    return exe, planned


def validate(trace: Trace, plan: Plan, spec: stl.Formula, alpha: float, platform: Platform,
             rho_star: float, substeps: int = 1) -> dict:
    """Satisfaction, deviation and containment checks for one executed trace.

    Robustness of the executed trace is evaluated on the nearest ticks to a grid of
    ``plan.dt / substeps``.
    """
    ref = Reference(plan, platform.model)
    exe, planned = executed_configs(trace, plan, ref)
    dims = predicate_dims(spec, len(plan.dims))
    delta = float(np.max(np.abs(exe - planned)[:, dims]))
    if substeps < 1:
        raise ValueError("substeps must be a positive integer")
    h = plan.dt / substeps
    ticks = np.rint(np.arange(plan.N * substeps + 1) * h / trace.dt).astype(int)
    sampled = exe[np.minimum(ticks, len(exe) - 1)]
    rho_exec = stl.robustness(spec, stl.Signal.uniform(sampled, h))
    bound = alpha * platform.D
    axes = [i for i in platform.dofs if platform.D[i] > 0]
    excess = np.abs(trace.dhat[:, axes]) - bound[axes] - CONTAINMENT_TOL
    contained = bool(np.all(excess <= 0))
    first = None
    if not contained:
        k, j = np.argwhere(excess > 0)[0]
        i = axes[j]
        first = {"tick": int(k), "time": float(trace.t[k]), "axis": WRENCH_NAMES[i],
                 "value": float(trace.dhat[k, i]), "bound": float(bound[i])}
    ratio = float(np.max(np.abs(trace.dhat[:, axes]) / bound[axes])) if axes and alpha > 0 else 0.0
    satisfied = rho_exec >= 0.0
    within = delta <= rho_star
    if not contained:
        verdict = "not transferable"
    elif satisfied and within:
        verdict = "validated"
    else:
        verdict = "not validated"
    ua = np.abs(trace.u_applied[:-1, platform.dofs])
    sat = int(np.sum(np.any(ua >= platform.U[platform.dofs] * (1 - 1e-6), axis=1) | trace.scaled[:-1]))
    fuel = float(np.sum(ua) * trace.dt)
    return {
        "alpha": float(alpha), "rho_plan": float(rho_star), "rho_executed": float(rho_exec),
        "satisfied": bool(satisfied), "delta": delta, "delta_within_rho": bool(within),
        "contained": contained, "first_violation": first, "max_dhat_ratio": ratio, "verdict": verdict,
        "saturation_ticks": sat, "relaxed_ticks": int(np.sum(trace.relaxed | ~trace.ok)),
        "fuel": fuel, "duration": float(plan.N * plan.dt), "ticks": int(len(trace.t) - 1),
    }


def combine_verdicts(verdicts) -> str:
    verdicts = list(verdicts)
    if "not transferable" in verdicts:
        return "not transferable"
    if all(v == "validated" for v in verdicts):
        return "validated"
    return "not validated"


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineResult:
    report: dict
    traces: dict[str, Trace] = field(default_factory=dict)
    plans: dict[str, Plan] = field(default_factory=dict)
    transfer: transfer.TransferResult | None = None


def make_plan(sc: Scenario, export_lp: str | Path | None = None) -> Plan:
    prob = sc.planning_problem()
    if export_lp is not None:
        Path(export_lp).write_text(milp.export_lp(planner.encode(prob)))
    return planner.plan(prob)


def make_transfer(sc: Scenario, plan_sp: Plan) -> tuple[transfer.TransferResult, dict]:
    uw = sc.underwater
    args = (uw.model, uw.input_set(), sc.K_for(uw), uw.dbar())
    res = transfer.transfer(plan_sp, sc.spec, *args, alpha=plan_sp.alpha)
    return res, transfer.audit(res, plan_sp, sc.spec, *args)


def run_pipeline(sc: Scenario, seed: int | None = None, out: str | Path | None = None,
                 feedback_equivalence: bool = True, export_lp: str | Path | None = None) -> PipelineResult:
    seed = sc.seed if seed is None else seed
    result = PipelineResult(report={})
    stage = "plan"
    try:
        plan_sp = make_plan(sc, export_lp)
        result.plans["space"] = plan_sp
        stage = "transfer"
        tr, audit = make_transfer(sc, plan_sp)
        result.transfer = tr
        result.plans["underwater"] = tr.plan_uw
        specs = {"space": sc.spec, "underwater": tr.spec_uw}
        platforms = {"space": sc.space, "underwater": sc.underwater}
        section = {}
        for i, name in enumerate(PLATFORMS):
            stage = f"simulate:{name}"
            trace = simulate_closed_loop(sc, name, result.plans[name], plan_sp.alpha, seed + i,
                                         feedback_equivalence)
            result.traces[name] = trace
            stage = f"validate:{name}"
            plat = platforms[name]
            section[name] = validate(trace, result.plans[name], specs[name], plan_sp.alpha, plat,
                                     plan_sp.rho, sc.validation_substeps)
        result.report = {
            "scenario": sc.name, "seed": int(seed),
            "alpha_star": float(plan_sp.alpha), "rho_star": float(plan_sp.rho),
            "dt_sp": float(plan_sp.dt), "dt_star": float(tr.dt_star), "speedup": float(tr.speedup),
            "duration_sp": float(plan_sp.N * plan_sp.dt), "duration_uw": float(tr.duration),
            "injection": sc.injection, "feedback_equivalence": bool(feedback_equivalence),
            "transfer_audit": _jsonable(audit), "platforms": section,
            "verdict": combine_verdicts(s["verdict"] for s in section.values()),
        }
    except (planner.PlanningError, transfer.TransferError) as exc:
        if out is not None:
            emit_outputs(result, sc, out)
        raise PipelineError(stage, str(exc)) from exc
    except Exception as exc:
        if out is not None:
            emit_outputs(result, sc, out)
        raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
    if out is not None:
        emit_outputs(result, sc, out)
    return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def report_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"


def check_report(report: dict) -> None:
    jsonschema.validate(json.loads(report_json(report)), _schema("report"))


# ---------------------------------------------------------------------------
# Output files


def _write_csv(path: Path, header: list[str], data: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(data), delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as f:
        header = f.readline().strip().split(",")
    return header, np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))


def plan_table(plan: Plan) -> tuple[list[str], np.ndarray]:
    n = len(plan.dims)
    inputs = np.vstack([plan.inputs, np.zeros((1, n))])
    header = ["t"] + list(plan.dims) + [f"d{d}" for d in plan.dims] + [f"u_{d}" for d in plan.dims]
    return header, np.column_stack([plan.times, plan.states, inputs])


def save_plan(plan: Plan, path: str | Path, platform: str = "space") -> None:
    data = plan.to_dict()
    data["platform"] = platform
    data["objective"] = plan.objective if math.isfinite(plan.objective) else None
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_plan(path: str | Path) -> tuple[Plan, str]:
    d = json.loads(Path(path).read_text())
    try:
        plan = Plan(float(d["dt"]), tuple(d["dims"]), np.asarray(d["states"], float),
                    np.asarray(d["inputs"], float), float(d["alpha"]), float(d["rho"]), float(d["fuel"]),
                    np.asarray(d["inertia"], float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: not a plan file ({exc})") from None
    if "wrenches" in d:
        plan.wrenches = np.asarray(d["wrenches"], float)
    return plan, d.get("platform", "space")


def emit_outputs(result: PipelineResult, sc: Scenario, outdir: str | Path) -> list[Path]:
    """Write traces, plans, report and figure-panel tables; returns the written paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, plan in result.plans.items():
        header, data = plan_table(plan)
        _write_csv(out / f"plan_{name}.csv", header, data)
        save_plan(plan, out / f"plan_{name}.json", name)
        written += [out / f"plan_{name}.csv", out / f"plan_{name}.json"]
    platforms = {"space": sc.space, "underwater": sc.underwater}
    for name, trace in result.traces.items():
        _write_csv(out / f"trace_{name}.csv", Trace.columns(), trace.table())
        written.append(out / f"trace_{name}.csv")
        if name in result.plans:
            written += write_panels(out, name, trace, result.plans[name], platforms[name],
                                    result.plans["space"].alpha, sc)
    if result.report:
        (out / "report.json").write_text(report_json(result.report))
        written.append(out / "report.json")
    return written


def write_panels(out: Path, name: str, trace: Trace, plan: Plan, plat: Platform, alpha: float,
                 sc: Scenario) -> list[Path]:
    ref = Reference(plan, plat.model if name == "space" else sc.space.model)
    exe, planned = executed_configs(trace, plan, ref)
    dims = list(plan.dims)
    paths = []

    def emit(panel, header, data):
        p = out / f"panel_{name}_{panel}.csv"
        _write_csv(p, header, data)
        paths.append(p)

    emit("trajectory", ["t"] + dims + [f"plan_{d}" for d in dims], np.column_stack([trace.t, exe, planned]))
    active = plat.dofs
    K = sc.K_for(plat)
    tight = tighten(plat.input_set(), K, plat.dbar(), alpha)
    hi = tight.b[: len(active)]
    cols, data = ["t"], [trace.t]
    for j, i in enumerate(active):
        w = WRENCH_NAMES[i]
        cols += [w, f"{w}_limit_hi", f"{w}_limit_lo", f"{w}_tight_hi", f"{w}_tight_lo"]
        n = len(trace.t)
        data += [trace.u_applied[:, i], np.full(n, plat.U[i]), np.full(n, -plat.U[i]),
                 np.full(n, hi[j]), np.full(n, -hi[j])]
    emit("inputs", cols, np.column_stack(data))
    eul = np.array([quat_to_euler(q) for q in trace.x[:, Q]])
    emit("attitude", ["t", "roll", "pitch", "yaw"], np.column_stack([trace.t, eul]))
    cols, data = ["t"], [trace.t]
    for i in active:
        w = WRENCH_NAMES[i]
        b = alpha * plat.D[i]
        n = len(trace.t)
        cols += [f"dhat_{w}", f"{w}_bound_hi", f"{w}_bound_lo"]
        data += [trace.dhat[:, i], np.full(n, b), np.full(n, -b)]
    emit("disturbance", cols, np.column_stack(data))
    return paths


def load_traces(tdir: str | Path) -> dict[str, Trace]:
    out = {}
    for name in PLATFORMS:
        p = Path(tdir) / f"trace_{name}.csv"
        if p.is_file():
            header, data = read_csv(p)
            if header != Trace.columns():
                raise ValueError(f"{p}: unexpected columns")
            out[name] = Trace.from_table(name, data)
    return out
