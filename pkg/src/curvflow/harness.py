"""Experiment configuration, scenario runners, and structured persistence.

A run is described by a single JSON document:

    {
      "scenario": "constant-f" | "sign-changing" | "no-local-minimiser" | "flow",
      "surface": {"type": "grid", "n": 16, "kbar": -1.0}
                 | {"type": "mesh", "path": "...", "kbar": -12.57,
                    "allow_nonneg_chi": false},
      "f":  {"type": "constant", "value": 0.3}
            | {"type": "cos-bump", "center": [0.5, 0.5], "radius": 0.25,
               "amplitude": 1.0, "offset": 0.0}
            | {"type": "neg-constant-plus-bump", "c": 0.5, "eps": 0.05,
               "center": [0.5, 0.5], "radius": 0.25}
            | {"type": "capped-max-zero", "amplitude": 1.0, "kx": 1, "ky": 1}
            | {"type": "file", "path": "f.json"},
      "A": 4.0,
      "u0": {"type": "constant"} | {"type": "bump", ...} | {"type": "file", ...},
      "flow": {"dt_max": 1.0, "tol_F": 1e-12, ...},
      "lambda_grid": {"start": -1.0, "stop": 1.0, "step": 0.05},
      "assertions": {...},
      "seed": 0
    }

Analytic prescriptions are restricted to this closed vocabulary so runs stay
reproducible without an expression interpreter.  Outputs per run: trace.csv,
result.json, manifest.json (and branch.csv/branch.json for continuations),
all UTF-8 with LF endings; with a fixed config and seed the data files are
byte-identical across runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, flow, statics
from .errors import CurvflowError
from .surface import DiscreteSurface, build_periodic_grid, load_mesh

__all__ = [
    "ConfigError",
    "ScenarioFailure",
    "ExperimentConfig",
    "load_config",
    "build_surface",
    "build_field",
    "build_initial",
    "run_scenario",
    "run_branch",
    "write_branch_csv",
    "RESULT_SCHEMA",
]


class ConfigError(CurvflowError):
    """Invalid experiment configuration (exit code 2)."""


class ScenarioFailure(CurvflowError):
    """A scenario assertion failed (exit code 1)."""


RESULT_SCHEMA = {
    "type": "object",
    "required": ["u", "lambda", "residual_inf", "residual_l2", "steps", "converged"],
    "properties": {
        "u": {"type": "array", "items": {"type": "number"}},
        "lambda": {"type": "number"},
        "residual_inf": {"type": "number"},
        "residual_l2": {"type": "number"},
        "steps": {"type": "integer", "minimum": 0},
        "converged": {"type": "boolean"},
    },
    "additionalProperties": True,
}


def build_surface(spec: dict) -> DiscreteSurface:
    kind = spec.get("type")
    if kind == "grid":
        try:
            return build_periodic_grid(int(spec["n"]), float(spec["kbar"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad grid surface spec: {exc}") from exc
    if kind == "mesh":
        try:
            return load_mesh(
                spec["path"],
                kbar=spec.get("kbar"),
                allow_nonneg_euler=bool(spec.get("allow_nonneg_chi", False)),
            )
        except (KeyError, CurvflowError) as exc:
            raise ConfigError(f"bad mesh surface spec: {exc}") from exc
    raise ConfigError(f"unknown surface type {kind!r}")


def _load_vertex_file(surf: DiscreteSurface, path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        values = np.asarray(json.load(fh), dtype=float)
    if values.shape != (surf.n,):
        raise ConfigError(
            f"per-vertex file {path!r} has {values.size} values, surface has {surf.n}"
        )
    return values


def build_field(surf: DiscreteSurface, spec: dict) -> np.ndarray:
    """Evaluate an analytic prescription from the closed vocabulary."""
    kind = spec.get("type")
    try:
        if kind == "constant":
            return np.full(surf.n, float(spec["value"]))
        if kind == "cos-bump":
            return float(spec.get("offset", 0.0)) + statics.bump_field(
                surf, spec["center"], float(spec["radius"]),
                height=float(spec.get("amplitude", 1.0)),
            )
        if kind == "neg-constant-plus-bump":
            c = float(spec["c"])
            eps = float(spec["eps"])
            if not 0.0 < eps <= c:
                raise ConfigError("need 0 < eps <= c so the field stays nonpositive")
            phi = statics.bump_field(
                surf, spec["center"], float(spec["radius"]), height=1.0
            )
            return -c + eps * phi
        if kind == "capped-max-zero":
            if surf.coords is None or surf.coords.shape[1] < 2:
                raise ConfigError("capped-max-zero needs vertex coordinates")
            x, y = surf.coords[:, 0], surf.coords[:, 1]
            g = float(spec.get("amplitude", 1.0)) * (
                np.cos(2.0 * math.pi * float(spec.get("kx", 1)) * x)
                + np.cos(2.0 * math.pi * float(spec.get("ky", 1)) * y)
            )
            return np.minimum(g - g.max(), 0.0)
        if kind == "file":
            return _load_vertex_file(surf, spec["path"])
    except ConfigError:
        raise
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"bad field spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown field type {kind!r}")


def build_initial(surf: DiscreteSurface, spec: dict, A: float) -> np.ndarray:
    kind = spec.get("type", "constant")
    try:
        if kind == "constant":
            return np.full(surf.n, 0.5 * math.log(A))
        if kind == "bump":
            psi = statics.bump_field(
                surf, spec["center"], float(spec["radius"]),
                height=float(spec.get("height", 2.0)),
            )
            return statics.bump_datum(surf, psi, A)
        if kind == "file":
            return _load_vertex_file(surf, spec["path"])
    except ConfigError:
        raise
    except (KeyError, ValueError, OSError, CurvflowError) as exc:
        raise ConfigError(f"bad initial datum spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown initial datum type {kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    surface: dict
    f: dict
    A: float
    scenario: str = "flow"
    u0: dict = field(default_factory=lambda: {"type": "constant"})
    flow: flow.FlowConfig = flow.FlowConfig()
    lambda_grid: np.ndarray | None = None
    assertions: dict = field(default_factory=dict)
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_KNOWN_SCENARIOS = ("flow", "constant-f", "sign-changing", "no-local-minimiser")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    for key in ("surface", "f", "A"):
        if key not in doc:
            raise ConfigError(f"configuration is missing required key {key!r}")
    scenario = doc.get("scenario", "flow")
    if scenario not in _KNOWN_SCENARIOS:
        raise ConfigError(
            f"unknown scenario {scenario!r}; expected one of {_KNOWN_SCENARIOS}"
        )
    A = float(doc["A"])
    if not A > 0.0:
        raise ConfigError(f"target volume A must be positive, got {A}")
    try:
        flow_cfg = flow.FlowConfig(**doc.get("flow", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad flow configuration: {exc}") from exc
    grid = None
    if "lambda_grid" in doc:
        gspec = doc["lambda_grid"]
        try:
            start, stop = float(gspec["start"]), float(gspec["stop"])
            step = float(gspec["step"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad lambda_grid spec: {exc}") from exc
        if step <= 0.0 or stop < start:
            raise ConfigError("lambda_grid needs step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        grid = start + step * np.arange(count)
    return ExperimentConfig(
        surface=doc["surface"],
        f=doc["f"],
        A=A,
        scenario=scenario,
        u0=doc.get("u0", {"type": "constant"}),
        flow=flow_cfg,
        lambda_grid=grid,
        assertions=doc.get("assertions", {}),
        seed=int(doc.get("seed", 0)),
        raw=doc,
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON in {path!r} at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}"
        ) from exc
    return parse_config(doc)


# ---------------------------------------------------------------------------
# scenario runners


def _scenario_checks(cfg: ExperimentConfig, surf, f, result) -> dict:
    """Evaluate the scenario's conclusion at the configured instance scale."""
    checks: dict[str, bool | float] = {}
    asserts = cfg.assertions
    if cfg.scenario == "constant-f":
        if cfg.f.get("type") != "constant":
            raise ConfigError("constant-f scenario needs a constant prescription")
        c = float(cfg.f["value"])
        lam_exact = surf.kbar / cfg.A - c
        u_exact = 0.5 * math.log(cfg.A)
        tol_u = float(asserts.get("tol_u", 1e-7))
        tol_lam = float(asserts.get("tol_lambda", 1e-9))
        checks["converged"] = result.converged
        checks["u_error"] = float(np.abs(result.u_inf - u_exact).max())
        checks["lambda_error"] = abs(result.lam - lam_exact)
        checks["passed"] = bool(
            result.converged
            and checks["u_error"] <= tol_u
            and checks["lambda_error"] <= tol_lam
        )
    elif cfg.scenario == "sign-changing":
        checks["converged"] = result.converged
        checks["lambda"] = result.lam
        checks["passed"] = bool(result.converged and result.lam > 0.0)
    elif cfg.scenario == "no-local-minimiser":
        nu = statics.stability_eigenvalue(surf, f, result.u_inf, result.lam)
        checks["converged"] = result.converged
        checks["lambda"] = result.lam
        checks["stab_eig"] = nu
        checks["passed"] = bool(result.converged and result.lam > 0.0 and nu < 0.0)
    else:
        checks["passed"] = True
    return checks


def run_scenario(cfg: ExperimentConfig, out_dir, quiet: bool = False) -> bool:
    """Execute a flow scenario; writes trace.csv, result.json, manifest.json."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    surf = build_surface(cfg.surface)
    f = build_field(surf, cfg.f)
    u0 = build_initial(surf, cfg.u0, cfg.A)
    state = flow.initial_state(surf, f, u0, cfg.A)
    result = flow.run(state, cfg.flow)
    checks = _scenario_checks(cfg, surf, f, result)
    passed = bool(checks["passed"])

    flow.write_trace_csv(out / "trace.csv", result.trace)
    extra = {
        "scenario": cfg.scenario,
        "A": cfg.A,
        "kbar": surf.kbar,
        "assertions": checks,
    }
    flow.write_result_json(out / "result.json", result, extra=extra)
    _validate_result(out / "result.json")
    _write_manifest(out / "manifest.json", cfg, passed, time.perf_counter() - t0)
    if not quiet:
        verdict = "pass" if passed else "FAIL"
        print(
            f"[{cfg.scenario}] {verdict}: lambda = {result.lam:.6g}, "
            f"residual = {result.residual:.3e}, steps = {result.steps}"
        )
    return passed


def write_branch_csv(path, points) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("lambda,V,stab_eig,newton_iters,res_inf\n")
        for p in points:
            fh.write(
                f"{p.lam:.17g},{p.volume:.17g},{p.stab_eig:.17g},"
                f"{p.newton_iters},{p.res_inf:.17g}\n"
            )


def run_branch(cfg: ExperimentConfig, out_dir, quiet: bool = False) -> bool:
    """Continue the static branch; writes branch.csv, branch.json, manifest.json."""
    t0 = time.perf_counter()
    if cfg.lambda_grid is None:
        raise ConfigError("branch run needs a lambda_grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    surf = build_surface(cfg.surface)
    f = build_field(surf, cfg.f)
    branch = statics.continue_branch(surf, f, cfg.lambda_grid)
    pts = branch.points

    volumes = np.array([p.volume for p in pts])
    v_monotone = bool(pts and np.all(np.diff(volumes) > 0.0)) if len(pts) > 1 else bool(pts)
    u_monotone = all(
        float((b.u - a.u).min()) > 0.0 for a, b in zip(pts, pts[1:])
    )
    stable_nonpos = all(p.stab_eig > 0.0 for p in pts if p.lam <= 0.0)
    passed = bool(pts) and v_monotone and u_monotone and stable_nonpos

    write_branch_csv(out / "branch.csv", pts)
    payload = {
        "stop_reason": branch.stop_reason,
        "lambda_stop": branch.lambda_stop,
        "v_monotone": v_monotone,
        "u_monotone": u_monotone,
        "stable_for_nonpositive_lambda": stable_nonpos,
        "points": [
            {
                "lambda": p.lam,
                "V": p.volume,
                "stab_eig": p.stab_eig,
                "newton_iters": p.newton_iters,
                "res_inf": p.res_inf,
                "u": p.u.tolist(),
            }
            for p in pts
        ],
    }
    with open(out / "branch.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out / "manifest.json", cfg, passed, time.perf_counter() - t0)
    if not quiet:
        verdict = "pass" if passed else "FAIL"
        tail = (
            f"truncated at lambda = {branch.lambda_stop:.6g} ({branch.stop_reason})"
            if branch.stop_reason != "end-of-grid"
            else "full grid"
        )
        print(f"[branch] {verdict}: {len(pts)} points, {tail}")
    return passed


def _validate_result(path) -> None:
    import jsonschema

    with open(path, "r", encoding="utf-8") as fh:
        jsonschema.validate(json.load(fh), RESULT_SCHEMA)


def _write_manifest(path, cfg: ExperimentConfig, passed: bool, wall: float) -> None:
    manifest = {
        "config_sha256": cfg.digest(),
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "passed": passed,
        "wall_time_s": wall,
        "versions": {
            "curvflow": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    import scipy

    manifest["versions"]["scipy"] = scipy.__version__
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
