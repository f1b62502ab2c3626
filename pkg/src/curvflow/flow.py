"""Volume-constrained curvature-prescription flow.

The evolution moves a conformal factor u by

    du/dt = f - K_g(u) - alpha(u),
    alpha(u) = (1/A) * (integral of f over the conformal metric - kbar),

where the additive normalization alpha keeps the conformal volume pinned at
A.  One discrete step freezes the coefficients at the current iterate v and
solves the linear implicit-Euler problem

    (w - u)/dt = e^{-2v} Lap(w) + kbar*(1/A - e^{-2v}) + f
                 - (1/A) * sum_j a_j f_j e^{2 v_j}

through :func:`curvflow.linpar.step_implicit`, then restores the volume by
an additive shift of w.  Stationary limits solve

    -Lap(u) + kbar = (f + lam) e^{2u},   lam = (kbar - int f e^{2u}) / A.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import linpar
from .errors import ConvergenceError, NumericRangeError
from .surface import (
    DiscreteSurface,
    conformal_volume,
    dirichlet_energy,
    gauss_bonnet_residual,
    gauss_curvature,
    integrate,
)

__all__ = [
    "FlowState",
    "FlowConfig",
    "FlowResult",
    "TraceRow",
    "initial_state",
    "alpha",
    "energy",
    "energy_of",
    "compute_lambda",
    "static_residual",
    "ResidualNorms",
    "diagnostics",
    "step",
    "run",
    "default_dt0",
    "explicit_trajectory",
    "write_trace_csv",
    "result_to_json",
    "write_result_json",
]

# Test hook: selftest flips this to -1.0 to verify the invariance battery
# actually detects a sign error in the normalization term.
_ALPHA_SIGN = 1.0

TRACE_HEADER = "t,dt,E,F,alpha,volume,umin,umax,gb_residual"


@dataclass(frozen=True)
class FlowState:
    """A point of the evolution: time, conformal factor, prescription, volume."""

    surf: DiscreteSurface
    u: np.ndarray
    f: np.ndarray
    A: float
    t: float = 0.0

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=float)
        f = np.ascontiguousarray(self.f, dtype=float)
        u.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "f", f)
        if u.shape != (self.surf.n,) or f.shape != (self.surf.n,):
            raise ValueError("u and f must be per-vertex fields of the surface")
        if not self.A > 0.0:
            raise ValueError(f"target volume must be positive, got {self.A}")

    @property
    def kbar(self) -> float:
        return self.surf.kbar

    def volume(self) -> float:
        return conformal_volume(self.surf, self.u)

    def mean_u(self) -> float:
        return integrate(self.surf, self.u)

    def validate(self, tol: float = 1e-9) -> None:
        vol = self.volume()
        if abs(vol - self.A) > tol * self.A:
            raise ValueError(f"conformal volume {vol!r} deviates from A = {self.A!r}")
        if self.mean_u() > 0.5 * math.log(self.A) + tol:
            raise ValueError("mean of u exceeds the constrained maximum 0.5*log(A)")


def initial_state(surf: DiscreteSurface, f, u0, A: float | None = None) -> FlowState:
    """Build a validated flow state, shifting u0 onto the volume constraint.

    With ``A=None`` the target volume is taken from u0 itself; otherwise u0
    is additively corrected so its conformal volume equals A.
    """
    u0 = np.asarray(u0, dtype=float)
    vol = conformal_volume(surf, u0)
    if A is None:
        A = vol
    else:
        u0 = u0 + 0.5 * math.log(A / vol)
    state = FlowState(surf, u0, np.asarray(f, dtype=float), float(A))
    state.validate()
    return state


def alpha(state: FlowState) -> float:
    """Additive normalization (1/A)(integral of f w.r.t. the conformal metric - kbar)."""
    weighted = integrate(state.surf, state.f * np.exp(2.0 * state.u))
    return (_ALPHA_SIGN * weighted - state.kbar) / state.A


def energy_of(surf: DiscreteSurface, f, u) -> float:
    """E_f(u) = 1/2 u^T S u + kbar * mean(u) - 1/2 * integral of f e^{2u}."""
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    return (
        0.5 * dirichlet_energy(surf, u)
        + surf.kbar * integrate(surf, u)
        - 0.5 * integrate(surf, f * np.exp(2.0 * u))
    )


def energy(state: FlowState) -> float:
    """Energy of a flow state; see :func:`energy_of`."""
    return energy_of(state.surf, state.f, state.u)


def compute_lambda(surf: DiscreteSurface, f, u, A: float) -> float:
    """Curvature offset of the static equation: (kbar - int f e^{2u}) / A."""
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    return (surf.kbar - integrate(surf, f * np.exp(2.0 * u))) / A


class ResidualNorms(NamedTuple):
    inf: float
    l2: float


def static_residual(surf: DiscreteSurface, f, u, lam: float) -> ResidualNorms:
    """Norms of r = -Lap(u) + kbar - (f + lam) e^{2u}.

    Returns the max norm and the area-weighted 2-norm.
    """
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    r = (surf.stiffness @ u) / surf.areas + surf.kbar - (f + lam) * np.exp(2.0 * u)
    return ResidualNorms(
        float(np.abs(r).max()), float(math.sqrt(surf.areas @ (r * r)))
    )


def velocity(state: FlowState) -> np.ndarray:
    """Instantaneous flow velocity f - K_g - alpha at the state."""
    return state.f - gauss_curvature(state.surf, state.u) - alpha(state)


def velocity_norm_sq(state: FlowState) -> float:
    """Conformal L2 norm squared of the instantaneous velocity."""
    v = velocity(state)
    return float(state.surf.areas @ (np.exp(2.0 * state.u) * v * v))


def diagnostics(state: FlowState) -> dict:
    """Monitored quantities of a state, including their structural bounds."""
    K = gauss_curvature(state.surf, state.u)
    return {
        "volume": state.volume(),
        "u_mean": state.mean_u(),
        "u_mean_bound": 0.5 * math.log(state.A),
        "alpha": alpha(state),
        "alpha_bound": float(np.abs(state.f).max()) + abs(state.kbar) / state.A,
        "energy": energy(state),
        "velocity_norm_sq": velocity_norm_sq(state),
        "curv_min": float(K.min()),
        "curv_max": float(K.max()),
        "gauss_bonnet_residual": gauss_bonnet_residual(state.surf, state.u),
    }


def default_dt0(state: FlowState) -> float:
    """Conservative first step from the short-time solvability bound.

    dt0 = ( |kbar| e^{2(||u||_inf + 1)}
            + ||f||_inf (1 + e^{2(||u||_inf + 1)} / A) )^{-1}
    """
    grow = math.exp(2.0 * (float(np.abs(state.u).max()) + 1.0))
    f_inf = float(np.abs(state.f).max())
    return 1.0 / (abs(state.kbar) * grow + f_inf * (1.0 + grow / state.A))


def step(
    state: FlowState,
    dt: float,
    picard_iters: int = 1,
    project_volume: bool = True,
) -> tuple[FlowState, float]:
    """One semi-implicit step with frozen coefficients.

    Returns the advanced state and the discrete velocity norm
    F = sum_i a_i e^{2 w_i} ((w_i - u_i)/dt)^2.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    surf, u, f, A = state.surf, state.u, state.f, state.A
    w = u
    for _ in range(max(1, picard_iters)):
        v = w
        if np.abs(v).max() > 350.0:
            raise NumericRangeError("conformal factor too large in flow step")
        exp_neg = np.exp(-2.0 * v)
        weighted = integrate(surf, f * np.exp(2.0 * v))
        alpha_v = (_ALPHA_SIGN * weighted - surf.kbar) / A
        d = f - surf.kbar * exp_neg - alpha_v
        prob = linpar.LinearStepProblem(
            diffusivity=exp_neg,
            linear_coeff=np.zeros(surf.n),
            source=d,
            dt=dt,
        )
        w = linpar.step_implicit(surf, prob, u)
    if project_volume:
        w = w + 0.5 * math.log(A / conformal_volume(surf, w))
    rate = (w - u) / dt
    F_value = float(surf.areas @ (np.exp(2.0 * w) * rate * rate))
    return replace(state, u=w, t=state.t + dt), F_value


@dataclass(frozen=True)
class FlowConfig:
    """Knobs of the adaptive driver; all tolerances must be positive."""

    dt0: float | None = None
    dt_min: float = 1e-8
    dt_max: float = 1.0
    tol_F: float = 1e-10
    tol_res: float = 1e-8
    max_steps: int = 100_000
    picard_iters: int = 1
    project_volume: bool = True
    t_end: float | None = None

    def __post_init__(self):
        if min(self.tol_F, self.tol_res, self.dt_min, self.dt_max) <= 0.0:
            raise ValueError("tolerances and step bounds must be positive")
        if self.dt0 is not None and not (self.dt_min <= self.dt0 <= self.dt_max):
            raise ValueError("need dt_min <= dt0 <= dt_max")


class TraceRow(NamedTuple):
    t: float
    dt: float
    energy: float
    F: float
    alpha: float
    volume: float
    umin: float
    umax: float
    gb_residual: float


@dataclass(frozen=True)
class FlowResult:
    """Terminal state of a run plus the accepted-step history."""

    u_inf: np.ndarray
    lam: float
    residual: float
    residual_l2: float
    converged: bool
    steps: int
    trace: list[TraceRow] = field(repr=False)


def _trace_row(state: FlowState, dt: float, E: float, F: float) -> TraceRow:
    return TraceRow(
        t=state.t,
        dt=dt,
        energy=E,
        F=F,
        alpha=alpha(state),
        volume=state.volume(),
        umin=float(state.u.min()),
        umax=float(state.u.max()),
        gb_residual=gauss_bonnet_residual(state.surf, state.u),
    )


def run(
    state: FlowState,
    config: FlowConfig = FlowConfig(),
    monitor: Callable[[FlowState, TraceRow], None] | None = None,
) -> FlowResult:
    """Drive the flow until stationarity or exhaustion.

    The step is halved whenever the energy increases by more than
    1e-12 * (1 + |E|) and grown by 1.2 (up to dt_max) after five consecutive
    accepted steps.  The run converges once F <= tol_F and the static
    residual at the current multiplier drops below tol_res; with a ``t_end``
    it stops at that horizon regardless.
    """
    dt = config.dt0 if config.dt0 is not None else default_dt0(state)
    dt = min(max(dt, config.dt_min), config.dt_max)
    E = energy(state)
    trace = [_trace_row(state, 0.0, E, velocity_norm_sq(state))]
    if monitor is not None:
        monitor(state, trace[0])
    accepted_in_row = 0
    converged = False
    steps = 0
    while steps < config.max_steps:
        if config.t_end is not None:
            remaining = config.t_end - state.t
            if remaining <= 1e-14 * max(1.0, abs(config.t_end)):
                break
            dt_eff = min(dt, remaining)
        else:
            dt_eff = dt
        new_state, F = step(
            state, dt_eff,
            picard_iters=config.picard_iters,
            project_volume=config.project_volume,
        )
        E_new = energy(new_state)
        if E_new > E + 1e-12 * (1.0 + abs(E)):
            if dt <= config.dt_min * (1.0 + 1e-12):
                break  # cannot refine further; report the best iterate
            dt = max(0.5 * dt, config.dt_min)
            accepted_in_row = 0
            continue
        state, E = new_state, E_new
        steps += 1
        row = _trace_row(state, dt_eff, E, F)
        trace.append(row)
        if monitor is not None:
            monitor(state, row)
        accepted_in_row += 1
        if accepted_in_row >= 5 and dt < config.dt_max:
            dt = min(1.2 * dt, config.dt_max)
            accepted_in_row = 0
        if F <= config.tol_F and config.t_end is None:
            lam = compute_lambda(state.surf, state.f, state.u, state.A)
            res = static_residual(state.surf, state.f, state.u, lam)
            if res.inf <= config.tol_res:
                converged = True
                break
    lam = compute_lambda(state.surf, state.f, state.u, state.A)
    res = static_residual(state.surf, state.f, state.u, lam)
    if config.t_end is not None:
        converged = trace[-1].F <= config.tol_F and res.inf <= config.tol_res
    return FlowResult(
        u_inf=state.u,
        lam=lam,
        residual=res.inf,
        residual_l2=res.l2,
        converged=converged,
        steps=steps,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# explicit fine-step reference (trajectory oracle for small instances)

_explicit_kernel = None


def _explicit_kernel_py(S, areas, f, kbar, A, u0, dt, n_steps, stride, out):
    n = u0.shape[0]
    u = u0.copy()
    du = np.empty(n)
    for i in range(n):
        out[0, i] = u[i]
    row = 1
    for k in range(1, n_steps + 1):
        fint = 0.0
        for i in range(n):
            fint += areas[i] * f[i] * math.exp(2.0 * u[i])
        alpha_t = (fint - kbar) / A
        for i in range(n):
            su = 0.0
            for j in range(n):
                su += S[i, j] * u[j]
            lap = -su / areas[i]
            du[i] = math.exp(-2.0 * u[i]) * (lap - kbar) + f[i] - alpha_t
        for i in range(n):
            u[i] += dt * du[i]
        if k % stride == 0:
            for i in range(n):
                out[row, i] = u[i]
            row += 1
    return u


def explicit_trajectory(
    surf: DiscreteSurface,
    f,
    u0,
    A: float,
    dt: float,
    t_end: float,
    n_samples: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-Euler reference integration of the flow on a small surface.

    Returns sample times (n_samples+1 of them, equispaced from 0 to t_end)
    and the trajectory samples.  Dense stiffness, so intended for tiny
    instances only; the inner loop is jit-compiled when numba is available.
    """
    global _explicit_kernel
    if _explicit_kernel is None:
        try:
            from numba import njit

            _explicit_kernel = njit(cache=True)(_explicit_kernel_py)
        except ImportError:  # pragma: no cover
            _explicit_kernel = _explicit_kernel_py
    n_steps = int(round(t_end / dt))
    if n_steps % n_samples != 0:
        raise ValueError("n_samples must divide the step count")
    stride = n_steps // n_samples
    out = np.empty((n_samples + 1, surf.n))
    _explicit_kernel(
        surf.stiffness.toarray(),
        surf.areas,
        np.asarray(f, dtype=float),
        surf.kbar,
        float(A),
        np.asarray(u0, dtype=float),
        float(dt),
        n_steps,
        stride,
        out,
    )
    times = np.linspace(0.0, n_steps * dt, n_samples + 1)
    return times, out


# ---------------------------------------------------------------------------
# persistence


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def result_to_json(result: FlowResult) -> dict:
    return {
        "u": result.u_inf.tolist(),
        "lambda": result.lam,
        "residual_inf": result.residual,
        "residual_l2": result.residual_l2,
        "steps": result.steps,
        "converged": result.converged,
    }


def write_result_json(path, result: FlowResult, extra: dict | None = None) -> None:
    payload = result_to_json(result)
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
