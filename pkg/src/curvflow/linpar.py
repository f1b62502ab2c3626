"""Implicit-Euler kernel for the linear problem du/dt = a*Lap(u) + c*u + d.

Backward Euler on the diffusion and zeroth-order terms with an explicit
source.  In the lumped discretization one step solves

    diag(m) (w - u)/dt + S w - diag(m*c) w = diag(m) d,   m_i = areas_i / a_i,

which is row-wise equivalent to (w - u)/dt = a*Lap(w) + c*w + d.  With
c <= 0 the step matrix is an M-matrix on grids and the scheme satisfies a
discrete maximum principle unconditionally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatchError, NonSPDSystemError, SolverError
from .surface import DiscreteSurface

__all__ = ["LinearStepProblem", "MaxPrincipleReport", "step_implicit", "check_max_principle"]

_RESIDUAL_TOL = 1e-10
_DENSE_N = 8  # below this, assemble and solve densely (fast path for tiny systems)


@dataclass(frozen=True)
class LinearStepProblem:
    """Coefficients of one implicit step.

    Attributes:
        diffusivity: per-vertex diffusion coefficient a, min > 0.
        linear_coeff: per-vertex zeroth-order coefficient c.
        source: per-vertex source d, treated explicitly.
        dt: time step, > 0.
    """

    diffusivity: np.ndarray
    linear_coeff: np.ndarray
    source: np.ndarray
    dt: float

    def __post_init__(self):
        for attr in ("diffusivity", "linear_coeff", "source"):
            arr = np.ascontiguousarray(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if self.diffusivity.min(initial=np.inf) <= 0.0:
            raise ValueError("diffusivity must be strictly positive")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")


def _smallest_eig_estimate(B) -> float:
    n = B.shape[0]
    if n <= 2048:
        dense = B.toarray() if sp.issparse(B) else np.asarray(B)
        return float(np.linalg.eigvalsh(dense)[0])
    return float(spla.eigsh(B, k=1, which="SA", return_eigenvectors=False)[0])


def step_implicit(surf: DiscreteSurface, prob: LinearStepProblem, u) -> np.ndarray:
    """One backward-Euler step; returns the new field w.

    Raises NonSPDSystemError when positive zeroth-order coefficients destroy
    definiteness, and SolverError when the linear-system residual exceeds
    1e-10 * (||w|| + 1).
    """
    u = np.asarray(u, dtype=float)
    for arr in (prob.diffusivity, prob.linear_coeff, prob.source, u):
        if arr.shape != (surf.n,):
            raise DimensionMismatchError(
                f"field of shape {arr.shape} on surface with {surf.n} vertices"
            )
    m = surf.areas / prob.diffusivity
    shift = m / prob.dt - m * prob.linear_coeff
    rhs = m * u / prob.dt + m * prob.source

    if surf.n <= _DENSE_N:
        B = surf.stiffness.toarray() + np.diag(shift)
        if np.any(prob.linear_coeff > 0.0):
            min_eig = float(np.linalg.eigvalsh(B)[0])
            if min_eig <= 0.0:
                raise NonSPDSystemError("implicit step matrix is not SPD", min_eig)
        w = np.linalg.solve(B, rhs)
        residual = np.linalg.norm(B @ w - rhs)
    else:
        B = (surf.stiffness + sp.diags(shift)).tocsc()
        if np.any(prob.linear_coeff > 0.0):
            min_eig = _smallest_eig_estimate(B)
            if min_eig <= 0.0:
                raise NonSPDSystemError("implicit step matrix is not SPD", min_eig)
        try:
            w = spla.splu(B).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        residual = np.linalg.norm(B @ w - rhs)
    if not np.all(np.isfinite(w)) or residual > _RESIDUAL_TOL * (np.linalg.norm(w) + 1.0):
        raise SolverError(
            f"linear solve residual {residual:.3e} exceeds contract"
        )
    return w


@dataclass(frozen=True)
class MaxPrincipleReport:
    """Outcome of a discrete maximum-principle check; never raises."""

    applicable: bool
    passed: bool
    bound: float
    max_after: float
    argmax: int
    nonpos_case: bool
    nonpos_passed: bool | None
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.applicable and self.passed


def check_max_principle(
    surf: DiscreteSurface,
    prob: LinearStepProblem,
    u_before,
    u_after,
    tol: float = 1e-12,
) -> MaxPrincipleReport:
    """Verify w <= max(0, max u) + dt * max d after one step.

    Only applicable for c = 0 on surfaces with nonnegative stiffness weights
    (``surf.delaunay``); otherwise the report is returned with
    ``applicable=False`` and a reason.  When additionally u <= 0 and d <= 0,
    the nonpositivity variant w <= tol is checked as well.
    """
    u_before = np.asarray(u_before, dtype=float)
    u_after = np.asarray(u_after, dtype=float)
    if not surf.delaunay:
        return MaxPrincipleReport(
            False, False, np.nan, np.nan, -1, False, None,
            reason="surface has negative stiffness weights (delaunay: false)",
        )
    if np.any(prob.linear_coeff != 0.0):
        return MaxPrincipleReport(
            False, False, np.nan, np.nan, -1, False, None,
            reason="zeroth-order coefficient is not identically zero",
        )
    d_max = float(prob.source.max())
    bound = max(0.0, float(u_before.max())) + prob.dt * d_max
    argmax = int(np.argmax(u_after))
    max_after = float(u_after[argmax])
    passed = max_after <= bound + tol
    nonpos_case = bool(u_before.max() <= 0.0 and d_max <= 0.0)
    nonpos_passed = bool(max_after <= tol) if nonpos_case else None
    if nonpos_case:
        passed = passed and nonpos_passed
    return MaxPrincipleReport(
        True, passed, bound, max_after, argmax, nonpos_case, nonpos_passed
    )
