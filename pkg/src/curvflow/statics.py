"""Static curvature prescription: solvers, stability, branch continuation.

The unconstrained problem asks for u with

    -Lap(u) + kbar = g e^{2u}

for a prescription g; with g <= 0 (not identically 0) it has a unique
solution, reached by damped Newton from u = 0.  Constrained critical
points (u, lam) with conformal volume A are polished with a bordered
Newton iteration.  Stability is measured by the smallest eigenvalue of

    (S - 2 diag(a_i g_i e^{2 u_i})) h = nu * diag(a_i) h,

whose sign decides whether u is a discrete weakly stable point.  The
one-parameter family lam -> u_lam obtained by natural continuation in the
offset lam is tracked until Newton fails or stability is lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError
from .flow import compute_lambda, energy_of, static_residual
from .surface import DiscreteSurface, conformal_volume, integrate

__all__ = [
    "solve_f_nonpositive",
    "newton_polish_constrained",
    "stability_eigenvalue",
    "BranchPoint",
    "BranchResult",
    "continue_branch",
    "m_upper_bound",
    "LambdaEpsilonReport",
    "lambda_epsilon_check",
    "bump_field",
    "bump_datum",
]


def _static_residual_weak(surf, g, u):
    """Row-scaled residual S u + a * (kbar - g e^{2u}) and the factor e^{2u}."""
    e2u = np.exp(2.0 * u)
    R = surf.stiffness @ u + surf.areas * (surf.kbar - g * e2u)
    return R, e2u


def _newton_static(surf, g, u0, tol, max_iter):
    """Damped Newton for -Lap(u) + kbar = g e^{2u}; returns (u, iters, res_inf)."""
    u = np.asarray(u0, dtype=float).copy()
    R, e2u = _static_residual_weak(surf, g, u)
    res = float(np.abs(R / surf.areas).max())
    for it in range(max_iter):
        if res <= tol:
            return u, it, res
        J = (surf.stiffness - 2.0 * sp.diags(surf.areas * g * e2u)).tocsc()
        try:
            du = spla.splu(J).solve(-R)
        except RuntimeError as exc:
            raise ConvergenceError(f"singular Newton system: {exc}", best=u) from exc
        damping = 1.0
        while True:
            u_try = u + damping * du
            with np.errstate(over="ignore"):
                e2u_try = np.exp(2.0 * u_try)
            if np.all(np.isfinite(e2u_try)):
                R_try = surf.stiffness @ u_try + surf.areas * (
                    surf.kbar - g * e2u_try
                )
                res_try = float(np.abs(R_try / surf.areas).max())
                if res_try <= (1.0 - 1e-4 * damping) * res:
                    break
            damping *= 0.5
            if damping < 1.0 / 1024.0:
                raise ConvergenceError(
                    f"Newton stagnated at residual {res:.3e}", best=u
                )
        u, R, e2u, res = u_try, R_try, e2u_try, res_try
    if res <= tol:
        return u, max_iter, res
    raise ConvergenceError(f"Newton did not reach tol, residual {res:.3e}", best=u)


def solve_f_nonpositive(
    surf: DiscreteSurface, f, u0=None, tol: float = 1e-10, max_iter: int = 60
) -> np.ndarray:
    """Unique solution of -Lap(u) + kbar = f e^{2u} for f <= 0, f not == 0.

    Damped Newton started from u0 (zeros by default).  The weak Jacobian
    S + diag(-2 a_i f_i e^{2u_i}) stays positive definite for f <= 0, so
    the iteration is globally well posed; stagnation raises
    ConvergenceError with the best iterate attached.
    """
    f = np.asarray(f, dtype=float)
    if np.any(f > 0.0):
        raise ValueError("prescription must be nonpositive everywhere")
    if np.all(f == 0.0):
        raise ValueError("prescription must not vanish identically")
    if u0 is None:
        u0 = np.zeros(surf.n)
    u, _, _ = _newton_static(surf, f, u0, tol, max_iter)
    return u


def newton_polish_constrained(
    surf: DiscreteSurface,
    f,
    u0,
    A: float,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> tuple[np.ndarray, float]:
    """Polish (u, lam) on the bordered system {static residual = 0, volume = A}.

    Expects u0 near a constrained critical point (typically a flow output);
    converges quadratically.  A singular bordered Jacobian (degenerate
    critical point) raises ConvergenceError.
    """
    f = np.asarray(f, dtype=float)
    u = np.asarray(u0, dtype=float).copy()
    lam = compute_lambda(surf, f, u, A)

    def assemble(u, lam):
        e2u = np.exp(2.0 * u)
        R_u = surf.stiffness @ u + surf.areas * (surf.kbar - (f + lam) * e2u)
        R_c = float(surf.areas @ e2u) - A
        res = max(float(np.abs(R_u / surf.areas).max()), abs(R_c) / max(1.0, A))
        return e2u, R_u, R_c, res

    e2u, R_u, R_c, res = assemble(u, lam)
    for _ in range(max_iter):
        if res <= tol:
            return u, lam
        w = surf.areas * e2u
        J = sp.bmat(
            [
                [surf.stiffness - 2.0 * sp.diags((f + lam) * w), -w[:, None]],
                [2.0 * w[None, :], None],
            ],
            format="csc",
        )
        rhs = -np.concatenate([R_u, [R_c]])
        try:
            delta = spla.splu(J).solve(rhs)
        except RuntimeError as exc:
            raise ConvergenceError(
                f"degenerate critical point, bordered Jacobian singular: {exc}",
                best=(u, lam),
            ) from exc
        damping = 1.0
        while True:
            u_try = u + damping * delta[:-1]
            lam_try = lam + damping * delta[-1]
            e2u_t, R_u_t, R_c_t, res_t = assemble(u_try, lam_try)
            if np.isfinite(res_t) and res_t <= (1.0 - 1e-4 * damping) * res:
                break
            damping *= 0.5
            if damping < 1.0 / 256.0:
                raise ConvergenceError(
                    f"constrained Newton stagnated at residual {res:.3e}",
                    best=(u, lam),
                )
        u, lam, e2u, R_u, R_c, res = u_try, lam_try, e2u_t, R_u_t, R_c_t, res_t
    if res <= tol:
        return u, lam
    raise ConvergenceError(
        f"constrained Newton did not reach tol, residual {res:.3e}", best=(u, lam)
    )


def stability_eigenvalue(
    surf: DiscreteSurface,
    f,
    u,
    lam: float,
    tol: float = 1e-10,
    max_iter: int = 400,
    return_vector: bool = False,
):
    """Smallest eigenvalue of (S - 2 diag(a g e^{2u])) h = nu diag(a) h.

    Here g = f + lam; nu >= 0 means discretely weakly stable.  Shifted
    inverse iteration with a safe initial shift below the whole spectrum,
    switching to Rayleigh-quotient updates once the direction settles.
    """
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    g = (f + lam) * np.exp(2.0 * u)
    A_mat = (surf.stiffness - 2.0 * sp.diags(surf.areas * g)).tocsr()
    b = surf.areas  # mass form is diagonal
    sigma = -2.0 * max(float(g.max()), 0.0) - 1.0

    x = 1.0 + np.arange(surf.n) / (surf.n + 1.0)
    x /= math.sqrt(x @ (b * x))
    factor = spla.splu((A_mat - sigma * sp.diags(b)).tocsc())
    rho = float(x @ (A_mat @ x))
    for it in range(max_iter):
        y = factor.solve(b * x)
        y /= math.sqrt(y @ (b * y))
        Ay = A_mat @ y
        rho = float(y @ Ay)
        resid = np.linalg.norm(Ay - rho * (b * y))
        scale = np.linalg.norm(Ay) + abs(rho) * np.linalg.norm(b * y) + 1e-300
        x = y
        if resid <= tol * scale:
            return (rho, y) if return_vector else rho
        if it >= 8:  # Rayleigh-quotient acceleration
            try:
                factor = spla.splu((A_mat - rho * sp.diags(b)).tocsc())
            except RuntimeError:
                # shift hit the eigenvalue; the iterate is already converged
                return (rho, y) if return_vector else rho
    raise ConvergenceError(f"inverse iteration stalled near {rho!r}", best=rho)


@dataclass(frozen=True)
class BranchPoint:
    """One solution on the stable branch lam -> u_lam."""

    lam: float
    u: np.ndarray
    volume: float
    stab_eig: float
    newton_iters: int
    res_inf: float


@dataclass(frozen=True)
class BranchResult:
    points: list[BranchPoint]
    stop_reason: str
    lambda_stop: float | None = None  # first grid offset past the stable branch


def continue_branch(
    surf: DiscreteSurface,
    f,
    lambda_grid,
    newton_tol: float = 1e-10,
    max_iter: int = 60,
) -> BranchResult:
    """Natural continuation of solutions of -Lap(u) + kbar = (f + lam) e^{2u}.

    Requires nonconstant f with max f = 0 and an increasing grid starting at
    lam <= 0, where f + lam <= 0 makes the first solve well posed from u = 0.
    Each subsequent point reuses the previous solution as initial guess and
    records its volume and stability eigenvalue.  The branch stops at the
    first offset where Newton fails or stability is lost; that offset
    brackets the end of the stable branch from above.
    """
    f = np.asarray(f, dtype=float)
    grid = np.asarray(lambda_grid, dtype=float)
    if abs(f.max()) > 1e-12:
        raise ValueError("prescription must satisfy max f = 0")
    if np.ptp(f) == 0.0:
        raise ValueError("prescription must be nonconstant")
    if grid.size == 0 or np.any(np.diff(grid) <= 0.0):
        raise ValueError("lambda grid must be strictly increasing")
    if grid[0] > 0.0:
        raise ValueError("lambda grid must start at a nonpositive offset")

    points: list[BranchPoint] = []
    u = np.zeros(surf.n)
    for lam in grid:
        try:
            u_new, iters, res = _newton_static(surf, f + lam, u, newton_tol, max_iter)
        except ConvergenceError:
            return BranchResult(points, "newton-failure", float(lam))
        nu = stability_eigenvalue(surf, f, u_new, float(lam))
        if nu < 0.0:
            return BranchResult(points, "instability", float(lam))
        u = u_new
        points.append(
            BranchPoint(
                lam=float(lam),
                u=u.copy(),
                volume=conformal_volume(surf, u),
                stab_eig=nu,
                newton_iters=iters,
                res_inf=res,
            )
        )
    return BranchResult(points, "end-of-grid")


def m_upper_bound(surf: DiscreteSurface, f, A: float) -> float:
    """Energy of the constant volume-A factor: an upper bound for the
    constrained infimum: (kbar log A - A * integral of f) / 2."""
    if not A > 0.0:
        raise ValueError(f"volume must be positive, got {A}")
    return 0.5 * (surf.kbar * math.log(A) - A * integrate(surf, f))


@dataclass(frozen=True)
class LambdaEpsilonReport:
    """Evaluation of the small-multiplier criterion at a static solution."""

    energy: float
    energy_cap: float        # eps * A / 2
    log_term: float          # |kbar| log(A) / (2 A)
    log_cap: float           # eps / 2
    applicable: bool
    lam: float
    eps: float
    holds: bool | None       # lam < eps, asserted only when applicable


def lambda_epsilon_check(
    surf: DiscreteSurface, f, u, lam: float, A: float, eps: float
) -> LambdaEpsilonReport:
    """If E_f(u) < eps*A/2 and |kbar| log(A)/(2A) < eps/2, then lam < eps.

    Returns the three quantities and the verdict; with a false premise the
    check is reported as not applicable and nothing is asserted.
    """
    E = energy_of(surf, f, u)
    log_term = abs(surf.kbar) * math.log(A) / (2.0 * A)
    applicable = E < eps * A / 2.0 and log_term < eps / 2.0
    return LambdaEpsilonReport(
        energy=E,
        energy_cap=eps * A / 2.0,
        log_term=log_term,
        log_cap=eps / 2.0,
        applicable=applicable,
        lam=lam,
        eps=eps,
        holds=bool(lam < eps) if applicable else None,
    )


def bump_field(
    surf: DiscreteSurface, center, radius: float, height: float = 2.0
) -> np.ndarray:
    """Smooth compactly supported bump around ``center``, peak value ``height``.

    Uses vertex coordinates; on 2-d (grid) coordinates distances are taken
    periodically on the unit torus.
    """
    if surf.coords is None:
        raise ValueError("surface carries no vertex coordinates")
    center = np.asarray(center, dtype=float)
    diff = surf.coords - center
    if surf.coords.shape[1] == 2:
        diff = diff - np.round(diff)  # periodic unit square
    dist = np.linalg.norm(diff, axis=1)
    psi = np.zeros(surf.n)
    inside = dist < radius
    psi[inside] = height * np.cos(0.5 * math.pi * dist[inside] / radius) ** 2
    return psi


def bump_datum(surf: DiscreteSurface, psi, A: float) -> np.ndarray:
    """Scale a nonnegative bump so the factor tau*psi has conformal volume A.

    The volume tau -> int e^{2 tau psi} increases from 1, so a solution
    exists exactly for A >= 1; tau is found by bisection.
    """
    psi = np.asarray(psi, dtype=float)
    if np.any(psi < 0.0) or not np.any(psi > 0.0):
        raise ValueError("bump profile must be nonnegative and nontrivial")
    if A < 1.0:
        raise ValueError(f"bump datum needs target volume >= 1, got {A}")

    def vol(tau):
        return conformal_volume(surf, tau * psi)

    lo, hi = 0.0, 1.0
    for _ in range(200):
        if vol(hi) >= A:
            break
        hi *= 2.0
    else:
        raise ConvergenceError(f"could not bracket bump scale for A = {A}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if vol(mid) < A:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi) * psi
