"""Built-in invariant battery: surface identities, maximum principle,
oracle equivalences, flow invariants, and mutation checks on small
instances.  Used by ``curvflow selftest``; every check is deterministic."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import flow, linpar, statics
from .surface import (
    build_periodic_grid,
    build_two_vertex,
    conformal_volume,
    dirichlet_energy,
    gauss_bonnet_residual,
    genus2_mesh,
    integrate,
    laplacian,
    load_mesh,
    save_off,
    thin_tetrahedron,
)

__all__ = ["run_selftest"]


def _surface_identities(surf, rng, checks):
    tag = surf.name
    worst_rowsum = 0.0
    worst_gb = 0.0
    worst_shift = 0.0
    worst_adjoint = 0.0
    for _ in range(100):
        u = rng.uniform(-1.0, 1.0, surf.n)
        v = rng.uniform(-1.0, 1.0, surf.n)
        worst_rowsum = max(worst_rowsum, abs(float((surf.stiffness @ u).sum())))
        worst_gb = max(worst_gb, gauss_bonnet_residual(surf, u))
        c = rng.uniform(-2.0, 2.0)
        worst_shift = max(
            worst_shift,
            abs(dirichlet_energy(surf, u + c) - dirichlet_energy(surf, u)),
        )
        worst_adjoint = max(
            worst_adjoint,
            abs(
                integrate(surf, v * laplacian(surf, u))
                - integrate(surf, u * laplacian(surf, v))
            ),
        )
    checks.append((f"{tag}: stiffness row sums vanish", worst_rowsum <= 1e-12,
                   f"max |sum (Su)| = {worst_rowsum:.2e}"))
    checks.append((f"{tag}: conformal curvature integral fixed", worst_gb <= 1e-12 * abs(surf.kbar),
                   f"max residual = {worst_gb:.2e}"))
    checks.append((f"{tag}: energy shift invariance", worst_shift <= 1e-10,
                   f"max deviation = {worst_shift:.2e}"))
    checks.append((f"{tag}: self-adjoint Laplacian", worst_adjoint <= 1e-12,
                   f"max deviation = {worst_adjoint:.2e}"))


def _max_principle_battery(surf, rng, n_problems=100):
    """Returns (applicable, violations, detail)."""
    if not surf.delaunay:
        return False, 0, "skipped: delaunay: false (negative stiffness weights)"
    violations = 0
    for _ in range(n_problems):
        prob = linpar.LinearStepProblem(
            diffusivity=rng.uniform(0.5, 2.0, surf.n),
            linear_coeff=np.zeros(surf.n),
            source=rng.uniform(-1.0, 1.0, surf.n),
            dt=float(rng.uniform(1e-3, 1.0)),
        )
        u = rng.uniform(-1.0, 1.0, surf.n)
        w = linpar.step_implicit(surf, prob, u)
        report = linpar.check_max_principle(surf, prob, u, w)
        if not report.passed:
            violations += 1
    return True, violations, f"{violations} violations in {n_problems} random steps"


def _invariance_deviation(surf, shift=3.7, steps=200, dt=0.02, project=True):
    """Max entrywise deviation between trajectories for f and f + shift."""
    rng = np.random.default_rng(7)
    f = rng.uniform(-1.0, 1.0, surf.n)
    u0 = rng.uniform(-0.3, 0.3, surf.n)
    s1 = flow.initial_state(surf, f, u0, 1.5)
    s2 = flow.initial_state(surf, f + shift, u0, 1.5)
    worst = 0.0
    for _ in range(steps):
        s1, _ = flow.step(s1, dt, project_volume=project)
        s2, _ = flow.step(s2, dt, project_volume=project)
        worst = max(worst, float(np.abs(s1.u - s2.u).max()))
    return worst


def run_selftest(quiet: bool = False) -> int:
    """Run the battery; prints one line per check and returns a process exit code."""
    rng = np.random.default_rng(0)
    checks: list[tuple[str, bool, str]] = []
    notices: list[str] = []

    grid = build_periodic_grid(8, -1.0)
    _surface_identities(grid, rng, checks)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "genus2.off"
        save_off(path, *genus2_mesh())
        mesh = load_mesh(path)
    checks.append((
        "genus-2 mesh: Euler characteristic -2",
        mesh.euler_char == -2,
        f"chi = {mesh.euler_char}",
    ))
    _surface_identities(mesh, rng, checks)

    applicable, violations, detail = _max_principle_battery(grid, rng)
    checks.append(("grid: maximum principle battery", applicable and violations == 0, detail))

    # step matrix is inverse-positive on grids (M-matrix)
    small = build_periodic_grid(4, -1.0)
    prob = linpar.LinearStepProblem(
        diffusivity=np.full(small.n, 1.3),
        linear_coeff=np.zeros(small.n),
        source=np.zeros(small.n),
        dt=0.4,
    )
    m = small.areas / prob.diffusivity
    B = small.stiffness.toarray() + np.diag(m / prob.dt)
    inv_min = float(np.linalg.inv(B).min())
    checks.append(("grid: step matrix inverse nonnegative", inv_min >= -1e-13,
                   f"min inverse entry = {inv_min:.2e}"))

    # two-vertex implicit step against a directly inverted 2x2 system
    two = build_two_vertex(-1.0)
    prob2 = linpar.LinearStepProblem(
        diffusivity=np.array([1.0, 2.0]),
        linear_coeff=np.zeros(2),
        source=np.array([0.3, -0.1]),
        dt=0.25,
    )
    u2 = np.array([0.2, -0.4])
    w = linpar.step_implicit(two, prob2, u2)
    m2 = two.areas / prob2.diffusivity
    B2 = two.stiffness.toarray() + np.diag(m2 / prob2.dt)
    rhs2 = m2 * u2 / prob2.dt + m2 * prob2.source
    det = B2[0, 0] * B2[1, 1] - B2[0, 1] * B2[1, 0]
    w_ref = np.array(
        [
            (B2[1, 1] * rhs2[0] - B2[0, 1] * rhs2[1]) / det,
            (B2[0, 0] * rhs2[1] - B2[1, 0] * rhs2[0]) / det,
        ]
    )
    dev = float(np.abs(w - w_ref).max())
    checks.append(("two-vertex: implicit step matches 2x2 inverse", dev <= 1e-12,
                   f"deviation = {dev:.2e}"))

    # trajectory oracle: semi-implicit vs explicit fine-step reference
    f2 = np.array([0.2, -0.4])
    u0 = np.array([0.25, -0.25])
    state = flow.initial_state(two, f2, u0, 1.0)
    times, ref = flow.explicit_trajectory(two, f2, state.u, 1.0, 1e-6, 2.0, 20)
    s = state
    worst = 0.0
    for k in range(1, len(times)):
        target = times[k]
        while s.t < target - 1e-12:
            s, _ = flow.step(s, min(1e-4, target - s.t))
        worst = max(worst, float(np.abs(s.u - ref[k]).max()))
    checks.append(("two-vertex: semi-implicit matches explicit reference",
                   worst <= 1e-5, f"sup deviation = {worst:.2e}"))

    # flow invariants on a small grid run
    c = 0.3
    A = 4.0
    state = flow.initial_state(
        grid, np.full(grid.n, c), rng.uniform(-0.5, 0.5, grid.n), A
    )
    bounds_ok = True

    def monitor(st, row):
        nonlocal bounds_ok
        d = flow.diagnostics(st)
        if abs(d["alpha"]) > d["alpha_bound"] + 1e-12:
            bounds_ok = False
        if d["u_mean"] > d["u_mean_bound"] + 1e-12:
            bounds_ok = False

    result = flow.run(
        state,
        flow.FlowConfig(tol_F=1e-16, tol_res=1e-9, dt_max=1.0, max_steps=5000),
        monitor=monitor,
    )
    energies = np.array([row.energy for row in result.trace])
    vol_drift = max(abs(row.volume - A) for row in result.trace)
    u_err = float(np.abs(result.u_inf - 0.5 * math.log(A)).max())
    lam_err = abs(result.lam - (grid.kbar / A - c))
    checks.append(("flow: constant prescription converges to constant factor",
                   result.converged and u_err <= 1e-7 and lam_err <= 1e-9,
                   f"u error {u_err:.2e}, lambda error {lam_err:.2e}"))
    checks.append(("flow: energy non-increasing along accepted steps",
                   bool(np.all(np.diff(energies) <= 1e-12 * (1.0 + np.abs(energies[:-1])))),
                   f"max increase = {float(np.diff(energies).max()):.2e}"))
    checks.append(("flow: volume pinned to A", vol_drift <= 1e-12 * A,
                   f"max |V - A| = {vol_drift:.2e}"))
    checks.append(("flow: normalization and mean bounds hold", bounds_ok, ""))

    dev = _invariance_deviation(grid)
    checks.append(("flow: invariant under constant shifts of f", dev <= 1e-12,
                   f"max trajectory deviation = {dev:.2e}"))

    # mutation check: a sign error in the normalization must break invariance.
    # The volume projection absorbs constant shifts of the step's source, so
    # the detector drives the unprojected step, where the normalization is
    # what holds the volume and a sign flip is loud.
    dev_good = _invariance_deviation(grid, steps=20, dt=1e-4, project=False)
    flow._ALPHA_SIGN = -1.0
    try:
        dev_bad = _invariance_deviation(grid, steps=20, dt=1e-4, project=False)
    except Exception:
        dev_bad = math.inf
    finally:
        flow._ALPHA_SIGN = 1.0
    checks.append(("mutation hook: flipped normalization is detected",
                   dev_bad > 1e3 * max(dev_good, 1e-15),
                   f"deviation {dev_good:.2e} clean vs {dev_bad:.2e} mutated"))

    # statics spot checks
    u_flat = statics.solve_f_nonpositive(grid, np.full(grid.n, grid.kbar))
    solve_err = float(np.abs(u_flat).max())
    checks.append(("statics: f = kbar solved by u = 0", solve_err <= 1e-10,
                   f"max |u| = {solve_err:.2e}"))
    lam = grid.kbar / A - c
    nu = statics.stability_eigenvalue(
        grid, np.full(grid.n, c), np.full(grid.n, 0.5 * math.log(A)), lam
    )
    nu_dense = _dense_smallest(grid, np.full(grid.n, c), np.full(grid.n, 0.5 * math.log(A)), lam)
    checks.append(("statics: stability eigenvalue matches dense solve",
                   abs(nu - nu_dense) <= 1e-8 * max(1.0, abs(nu_dense)),
                   f"nu = {nu:.12g} vs dense {nu_dense:.12g}"))

    # negative-weight mesh: battery must be skipped, not asserted
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "thin.off"
        save_off(path, *thin_tetrahedron())
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            thin = load_mesh(path, kbar=-1.0, allow_nonneg_euler=True)
    applicable, _, detail = _max_principle_battery(thin, rng, n_problems=5)
    checks.append(("non-Delaunay mesh: maximum principle battery gated",
                   not applicable and not thin.delaunay, detail))
    if not applicable:
        notices.append(f"notice: {thin.name}: {detail}")

    failures = sum(1 for _, ok, _ in checks if not ok)
    if not quiet:
        width = max(len(name) for name, _, _ in checks)
        for name, ok, detail in checks:
            mark = "pass" if ok else "FAIL"
            line = f"{name:<{width}}  {mark}"
            if detail:
                line += f"  ({detail})"
            print(line)
        for notice in notices:
            print(notice)
        print(f"{len(checks) - failures}/{len(checks)} checks passed")
    return 0 if failures == 0 else 1


def _dense_smallest(surf, f, u, lam):
    import scipy.linalg as sla
    import scipy.sparse as sp

    g = (np.asarray(f) + lam) * np.exp(2.0 * np.asarray(u))
    A_mat = (surf.stiffness - 2.0 * sp.diags(surf.areas * g)).toarray()
    return float(sla.eigh(A_mat, np.diag(surf.areas), eigvals_only=True)[0])
