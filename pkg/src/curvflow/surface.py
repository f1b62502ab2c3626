"""Discrete closed surfaces and their conformal calculus.

A :class:`DiscreteSurface` is a vertex set carrying positive quadrature
weights ``areas`` (total measure one) and a symmetric stiffness matrix ``S``
acting as the weak-form Laplace-Beltrami operator of a fixed background
metric of constant negative curvature ``kbar``:

    (S u)_i  ~  -areas_i * (Lap u)_i,        sum_j S_ij = 0.

Scalar fields (conformal factors, curvature prescriptions, right-hand
sides) are plain 1-d ``float64`` arrays of length ``n``.  All operations
here are pure; surfaces are immutable after construction.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (
    DimensionMismatchError,
    MeshFormatError,
    MeshTopologyError,
    NumericRangeError,
)

__all__ = [
    "DiscreteSurface",
    "integrate",
    "conformal_volume",
    "laplacian",
    "dirichlet_energy",
    "gauss_curvature",
    "gauss_bonnet_residual",
    "build_periodic_grid",
    "build_two_vertex",
    "load_mesh",
    "genus2_mesh",
    "thin_tetrahedron",
    "save_off",
    "save_obj",
    "surface_to_json",
    "save_surface_json",
]

_SYM_TOL = 1e-12
_EXP_LIMIT = 350.0  # |2u| beyond this overflows float64


@dataclass(frozen=True, eq=False)
class DiscreteSurface:
    """Closed-surface discretization.

    Attributes:
        areas: positive quadrature weights, one per vertex, summing to 1.
        stiffness: symmetric PSD sparse matrix with zero row sums.
        kbar: constant background Gauss curvature, must be negative.
        coords: optional vertex positions, (n, 2) for grids, (n, 3) for
            meshes; used to evaluate analytic fields at vertices.
        delaunay: False when the stiffness carries negative off-diagonal
            weights, which disables maximum-principle assertions downstream.
        euler_char: V - E + F when built from a triangle mesh, else None.
    """

    areas: np.ndarray
    stiffness: sp.csr_matrix
    kbar: float
    coords: np.ndarray | None = None
    delaunay: bool = True
    euler_char: int | None = None
    name: str = "surface"

    def __post_init__(self):
        areas = np.ascontiguousarray(self.areas, dtype=float)
        areas.setflags(write=False)
        object.__setattr__(self, "areas", areas)
        if self.coords is not None:
            coords = np.ascontiguousarray(self.coords, dtype=float)
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)
        n = areas.shape[0]
        S = self.stiffness
        if S.shape != (n, n):
            raise DimensionMismatchError(
                f"stiffness shape {S.shape} does not match {n} vertices"
            )
        if np.any(areas <= 0.0):
            raise ValueError("vertex areas must be positive")
        if abs(areas.sum() - 1.0) > 1e-9:
            raise ValueError(f"vertex areas must sum to 1, got {areas.sum()!r}")
        if not self.kbar < 0.0:
            raise ValueError(f"kbar must be negative, got {self.kbar}")
        scale = max(abs(S.data).max(), 1.0) if S.nnz else 1.0
        asym = abs(S - S.T)
        if asym.nnz and asym.data.max() > _SYM_TOL * scale:
            raise ValueError("stiffness matrix is not symmetric")
        rowsums = np.asarray(S.sum(axis=1)).ravel()
        if np.abs(rowsums).max() > 1e-10 * scale:
            raise ValueError("stiffness rows must sum to zero")

    @property
    def n(self) -> int:
        return self.areas.shape[0]

    def validate(self) -> None:
        """Expensive invariant checks (PSD, connectedness); raises on failure."""
        adjacency = self.stiffness.copy()
        adjacency.data = np.abs(adjacency.data)
        ncomp, _ = connected_components(adjacency, directed=False)
        if ncomp != 1:
            raise ValueError(f"surface has {ncomp} connected components")
        if self.n <= 2048:
            eigs = np.linalg.eigvalsh(self.stiffness.toarray())
            if eigs[0] < -1e-10 * max(1.0, eigs[-1]):
                raise ValueError(f"stiffness has negative eigenvalue {eigs[0]:.3e}")
        else:
            rng = np.random.default_rng(0)
            for _ in range(16):
                u = rng.standard_normal(self.n)
                if u @ (self.stiffness @ u) < -1e-10 * (u @ u):
                    raise ValueError("stiffness quadratic form went negative")


def _check_field(surf: DiscreteSurface, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (surf.n,):
        raise DimensionMismatchError(
            f"field of shape {w.shape} on surface with {surf.n} vertices"
        )
    return w


def _exp2u(u: np.ndarray) -> np.ndarray:
    if np.abs(u).max(initial=0.0) > _EXP_LIMIT:
        raise NumericRangeError("conformal factor too large for exp(2u)")
    out = np.exp(2.0 * u)
    if not np.all(np.isfinite(out)):
        raise NumericRangeError("exp(2u) is not finite")
    return out


def integrate(surf: DiscreteSurface, w) -> float:
    """Integral of a per-vertex field against the background measure."""
    return float(surf.areas @ _check_field(surf, w))


def conformal_volume(surf: DiscreteSurface, u) -> float:
    """Total volume of the conformal metric with factor ``u``: sum a_i e^{2u_i}."""
    return float(surf.areas @ _exp2u(_check_field(surf, u)))


def laplacian(surf: DiscreteSurface, u) -> np.ndarray:
    """Pointwise Laplacian of ``u``: (Lap u)_i = -(S u)_i / a_i."""
    return -(surf.stiffness @ _check_field(surf, u)) / surf.areas


def dirichlet_energy(surf: DiscreteSurface, u) -> float:
    """Quadratic form u^T S u, the discrete integral of |grad u|^2."""
    u = _check_field(surf, u)
    return float(u @ (surf.stiffness @ u))


def gauss_curvature(surf: DiscreteSurface, u) -> np.ndarray:
    """Curvature of the metric with conformal factor ``u``.

    K_i = e^{-2 u_i} (-(Lap u)_i + kbar).  The conformal-weighted integral
    of the result equals ``kbar`` up to rounding, independent of ``u``.
    """
    u = _check_field(surf, u)
    if np.abs(u).max(initial=0.0) > _EXP_LIMIT:
        raise NumericRangeError("conformal factor too large for exp(-2u)")
    return np.exp(-2.0 * u) * ((surf.stiffness @ u) / surf.areas + surf.kbar)


def gauss_bonnet_residual(surf: DiscreteSurface, u) -> float:
    """|integral of K_g over the conformal metric minus kbar|."""
    total = float(surf.areas @ (_exp2u(_check_field(surf, u)) * gauss_curvature(surf, u)))
    return abs(total - surf.kbar)


# ---------------------------------------------------------------------------
# builders


def build_periodic_grid(N: int, kbar: float) -> DiscreteSurface:
    """N x N doubly periodic grid on the unit square.

    Vertex (ix, iy) sits at (ix/N, iy/N) and has weight 1/N^2; the stiffness
    is the 5-point stencil with unit edge weights, so that
    (S u)_i = -a_i (Lap_h u)_i with the standard second-difference stencil.
    """
    if not isinstance(N, (int, np.integer)) or N < 2:
        raise ValueError(f"grid size must be an integer >= 2, got {N!r}")
    if not kbar < 0.0:
        raise ValueError(f"kbar must be negative, got {kbar}")
    n = N * N
    ii = np.arange(n)
    ix, iy = divmod(ii, N)
    right = ((ix + 1) % N) * N + iy
    down = ix * N + (iy + 1) % N
    rows, cols, vals = [], [], []
    for nbr in (right, down):
        rows += [ii, nbr, ii, nbr]
        cols += [nbr, ii, ii, nbr]
        vals += [-np.ones(n), -np.ones(n), np.ones(n), np.ones(n)]
    S = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    coords = np.column_stack([ix / N, iy / N])
    areas = np.full(n, 1.0 / n)
    return DiscreteSurface(areas, S, float(kbar), coords=coords, name=f"grid{N}x{N}")


def build_two_vertex(kbar: float = -1.0, weight: float = 1.0) -> DiscreteSurface:
    """Two vertices of weight 1/2 coupled by a single stiffness edge."""
    if not kbar < 0.0:
        raise ValueError(f"kbar must be negative, got {kbar}")
    S = sp.csr_matrix(np.array([[weight, -weight], [-weight, weight]]))
    return DiscreteSurface(np.array([0.5, 0.5]), S, float(kbar), name="two-vertex")


# ---------------------------------------------------------------------------
# triangle meshes


def _parse_off(lines: list[str]):
    if not lines or lines[0].split("#")[0].strip().upper() != "OFF":
        raise MeshFormatError("missing OFF header")
    body = [ln.split("#")[0].strip() for ln in lines[1:]]
    body = [ln for ln in body if ln]
    try:
        nv, nf, _ = (int(tok) for tok in body[0].split()[:3])
        verts = np.array(
            [[float(t) for t in body[1 + i].split()[:3]] for i in range(nv)]
        )
        faces = []
        for i in range(nf):
            toks = body[1 + nv + i].split()
            if int(toks[0]) != 3:
                raise MeshFormatError("only triangular faces are supported")
            faces.append([int(t) for t in toks[1:4]])
    except (IndexError, ValueError) as exc:
        raise MeshFormatError(f"malformed OFF file: {exc}") from exc
    return verts, np.array(faces, dtype=int)


def _parse_obj(lines: list[str]):
    verts, faces = [], []
    for lineno, ln in enumerate(lines, start=1):
        toks = ln.split("#")[0].split()
        if not toks:
            continue
        try:
            if toks[0] == "v":
                verts.append([float(t) for t in toks[1:4]])
            elif toks[0] == "f":
                if len(toks) != 4:
                    raise MeshFormatError("only triangular faces are supported")
                faces.append([int(t.split("/")[0]) - 1 for t in toks[1:4]])
        except (IndexError, ValueError) as exc:
            raise MeshFormatError(f"malformed OBJ line {lineno}: {ln!r}") from exc
    if not verts or not faces:
        raise MeshFormatError("OBJ file contains no triangle mesh")
    return np.array(verts, dtype=float), np.array(faces, dtype=int)


def _check_closed_oriented(nv: int, faces: np.ndarray) -> int:
    """Validate topology and return the Euler characteristic V - E + F."""
    if faces.min(initial=0) < 0 or faces.max(initial=-1) >= nv:
        raise MeshTopologyError("face references a vertex out of range")
    halfedges = set()
    undirected: dict[tuple[int, int], int] = {}
    for tri in faces:
        if len(set(tri)) != 3:
            raise MeshTopologyError(f"degenerate face {tri.tolist()}")
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            he = (int(a), int(b))
            if he in halfedges:
                raise MeshTopologyError(
                    f"inconsistent orientation or non-manifold edge {he}"
                )
            halfedges.add(he)
            key = (min(he), max(he))
            undirected[key] = undirected.get(key, 0) + 1
    bad = {e: c for e, c in undirected.items() if c != 2}
    if bad:
        edge, count = next(iter(bad.items()))
        kind = "boundary" if count == 1 else "non-manifold"
        raise MeshTopologyError(f"{kind} edge {edge} (appears {count}x)")
    return nv - len(undirected) + len(faces)


def _cotangent_assembly(verts: np.ndarray, faces: np.ndarray):
    """Cotangent stiffness and barycentric vertex areas of a triangle mesh."""
    nv = len(verts)
    rows, cols, vals = [], [], []
    areas = np.zeros(nv)
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        vi, vj, vk = verts[faces[:, i]], verts[faces[:, j]], verts[faces[:, k]]
        e1, e2 = vi - vk, vj - vk
        cross = np.cross(e1, e2)
        cnorm = np.linalg.norm(cross, axis=1)
        if np.any(cnorm <= 0.0):
            raise MeshTopologyError("zero-area face")
        cot = np.einsum("ij,ij->i", e1, e2) / cnorm
        w = 0.5 * cot  # contribution of the angle at k to edge (i, j)
        a, b = faces[:, i], faces[:, j]
        rows += [a, b, a, b]
        cols += [b, a, a, b]
        vals += [-w, -w, w, w]
        if i == 0:
            tri_area = 0.5 * cnorm
            for c in range(3):
                np.add.at(areas, faces[:, c], tri_area / 3.0)
    S = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nv, nv),
    ).tocsr()
    offdiag = S.copy()
    offdiag.setdiag(0.0)
    offdiag.eliminate_zeros()
    delaunay = bool(offdiag.nnz == 0 or offdiag.data.max() <= 1e-12)
    return S, areas, delaunay


def load_mesh(path, kbar: float | None = None, allow_nonneg_euler: bool = False) -> DiscreteSurface:
    """Load a closed oriented triangle mesh (OFF or OBJ).

    The stiffness uses cotangent weights; vertex areas are barycentric and
    normalized to total 1 (both are invariant under uniform rescaling of the
    embedding).  The Euler characteristic is computed as V - E + F; surfaces
    with ``chi >= 0`` are refused unless ``allow_nonneg_euler`` is set.
    ``kbar`` defaults to 2*pi*chi and a warning is issued when a different
    value is supplied.
    """
    path = str(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise MeshFormatError(f"cannot read mesh file {path!r}: {exc}") from exc
    lower = path.lower()
    if lower.endswith(".off"):
        verts, faces = _parse_off(lines)
    elif lower.endswith(".obj"):
        verts, faces = _parse_obj(lines)
    else:
        raise MeshFormatError(f"unsupported mesh format for {path!r} (use .off/.obj)")

    chi = _check_closed_oriented(len(verts), faces)
    if chi >= 0 and not allow_nonneg_euler:
        raise MeshTopologyError(
            f"surface has Euler characteristic {chi} >= 0; "
            "pass allow_nonneg_euler=True to load anyway"
        )
    if kbar is None:
        if chi >= 0:
            raise MeshTopologyError(
                f"chi = {chi} >= 0 has no negative default curvature; pass kbar < 0"
            )
        kbar = 2.0 * math.pi * chi
    elif abs(kbar - 2.0 * math.pi * chi) > 1e-9 * max(1.0, abs(kbar)):
        warnings.warn(
            f"kbar = {kbar} differs from 2*pi*chi = {2.0 * math.pi * chi:.6f}",
            stacklevel=2,
        )
    S, areas, delaunay = _cotangent_assembly(verts, faces)
    areas = areas / areas.sum()
    surf = DiscreteSurface(
        areas,
        S,
        float(kbar),
        coords=verts,
        delaunay=delaunay,
        euler_char=int(chi),
        name=path.rsplit("/", 1)[-1],
    )
    adjacency = S.copy()
    adjacency.data = np.abs(adjacency.data)
    ncomp, _ = connected_components(adjacency, directed=False)
    if ncomp != 1:
        raise MeshTopologyError(f"mesh has {ncomp} connected components")
    return surf


def genus2_mesh():
    """Vertices and faces of a closed genus-2 surface (chi = -2).

    The surface bounds a 5 x 3 x 1 plate of unit voxels with two voxels
    punched out, triangulated with outward orientation.  All triangles are
    right isoceles halves of unit squares, so cotangent weights are >= 0.
    """
    solid = {(x, y, 0) for x in range(5) for y in range(3)}
    solid -= {(1, 1, 0), (3, 1, 0)}
    # quad corner offsets per outward direction, wound counterclockwise
    quads = {
        (1, 0, 0): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
        (-1, 0, 0): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
        (0, 1, 0): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
        (0, -1, 0): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
        (0, 0, 1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
        (0, 0, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
    }
    vert_index: dict[tuple[int, int, int], int] = {}
    faces = []

    def vid(p):
        if p not in vert_index:
            vert_index[p] = len(vert_index)
        return vert_index[p]

    for cell in sorted(solid):
        for direction, offsets in quads.items():
            nbr = tuple(c + d for c, d in zip(cell, direction))
            if nbr in solid:
                continue
            corners = [vid(tuple(c + o for c, o in zip(cell, off))) for off in offsets]
            a, b, c, d = corners
            faces.append((a, b, c))
            faces.append((a, c, d))
    verts = np.array(sorted(vert_index, key=vert_index.get), dtype=float)
    return verts, np.array(faces, dtype=int)


def thin_tetrahedron():
    """A tetrahedron with one skinny edge pair, yielding a negative cotan weight."""
    verts = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, 0.1, 0.0],
            [0.5, -0.1, 0.05],
        ]
    )
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return verts, faces


def save_off(path, verts, faces) -> None:
    verts = np.asarray(verts, dtype=float)
    faces = np.asarray(faces, dtype=int)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(verts)} {len(faces)} 0\n")
        for v in verts:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def save_obj(path, verts, faces) -> None:
    verts = np.asarray(verts, dtype=float)
    faces = np.asarray(faces, dtype=int)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in verts:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def surface_to_json(surf: DiscreteSurface) -> dict:
    """JSON-ready export: {n, areas, stiffness triplets (i, j, value), kbar}."""
    coo = surf.stiffness.tocoo()
    triplets = sorted(
        (int(i), int(j), float(v)) for i, j, v in zip(coo.row, coo.col, coo.data)
    )
    return {
        "n": surf.n,
        "areas": surf.areas.tolist(),
        "stiffness": [list(t) for t in triplets],
        "kbar": surf.kbar,
    }


def save_surface_json(surf: DiscreteSurface, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(surface_to_json(surf), fh)
        fh.write("\n")
