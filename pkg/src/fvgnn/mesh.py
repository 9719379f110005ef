"""Triangular meshes of the unit square and their dual graphs.

A :class:`Mesh` stores vertices and counter-clockwise triangles; every finite
volume quantity (cell areas, face lengths, centroid distances) is derived on
construction and never serialized. :class:`DualGraph` is the cell adjacency
graph consumed by the solvers and the GNNs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Mesh",
    "DualGraph",
    "MeshError",
    "MeshParseError",
    "MeshGenerationError",
    "build_two_cell_mesh",
    "build_two_cell_mesh_random",
    "generate_regular_mesh",
    "generate_irregular_mesh",
    "mesh_to_dual",
    "save_mesh",
    "load_mesh",
    "mesh_to_json",
    "mesh_from_json",
    "fourier_dt_max",
    "validate_mesh",
    "vertex_degrees",
    "boundary_vertex_mask",
]

MIN_ANGLE_DEG = 1.0


class MeshError(ValueError):
    """A mesh violates one of its structural invariants."""


class MeshParseError(MeshError):
    """A mesh file is malformed."""


class MeshGenerationError(RuntimeError):
    """Mesh refinement did not converge."""


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True, eq=False)
class Mesh:
    """2-D triangular mesh with finite-volume geometry.

    Boundary faces without a Dirichlet value (``NaN`` in ``dirichlet``) are
    inactive: they exchange no flux.
    """

    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3) counter-clockwise vertex indices
    centroids: np.ndarray  # (nc, 2)
    volumes: np.ndarray  # (nc,) cell areas V_P
    face_vertices: np.ndarray  # (nf, 2) interior faces
    owner: np.ndarray  # (nf,) lower cell index
    neighbor: np.ndarray  # (nf,) higher cell index
    face_area: np.ndarray  # (nf,) A_f
    face_delta: np.ndarray  # (nf,) centroid distance delta_PN
    bface_vertices: np.ndarray  # (nb, 2)
    bowner: np.ndarray  # (nb,)
    bface_area: np.ndarray  # (nb,)
    bface_delta: np.ndarray  # (nb,) centroid to face-midpoint distance
    dirichlet: np.ndarray = field(repr=False)  # (nb,) NaN when inactive

    @classmethod
    def from_triangles(cls, vertices, cells, dirichlet=None) -> "Mesh":
        """Build a mesh and derive all geometry.

        ``dirichlet`` maps a boundary edge ``(i, j)`` (either order) to its
        value, or is an array aligned with the boundary faces.
        """
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshParseError("cells: vertex index out of range")
        p0, p1, p2 = vertices[cells[:, 0]], vertices[cells[:, 1]], vertices[cells[:, 2]]
        volumes = 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                         - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))
        centroids = (p0 + p1 + p2) / 3.0

        edge_cells: dict[tuple[int, int], list[int]] = {}
        for c, tri in enumerate(cells.tolist()):
            for k in range(3):
                edge_cells.setdefault(_edge_key(tri[k], tri[(k + 1) % 3]), []).append(c)
        interior, boundary = [], []
        for key in sorted(edge_cells):
            owners = edge_cells[key]
            if len(owners) == 2:
                interior.append((key, min(owners), max(owners)))
            elif len(owners) == 1:
                boundary.append((key, owners[0]))
            else:
                raise MeshError(f"edge {key} shared by {len(owners)} cells")

        fv = np.array([k for k, _, _ in interior], dtype=np.int64).reshape(-1, 2)
        own = np.array([o for _, o, _ in interior], dtype=np.int64)
        nbr = np.array([n for _, _, n in interior], dtype=np.int64)
        bfv = np.array([k for k, _ in boundary], dtype=np.int64).reshape(-1, 2)
        bown = np.array([o for _, o in boundary], dtype=np.int64)

        face_area = np.linalg.norm(vertices[fv[:, 1]] - vertices[fv[:, 0]], axis=1)
        face_delta = np.linalg.norm(centroids[nbr] - centroids[own], axis=1)
        bface_area = np.linalg.norm(vertices[bfv[:, 1]] - vertices[bfv[:, 0]], axis=1)
        bmid = 0.5 * (vertices[bfv[:, 0]] + vertices[bfv[:, 1]])
        bface_delta = np.linalg.norm(bmid - centroids[bown], axis=1)

        nb = len(boundary)
        dvals = np.full(nb, np.nan)
        if isinstance(dirichlet, dict):
            index = {k: i for i, (k, _) in enumerate(boundary)}
            for (a, b), val in dirichlet.items():
                key = _edge_key(int(a), int(b))
                if key not in index:
                    raise MeshParseError(f"boundary: face {list(key)} is not a boundary edge")
                dvals[index[key]] = np.nan if val is None else float(val)
        elif dirichlet is not None:
            dvals = np.asarray(dirichlet, dtype=np.float64).copy()
            if dvals.shape != (nb,):
                raise MeshError(f"dirichlet must have {nb} entries, got {dvals.shape}")

        return cls(vertices, cells, centroids, volumes, fv, own, nbr, face_area,
                   face_delta, bfv, bown, bface_area, bface_delta, dvals)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.owner)

    @property
    def n_boundary(self) -> int:
        return len(self.bowner)

    @property
    def active_boundary(self) -> np.ndarray:
        return ~np.isnan(self.dirichlet)

    def with_dirichlet(self, values) -> "Mesh":
        """Copy sharing geometry, with new boundary values (NaN = inactive)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_boundary,):
            raise MeshError(f"dirichlet must have {self.n_boundary} entries, got {values.shape}")
        return Mesh(self.vertices, self.cells, self.centroids, self.volumes,
                    self.face_vertices, self.owner, self.neighbor, self.face_area,
                    self.face_delta, self.bface_vertices, self.bowner, self.bface_area,
                    self.bface_delta, values.copy())

    @cached_property
    def dual(self) -> "DualGraph":
        """Dual graph with every Dirichlet face active (cached)."""
        return mesh_to_dual(self, activate_boundary=True)

    def domain_area(self) -> float:
        """Area enclosed by the boundary edges (shoelace over owner orientation)."""
        total = 0.0
        for (a, b), c in zip(self.bface_vertices.tolist(), self.bowner.tolist()):
            tri = self.cells[c].tolist()
            k = tri.index(a)
            if tri[(k + 1) % 3] != b:
                a, b = b, a
            (xa, ya), (xb, yb) = self.vertices[a], self.vertices[b]
            total += xa * yb - xb * ya
        return 0.5 * total

    def min_angles(self) -> np.ndarray:
        """Smallest interior angle of each cell, in degrees."""
        p = self.vertices[self.cells]
        out = np.full(self.n_cells, 180.0)
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            v = p[:, (k + 2) % 3] - p[:, k]
            cosang = (u * v).sum(1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            out = np.minimum(out, np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return out


@dataclass(frozen=True, eq=False)
class DualGraph:
    """Cell adjacency graph.

    One-hop edges are directed ``sender -> receiver``; a sender of ``-1`` is a
    boundary pseudo-edge whose sender value is the Dirichlet temperature in
    ``ghost``. Edges are stored face by face (both directions of interior face
    ``f`` at positions ``2f`` and ``2f + 1``), then boundary pseudo-edges, so
    per-cell sums run in face-index order.
    """

    n_nodes: int
    senders: np.ndarray
    receivers: np.ndarray
    edge_area: np.ndarray
    edge_delta: np.ndarray
    ghost: np.ndarray  # Dirichlet value on pseudo-edges, 0 elsewhere
    two_hop_senders: np.ndarray  # Q
    two_hop_receivers: np.ndarray  # P
    path_ptr: np.ndarray  # CSR offsets into path_nodes, one row per 2-hop edge
    path_nodes: np.ndarray  # intermediate cells N, ascending per row
    two_hop_geom: np.ndarray  # (E2, 4): path means of A_PN/d_PN, A_NQ/d_NQ, d_PN + d_NQ; path count
    max_neighbors: int

    @property
    def n_edges(self) -> int:
        return len(self.senders)

    @property
    def n_two_hop(self) -> int:
        return len(self.two_hop_senders)

    @property
    def is_boundary_edge(self) -> np.ndarray:
        return self.senders < 0

    def paths(self, k: int) -> np.ndarray:
        return self.path_nodes[self.path_ptr[k]:self.path_ptr[k + 1]]

    def cell_neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for s, r in zip(self.senders.tolist(), self.receivers.tolist()):
            if s >= 0:
                nbrs[r].append(s)
        return nbrs


def mesh_to_dual(mesh: Mesh, activate_boundary: bool = True) -> DualGraph:
    """Dual graph of ``mesh``; Dirichlet faces become pseudo-edges when ``activate_boundary``."""
    nf = mesh.n_faces
    senders = np.empty(2 * nf, dtype=np.int64)
    receivers = np.empty(2 * nf, dtype=np.int64)
    senders[0::2], receivers[0::2] = mesh.neighbor, mesh.owner
    senders[1::2], receivers[1::2] = mesh.owner, mesh.neighbor
    area = np.repeat(mesh.face_area, 2)
    delta = np.repeat(mesh.face_delta, 2)
    ghost = np.zeros(2 * nf)
    if activate_boundary:
        act = mesh.active_boundary
        nb = int(act.sum())
        senders = np.concatenate([senders, np.full(nb, -1, dtype=np.int64)])
        receivers = np.concatenate([receivers, mesh.bowner[act]])
        area = np.concatenate([area, mesh.bface_area[act]])
        delta = np.concatenate([delta, mesh.bface_delta[act]])
        ghost = np.concatenate([ghost, mesh.dirichlet[act]])
    degree = np.bincount(receivers, minlength=mesh.n_cells)
    max_nb = int(degree.max()) if mesh.n_cells else 0

    nbrs: list[set[int]] = [set() for _ in range(mesh.n_cells)]
    face_of: dict[tuple[int, int], int] = {}
    for f, (o, n) in enumerate(zip(mesh.owner.tolist(), mesh.neighbor.tolist())):
        nbrs[o].add(n)
        nbrs[n].add(o)
        face_of[(o, n)] = face_of[(n, o)] = f
    ratio = (mesh.face_area / mesh.face_delta).tolist()
    fdelta = mesh.face_delta.tolist()
    tq, tp, ptr, pnodes, geom = [], [], [0], [], []
    for p in range(mesh.n_cells):
        via: dict[int, list[int]] = {}
        for n in sorted(nbrs[p]):
            for q in nbrs[n]:
                if q != p and q not in nbrs[p]:
                    via.setdefault(q, []).append(n)
        for q in sorted(via):
            tq.append(q)
            tp.append(p)
            pnodes.extend(via[q])
            ptr.append(len(pnodes))
            f1 = [face_of[(p, n)] for n in via[q]]
            f2 = [face_of[(n, q)] for n in via[q]]
            k = len(f1)
            geom.append((sum(ratio[f] for f in f1) / k, sum(ratio[f] for f in f2) / k,
                         sum(fdelta[a] + fdelta[b] for a, b in zip(f1, f2)) / k, float(k)))
    return DualGraph(
        n_nodes=mesh.n_cells,
        senders=senders,
        receivers=receivers,
        edge_area=area,
        edge_delta=delta,
        ghost=ghost,
        two_hop_senders=np.array(tq, dtype=np.int64),
        two_hop_receivers=np.array(tp, dtype=np.int64),
        path_ptr=np.array(ptr, dtype=np.int64),
        path_nodes=np.array(pnodes, dtype=np.int64),
        two_hop_geom=np.array(geom, dtype=np.float64).reshape(-1, 4),
        max_neighbors=max_nb,
    )


def validate_mesh(mesh: Mesh, domain_area: float | None = None) -> None:
    """Raise :class:`MeshError` unless every structural invariant holds."""
    if mesh.n_cells == 0:
        raise MeshError("mesh has no cells")
    if np.any(mesh.volumes <= 0):
        bad = int(np.argmin(mesh.volumes))
        raise MeshError(f"cell {bad} has non-positive area V_P={mesh.volumes[bad]!r}")
    for name in ("face_area", "face_delta", "bface_area", "bface_delta"):
        arr = getattr(mesh, name)
        if np.any(~(arr > 0)):
            raise MeshError(f"{name} has non-positive entries")
    angles = mesh.min_angles()
    if np.any(angles <= MIN_ANGLE_DEG):
        bad = int(np.argmin(angles))
        raise MeshError(f"cell {bad} is degenerate (min angle {angles[bad]:.3g} deg)")
    counts = np.bincount(np.concatenate([mesh.owner, mesh.neighbor, mesh.bowner]),
                         minlength=mesh.n_cells)
    if np.any(counts != 3):
        raise MeshError("every triangle must have exactly three faces")
    expected = mesh.domain_area() if domain_area is None else domain_area
    total = float(mesh.volumes.sum())
    if abs(total - expected) > 1e-9 * abs(expected):
        raise MeshError(f"cell areas sum to {total!r}, domain area is {expected!r}")


def vertex_degrees(mesh: Mesh) -> np.ndarray:
    """Number of triangulation edges incident to each vertex."""
    edges = np.concatenate([mesh.face_vertices, mesh.bface_vertices])
    return np.bincount(edges.ravel(), minlength=len(mesh.vertices))


def boundary_vertex_mask(mesh: Mesh) -> np.ndarray:
    mask = np.zeros(len(mesh.vertices), dtype=bool)
    mask[mesh.bface_vertices.ravel()] = True
    return mask


# --------------------------------------------------------------------- builders

def build_two_cell_mesh(side: float = 2.0, dirichlet=None) -> Mesh:
    """Two equilateral triangles sharing one face.

    With the default side 2 every cell has V = sqrt(3), the shared face has
    A = 2 and the centroids sit 2/sqrt(3) apart, so (1/V)(A/delta) = 1.
    """
    h = side * math.sqrt(3.0) / 2.0
    verts = [(-side / 2, 0.0), (side / 2, 0.0), (0.0, h), (0.0, -h)]
    return Mesh.from_triangles(verts, [(0, 1, 2), (1, 0, 3)], dirichlet)


def build_two_cell_mesh_random(rng: np.random.Generator, dirichlet=None) -> Mesh:
    """Two non-congruent triangles sharing one face, with random geometry.

    The shared face lies on the x axis; face length and both apexes are drawn
    so that V, A and delta vary independently across samples.
    """
    a = rng.uniform(1.0, 3.0)
    h1, h2 = rng.uniform(0.8, 2.6, size=2)
    x1, x2 = rng.uniform(-0.4 * a, 0.4 * a, size=2)
    verts = [(-a / 2, 0.0), (a / 2, 0.0), (x1, h1), (x2, -h2)]
    return Mesh.from_triangles(verts, [(0, 1, 2), (1, 0, 3)], dirichlet)


def generate_regular_mesh(n: int) -> Mesh:
    """Unit square as an n x n grid of squares, each split along alternating diagonals."""
    if int(n) != n or n < 2:
        raise ValueError(f"resolution must be an integer >= 2, got {n!r}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    verts = np.array([(x, y) for y in xs for x in xs])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                cells += [(a, b, c), (a, c, d)]
            else:
                cells += [(a, b, d), (b, c, d)]
    return Mesh.from_triangles(verts, cells)


class _Refiner:
    """Conforming longest-edge (Rivara) bisection of a triangulation."""

    def __init__(self, vertices, cells):
        self.verts = [tuple(v) for v in np.asarray(vertices).tolist()]
        self.tris: list[tuple[int, int, int] | None] = [tuple(t) for t in np.asarray(cells).tolist()]
        self.edge_tris: dict[tuple[int, int], set[int]] = {}
        for t, tri in enumerate(self.tris):
            self._link(t, tri)

    def _link(self, t, tri):
        for k in range(3):
            self.edge_tris.setdefault(_edge_key(tri[k], tri[(k + 1) % 3]), set()).add(t)

    def _unlink(self, t, tri):
        for k in range(3):
            key = _edge_key(tri[k], tri[(k + 1) % 3])
            s = self.edge_tris[key]
            s.discard(t)
            if not s:
                del self.edge_tris[key]

    def _len2(self, a, b):
        (xa, ya), (xb, yb) = self.verts[a], self.verts[b]
        return (xa - xb) ** 2 + (ya - yb) ** 2

    def longest_edge(self, t):
        tri = self.tris[t]
        best = None
        for k in range(3):
            a, b = tri[k], tri[(k + 1) % 3]
            cand = (self._len2(a, b), _edge_key(a, b))
            if best is None or cand > best:
                best = cand
        return best[1], math.sqrt(best[0])

    def centroid(self, t):
        a, b, c = (self.verts[i] for i in self.tris[t])
        return ((a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0)

    def _other(self, t, edge):
        for s in self.edge_tris[edge]:
            if s != t:
                return s
        return None

    def refine(self, t):
        # iterative form of the recursive LEPP refinement
        stack = [t]
        while stack:
            cur = stack[-1]
            if self.tris[cur] is None:
                stack.pop()
                continue
            edge, _ = self.longest_edge(cur)
            nb = self._other(cur, edge)
            if nb is None or self.longest_edge(nb)[0] == edge:
                self._bisect(edge)
                stack.pop()
            else:
                stack.append(nb)

    def _bisect(self, edge):
        a, b = edge
        (xa, ya), (xb, yb) = self.verts[a], self.verts[b]
        m = len(self.verts)
        self.verts.append(((xa + xb) / 2.0, (ya + yb) / 2.0))
        for t in sorted(self.edge_tris[edge]):
            tri = self.tris[t]
            k = next(i for i in range(3) if {tri[i], tri[(i + 1) % 3]} == {a, b})
            u, v, w = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            self._unlink(t, tri)
            self.tris[t] = None
            for child in ((u, m, w), (m, v, w)):
                self.tris.append(child)
                self._link(len(self.tris) - 1, child)

    def live(self):
        return [t for t in self.tris if t is not None]


def _size_field(points, h_max, attractors, radius, contrast):
    d = np.min(np.linalg.norm(points[:, None, :] - attractors[None, :, :], axis=2), axis=1)
    return h_max * np.minimum(1.0, contrast + d / radius)


def _refine_to(h_max, attractors, radius, contrast, coarse, max_rounds=20):
    ref = _Refiner(coarse.vertices, coarse.cells)
    for _ in range(max_rounds):
        alive = [t for t, tri in enumerate(ref.tris) if tri is not None]
        cents = np.array([ref.centroid(t) for t in alive])
        lens = np.array([ref.longest_edge(t)[1] for t in alive])
        marked = [t for t, ok in zip(alive, lens > _size_field(cents, h_max, attractors, radius, contrast)) if ok]
        if not marked:
            return np.array(ref.verts), np.array(ref.live(), dtype=np.int64)
        for t in marked:
            if ref.tris[t] is not None:
                ref.refine(t)
    raise MeshGenerationError(
        f"refinement did not converge in {max_rounds} rounds "
        f"(h_max={h_max:.4g}, cells={len(ref.live())}, attractors={attractors.tolist()})"
    )


def _smooth(vertices, cells, rounds):
    """Move interior vertices to the area-weighted mean of adjacent centroids."""
    verts = vertices.copy()
    on_bnd = (np.isclose(verts, 0.0) | np.isclose(verts, 1.0)).any(axis=1)
    nv = len(verts)
    for _ in range(rounds):
        p = verts[cells]
        area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        cent = p.mean(axis=1)
        wsum = np.zeros(nv)
        acc = np.zeros((nv, 2))
        for k in range(3):
            np.add.at(wsum, cells[:, k], area)
            np.add.at(acc, cells[:, k], area[:, None] * cent)
        new = verts.copy()
        move = ~on_bnd & (wsum > 0)
        new[move] = acc[move] / wsum[move, None]
        trial = Mesh.from_triangles(new, cells)
        if np.all(trial.volumes > 0) and trial.min_angles().min() > 10.0:
            verts = new
        else:
            break
    return verts


def generate_irregular_mesh(seed: int, target_cells: int, radius: float = 0.25,
                            contrast: float = 0.2, smoothing_rounds: int = 3) -> Mesh:
    """Unit-square mesh refined towards two seeded attraction points.

    The size field ``h(x) = h_max * min(1, contrast + dist(x, nearest point) / radius)``
    drives longest-edge bisection of a coarse regular triangulation; ``h_max`` is
    tuned by bisection to land near ``target_cells``. Interior vertices are then
    smoothed with boundary vertices pinned.
    """
    if not 100 <= target_cells <= 600:
        raise ValueError(f"target_cells must be in [100, 600], got {target_cells}")
    rng = np.random.default_rng(seed)
    attractors = rng.uniform(0.15, 0.85, size=(2, 2))
    coarse = generate_regular_mesh(4)

    lo, hi = math.log(0.02), math.log(1.5)
    best = None
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        verts, cells = _refine_to(math.exp(mid), attractors, radius, contrast, coarse)
        count = len(cells)
        if best is None or abs(count - target_cells) < abs(len(best[1]) - target_cells):
            best = (verts, cells)
        if abs(count - target_cells) <= 0.1 * target_cells:
            break
        if count > target_cells:
            lo = mid
        else:
            hi = mid
    verts, cells = best
    if abs(len(cells) - target_cells) > 0.3 * target_cells:
        raise MeshGenerationError(
            f"could not reach {target_cells} cells (closest {len(cells)}) for seed {seed}")
    verts = _smooth(verts, cells, smoothing_rounds)
    mesh = Mesh.from_triangles(verts, cells)
    validate_mesh(mesh, domain_area=1.0)
    return mesh


# ------------------------------------------------------------------ stability

def fourier_dt_max(mesh: Mesh, alpha: float = 1.0) -> float:
    """Largest explicit timestep allowed by the Fourier condition.

    ``min_P V_P / sum_N alpha A_f / delta_PN`` with active Dirichlet faces
    included in the sum.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    g = mesh.dual
    coef = np.bincount(g.receivers, weights=alpha * g.edge_area / g.edge_delta,
                       minlength=mesh.n_cells)
    with np.errstate(divide="ignore"):
        return float(np.min(mesh.volumes / coef))


# ---------------------------------------------------------------- persistence

def mesh_to_json(mesh: Mesh) -> dict:
    return {
        "vertices": mesh.vertices.tolist(),
        "cells": mesh.cells.tolist(),
        "boundary": [
            {"face": face, "dirichlet": None if math.isnan(val) else val}
            for face, val in zip(mesh.bface_vertices.tolist(), mesh.dirichlet.tolist())
        ],
    }


def mesh_from_json(doc: dict, validate: bool = True) -> Mesh:
    if not isinstance(doc, dict):
        raise MeshParseError("top level must be an object")
    for key in ("vertices", "cells"):
        if key not in doc:
            raise MeshParseError(f"missing field '{key}'")
    try:
        verts = np.asarray(doc["vertices"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise MeshParseError(f"vertices: {exc}") from None
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise MeshParseError("vertices: expected a list of [x, y] pairs")
    try:
        cells = np.asarray(doc["cells"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise MeshParseError(f"cells: {exc}") from None
    if cells.ndim != 2 or cells.shape[1] != 3 or np.any(cells != np.round(cells)):
        raise MeshParseError("cells: expected a list of integer triples")
    cells = cells.astype(np.int64)
    for c, tri in enumerate(cells.tolist()):
        for v in tri:
            if not 0 <= v < len(verts):
                raise MeshParseError(f"cells[{c}]: vertex index {v} out of range")
    dirichlet = {}
    for i, item in enumerate(doc.get("boundary", [])):
        if not isinstance(item, dict) or "face" not in item:
            raise MeshParseError(f"boundary[{i}]: expected {{face, dirichlet}}")
        face = item["face"]
        if (not isinstance(face, list) or len(face) != 2
                or not all(isinstance(v, int) for v in face)):
            raise MeshParseError(f"boundary[{i}].face: expected two vertex indices")
        for v in face:
            if not 0 <= v < len(verts):
                raise MeshParseError(f"boundary[{i}].face: vertex index {v} out of range")
        val = item.get("dirichlet")
        if val is not None and not isinstance(val, (int, float)):
            raise MeshParseError(f"boundary[{i}].dirichlet: expected number or null")
        dirichlet[tuple(face)] = val
    mesh = Mesh.from_triangles(verts, cells, dirichlet)
    if validate:
        validate_mesh(mesh)
    return mesh


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_json(mesh)))


def load_mesh(path, validate: bool = True) -> Mesh:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"line {exc.lineno}: {exc.msg}") from None
    return mesh_from_json(doc, validate=validate)
