"""Shared fixtures and independent oracles.

The oracles recompute geometry from the raw triangle list with plain Python
loops so they share no code with the package under test.
"""
import math

import numpy as np
import pytest
import scipy.linalg

from fvgnn.mesh import build_two_cell_mesh, generate_irregular_mesh, generate_regular_mesh


def _geometry(vertices, cells):
    vertices = [tuple(map(float, v)) for v in vertices]
    cent, vol = [], []
    for a, b, c in cells:
        (x0, y0), (x1, y1), (x2, y2) = vertices[a], vertices[b], vertices[c]
        vol.append(0.5 * abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)))
        cent.append(((x0 + x1 + x2) / 3, (y0 + y1 + y2) / 3))
    edges = {}
    for ci, tri in enumerate(cells):
        for k in range(3):
            e = tuple(sorted((int(tri[k]), int(tri[(k + 1) % 3]))))
            edges.setdefault(e, []).append(ci)
    return vertices, cent, vol, edges


def oracle_neighbors(vertices, cells, dirichlet=None):
    """Per cell, a list of (other cell or None, coefficient A/delta, ghost value)."""
    dirichlet = dirichlet or {}
    verts, cent, vol, edges = _geometry(vertices, cells)
    nbrs = [[] for _ in cells]
    for (a, b), owners in edges.items():
        length = math.dist(verts[a], verts[b])
        if len(owners) == 2:
            p, q = owners
            w = length / math.dist(cent[p], cent[q])
            nbrs[p].append((q, w, None))
            nbrs[q].append((p, w, None))
        else:
            val = dirichlet.get((a, b), dirichlet.get((b, a)))
            if val is None:
                continue
            p = owners[0]
            mid = ((verts[a][0] + verts[b][0]) / 2, (verts[a][1] + verts[b][1]) / 2)
            nbrs[p].append((None, length / math.dist(cent[p], mid), float(val)))
    return nbrs, vol


def oracle_flux(nbrs, T, alpha):
    out = []
    for p, lst in enumerate(nbrs):
        s = 0.0
        for q, w, ghost in lst:
            tn = ghost if q is None else T[q]
            s += alpha * w * (tn - T[p])
        out.append(s)
    return out


def oracle_first_order(vertices, cells, dirichlet, T, S, alpha, dt):
    nbrs, vol = oracle_neighbors(vertices, cells, dirichlet)
    flux = oracle_flux(nbrs, T, alpha)
    return np.array([T[p] + dt / vol[p] * flux[p] + dt * S[p] for p in range(len(cells))])


def oracle_two_hop(vertices, cells):
    """Dict P -> {Q: sorted intermediate cells} for cells at graph distance exactly 2."""
    nbrs, _ = oracle_neighbors(vertices, cells)
    adj = [sorted({q for q, _, _ in lst if q is not None}) for lst in nbrs]
    out = {}
    for p in range(len(cells)):
        dist = {p: 0}
        frontier = [p]
        for d in (1, 2):
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = d
                        nxt.append(v)
            frontier = nxt
        out[p] = {q: sorted(n for n in adj[p] if q in adj[n]) for q, d in dist.items() if d == 2}
    return out


def oracle_second_order_2hop(vertices, cells, dirichlet, T, S, alpha, dt):
    base = oracle_first_order(vertices, cells, dirichlet, T, S, alpha, dt)
    _, vol = oracle_neighbors(vertices, cells, dirichlet)
    hops = oracle_two_hop(vertices, cells)
    for p, qs in hops.items():
        base[p] += dt / vol[p] * sum(0.5 * alpha * (T[q] - T[p]) for q in qs)
    return base


def oracle_midpoint(vertices, cells, dirichlet, T, S, alpha, dt):
    nbrs, vol = oracle_neighbors(vertices, cells, dirichlet)
    f0 = oracle_flux(nbrs, T, alpha)
    half = [T[p] + dt * S[p] + 0.5 * dt / vol[p] * f0[p] for p in range(len(cells))]
    f1 = oracle_flux(nbrs, half, alpha)
    return np.array([T[p] + dt * S[p] + dt / vol[p] * f1[p] for p in range(len(cells))])


def oracle_operator(vertices, cells, dirichlet, alpha):
    """Dense ``L`` and ``c`` with ``sum alpha A/delta (T_N - T_P) = (L T + c)_P``."""
    nbrs, vol = oracle_neighbors(vertices, cells, dirichlet)
    n = len(cells)
    L = np.zeros((n, n))
    c = np.zeros(n)
    for p, lst in enumerate(nbrs):
        for q, w, ghost in lst:
            L[p, p] -= alpha * w
            if q is None:
                c[p] += alpha * w * ghost
            else:
                L[p, q] += alpha * w
    return L, c, np.array(vol)


def oracle_crank_nicolson(vertices, cells, dirichlet, T, S, alpha, dt):
    L, c, V = oracle_operator(vertices, cells, dirichlet, alpha)
    A = np.diag(V) - 0.5 * dt * L
    b = V * T + 0.5 * dt * (L @ T) + dt * c + dt * V * S
    return scipy.linalg.solve(A, b, assume_a="sym")


def oracle_backward_euler(vertices, cells, dirichlet, T, S, alpha, dt):
    L, c, V = oracle_operator(vertices, cells, dirichlet, alpha)
    A = np.diag(V) - dt * L
    return scipy.linalg.solve(A, V * T + dt * c + dt * V * S)


def dirichlet_map(mesh):
    return {tuple(f): (None if np.isnan(v) else float(v))
            for f, v in zip(mesh.bface_vertices.tolist(), mesh.dirichlet.tolist())}


@pytest.fixture
def two_cell():
    return build_two_cell_mesh()


@pytest.fixture(scope="session")
def regular8():
    return generate_regular_mesh(8)


@pytest.fixture(scope="session")
def irregular300():
    return generate_irregular_mesh(1, 300)


def small_meshes():
    """Meshes of at most 20 cells used for oracle comparisons."""
    rng = np.random.default_rng(5)
    out = [build_two_cell_mesh(), generate_regular_mesh(2), generate_regular_mesh(3)]
    # jittered 3x3 grid: irregular geometry, 18 cells
    m = generate_regular_mesh(3)
    v = m.vertices.copy()
    inner = (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1)
    v[inner] += rng.uniform(-0.08, 0.08, size=(inner.sum(), 2))
    from fvgnn.mesh import Mesh
    out.append(Mesh.from_triangles(v, m.cells))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
