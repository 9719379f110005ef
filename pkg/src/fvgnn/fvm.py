"""Finite-volume time stepping for the 2-D heat equation ``dT/dt = alpha lap T + S``.

Four schemes share one flux kernel: explicit first order, the explicit
midpoint (two-stage) scheme, a first-order scheme with a 2-hop correction, and
Crank-Nicolson solved by Jacobi-preconditioned conjugate gradient.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .mesh import Mesh

__all__ = [
    "Field",
    "SchemeKind",
    "DivergenceError",
    "SolverError",
    "flux_sum",
    "laplacian",
    "step",
    "step_first_order",
    "step_second_order_2hop",
    "step_midpoint",
    "step_crank_nicolson",
    "cn_system",
    "rollout",
    "pde_residual",
    "field_to_json",
    "field_from_json",
    "write_rollout_csv",
]


class DivergenceError(ArithmeticError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite temperature at step {step}")


class SolverError(ArithmeticError):
    pass


class SchemeKind(str, enum.Enum):
    FIRST_ORDER = "first-order"
    CRANK_NICOLSON = "crank-nicolson"
    SECOND_ORDER_2HOP = "second-order-2hop"
    MIDPOINT = "midpoint"


@dataclass(frozen=True, eq=False)
class Field:
    """Per-cell temperature ``T`` and source ``S`` with diffusivity and timestep."""

    T: np.ndarray
    S: np.ndarray
    alpha: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "T", np.asarray(self.T, dtype=np.float64))
        object.__setattr__(self, "S", np.asarray(self.S, dtype=np.float64))
        if self.T.shape != self.S.shape or self.T.ndim != 1:
            raise ValueError(f"T and S must be 1-D of equal length, got {self.T.shape} and {self.S.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def with_T(self, T) -> "Field":
        return replace(self, T=T)


def _check(mesh: Mesh, field: Field):
    if len(field.T) != mesh.n_cells:
        raise ValueError(f"field has {len(field.T)} cells, mesh has {mesh.n_cells}")


def flux_sum(mesh: Mesh, T, alpha=1.0) -> np.ndarray:
    """``sum_N alpha A/delta (T_N - T_P)`` per cell, Dirichlet faces included."""
    g = mesh.dual
    return kernels.stencil_sum(T, g.receivers, g.senders, alpha * g.edge_area / g.edge_delta,
                               g.ghost, g.n_nodes)


def laplacian(mesh: Mesh, T) -> np.ndarray:
    """Discrete FV Laplacian ``(1/V_P) sum (A/delta)(T_N - T_P)``."""
    return flux_sum(mesh, T) / mesh.volumes


def step_first_order(mesh: Mesh, field: Field) -> Field:
    _check(mesh, field)
    T, dt = field.T, field.dt
    new = T + (dt / mesh.volumes) * flux_sum(mesh, T, field.alpha) + dt * field.S
    return field.with_T(new)


def step_second_order_2hop(mesh: Mesh, field: Field) -> Field:
    """First-order update plus ``(dt/V) sum_Q alpha/2 (T_Q - T_P)`` over 2-hop cells.

    The 2-hop term carries no geometric factor; it is the learned correction
    exactly as discovered, not a consistent discretization.
    """
    _check(mesh, field)
    g = mesh.dual
    if g.two_hop_senders is None:
        raise ValueError("dual graph has no two-hop edges")
    T, dt, a = field.T, field.dt, field.alpha
    n2 = len(g.two_hop_senders)
    hop2 = kernels.stencil_sum(T, g.two_hop_receivers, g.two_hop_senders,
                               np.full(n2, 0.5 * a), np.zeros(n2), g.n_nodes)
    new = T + (dt / mesh.volumes) * (flux_sum(mesh, T, a) + hop2) + dt * field.S
    return field.with_T(new)


def step_midpoint(mesh: Mesh, field: Field) -> Field:
    """Two-stage explicit midpoint update.

    The half step carries the full ``dt * S`` source increment while the flux
    uses half the timestep; the full step evaluates fluxes at the half-step
    temperatures.
    """
    _check(mesh, field)
    T, dt, a = field.T, field.dt, field.alpha
    src = dt * field.S
    half = T + src + 0.5 * (dt / mesh.volumes) * flux_sum(mesh, T, a)
    new = T + src + (dt / mesh.volumes) * flux_sum(mesh, half, a)
    return field.with_T(new)


def cn_system(mesh: Mesh, field: Field):
    """Assemble the Crank-Nicolson system ``A T^{n+1} = b`` (rows scaled by V_P).

    ``A = diag(V) + (alpha dt / 2) G`` with ``G`` the (positive semi-definite)
    graph Laplacian including Dirichlet faces on the diagonal.
    """
    g = mesh.dual
    n = mesh.n_cells
    w = 0.5 * field.alpha * field.dt * g.edge_area / g.edge_delta
    A = np.zeros((n, n))
    inner = g.senders >= 0
    # both directions of every interior face are present, so G stays symmetric
    np.add.at(A, (g.receivers[inner], g.senders[inner]), -w[inner])
    np.add.at(A, (g.receivers, g.receivers), w)
    A[np.diag_indices(n)] += mesh.volumes
    b = _cn_rhs(mesh, field)
    return A, b


def _cn_rhs(mesh, field):
    g = mesh.dual
    a, dt = field.alpha, field.dt
    bnd = g.senders < 0
    coef = a * g.edge_area / g.edge_delta
    boundary_push = np.bincount(g.receivers[bnd], weights=0.5 * dt * coef[bnd] * g.ghost[bnd],
                                minlength=mesh.n_cells)
    return (mesh.volumes * field.T + 0.5 * dt * flux_sum(mesh, field.T, a)
            + boundary_push + dt * mesh.volumes * field.S)


def _cn_matvec(mesh, field, x):
    g = mesh.dual
    w = 0.5 * field.alpha * field.dt * g.edge_area / g.edge_delta
    gx = -kernels.stencil_sum(x, g.receivers, g.senders, w, np.zeros(len(w)), g.n_nodes)
    return mesh.volumes * x + gx


def step_crank_nicolson(mesh: Mesh, field: Field, tol: float = 1e-12, max_iter: int | None = None) -> Field:
    """Crank-Nicolson step by Jacobi-preconditioned CG to relative residual ``tol``."""
    _check(mesh, field)
    n = mesh.n_cells
    max_iter = 10 * n if max_iter is None else max_iter
    b = _cn_rhs(mesh, field)
    g = mesh.dual
    diag = mesh.volumes + np.bincount(
        g.receivers, weights=0.5 * field.alpha * field.dt * g.edge_area / g.edge_delta, minlength=n)
    x = field.T.copy()
    r = b - _cn_matvec(mesh, field, x)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return field.with_T(np.zeros(n))
    z = r / diag
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter + 1):
        if np.linalg.norm(r) <= tol * bnorm:
            return field.with_T(x)
        q = _cn_matvec(mesh, field, p)
        step_len = rz / (p @ q)
        x = x + step_len * p
        r = r - step_len * q
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not reach relative residual {tol:g} in {max_iter} iterations "
                      f"(got {np.linalg.norm(r) / bnorm:.3g})")


_STEPPERS = {
    SchemeKind.FIRST_ORDER: step_first_order,
    SchemeKind.CRANK_NICOLSON: step_crank_nicolson,
    SchemeKind.SECOND_ORDER_2HOP: step_second_order_2hop,
    SchemeKind.MIDPOINT: step_midpoint,
}


def step(mesh: Mesh, field: Field, scheme: SchemeKind | str = SchemeKind.FIRST_ORDER) -> Field:
    return _STEPPERS[SchemeKind(scheme)](mesh, field)


def rollout(mesh: Mesh, field: Field, scheme: SchemeKind | str, steps: int) -> list[Field]:
    """States after each of ``steps`` updates (the initial state is not included)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    stepper = _STEPPERS[SchemeKind(scheme)]
    out = []
    cur = field
    for k in range(1, steps + 1):
        cur = stepper(mesh, cur)
        if not np.all(np.isfinite(cur.T)):
            raise DivergenceError(k)
        out.append(cur)
    return out


def pde_residual(mesh: Mesh, before: Field, after: Field) -> np.ndarray:
    """Per-cell residual ``(T' - T)/dt - S - alpha lap(T')`` of the heat equation."""
    _check(mesh, before)
    _check(mesh, after)
    return ((after.T - before.T) / before.dt - before.S
            - before.alpha * laplacian(mesh, after.T))


# ---------------------------------------------------------------- persistence

def field_to_json(field: Field) -> dict:
    return {"T": field.T.tolist(), "S": field.S.tolist(), "alpha": field.alpha, "dt": field.dt}


def field_from_json(doc: dict) -> Field:
    return Field(np.array(doc["T"], dtype=np.float64), np.array(doc["S"], dtype=np.float64),
                 float(doc["alpha"]), float(doc["dt"]))


def save_field(field: Field, path) -> None:
    Path(path).write_text(json.dumps(field_to_json(field)))


def load_field(path) -> Field:
    return field_from_json(json.loads(Path(path).read_text()))


def write_rollout_csv(states: list[Field], path, initial: Field | None = None) -> None:
    """CSV rows ``(step, cellIndex, T)``; step 0 is ``initial`` when given."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "cellIndex", "T"])
        seq = ([(0, initial)] if initial is not None else []) + list(enumerate(states, start=1))
        for k, st in seq:
            for i, t in enumerate(st.T.tolist()):
                w.writerow([k, i, "%.17g" % t if math.isfinite(t) else str(t)])
