"""Fixed-horizon temporal convergence and residual studies for the FV schemes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fvm import DivergenceError, Field, SchemeKind, pde_residual, rollout
from .mesh import Mesh, fourier_dt_max

__all__ = ["StudyRow", "run_study", "richardson_slope", "EXPLICIT_SCHEMES"]

EXPLICIT_SCHEMES = {SchemeKind.FIRST_ORDER, SchemeKind.MIDPOINT, SchemeKind.SECOND_ORDER_2HOP}


@dataclass
class StudyRow:
    mesh_index: int
    n_cells: int
    scheme: str
    dt_fraction: float
    dt: float
    fourier_bound: float
    steps: int
    status: str  # stable | unstable | divergent
    residual_median: float
    residual_max: float
    error: float  # RMS difference to the reference at the horizon

    def as_list(self):
        return [self.mesh_index, self.n_cells, self.scheme, self.dt_fraction, self.dt,
                self.fourier_bound, self.steps, self.status, self.residual_median,
                self.residual_max, self.error]

    HEADER = ["meshIndex", "nCells", "scheme", "dtFraction", "dt", "fourierBound", "steps",
              "status", "residualMedian", "residualMax", "errorVsReference"]


def _run(mesh, field, scheme, steps):
    """Final state and the absolute residuals of every step, or ``None`` on divergence."""
    try:
        states = rollout(mesh, field, scheme, steps)
    except DivergenceError:
        return None, None
    scale = 1e6 * max(1.0, float(np.max(np.abs(field.T))))
    if np.max(np.abs(states[-1].T)) > scale:
        return None, None
    res = []
    prev = field
    for st in states:
        res.append(np.abs(pde_residual(mesh, prev, st)))
        prev = st
    return states[-1].T, np.concatenate(res)


def run_study(mesh: Mesh, field: Field, schemes, dt_fractions, horizon_steps: int = 8,
              reference_scheme="midpoint", reference_refinement: int = 64, mesh_index: int = 0):
    """Roll every scheme to a common final time for each timestep fraction.

    The final time is ``horizon_steps`` steps of the largest timestep; every
    fraction must divide it into a whole number of steps. The reference is
    ``reference_scheme`` run at the smallest timestep divided by
    ``reference_refinement``. ``field.dt`` is ignored.
    """
    bound = fourier_dt_max(mesh, field.alpha)
    fr = sorted(float(f) for f in dt_fractions)
    t_end = horizon_steps * fr[-1] * bound
    plan = []
    for f in fr:
        n = t_end / (f * bound)
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError(f"dt fraction {f} does not divide the horizon into whole steps")
        plan.append((f, int(round(n))))
    ref_steps = plan[0][1] * reference_refinement
    ref_field = Field(field.T, field.S, field.alpha, t_end / ref_steps)
    ref_T, _ = _run(mesh, ref_field, reference_scheme, ref_steps)
    if ref_T is None:
        raise DivergenceError(ref_steps, "reference solution diverged")
    rows = []
    for scheme in schemes:
        scheme = SchemeKind(scheme)
        for f, n in plan:
            dt = t_end / n
            T, res = _run(mesh, Field(field.T, field.S, field.alpha, dt), scheme, n)
            if T is None:
                status, rmed, rmax, err = "divergent", math.inf, math.inf, math.inf
            else:
                status = "unstable" if (scheme in EXPLICIT_SCHEMES and dt > bound) else "stable"
                rmed, rmax = float(np.median(res)), float(np.max(res))
                err = float(np.sqrt(np.mean((T - ref_T) ** 2)))
            rows.append(StudyRow(mesh_index, mesh.n_cells, scheme.value, f, dt, bound, n, status,
                                 rmed, rmax, err))
    return rows


def richardson_slope(dts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)``."""
    x = np.log(np.asarray(dts, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    if len(x) < 2 or not np.all(np.isfinite(y)):
        return math.nan
    return float(np.polyfit(x, y, 1)[0])
