"""Datasets, losses and training loops for the message-passing models.

All training happens in normalized units: temperatures, sources and
Dirichlet values are mapped affinely from ``[0, t_max]`` to ``[-1, 1]`` and
the labels are the first-order update of the normalized state, so the scheme
the network should learn is the same in both unit systems.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import diff
from .diff import Tensor
from .fvm import Field, rollout, step_first_order
from .gnn import GraphBatch, MpsModel, mps_forward
from .mesh import (Mesh, build_two_cell_mesh, build_two_cell_mesh_random, fourier_dt_max,
                   generate_irregular_mesh, generate_regular_mesh)

__all__ = [
    "Normalization",
    "Sample",
    "TwoCellDataset",
    "MeshDataset",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "mae_loss",
    "pinn_loss",
    "total_loss",
    "dataset_loss",
    "train",
    "evaluate_ood",
    "write_history_csv",
    "write_weight_histogram_csv",
    "CORNER_CASES",
]

# G(T_1, T_2, S_1, S_2) in units of t_max
CORNER_CASES = ((0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 1.0), (0.0, 1.0, 0.0, 0.0))


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


@dataclass(frozen=True)
class Normalization:
    """Affine map ``[0, t_max] -> [-1, 1]`` shared by temperatures and sources."""

    t_max: float = 1.0

    def normalize(self, x):
        return 2.0 * np.asarray(x, dtype=np.float64) / self.t_max - 1.0

    def denormalize(self, y):
        return (np.asarray(y, dtype=np.float64) + 1.0) * (0.5 * self.t_max)

    def to_dict(self):
        return {"t_max": self.t_max, "low": -1.0, "high": 1.0}


@dataclass(eq=False)
class Sample:
    """One graph in normalized units together with its first-order label."""

    mesh: Mesh
    field: Field
    target: np.ndarray
    batch: GraphBatch = dc_field(repr=False, default=None)

    def __post_init__(self):
        if self.batch is None:
            self.batch = GraphBatch.from_graph(self.mesh, self.field, self.target)


def _labelled(mesh_phys: Mesh, T, S, alpha, dt, norm: Normalization) -> Sample:
    dir_n = np.where(np.isnan(mesh_phys.dirichlet), np.nan, norm.normalize(np.nan_to_num(mesh_phys.dirichlet)))
    mesh = mesh_phys.with_dirichlet(dir_n)
    fld = Field(norm.normalize(T), norm.normalize(S), alpha, dt)
    return Sample(mesh, fld, step_first_order(mesh, fld).T)


class _Dataset:
    kind = ""

    def __init__(self, samples, params):
        self.samples: list[Sample] = samples
        self.params = params

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def normalization(self) -> Normalization:
        return Normalization(self.params["t_max"])

    def manifest(self) -> dict:
        return {"kind": self.kind, **self.params}

    def save_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2))

    @staticmethod
    def from_manifest(doc: dict) -> "_Dataset":
        doc = dict(doc)
        kind = doc.pop("kind", None)
        if kind == TwoCellDataset.kind:
            return TwoCellDataset.generate(**doc)
        if kind == MeshDataset.kind:
            return MeshDataset.generate(**doc)
        raise ValueError(f"unknown dataset kind {kind!r}")

    @staticmethod
    def load_manifest(path) -> "_Dataset":
        return _Dataset.from_manifest(json.loads(Path(path).read_text()))


class TwoCellDataset(_Dataset):
    """Random two-cell graphs plus the four corner cases.

    ``geometry="fixed"`` uses the equilateral pair; ``"random"`` draws a new
    non-congruent pair per sample so A, delta and V vary. Each outer face is
    active with probability ``p_boundary`` and gets a Dirichlet value drawn
    from ``U(0, t_max)``. The timestep is a random fraction (``dt_fraction``
    range) of the sample's Fourier bound.
    """

    kind = "two-cell"

    @classmethod
    def generate(cls, n_samples=100, seed=0, t_max=1.0, alpha=1.0, geometry="fixed",
                 p_boundary=0.25, dt_fraction=(0.1, 0.9)) -> "TwoCellDataset":
        if n_samples < len(CORNER_CASES):
            raise ValueError(f"need at least {len(CORNER_CASES)} samples for the corner cases")
        if geometry not in ("fixed", "random"):
            raise ValueError(f"unknown geometry {geometry!r}")
        lo, hi = dt_fraction
        if not 0 < lo <= hi:
            raise ValueError(f"invalid dt_fraction {dt_fraction}")
        norm = Normalization(t_max)
        rng = np.random.default_rng(seed)
        samples = []

        def geometry_for(dirichlet):
            if geometry == "fixed":
                return build_two_cell_mesh(dirichlet=dirichlet)
            return build_two_cell_mesh_random(rng, dirichlet=dirichlet)

        for c in CORNER_CASES:
            mesh = geometry_for(None)
            dt = 0.5 * (lo + hi) * fourier_dt_max(mesh, alpha)
            samples.append(_labelled(mesh, t_max * np.array(c[:2]), t_max * np.array(c[2:]), alpha, dt, norm))
        for _ in range(n_samples - len(CORNER_CASES)):
            T = rng.uniform(0.0, t_max, 2)
            S = rng.uniform(0.0, t_max, 2)
            active = rng.random(4) < p_boundary
            values = rng.uniform(0.0, t_max, 4)
            mesh = geometry_for(np.where(active, values, np.nan))
            dt = rng.uniform(lo, hi) * fourier_dt_max(mesh, alpha)
            samples.append(_labelled(mesh, T, S, alpha, dt, norm))
        params = {"n_samples": n_samples, "seed": seed, "t_max": t_max, "alpha": alpha,
                  "geometry": geometry, "p_boundary": p_boundary, "dt_fraction": list(dt_fraction)}
        return cls(samples, params)


def _smooth_random_field(rng, centroids, n_modes=3):
    x, y = centroids[:, 0], centroids[:, 1]
    out = np.zeros(len(x))
    for _ in range(n_modes):
        kx, ky = rng.uniform(0.5, 3.0, 2) * math.pi
        ph = rng.uniform(0, 2 * math.pi)
        out += rng.uniform(0.3, 1.0) * np.sin(kx * x + ky * y + ph)
    span = np.ptp(out)
    return (out - out.min()) / (span if span > 0 else 1.0)


class MeshDataset(_Dataset):
    """Regular and irregular unit-square meshes with random smooth states.

    Mesh ``i`` is irregular when ``kinds`` is ``"irregular"`` (or for odd ``i``
    with ``"mixed"``). Initial temperatures and sources are smooth random
    fields in ``[0, t_max]`` (sources scaled by ``source_scale``); every
    boundary face is active with probability ``p_boundary``.
    """

    kind = "mesh-suite"

    @classmethod
    def generate(cls, n_meshes=100, seed=0, min_cells=100, max_cells=600, kinds="mixed",
                 t_max=1.0, alpha=1.0, p_boundary=0.5, dt_fraction=0.5,
                 source_scale=1.0) -> "MeshDataset":
        if not 100 <= min_cells <= max_cells <= 600:
            raise ValueError("cell counts must satisfy 100 <= min_cells <= max_cells <= 600")
        if kinds not in ("mixed", "regular", "irregular"):
            raise ValueError(f"unknown mesh kinds {kinds!r}")
        norm = Normalization(t_max)
        rng = np.random.default_rng(seed)
        samples = []
        for i in range(n_meshes):
            target = int(rng.integers(min_cells, max_cells + 1))
            irregular = kinds == "irregular" or (kinds == "mixed" and i % 2 == 1)
            if irregular:
                mesh = generate_irregular_mesh(int(rng.integers(0, 2 ** 31)), target)
            else:
                n = max(8, int(round(math.sqrt(target / 2))))
                while 2 * n * n > max_cells:
                    n -= 1
                mesh = generate_regular_mesh(n)
            T = t_max * _smooth_random_field(rng, mesh.centroids)
            S = t_max * source_scale * _smooth_random_field(rng, mesh.centroids)
            active = rng.random(mesh.n_boundary) < p_boundary
            mesh = mesh.with_dirichlet(np.where(active, rng.uniform(0, t_max, mesh.n_boundary), np.nan))
            dt = dt_fraction * fourier_dt_max(mesh, alpha)
            samples.append(_labelled(mesh, T, S, alpha, dt, norm))
        params = {"n_meshes": n_meshes, "seed": seed, "min_cells": min_cells, "max_cells": max_cells,
                  "kinds": kinds, "t_max": t_max, "alpha": alpha, "p_boundary": p_boundary,
                  "dt_fraction": dt_fraction, "source_scale": source_scale}
        return cls(samples, params)


# --------------------------------------------------------------------- losses

def _weighted_abs_mean(err: Tensor, batch: GraphBatch) -> Tensor:
    return diff.sum_(diff.abs_(err) * Tensor(batch.node_weight.reshape(-1, 1)))


def mae_loss(model: MpsModel, batch: GraphBatch, pred: Tensor | None = None) -> Tensor:
    """Mean over graphs of the mean absolute error over each graph's nodes."""
    if batch.target is None:
        raise ValueError("mae_loss needs ground-truth targets")
    pred = mps_forward(model, batch) if pred is None else pred
    return _weighted_abs_mean(pred - Tensor(batch.target.reshape(-1, 1)), batch)


def pinn_loss(model: MpsModel, batch: GraphBatch, pred: Tensor | None = None) -> Tensor:
    """Mean absolute heat-equation residual ``(h - T)/dt - S - alpha lap(h)``."""
    pred = mps_forward(model, batch) if pred is None else pred
    h = pred[:, 0]
    flux = diff.stencil(h, batch.receivers, batch.senders,
                        batch.edge_alpha * batch.area / batch.delta, batch.ghost)
    res = (h - Tensor(batch.T)) * Tensor(1.0 / batch.dt) - Tensor(batch.S) - flux * Tensor(1.0 / batch.V)
    return diff.sum_(diff.abs_(res) * Tensor(batch.node_weight))


@dataclass
class TrainConfig:
    steps: int = 90000
    learning_rate: float = 1e-4
    batch_size: int = 4
    eta: float = 1e-3
    regularization: str = "L1"
    loss_kind: str = "MAE"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.log_every <= 0:
            raise ValueError("steps, batch_size and log_every must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.regularization not in ("none", "L1"):
            raise ValueError(f"regularization must be 'none' or 'L1', got {self.regularization!r}")
        if self.loss_kind not in ("MAE", "PINN"):
            raise ValueError(f"loss_kind must be 'MAE' or 'PINN', got {self.loss_kind!r}")

    @property
    def regularized(self) -> bool:
        return self.regularization == "L1" and self.eta > 0

    def to_dict(self):
        return asdict(self)


def total_loss(model: MpsModel, batch: GraphBatch, config: TrainConfig):
    """Return ``(total, base, l1)``; ``l1`` is ``None`` without regularization."""
    base = (mae_loss if config.loss_kind == "MAE" else pinn_loss)(model, batch)
    if not config.regularized:
        return base, base, None
    l1 = diff.l1_penalty(model.parameters(), config.eta)
    return base + l1, base, l1


def dataset_loss(model: MpsModel, dataset, kind="MAE") -> float:
    """Base loss over a whole dataset, each graph weighted equally."""
    fn = mae_loss if kind == "MAE" else pinn_loss
    batch = GraphBatch.concat([s.batch for s in dataset.samples])
    return float(fn(model, batch).data)


@dataclass
class TrainResult:
    model: MpsModel
    history: list  # rows (step, loss, baseTerm, l1Term)
    final_loss: float
    seconds: float


def train(model: MpsModel, dataset, config: TrainConfig, progress=None) -> TrainResult:
    """Adam on ``total_loss`` for ``config.steps`` steps.

    Batches are drawn without replacement, reshuffled every epoch by a
    generator seeded with ``config.seed``. The loss of the current batch is
    recorded every ``log_every`` steps.
    """
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = diff.Adam(params, lr=config.learning_rate)
    n = len(dataset)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    history = []
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        batch = GraphBatch.concat([dataset.samples[i].batch for i in idx])
        total, base, l1 = total_loss(model, batch, config)
        value = float(total.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % config.log_every == 0:
            history.append((step, value, float(base.data), 0.0 if l1 is None else float(l1.data)))
            if progress is not None:
                progress(history[-1])
    final = dataset_loss(model, dataset, config.loss_kind)
    return TrainResult(model, history, final, time.perf_counter() - t0)


# ----------------------------------------------------------------- evaluation

def _model_rollout(model, sample: Sample, steps: int):
    out = []
    fld = sample.field
    for _ in range(steps):
        batch = GraphBatch.from_graph(sample.mesh, fld)
        with np.errstate(all="ignore"):
            T = mps_forward(model, batch).data[:, 0]
        out.append(T)
        if not np.all(np.isfinite(T)):
            break
        fld = fld.with_T(T)
    return out


def evaluate_ood(model: MpsModel, dataset, rollout_steps: int = 50) -> dict:
    """One-step MSE against the first-order update and ``rollout_steps`` autoregressive MSE.

    The rollout MSE of a mesh is the mean over all steps and cells; a rollout
    that produces non-finite values scores ``inf``.
    """
    one, roll = [], []
    for s in dataset.samples:
        with np.errstate(all="ignore"):
            pred = mps_forward(model, s.batch).data[:, 0]
            one.append(float(np.mean((pred - s.target) ** 2)))
        if rollout_steps <= 0:
            continue
        ref = [f.T for f in rollout(s.mesh, s.field, "first-order", rollout_steps)]
        got = _model_rollout(model, s, rollout_steps)
        if len(got) < rollout_steps or not np.all(np.isfinite(got[-1])):
            roll.append(math.inf)
            continue
        with np.errstate(all="ignore"):
            mse = float(np.mean((np.array(got) - np.array(ref)) ** 2))
        roll.append(mse if math.isfinite(mse) else math.inf)
    one_a = np.array(one)
    out = {"oneStepMse": one_a, "oneStepMseMean": float(one_a.mean()),
           "oneStepMseMedian": float(np.median(one_a))}
    if rollout_steps > 0:
        roll_a = np.array(roll)
        finite = np.isfinite(roll_a)
        out.update({"rollout50Mse": roll_a, "rolloutFiniteFraction": float(finite.mean()),
                    "rollout50MseMedian": float(np.median(roll_a)),
                    "rollout50MseMean": float(roll_a[finite].mean()) if finite.any() else math.inf})
    return out


# ------------------------------------------------------------------------ logs

def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "maeTerm", "l1Term"])
        for step, loss, base, l1 in history:
            w.writerow([step, "%.17g" % loss, "%.17g" % base, "%.17g" % l1])


def write_weight_histogram_csv(model: MpsModel, path, bins: int = 60, lo_exp: float = -12.0):
    """Histogram of ``log10 |w|`` over all parameters; exact zeros are counted in the first bin."""
    w = np.concatenate([p.data.ravel() for p in model.parameters()])
    mag = np.log10(np.maximum(np.abs(w), 10.0 ** lo_exp))
    hi = max(1.0, float(mag.max()) + 1e-9)
    counts, edges = np.histogram(mag, bins=bins, range=(lo_exp, hi))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["log10AbsLow", "log10AbsHigh", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            out.writerow(["%.17g" % a, "%.17g" % b, int(c)])
