"""Command-line entry point: ``fvgnn <command> [options]``.

Exit codes: 0 success, 1 validation or configuration error, 2 numeric failure.
``FVGNN_OUTPUT_DIR`` overrides every output directory.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .convergence import StudyRow, richardson_slope, run_study
from .fvm import DivergenceError, Field, SchemeKind
from .gnn import (MpsModel, construct_exact_fvm_weights, count_nonzero_params, load_checkpoint,
                  predict, save_checkpoint, GraphBatch)
from .mesh import (MeshError, MeshGenerationError, MeshParseError, build_two_cell_mesh,
                   generate_irregular_mesh, generate_regular_mesh, save_mesh, validate_mesh)
from .symreg import SearchBudget, distill_scheme
from .train import (MeshDataset, TrainConfig, TrainingDivergedError, TwoCellDataset, _Dataset,
                    dataset_loss, evaluate_ood, train, write_history_csv,
                    write_weight_histogram_csv)

OUTPUT_ENV = "FVGNN_OUTPUT_DIR"

DEFAULT_CONFIG = {
    "outputDir": "runs/default",
    "model": {"L": 2, "m": 2, "d": 32, "mlpVariant": "plain", "featureScheme": "simplified",
              "hasTwoHopAggregator": False, "seed": 0},
    "train": {"steps": 90000, "learningRate": 1e-4, "batchSize": 4, "eta": 1e-3,
              "regularization": "L1", "lossKind": "MAE", "seed": 0},
    "dataset": {"kind": "two-cell", "n_samples": 100, "seed": 0, "t_max": 1.0, "alpha": 1.0,
                "geometry": "fixed", "p_boundary": 0.25, "dt_fraction": [0.1, 0.9]},
    "evalSuite": None,
}


class ConfigError(ValueError):
    pass


def _merge(defaults, given, path="config"):
    if not isinstance(given, dict):
        raise ConfigError(f"{path} must be an object")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown key {path}.{k}")
        if isinstance(defaults[k], dict) and path == "config" and k != "dataset":
            out[k] = _merge(defaults[k], v, f"{path}.{k}")
        else:
            out[k] = v
    return out


def load_run_config(path) -> dict:
    """Read a RunConfig JSON, fill defaults and reject unknown keys."""
    try:
        given = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    cfg = _merge(DEFAULT_CONFIG, given)
    if "dataset" in given:
        cfg["dataset"] = given["dataset"]
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _versions():
    return {"fvgnn": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _out_dir(requested) -> Path:
    base = os.environ.get(OUTPUT_ENV) or requested
    p = Path(base)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return x


def _write_summary(path, summary):
    Path(path).write_text(json.dumps(summary, indent=2, default=float))


def _train_config(section) -> TrainConfig:
    return TrainConfig(steps=int(section["steps"]), learning_rate=float(section["learningRate"]),
                       batch_size=int(section["batchSize"]), eta=float(section["eta"]),
                       regularization=section["regularization"], loss_kind=section["lossKind"],
                       seed=int(section["seed"]))


def _build_model(section) -> MpsModel:
    return MpsModel(int(section["L"]), int(section["m"]), int(section["d"]), section["mlpVariant"],
                    section["featureScheme"], bool(section["hasTwoHopAggregator"]), int(section["seed"]))


# ------------------------------------------------------------------- commands

def cmd_mesh_gen(args):
    if args.kind == "two-cell":
        mesh = build_two_cell_mesh()
    else:
        if args.cells is None or not 100 <= args.cells <= 600:
            raise ConfigError(f"--cells must be within 100..600, got {args.cells}")
        if args.kind == "irregular":
            mesh = generate_irregular_mesh(args.seed, args.cells)
        else:
            mesh = generate_regular_mesh(max(2, int(round(math.sqrt(args.cells / 2)))))
    validate_mesh(mesh, domain_area=None)
    out = Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        out = _out_dir(os.environ[OUTPUT_ENV]) / out.name
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    ratio = float(mesh.volumes.max() / mesh.volumes.min())
    print(f"cells={mesh.n_cells} faces={mesh.n_faces} boundaryFaces={mesh.n_boundary} "
          f"minAngleDeg={float(mesh.min_angles().min()):.3f} volumeRatio={ratio:.3f} valid=true -> {out}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config)
    tcfg = _train_config(cfg["train"])
    model = _build_model(cfg["model"])
    dataset = _Dataset.from_manifest(cfg["dataset"])
    out = _out_dir(cfg["outputDir"])
    h = config_hash(cfg)
    result = train(model, dataset, tcfg)
    save_checkpoint(model, out / "checkpoint.json", dataset.normalization.to_dict(),
                    {"trainingDataset": dataset.manifest(), "configHash": h})
    write_history_csv(result.history, out / "loss_history.csv")
    write_weight_histogram_csv(model, out / "weight_histogram.csv")
    summary = {"configHash": h, "versions": _versions(), "regularized": tcfg.regularized,
               "lossKind": tcfg.loss_kind, "finalLoss": result.final_loss,
               "finalMae": dataset_loss(model, dataset, "MAE") if tcfg.loss_kind == "MAE" else None,
               "nonzeroParams1e-2": count_nonzero_params(model, 1e-2), "seconds": result.seconds,
               "steps": tcfg.steps}
    if cfg.get("evalSuite"):
        ev = evaluate_ood(model, _Dataset.from_manifest(cfg["evalSuite"]))
        summary["eval"] = {k: v for k, v in ev.items() if not isinstance(v, np.ndarray)}
    _write_summary(out / "summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("configHash", "regularized", "finalLoss")}))
    return 0


def _load_ckpt(path):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _suite(path):
    if path is None:
        return None
    if not Path(path).is_file():
        raise ConfigError(f"suite manifest not found: {path}")
    return _Dataset.load_manifest(path)


def cmd_eval(args):
    model, doc = _load_ckpt(args.checkpoint)
    suite = _suite(args.suite)
    ev = evaluate_ood(model, suite, rollout_steps=args.rollout_steps)
    out = _out_dir(args.out)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["meshIndex", "nCells", "oneStepMse", "rollout50Mse"])
        for i, s in enumerate(suite.samples):
            w.writerow([i, s.mesh.n_cells, _fmt(ev["oneStepMse"][i]), _fmt(ev["rollout50Mse"][i])])
    summary = {k: v for k, v in ev.items() if not isinstance(v, np.ndarray)}
    summary.update({"checkpoint": str(args.checkpoint), "configHash": doc.get("configHash"),
                    "suite": suite.manifest(), "versions": _versions()})
    if args.compare:
        other, _ = _load_ckpt(args.compare)
        ev2 = evaluate_ood(other, suite, rollout_steps=0)
        summary["compareCheckpoint"] = str(args.compare)
        summary["oneStepMseRatioCompareOverThis"] = ev2["oneStepMseMean"] / ev["oneStepMseMean"] \
            if ev["oneStepMseMean"] > 0 else math.inf
    _write_summary(out / "eval_summary.json", summary)
    print(json.dumps({"oneStepMseMean": summary["oneStepMseMean"],
                      "rollout50MseMedian": summary.get("rollout50MseMedian")}))
    return 0


def cmd_distill(args):
    model, doc = _load_ckpt(args.checkpoint)
    if args.suite:
        data = _suite(args.suite)
    else:
        manifest = dict(doc.get("trainingDataset") or DEFAULT_CONFIG["dataset"])
        if manifest.get("kind") == "two-cell":
            manifest.update(n_samples=max(1500, args.rows), seed=int(manifest.get("seed", 0)) + 1)
        data = _Dataset.from_manifest(manifest)
    report = distill_scheme(model, data, rows=args.rows, budget=SearchBudget(seed=args.seed),
                            out_dir=_out_dir(args.out), checkpoint=str(args.checkpoint))
    matches = {k: [t["template"] for t in v["templates"] if t["match"]] for k, v in report["mlps"].items()}
    print(json.dumps({"recovered": report["recovered"], "templateMatches": matches}))
    return 0


def _converge_suite(args):
    if args.mesh_suite:
        suite = _suite(args.mesh_suite)
        return [(s.mesh, s.field) for s in suite.samples]
    mesh = generate_regular_mesh(args.n)
    mesh = mesh.with_dirichlet(np.zeros(mesh.n_boundary))
    c = mesh.centroids
    T = np.sin(np.pi * c[:, 0]) * np.sin(np.pi * c[:, 1])
    return [(mesh, Field(T, np.zeros(mesh.n_cells)))]


def cmd_converge(args):
    schemes = [s.value for s in SchemeKind] if args.schemes == "all" else args.schemes.split(",")
    grid = [float(x) for x in args.dt_grid.split(",")]
    out = _out_dir(args.out)
    rows: list[StudyRow] = []
    for i, (mesh, fld) in enumerate(_converge_suite(args)):
        rows += run_study(mesh, fld, schemes, grid, args.horizon, args.reference, mesh_index=i)
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(StudyRow.HEADER)
        for r in rows:
            w.writerow([_fmt(x) for x in r.as_list()])
    slopes = {}
    for s in schemes:
        sel = [r for r in rows if r.scheme == s and r.mesh_index == 0 and r.status == "stable"]
        if len(sel) >= 2:
            slopes[s] = richardson_slope([r.dt for r in sel], [r.error for r in sel])
    summary = {"slopesMesh0": slopes, "reference": args.reference, "dtGrid": grid,
               "horizonSteps": args.horizon, "versions": _versions(),
               "configHash": config_hash(vars(args) | {"func": None})}
    _write_summary(out / "convergence_summary.json", summary)
    print(json.dumps(slopes))
    return 0


def _random_case(rng):
    kind = rng.integers(2)
    cells = int(rng.integers(100, 601))
    mesh = (generate_irregular_mesh(int(rng.integers(0, 2 ** 31)), cells) if kind
            else generate_regular_mesh(max(8, min(17, int(round(math.sqrt(cells / 2)))))))
    active = rng.random(mesh.n_boundary) < 0.5
    mesh = mesh.with_dirichlet(np.where(active, rng.uniform(-1, 1, mesh.n_boundary), np.nan))
    from .mesh import fourier_dt_max
    fld = Field(rng.uniform(-1, 1, mesh.n_cells), rng.uniform(-1, 1, mesh.n_cells), 1.0,
                rng.uniform(0.1, 1.0) * fourier_dt_max(mesh))
    return mesh, fld


def verify_theory(L, m, d, n_meshes=50, seed=0, train_steps=20000):
    """Constructive checks of the exact sparse solution plus the 1-layer weight inequalities."""
    from .fvm import step_first_order
    model = construct_exact_fvm_weights(L, m, d)
    count = count_nonzero_params(model)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_meshes):
        mesh, fld = _random_case(rng)
        pred = predict(model, GraphBatch.from_graph(mesh, fld))
        worst = max(worst, float(np.max(np.abs(pred - step_first_order(mesh, fld).T))))
    result = {"L": L, "m": m, "d": d, "nonzeroParams": count, "expectedParams": 2 * m * (L + 1) + 4,
              "countPass": count == 2 * m * (L + 1) + 4, "equivalenceMaxError": worst,
              "equivalencePass": worst < 1e-12}
    if train_steps > 0:
        result["weightInequalities"] = weight_inequalities(train_steps, seed)
    return result


def weight_inequalities(steps=20000, seed=0, learning_rates=(1e-3, 1e-4)):
    """Train a 1-layer model with no hidden layers and check the weight identities against its MAE.

    ``steps`` Adam steps are run at each learning rate in turn; the coarse
    stage gets close quickly and the fine one lowers the noise floor.
    """
    ds = TwoCellDataset.generate(100, seed=seed)
    model = MpsModel(1, 1, 1, "plain", "simplified", seed=seed)
    for k, lr in enumerate(learning_rates):
        train(model, ds, TrainConfig(steps=steps, learning_rate=lr, regularization="none",
                                     seed=seed + k))
    eps = dataset_loss(model, ds, "MAE")
    W_u = model.layers[0]["up"].layers[0]["W"].data[0]
    w_agg = float(model.layers[0]["agg"].layers[0]["W"].data[0, 0])
    dt = ds.samples[0].field.dt  # the corner cases share one timestep
    checks = {
        "W_u1": abs(W_u[0] - 1.0),
        "dt*(W_u3-1)": abs(dt * (W_u[2] - 1.0)),
        "dt*(W_u2*w_agg-1)": abs(dt * (W_u[1] * w_agg - 1.0)),
    }
    return {"trainMae": eps, "dt": dt, "W_u": W_u.tolist(), "w_agg": w_agg,
            "deviations": checks, "bound": 2 * eps,
            "pass": {k: bool(v <= 2 * eps) for k, v in checks.items()}}


def cmd_verify_theory(args):
    res = verify_theory(args.l, args.m, args.d, train_steps=args.train_steps)
    res["versions"] = _versions()
    out = _out_dir(args.out)
    _write_summary(out / "verify_theory.json", res)
    print(json.dumps({k: res[k] for k in ("nonzeroParams", "countPass", "equivalenceMaxError",
                                         "equivalencePass")}))
    return 0 if res["countPass"] and res["equivalencePass"] else 2


# ---------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="fvgnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh-gen", help="generate and validate a mesh")
    s.add_argument("--kind", choices=["regular", "irregular", "two-cell"], required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cells", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mesh_gen)

    s = sub.add_parser("train", help="train a model from a RunConfig JSON")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="one-step and rollout metrics on a mesh suite")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--suite", required=True, help="dataset manifest JSON")
    s.add_argument("--out", default="runs/eval")
    s.add_argument("--rollout-steps", type=int, default=50)
    s.add_argument("--compare", help="second checkpoint; its one-step MSE ratio is reported")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("distill", help="symbolic regression of every MLP of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", default="runs/distill")
    s.add_argument("--suite", help="dataset manifest for probing (default: training distribution)")
    s.add_argument("--rows", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("converge", help="temporal convergence / residual study")
    s.add_argument("--schemes", default="all")
    s.add_argument("--dt-grid", default="0.1,0.2,0.4,0.8", help="fractions of the Fourier bound")
    s.add_argument("--mesh-suite", help="dataset manifest; default is a regular mesh")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--horizon", type=int, default=32, help="steps of the largest timestep")
    s.add_argument("--reference", default="midpoint")
    s.add_argument("--out", default="runs/converge")
    s.set_defaults(func=cmd_converge)

    s = sub.add_parser("verify-theory", help="exact-construction checks")
    s.add_argument("--l", type=int, default=1)
    s.add_argument("--m", type=int, default=2)
    s.add_argument("--d", type=int, default=4)
    s.add_argument("--train-steps", type=int, default=20000)
    s.add_argument("--out", default="runs/verify")
    s.set_defaults(func=cmd_verify_theory)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MeshParseError, MeshError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, TrainingDivergedError, MeshGenerationError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
