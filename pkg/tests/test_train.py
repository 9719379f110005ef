import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvgnn.diff import Tensor
from fvgnn.fvm import Field, pde_residual, step_first_order
from fvgnn.gnn import GraphBatch, MpsModel, construct_exact_fvm_weights, predict
from fvgnn.mesh import build_two_cell_mesh, fourier_dt_max, validate_mesh
from fvgnn.train import (
    CORNER_CASES,
    MeshDataset,
    Normalization,
    TrainConfig,
    TrainingDivergedError,
    TwoCellDataset,
    dataset_loss,
    evaluate_ood,
    mae_loss,
    pinn_loss,
    total_loss,
    train,
    write_history_csv,
    write_weight_histogram_csv,
)

import conftest as oc


@pytest.fixture(scope="module")
def two_cell_ds():
    return TwoCellDataset.generate(100, seed=0)


@pytest.fixture(scope="module")
def small_suite():
    return MeshDataset.generate(n_meshes=3, seed=1, min_cells=100, max_cells=200)


def _identity_model():
    """Simplified model whose update returns the input temperature."""
    model = construct_exact_fvm_weights(1, 2, 4)
    W = model.layers[0]["up"].layers[0]["W"].data
    W[0] = [1.0, 0.0, 0.0]
    W[1] = [-1.0, 0.0, 0.0]
    return model


def test_normalization_endpoints_and_roundtrip():
    n = Normalization(3.0)
    assert n.normalize(0.0) == -1.0 and n.normalize(3.0) == 1.0
    x = np.random.default_rng(0).uniform(-5, 5, 1000)
    assert np.max(np.abs(n.denormalize(n.normalize(x)) - x)) < 1e-12


def test_two_cell_corner_cases_once(two_cell_ds):
    norm = two_cell_ds.normalization
    keys = [tuple(np.round(np.concatenate([s.field.T, s.field.S]), 12)) for s in two_cell_ds.samples]
    for c in CORNER_CASES:
        assert keys.count(tuple(norm.normalize(np.array(c)))) == 1
    for s in two_cell_ds.samples[:4]:
        assert np.all(np.isnan(s.mesh.dirichlet))


def test_two_cell_labels_are_first_order(two_cell_ds):
    for s in two_cell_ds.samples:
        assert np.array_equal(s.target, step_first_order(s.mesh, s.field).T)
        assert s.field.dt <= fourier_dt_max(s.mesh, s.field.alpha)


def test_two_cell_boundary_rate():
    ds = TwoCellDataset.generate(1000, seed=3)
    active = np.mean([np.mean(~np.isnan(s.mesh.dirichlet)) for s in ds.samples[4:]])
    assert active == pytest.approx(0.25, abs=0.03)
    vals = np.concatenate([s.mesh.dirichlet[~np.isnan(s.mesh.dirichlet)] for s in ds.samples])
    assert vals.min() >= -1 and vals.max() <= 1


def test_random_geometry_varies():
    ds = TwoCellDataset.generate(20, seed=0, geometry="random")
    vols = {round(float(s.mesh.volumes[0]), 9) for s in ds.samples}
    assert len(vols) == 20


def test_manifest_roundtrip(tmp_path, small_suite):
    for ds in (TwoCellDataset.generate(30, seed=5, geometry="random"), small_suite):
        ds.save_manifest(tmp_path / "m.json")
        again = type(ds).load_manifest(tmp_path / "m.json")
        assert len(again) == len(ds)
        for a, b in zip(ds.samples, again.samples):
            assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
            assert np.array_equal(a.field.T, b.field.T) and np.array_equal(a.target, b.target)


def test_mesh_dataset_valid(small_suite):
    for s in small_suite.samples:
        validate_mesh(s.mesh, 1.0)
        assert 100 <= s.mesh.n_cells <= 200
        assert np.all(s.field.T >= -1) and np.all(s.field.T <= 1)


def test_mae_exact_construction(two_cell_ds):
    assert dataset_loss(construct_exact_fvm_weights(1, 2, 4), two_cell_ds) < 1e-12


def test_mae_identity_model_oracle(two_cell_ds):
    got = dataset_loss(_identity_model(), two_cell_ds)
    per_graph = []
    for s in two_cell_ds.samples:
        m = s.mesh
        d = oc.dirichlet_map(m)
        nbrs, vol = oc.oracle_neighbors(m.vertices, m.cells.tolist(), d)
        flux = oc.oracle_flux(nbrs, s.field.T, s.field.alpha)
        per_graph.append(np.mean([abs(s.field.dt * flux[p] / vol[p] + s.field.dt * s.field.S[p])
                                  for p in range(m.n_cells)]))
    assert got == pytest.approx(np.mean(per_graph), rel=1e-12)


def test_mae_single_node_half():
    from fvgnn.mesh import Mesh
    mesh = Mesh.from_triangles([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    f = Field([0.3], [0.0], 1.0, 0.1)
    batch = GraphBatch.from_graph(mesh, f, target=[0.8])
    assert float(mae_loss(_identity_model(), batch).data) == pytest.approx(0.5, abs=1e-15)


def test_pinn_backward_euler(irregular300):
    rng = np.random.default_rng(0)
    mesh = irregular300.with_dirichlet(np.where(rng.random(irregular300.n_boundary) < 0.5,
                                                rng.uniform(-1, 1, irregular300.n_boundary), np.nan))
    f = Field(rng.uniform(-1, 1, mesh.n_cells), rng.uniform(-1, 1, mesh.n_cells), 1.0,
              0.5 * fourier_dt_max(mesh))
    h = oc.oracle_backward_euler(mesh.vertices, mesh.cells.tolist(), oc.dirichlet_map(mesh),
                                 f.T, f.S, f.alpha, f.dt)
    batch = GraphBatch.from_graph(mesh, f)
    assert float(pinn_loss(None, batch, Tensor(h.reshape(-1, 1))).data) < 1e-10


def test_pinn_uniform_identity_zero(regular8):
    f = Field(np.full(regular8.n_cells, 0.4), np.zeros(regular8.n_cells), 1.0, 0.01)
    assert float(pinn_loss(_identity_model(), GraphBatch.from_graph(regular8, f)).data) == 0.0


def test_pinn_exact_equals_residual_mean(small_suite):
    model = construct_exact_fvm_weights(2, 2, 4)
    for s in small_suite.samples:
        after = s.field.with_T(step_first_order(s.mesh, s.field).T)
        want = float(np.mean(np.abs(pde_residual(s.mesh, s.field, after))))
        got = float(pinn_loss(model, s.batch).data)
        assert got == pytest.approx(want, rel=1e-13)


def test_total_loss_l1_terms(two_cell_ds):
    batch = GraphBatch.concat([s.batch for s in two_cell_ds.samples[:4]])
    model = construct_exact_fvm_weights(1, 2, 4)
    tot, base, l1 = total_loss(model, batch, TrainConfig(eta=0.0))
    assert l1 is None and float(tot.data) == float(base.data)
    tot, base, l1 = total_loss(model, batch, TrainConfig(eta=1e-3))
    assert float(l1.data) == pytest.approx(12e-3, rel=1e-15)
    tot, base, l1 = total_loss(model, batch, TrainConfig(regularization="none"))
    assert l1 is None


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), value=st.floats(1e-6, 10.0))
def test_penalty_monotone(seed, value):
    from fvgnn.diff import l1_penalty
    model = MpsModel(1, 2, 4, seed=seed % 97)
    params = model.parameters()
    before = float(l1_penalty(params, 1e-3).data)
    rng = np.random.default_rng(seed)
    p = params[int(rng.integers(len(params)))]
    idx = tuple(int(rng.integers(s)) for s in p.data.shape)
    p.data[idx] = 0.0
    base = float(l1_penalty(params, 1e-3).data)
    p.data[idx] = value
    assert float(l1_penalty(params, 1e-3).data) > base
    assert before >= 0


def test_train_deterministic_and_logging(two_cell_ds):
    runs = []
    for _ in range(2):
        model = MpsModel(2, 2, 8, seed=1)
        res = train(model, two_cell_ds, TrainConfig(steps=300, seed=4, learning_rate=1e-3))
        runs.append((res.history, [p.data.copy() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert [h[0] for h in runs[0][0]] == [100, 200, 300]
    for a, b in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(a, b)


def test_pinn_training_logs_every_100(small_suite):
    model = MpsModel(1, 2, 4, seed=0)
    res = train(model, small_suite, TrainConfig(steps=200, loss_kind="PINN", batch_size=2))
    assert [h[0] for h in res.history] == [100, 200]
    assert all(np.isfinite(h[1]) for h in res.history)


def test_train_loss_decreases(two_cell_ds):
    model = MpsModel(2, 2, 16, seed=0)
    res = train(model, two_cell_ds, TrainConfig(steps=3000, learning_rate=1e-3, regularization="none"))
    losses = [h[2] for h in res.history]
    k = max(1, len(losses) // 10)
    assert np.median(losses[-k:]) < np.median(losses[:k])


def test_train_nan_aborts(two_cell_ds):
    model = MpsModel(1, 2, 4, seed=0)
    model.parameters()[0].data[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train(model, two_cell_ds, TrainConfig(steps=10))
    assert err.value.step == 1


def test_config_validation():
    for bad in ({"steps": 0}, {"eta": -1.0}, {"regularization": "L2"}, {"loss_kind": "MSE"},
                {"learning_rate": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(regularization="none").regularized is False


def test_evaluate_exact_construction(small_suite):
    res = evaluate_ood(construct_exact_fvm_weights(1, 2, 4), small_suite, rollout_steps=50)
    assert res["oneStepMseMean"] < 1e-20 and res["rollout50MseMean"] < 1e-20
    assert res["rolloutFiniteFraction"] == 1.0


def test_evaluate_constant_zero(small_suite):
    res = evaluate_ood(MpsModel(1, 2, 4, zero=True), small_suite, rollout_steps=0)
    want = [np.mean(s.target ** 2) for s in small_suite.samples]
    np.testing.assert_allclose(res["oneStepMse"], want, rtol=1e-14)


def test_evaluate_divergent_is_inf(small_suite):
    model = construct_exact_fvm_weights(1, 2, 4)
    for layer in model.layers[0]["up"].layers:
        layer["W"].data *= 1e4  # amplifies the state 1e8x per step
    res = evaluate_ood(model, small_suite, rollout_steps=50)
    assert np.all(np.isinf(res["rollout50Mse"]))
    assert res["rolloutFiniteFraction"] == 0.0


def test_history_and_histogram_csv(tmp_path):
    write_history_csv([(100, 0.5, 0.4, 0.1)], tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows == [["step", "loss", "maeTerm", "l1Term"], ["100", "0.5", "0.40000000000000002", "0.10000000000000001"]]
    model = construct_exact_fvm_weights(1, 2, 4)
    write_weight_histogram_csv(model, tmp_path / "w.csv")
    rows = list(csv.reader(open(tmp_path / "w.csv")))[1:]
    assert sum(int(r[2]) for r in rows) == len(np.concatenate([p.data.ravel() for p in model.parameters()]))


def test_corner_case_uniform_stays_uniform(two_cell_ds):
    # physical S = 0 normalizes to -1, so the label drifts by -dt but stays spatially uniform
    model = construct_exact_fvm_weights(1, 2, 4)
    s = two_cell_ds.samples[1]  # G(1, 1, 0, 0)
    out = predict(model, s.batch)
    assert out[0] == out[1]
    np.testing.assert_allclose(out, 1.0 - s.field.dt, atol=1e-15)
