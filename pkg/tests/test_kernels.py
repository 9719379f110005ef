import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvgnn import _pykernels, kernels

pytestmark = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                reason="compiled extension not built")


def _graph(draw_seed, n, e):
    rng = np.random.default_rng(draw_seed)
    receivers = rng.integers(0, n, e)
    senders = rng.integers(-1, n, e)
    return (rng.normal(size=n), receivers, senders, rng.uniform(0.1, 3.0, e),
            rng.normal(size=e), rng)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), e=st.integers(0, 300))
def test_stencil_bit_identical(seed, n, e):
    from fvgnn import _ckernels
    x, r, s, w, ghost, _ = _graph(seed, n, e)
    a = _pykernels.stencil_sum(x, r, s, w, ghost, n)
    b = _ckernels.stencil_sum(x, r, s, w, ghost, n)
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40), e=st.integers(0, 200),
       width=st.sampled_from([None, 1, 3, 8]))
def test_segment_sum_bit_identical(seed, n, e, width):
    from fvgnn import _ckernels
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(e,) if width is None else (e, width))
    ids = rng.integers(0, n, e)
    a = _pykernels.segment_sum(rows, ids, n)
    b = _ckernels.segment_sum(rows, ids, n)
    assert a.shape == b.shape
    assert np.array_equal(a, b)


def test_use_backend_switches_and_matches(irregular300):
    from fvgnn.fvm import Field, step
    rng = np.random.default_rng(0)
    f = Field(rng.normal(size=irregular300.n_cells), rng.normal(size=irregular300.n_cells), 1.0, 1e-3)
    before = kernels.BACKEND
    try:
        out = {}
        for name in ("python", "cython"):
            kernels.use_backend(name)
            assert kernels.BACKEND == name
            out[name] = [step(irregular300, f, s).T for s in
                         ("first-order", "midpoint", "second-order-2hop", "crank-nicolson")]
        for a, b in zip(out["python"], out["cython"]):
            assert np.array_equal(a, b)
    finally:
        kernels.use_backend(before)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")
