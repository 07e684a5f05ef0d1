import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosbo.collaborative import (
    CollaboratorRecord,
    CoSBO,
    UndefinedCorrelationError,
    pearson,
    select_collaborator,
    transfer_points,
)
from cosbo.gp import KernelParams, kernel_matrix
from cosbo.safeopt import ParameterGrid, SafeOptMC


def with_correlation(main, rho, rng):
    """A vector whose sample correlation with ``main`` is exactly ``rho``."""
    a = main - main.mean()
    a /= np.linalg.norm(a)
    noise = rng.normal(size=main.size)
    noise -= noise.mean()
    noise -= (noise @ a) * a
    noise /= np.linalg.norm(noise)
    return 0.5 + rho * a + math.sqrt(1 - rho**2) * noise


def record(id_, posterior_B, n=101, seed=0):
    rng = np.random.default_rng(seed)
    data = np.column_stack([np.arange(n), rng.uniform(0, 1, n), rng.uniform(0.3, 1, n)])
    return CollaboratorRecord(id_, np.asarray(posterior_B, float), data)


# -- pearson -------------------------------------------------------------------


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson([1, 2, 3], [3, 2, 1]) == -1.0
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_pearson_bounded_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        a, b = rng.normal(size=n) * rng.uniform(1e-3, 1e3), rng.normal(size=n)
        rho = pearson(a, b)
        assert -1.0 <= rho <= 1.0
        assert rho == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-10)


def test_pearson_affine_maps_are_exact():
    rng = np.random.default_rng(8)
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(2, 101)))
        a = rng.choice([-1, 1]) * 10 ** rng.uniform(-3, 3)
        b = rng.uniform(-100, 100)
        assert pearson(x, a * x + b) == math.copysign(1.0, a)


def test_pearson_self_is_one():
    x = np.random.default_rng(1).uniform(size=50)
    assert pearson(x, x) == 1.0


def test_pearson_constant_is_undefined():
    with pytest.raises(UndefinedCorrelationError):
        pearson([0.3, 0.3, 0.3], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 2, 3], [0.1 + 0.2] * 3)


def test_pearson_length_mismatch():
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])


# -- collaborator selection ----------------------------------------------------


@pytest.fixture
def trio():
    rng = np.random.default_rng(3)
    main = rng.uniform(size=101)
    recs = [record(c, with_correlation(main, r, rng)) for c, r in (("a", 0.9), ("b", 0.3), ("c", -0.2))]
    return main, recs


def test_select_best_and_worst(trio):
    main, recs = trio
    rec, z = select_collaborator(main, recs, "best")
    assert rec.id == "a" and z == pytest.approx(0.9, abs=1e-12)
    rec, z = select_collaborator(main, recs, "worst")
    assert rec.id == "c" and z == pytest.approx(-0.2, abs=1e-12)


def test_single_collaborator_is_chosen():
    rng = np.random.default_rng(4)
    main = rng.uniform(size=20)
    only = record("x", with_correlation(main, -0.7, rng), n=20)
    assert select_collaborator(main, [only])[0] is only


def test_ties_go_to_lowest_id():
    main = np.arange(10.0)
    recs = [record("b", main * 2), record("a", main + 1)]
    assert select_collaborator(main, recs)[0].id == "a"


def test_undefined_correlation_scores_zero():
    rng = np.random.default_rng(5)
    main = rng.uniform(size=30)
    flat = record("flat", np.full(30, 0.4), n=30)
    neg = record("neg", with_correlation(main, -0.5, rng), n=30)
    rec, z = select_collaborator(main, [flat, neg], "best")
    assert rec.id == "flat" and z == 0.0
    assert select_collaborator(main, [flat], "best") is None
    assert select_collaborator(main, []) is None


def test_bad_mode():
    with pytest.raises(ValueError):
        select_collaborator(np.arange(3.0), [record("a", np.arange(3.0), n=3)], "median")


@settings(max_examples=40)
@given(st.floats(0.01, 100), st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_selection_invariant_under_common_affine_map(scale, shift, seed):
    rng = np.random.default_rng(seed)
    main = rng.uniform(size=40)
    recs = [record(str(i), rng.uniform(size=40), n=40) for i in range(5)]
    moved = [CollaboratorRecord(r.id, scale * r.posterior_B + shift, r.data_A) for r in recs]
    assert select_collaborator(main, recs)[0].id == select_collaborator(main, moved)[0].id


# -- transfer ----------------------------------------------------------------


def test_transfer_caps_at_available():
    rec = CollaboratorRecord("a", np.arange(3.0), np.array([[4, 0.2, 0.9], [9, 0.5, 0.8], [20, 0.1, 0.7]]))
    t = transfer_points(rec, 10, grid_size=101)
    assert len(t) == 3
    assert sorted(t.indices.tolist()) == [4, 9, 20]


def test_transfer_k1_is_top_point():
    rec = record("a", np.arange(3.0))
    t = transfer_points(rec, 1, 101)
    assert t.indices.tolist() == [int(np.argmax(rec.data_A[:, 1]))]


def test_transfer_top_half_plus_even_spacing():
    f = np.linspace(0, 1, 101) ** 2  # best points at the top end
    data = np.column_stack([np.arange(101), f, np.full(101, 0.8)])
    t = transfer_points(CollaboratorRecord("a", np.arange(3.0), data), 10, 101, z_c=0.7)
    # top five are 100..96; the even pick 100 is already taken, so the next-best 95 replaces it
    assert t.indices.tolist() == [100, 99, 98, 97, 96, 0, 25, 50, 75, 95]
    assert t.z_c == 0.7
    np.testing.assert_array_equal(t.values[:, 0], f[t.indices])


def test_transfer_is_deduplicated():
    rng = np.random.default_rng(9)
    for _ in range(50):
        data = np.column_stack([np.arange(101), rng.uniform(size=101), rng.uniform(size=101)])
        k = int(rng.integers(1, 20))
        t = transfer_points(CollaboratorRecord("a", np.arange(3.0), data), k, 101)
        assert len(t) == k == len(set(t.indices.tolist()))


def test_transfer_rejects_bad_input():
    with pytest.raises(ValueError):
        transfer_points(record("a", np.arange(3.0)), 0, 101)
    with pytest.raises(ValueError):
        transfer_points(CollaboratorRecord("a", np.arange(3.0), np.zeros((0, 3))), 5, 101)


# -- CoSBO initialization --------------------------------------------------------


GRID = ParameterGrid.linspace("tilt", 0.0, 16.0, 101)


def test_no_collaborators_equals_plain_safeopt():
    state, transfer = CoSBO().initialize_collaborative(GRID, 30, 0.6, 0.8)
    plain = SafeOptMC().initialize(GRID, 30, 0.6, 0.8)
    assert transfer is None
    np.testing.assert_array_equal(state.X, plain.X)
    np.testing.assert_array_equal(state.bounds.lower, plain.bounds.lower)
    np.testing.assert_array_equal(state.safe_set, plain.safe_set)


def test_transferred_points_carry_context(trio):
    main, recs = trio
    state, transfer = CoSBO().initialize_collaborative(GRID, 30, 0.6, 0.8, recs, main)
    assert transfer.collaborator_id == "a"
    assert len(state.X) == 11 and state.n_prior == 10
    assert state.X[0, 1] == 1.0
    np.testing.assert_allclose(state.X[1:, 1], transfer.z_c)
    np.testing.assert_allclose(state.X[1:, 0], GRID.points[transfer.indices])


def test_context_shrinks_cross_covariance():
    params = KernelParams()
    main = np.array([[3.0, 1.0]])
    full = kernel_matrix(main, np.array([[4.0, 1.0]]), params)[0, 0]
    half = kernel_matrix(main, np.array([[4.0, 0.5]]), params)[0, 0]
    assert half / full == pytest.approx(math.exp(-0.125), rel=1e-12)


def test_zero_budget_run_has_empty_trace(trio):
    main, recs = trio
    opt = CoSBO()
    state, _ = opt.initialize_collaborative(GRID, 30, 0.6, 0.8, recs, main)
    assert opt.run(state, lambda i: (0.5, (0.8,)), 0).trace == ()


def test_evaluations_are_first_hand(trio):
    main, recs = trio
    opt = CoSBO()
    state, _ = opt.initialize_collaborative(GRID, 30, 0.6, 0.8, recs, main)
    f = np.linspace(0.2, 0.9, 101)
    state = opt.run(state, lambda i: (f[i], (0.8,)), 5)
    assert len(state.trace) == 5
    np.testing.assert_array_equal(state.X[11:, 1], 1.0)


def test_cosbo_params_roundtrip():
    opt = CoSBO(k=4, collaborator_mode="worst")
    assert opt.get_params()["k"] == 4
    assert CoSBO(**opt.get_params()).collaborator_mode == "worst"
