import math

import numpy as np
import pytest

from cosbo import bench
from cosbo.bench import ExperimentConfig, RunTrace, TraceRow


def trace(best, algorithm="cosbo", parameter="tilt", start=0):
    rows = [TraceRow(i + 1, i, float(i), 0.0, b, 0.5, b, 0.5, 0.45, True, b) for i, b in enumerate(best)]
    return RunTrace("s", parameter, algorithm, start, "best", "default", rows=rows)


# -- aggregation ---------------------------------------------------------------


def test_aggregate_three_runs():
    curves = bench.aggregate([trace([0.2]), trace([0.4]), trace([0.6])])
    (c,) = curves.values()
    assert c.median[0] == pytest.approx(0.4)
    assert c.q25[0] == pytest.approx(0.3) and c.q75[0] == pytest.approx(0.5)
    assert c.n_runs == 3


def test_aggregate_single_trace_is_itself():
    best = [0.1, 0.3, 0.3, 0.7]
    (c,) = bench.aggregate([trace(best)]).values()
    np.testing.assert_array_equal(c.median, best)
    np.testing.assert_array_equal(c.q25, best)
    np.testing.assert_array_equal(c.iterations, [1, 2, 3, 4])


def test_aggregate_pads_short_runs():
    (c,) = bench.aggregate([trace([0.5, 0.6]), trace([0.1, 0.2, 0.3, 0.4])], budget=4).values()
    np.testing.assert_allclose(c.median, [0.3, 0.4, 0.45, 0.5])


def test_aggregate_groups_and_skips_failures():
    failed = RunTrace("s", "tilt", "cosbo", 1, "best", "default", error="boom")
    curves = bench.aggregate([trace([0.5]), trace([0.2], algorithm="random"), failed])
    assert set(curves) == {("tilt", "cosbo", "best", "default"), ("tilt", "random", "best", "default")}
    assert curves["tilt", "cosbo", "best", "default"].n_runs == 1


def ramp(plateau, budget=60):
    """Median that climbs linearly and is flat at 1 from ``plateau`` on."""
    t = np.arange(1, budget + 1)
    return np.minimum(t / plateau, 1.0)


def test_efficiency_gap_example():
    # within 0.02 of 1: t / p >= 0.98 first at t = p for these plateaus
    assert bench.plateau_iteration(ramp(13)) == 13
    assert bench.efficiency_gap(ramp(13), ramp(20)) == 7
    assert bench.efficiency_gap(ramp(20), ramp(13)) == -7


def test_efficiency_gap_identical_curves():
    c = ramp(17)
    assert bench.efficiency_gap(c, c.copy()) == 0


def test_plateau_of_flat_curve_is_first_iteration():
    assert bench.plateau_iteration(np.full(60, 0.8)) == 1


def test_plateau_never_reached():
    # the final value itself always qualifies, so "never" only arises for NaN medians
    assert bench.plateau_iteration(np.full(5, np.nan)) == 6


def test_plateau_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        bench.plateau_iteration(ramp(5), 0.0)


def test_violation_counts():
    t = trace([0.5, 0.6])
    t.rows[1] = TraceRow(2, 1, 1.0, 0.0, 0.6, 0.1, 0.6, 0.1, math.nan, False, 0.6)
    assert bench.violation_counts([t, trace([0.1], algorithm="random")]) == {"cosbo": 1, "random": 0}


# -- starts and baseline ---------------------------------------------------------


def test_safe_starts_come_from_margin_region(small_corpus):
    s = small_corpus[0]
    g = s.tables["tilt"].g_scaled
    starts = bench.pick_safe_starts(s, "tilt", 50, np.random.default_rng(0))
    assert np.all(g[starts] >= 0.5)


def test_safe_starts_with_replacement(small_corpus):
    s = small_corpus[0]
    pool = np.flatnonzero(s.tables["beamwidth"].g_scaled >= 0.5)
    starts = bench.pick_safe_starts(s, "beamwidth", pool.size + 5, np.random.default_rng(1))
    assert len(starts) == pool.size + 5
    assert set(starts.tolist()) <= set(pool.tolist())


def test_safe_starts_empty_region(small_corpus):
    with pytest.raises(ValueError, match="no safe start"):
        bench.pick_safe_starts(small_corpus[0], "tilt", 3, np.random.default_rng(0), threshold=1.0)


def test_random_baseline(small_corpus):
    s = small_corpus[1]
    t = bench.run_random_baseline(s, "tilt", 60, np.random.default_rng(4))
    assert len(t.rows) == 60 and t.algorithm == "random"
    assert [r.iteration for r in t.rows] == list(range(1, 61))
    assert np.all(np.diff(t.best_so_far) >= 0)
    assert all(math.isnan(r.lower_g) for r in t.rows)
    g = s.tables["tilt"].g_scaled
    assert all(r.safe_flag == (g[r.index] >= 0.4) for r in t.rows)


def test_adjacent_parameter():
    assert bench.adjacent_parameter("tilt") == "beamwidth"
    assert bench.adjacent_parameter("beamwidth") == "tilt"


# -- corpus and matrix -------------------------------------------------------------


def test_corpus_shape_and_determinism(small_config, small_corpus):
    assert [s.id for s in small_corpus] == ["m0-low", "m0-high", "m1-low", "m1-high"]
    again = bench.build_corpus(small_config)
    for a, b in zip(small_corpus, again):
        np.testing.assert_array_equal(a.tables["tilt"].f_raw, b.tables["tilt"].f_raw)
    # the load levels of one map share its realization
    np.testing.assert_array_equal(small_corpus[0].map.users, small_corpus[1].map.users)


def test_default_matrix_has_900_tasks():
    c = ExperimentConfig()
    assert c.n_maps * len(c.load_levels) * len(c.parameters) * len(c.algorithms) * c.n_starts == 900


@pytest.fixture(scope="module")
def small_matrix(small_config, small_corpus):
    return bench.run_matrix(small_config, small_corpus)


def test_matrix_order_and_count(small_config, small_corpus, small_matrix):
    assert len(small_matrix) == 4 * 2 * 3 * 3
    assert not any(t.error for t in small_matrix)
    first = small_matrix[: 3 * 3]
    assert {t.scenario_id for t in first} == {"m0-low"} and {t.parameter for t in first} == {"tilt"}
    assert [t.algorithm for t in first] == ["cosbo"] * 3 + ["safeopt_mc"] * 3 + ["random"] * 3
    assert [t.start_index for t in first] == [0, 1, 2] * 3


def test_safe_runs_share_seed_and_budget(small_matrix):
    by_key = {(t.scenario_id, t.parameter, t.algorithm, t.start_index): t for t in small_matrix}
    for (sid, p, alg, j), t in by_key.items():
        if alg == "cosbo":
            assert t.x0_index == by_key[sid, p, "safeopt_mc", j].x0_index
            assert t.collaborator_id and t.collaborator_id != sid
            assert len(t.transferred) == 10
        assert len(t.rows) <= 8


def test_matrix_is_deterministic(small_config, small_corpus, small_matrix):
    again = bench.run_matrix(small_config, small_corpus)
    for a, b in zip(small_matrix, again):
        assert [r.index for r in a.rows] == [r.index for r in b.rows]
        assert [r.f_obs for r in a.rows] == [r.f_obs for r in b.rows]


@pytest.mark.parametrize("algorithm", bench.ALGORITHMS)
def test_run_single_matches_matrix(small_config, small_corpus, small_matrix, algorithm):
    t = bench.run_single(small_corpus, 2, "beamwidth", algorithm, 1, small_config)
    ref = next(
        m for m in small_matrix
        if (m.scenario_id, m.parameter, m.algorithm, m.start_index) == ("m1-low", "beamwidth", algorithm, 1)
    )
    assert t.rows == ref.rows
    assert t.collaborator_id == ref.collaborator_id


def test_run_single_validates(small_config, small_corpus):
    with pytest.raises(ValueError):
        bench.run_single(small_corpus, 0, "azimuth", "cosbo", 0, small_config)
    with pytest.raises(ValueError):
        bench.run_single(small_corpus, 0, "tilt", "bandit", 0, small_config)
    with pytest.raises(ValueError):
        bench.run_single(small_corpus, 0, "tilt", "cosbo", 3, small_config)


def test_results_csv_roundtrip(small_matrix, tmp_path):
    path = bench.write_results(small_matrix, tmp_path / "results.csv")
    back = bench.read_results(path)
    assert len(back) == len(small_matrix)
    for a, b in zip(small_matrix, back):
        assert (a.scenario_id, a.algorithm, a.start_index) == (b.scenario_id, b.algorithm, b.start_index)
        np.testing.assert_array_equal(a.best_so_far, b.best_so_far)
        assert [r.safe_flag for r in a.rows] == [r.safe_flag for r in b.rows]
        assert a.collaborator_id == b.collaborator_id
    curves = bench.aggregate(back)
    assert bench.write_aggregate(curves, tmp_path / "agg.csv").read_text().startswith("parameter,")


# -- configuration -----------------------------------------------------------------


def test_overrides_coerce_strings():
    c = bench.apply_overrides(ExperimentConfig(), {"budget": "30", "beta": "3", "load_levels": "low,high",
                                                   "fixed_association": "false"})
    assert c.budget == 30 and c.hyper.beta == 3.0 and c.load_levels == ("low", "high")
    assert c.radio.fixed_association is False
    assert bench.apply_overrides(c, {"lengthscale": "none"}).hyper.lengthscale is None


def test_unknown_override_lists_keys():
    with pytest.raises(KeyError, match="valid keys"):
        bench.apply_overrides(ExperimentConfig(), {"nope": "1"})


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(collaborator_mode="median")
    with pytest.raises(ValueError):
        ExperimentConfig(algorithms=("cosbo", "bandit"))
    with pytest.raises(ValueError):
        ExperimentConfig(load_levels=("extreme",))


def test_gp_profile_sets_lengthscale():
    assert ExperimentConfig().lengthscale == 1.0
    assert ExperimentConfig(gp_profile="smooth").lengthscale == 4.0
    c = ExperimentConfig(gp_profile="smooth")
    assert c.optimizer("cosbo").lengthscale_x == 4.0


def test_digest_tracks_config():
    assert ExperimentConfig().digest() == ExperimentConfig().digest()
    assert ExperimentConfig().digest() != ExperimentConfig(budget=59).digest()
