import numpy as np
import pytest

from bmax import AggregationParams, Dictionary, Observation
from bmax.core import DataError, mse, oracle_index
from bmax.experiments import (
    DELTA,
    EXP1,
    EXP2,
    SIGMA_OVER_ZETA_NORM,
    MethodConfig,
    ReplicationResult,
    ScenarioSpec,
    TruthKind,
    check_oracle_inequality,
    cross_validate_omega,
    cumulative_frequency,
    cv_scores,
    default_cv_grid,
    generate_scenario,
    run_replicate,
    run_replications,
    stream_rng,
)

SMALL = ScenarioSpec(n=20, m=12, m1=4, s=1.0, sigma=1.0, seed=5)


def test_presets():
    assert (EXP1.n, EXP1.m, EXP1.m1, EXP1.s, EXP1.sigma) == (50, 500, 50, 1.0, 2.0)
    assert EXP1.truth_kind is TruthKind.F1_PLUS_DELTA
    assert EXP2.m1 == EXP2.m and EXP2.s == SIGMA_OVER_ZETA_NORM
    assert EXP2.truth_kind is TruthKind.THETA_PLUS_DELTA


def test_spec_validation_and_round_trip():
    with pytest.raises(DataError):
        ScenarioSpec(m=3, m1=4)
    with pytest.raises(DataError):
        ScenarioSpec(s="nope")
    with pytest.raises(DataError):
        ScenarioSpec(sigma=float("nan"))
    with pytest.raises(DataError):
        ScenarioSpec(seed=-1)
    assert ScenarioSpec.from_dict(EXP2.to_dict()) == EXP2


def test_streams_are_keyed():
    a = stream_rng(1, 2, 3).standard_normal(4)
    np.testing.assert_array_equal(a, stream_rng(1, 2, 3).standard_normal(4))
    assert not np.array_equal(a, stream_rng(1, 3, 3).standard_normal(4))
    assert not np.array_equal(a, stream_rng(1, 2, 4).standard_normal(4))


def test_degenerate_cluster():
    spec = ScenarioSpec(n=6, m=4, m1=4, s=0.0, sigma=1.0)
    d, _ = generate_scenario(spec)
    assert np.ptp(d.candidates, axis=0).max() == 0.0


def test_noiseless_observation():
    d, o = generate_scenario(ScenarioSpec(n=6, m=4, m1=2, sigma=0.0))
    np.testing.assert_array_equal(o.y, o.truth)
    delta = stream_rng(0, 0, DELTA).standard_normal(6)
    np.testing.assert_array_equal(o.truth, d.candidates[0] + 0.5 * delta)


def test_exp2_candidates_scaled_to_sigma():
    spec = ScenarioSpec(n=10, m=6, m1=6, s=SIGMA_OVER_ZETA_NORM, sigma=2.0,
                        truth_kind=TruthKind.THETA_PLUS_DELTA)
    d, _ = generate_scenario(spec)
    theta = stream_rng(0, 0, 0).standard_normal(10)
    np.testing.assert_allclose(np.linalg.norm(d.candidates - theta, axis=1), 2.0, rtol=1e-12)


def test_scenario_bit_identical():
    a, oa = generate_scenario(SMALL, 3)
    b, ob = generate_scenario(SMALL, 3)
    assert a.candidates.tobytes() == b.candidates.tobytes()
    assert oa.y.tobytes() == ob.y.tobytes()
    c, _ = generate_scenario(SMALL, 4)
    assert a.candidates.tobytes() != c.candidates.tobytes()


def test_default_grid():
    g = default_cv_grid(2.0)
    assert len(g) == 12
    assert g[0] == pytest.approx(2.0) and g[-1] == pytest.approx(200.0)


def _planted():
    rng = np.random.default_rng(0)
    truth = rng.standard_normal(30)
    F = np.vstack([truth, truth + rng.standard_normal(30), truth + 2 * rng.standard_normal(30)])
    y = truth + 1e-6 * rng.standard_normal(30)
    return Dictionary(F), Observation(y, truth), AggregationParams.flat(3)


def test_cv_single_and_duplicate_grid():
    d, o, p = _planted()
    assert cross_validate_omega(d, o, p, [3.7], folds=5) == 3.7
    assert cross_validate_omega(d, o, p, [2.0, 2.0, 2.0], folds=5) == 2.0


def test_cv_planted_instance_picks_sharpest():
    d, o, p = _planted()
    grid = [0.1, 1.0, 10.0]
    scores = cv_scores(d, o, p, grid, folds=5, method="ewma")
    assert np.all(np.diff(scores) > 0)
    assert cross_validate_omega(d, o, p, grid, folds=5, method="ewma") == 0.1
    for k_max in (None, 30):
        assert cross_validate_omega(d, o, p, grid, folds=5, method="gma-bmax", k_max=k_max) == 0.1


def test_cv_errors():
    d, o, p = _planted()
    with pytest.raises(DataError):
        cross_validate_omega(d, o, p, [], folds=5)
    with pytest.raises(DataError):
        cross_validate_omega(d, o, p, [1.0], folds=1)
    with pytest.raises(DataError):
        cross_validate_omega(d.restrict(slice(0, 3)), o.restrict(slice(0, 3)), p, [1.0], folds=5)


def test_oracle_method_has_zero_regret():
    res = run_replications(SMALL, [MethodConfig("oracle")], 5)
    np.testing.assert_array_equal(res.regrets[("oracle", None)], np.zeros(5))


def test_regret_decomposition():
    methods = [MethodConfig("star"), MethodConfig("ewma", omega_sq=2.0)]
    rows, _ = run_replicate(SMALL, methods, 2)
    d, o = generate_scenario(SMALL, 2)
    best = mse(d.candidates[oracle_index(d, o.truth)], o.truth)
    from bmax.solvers import solve_star
    assert rows[0][2] == mse(solve_star(d, o)[0], o.truth) - best


def test_replications_deterministic_and_worker_independent():
    methods = [MethodConfig("gma-bmax", cv_folds=4), MethodConfig("gma-0"), MethodConfig("proj"),
               MethodConfig("ewma", cv_folds=4), MethodConfig("star")]
    a = run_replications(SMALL, methods, 4, k_max=20, checkpoints=(1, 5, 20))
    b = run_replications(SMALL, methods, 4, k_max=20, checkpoints=(1, 5, 20), workers=3)
    assert a.keys() == b.keys()
    for key in a.keys():
        assert a.regrets[key].tobytes() == b.regrets[key].tobytes()
    assert set(a.keys()) >= {("gma-bmax", 1), ("gma-bmax", 5), ("gma-bmax", 20), ("gma-0", 20),
                             ("proj", None)}
    assert all(v.size == 4 for v in a.regrets.values())
    assert set(a.tuned_omega_sq) == {"gma-bmax", "ewma"}


def test_replication_rejects_duplicate_keys():
    with pytest.raises(DataError):
        run_replications(SMALL, [MethodConfig("star"), MethodConfig("star")], 1)
    run_replications(SMALL, [MethodConfig("star"), MethodConfig("star", label="star2")], 1)


def test_method_config_round_trip():
    cfg = MethodConfig("gma-bmax", nu=0.3, cv_grid=[1.0, 2.0], label="g")
    assert MethodConfig.from_dict(cfg.to_dict()) == cfg
    assert MethodConfig.from_dict("ewma") == MethodConfig("ewma")
    with pytest.raises(DataError):
        MethodConfig("nope")


def test_summary_sd_uses_n_minus_one():
    res = ReplicationResult({("a", None): np.array([1.0, 2.0, 3.0])}, 3)
    (row,) = res.summary()
    assert row["mean"] == 2.0 and row["sd"] == pytest.approx(1.0)
    assert list(res.rows())[0] == (0, "a", None, 1.0)


def test_cumulative_frequency():
    res = ReplicationResult({("a", None): np.array([0.1, 0.5, 0.5, 2.0])}, 4)
    table = cumulative_frequency(res, [0.0, 0.5, 1.0, 1e18])
    assert table[("a", None)] == [0, 3, 3, 4]
    with pytest.raises(DataError):
        cumulative_frequency(res, [1.0, 0.5])


def test_oracle_check_trivial_cases():
    spec = ScenarioSpec(n=10, m=5, m1=2, sigma=0.0)
    rep = check_oracle_inequality(spec, AggregationParams.flat(5, omega_sq=1.0), 10, 0.1)
    assert rep.frequency == 1.0 and rep.passed
    one = ScenarioSpec(n=10, m=1, m1=1, sigma=1.0)
    rep = check_oracle_inequality(one, AggregationParams.flat(1, omega_sq=2.0), 10, 0.1)
    np.testing.assert_allclose(rep.lhs, rep.rhs_expectation, rtol=1e-12)
    assert rep.frequency == 1.0


def test_oracle_check_precondition():
    with pytest.raises(DataError):
        check_oracle_inequality(SMALL, AggregationParams.flat(12, nu=0.5, omega_sq=1.0), 5, 0.1)
    with pytest.raises(DataError):
        check_oracle_inequality(SMALL, AggregationParams.flat(12, omega_sq=2.0), 5, 1.5)


def test_oracle_check_small_scenario():
    rep = check_oracle_inequality(SMALL, AggregationParams.flat(12, nu=0.5, omega_sq=2.0), 60, 0.1)
    assert rep.passed and rep.expectation_holds
