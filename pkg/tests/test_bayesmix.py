import csv

import numpy as np
import pytest

from groundbody.bayesmix import (
    DEFAULT_ITERS,
    GpState,
    SearchSpace,
    ei_from_moments,
    expected_improvement,
    fit_state,
    gp_posterior,
    optimize_mix,
)
from groundbody.errors import ObjectiveError


def quadratic(target=(2, 2, 6), weights=(1.0, 0.7, 0.4)):
    t, w = np.array(target, float), np.array(weights, float)

    def f(plan):
        x = np.array([plan["sensor"], plan["downsample"], plan["segment"]]) / 1000.0
        return float(0.9 - 0.002 * (w * (x - t) ** 2).sum())

    return f


def test_feasible_grid():
    grid = SearchSpace().feasible()
    assert grid.shape == (66, 3)
    assert (grid.sum(axis=1) == 10000).all() and (grid % 1000 == 0).all()
    assert [tuple(g) for g in grid] == sorted(tuple(g) for g in grid)
    with pytest.raises(ValueError):
        SearchSpace(budget=10500)


def test_interpolation_without_noise():
    X = np.array([[1.0, 2.0, 7.0], [4.0, 4.0, 2.0]])
    s = GpState(X, [0.7, 0.8], 3.0, 1.0, 0.0, 0.75)
    mean, var = gp_posterior(s, X[1])
    assert mean == pytest.approx(0.8, abs=1e-9) and var < 1e-9


def test_two_point_closed_form():
    X = np.array([[0.0, 0, 0], [1.0, 2, 0]])
    y = np.array([1.0, -0.5])
    ell, sv, nv, mu = 2.0, 1.5, 0.01, 0.2
    s = GpState(X, y, ell, sv, nv, mu)
    q = np.array([0.5, 0.5, 1.0])

    def k(a, b):
        return sv * np.exp(-0.5 * np.sum((a - b) ** 2) / ell ** 2)

    a, b, c = k(X[0], X[0]) + nv, k(X[0], X[1]), k(X[1], X[1]) + nv
    det = a * c - b * b
    inv = np.array([[c, -b], [-b, a]]) / det
    ks = np.array([k(X[0], q), k(X[1], q)])
    mean, var = gp_posterior(s, q)
    assert mean == pytest.approx(mu + ks @ inv @ (y - mu), abs=1e-12)
    assert var == pytest.approx(sv - ks @ inv @ ks, abs=1e-12)


def test_prior_reversion():
    s = GpState(np.array([[1.0, 1, 8]]), [0.9], 3.0, 0.4, 1e-4, 0.6)
    mean, var = gp_posterior(s, np.array([1.0, 1, 8]) + 31.0)
    assert abs(mean - 0.6) < 1e-6 and abs(var - 0.4) < 1e-6


def test_variance_nonnegative():
    s = fit_state(SearchSpace(), SearchSpace().feasible()[::3], np.linspace(0.5, 0.9, 22))
    _, var = gp_posterior(s, SearchSpace().to_units(SearchSpace().feasible()))
    assert (var >= 0).all()


def test_ei_zero_at_incumbent():
    X = np.array([[2.0, 2, 6]])
    s = GpState(X, [0.9], 3.0, 1.0, 0.0, 0.5)
    assert expected_improvement(s, X[0], 0.9) == pytest.approx(0.0, abs=1e-6)
    assert ei_from_moments(0.8, 0.0, 0.9) == 0.0
    assert ei_from_moments(1.0, 0.0, 0.9) == pytest.approx(0.1)


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mean, var, best = rng.uniform(-1, 1), rng.uniform(0.01, 1), rng.uniform(-1, 1)
        draws = rng.normal(mean, np.sqrt(var), 100000)
        mc = np.maximum(draws - best, 0).mean()
        assert abs(float(ei_from_moments(mean, var, best)) - mc) < 1e-2


def test_ei_increases_with_sd():
    sds = np.linspace(0.01, 2, 50)
    ei = ei_from_moments(np.full(50, 0.3), sds ** 2, 0.5)
    assert (np.diff(ei) > 0).all()


def test_ei_needs_observation():
    with pytest.raises(ValueError):
        expected_improvement(GpState(), np.zeros(3), 0.0)


def test_kernel_params_validated():
    with pytest.raises(ValueError):
        GpState(np.zeros((1, 3)), [0.0], 0.0)


def test_optimizer_finds_grid_optimum():
    space = SearchSpace()
    f = quadratic()
    values = [f(space.as_counts(p)) for p in space.feasible()]
    oracle = tuple(int(c) for c in space.feasible()[int(np.argmax(values))])
    assert oracle == (2000, 2000, 6000)
    hits = sum(optimize_mix(f, space, seed=s).best_plan == oracle for s in range(20))
    assert hits >= 18


def test_history_feasibility_and_incumbents():
    space = SearchSpace()
    res = optimize_mix(quadratic((5, 1, 4)), space, iters=10, seed=3)
    assert DEFAULT_ITERS == 25
    assert len(res.history) == 5 + 10
    assert all(sum(p) == 10000 for _, p, _ in res.history)
    assert len({p for _, p, _ in res.history}) == len(res.history)
    inc = res.incumbents()
    assert all(b >= a for a, b in zip(inc, inc[1:]))
    assert res.best_value == inc[-1]


def test_proposal_is_ei_argmax():
    space = SearchSpace()
    f = quadratic()
    res = optimize_mix(f, space, iters=3, seed=1)
    grid = space.feasible()
    for n in range(5, len(res.history)):
        seen = [p for _, p, _ in res.history[:n]]
        state = fit_state(space, np.array(seen), [v for _, _, v in res.history[:n]])
        best = max(v for _, _, v in res.history[:n])
        scores = [(float(expected_improvement(state, space.to_units(g), best)), tuple(-int(c) for c in g))
                  for g in grid if tuple(int(c) for c in g) not in seen]
        top = max(scores)
        assert res.history[n][1] == tuple(-c for c in top[1])


def test_objective_error_carries_plan():
    def bad(plan):
        raise RuntimeError("boom")

    with pytest.raises(ObjectiveError) as info:
        optimize_mix(bad, SearchSpace(), iters=1, seed=0)
    assert sum(info.value.plan) == 10000 and isinstance(info.value.cause, RuntimeError)


def test_deterministic_and_csv(tmp_path):
    a = optimize_mix(quadratic(), iters=4, seed=9)
    b = optimize_mix(quadratic(), iters=4, seed=9)
    assert a.history == b.history
    path = a.write_csv(tmp_path / "bo.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iteration", "sensor", "downsample", "segment", "accuracy"]
    assert len(rows) == 1 + len(a.history)
