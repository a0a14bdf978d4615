import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imexpeer import methods, search, stability
from imexpeer.search import SearchSpec, SimplexOptions, nelder_mead
from imexpeer.tableau import defect_d


# -- simplex method ----------------------------------------------------------------

def test_quadratic_bowl():
    res = nelder_mead(lambda x: (x[0] - 1) ** 2 + (x[1] + 2) ** 2, [0.0, 0.0])
    np.testing.assert_allclose(res.x, [1.0, -2.0], atol=1e-6)
    assert res.converged


def test_rosenbrock():
    x, f, evals = nelder_mead(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2, [-1.2, 1.0])
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-4)
    assert evals < 4000


def test_constant_objective_returns_start():
    res = nelder_mead(lambda x: 3.0, [0.5, -0.5, 2.0])
    np.testing.assert_array_equal(res.x, [0.5, -0.5, 2.0])
    assert res.converged and res.evals == 4


def test_budget_exhaustion_flagged():
    res = nelder_mead(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2, [-1.2, 1.0],
                      SimplexOptions(max_evals=20))
    assert res.budget_exhausted and res.evals <= 21


def test_non_finite_start_rejected():
    with pytest.raises(search.SearchError):
        nelder_mead(lambda x: math.nan, [0.0])


def test_infinite_regions_are_avoided():
    res = nelder_mead(lambda x: (x[0] - 2) ** 2 if x[0] < 3 else math.inf, [0.0])
    assert res.x[0] == pytest.approx(2.0, abs=1e-6)


def test_simplex_options_validated():
    with pytest.raises(search.SearchError):
        SimplexOptions(contraction=1.5)
    with pytest.raises(search.SearchError):
        SimplexOptions(max_evals=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.integers(1, 60))
def test_never_worse_than_start(x0, budget):
    def f(x):
        return float(np.sum(np.sin(3 * x) + 0.1 * x**2))

    res = nelder_mead(f, x0, SimplexOptions(max_evals=budget))
    assert res.fun <= f(np.array(x0))


# -- parameterization and objectives ----------------------------------------------

def test_encode_decode_round_trip(builtin_tab):
    kind = "optimal-zero-stable" if builtin_tab.s < 4 else "general-zero-stable"
    spec = SearchSpec(builtin_tab.s, parameterization=kind)
    c, P, R = search.decode(search.encode(builtin_tab, spec), spec)
    np.testing.assert_allclose(c, builtin_tab.c)
    np.testing.assert_allclose(P, builtin_tab.P, atol=1e-15)
    np.testing.assert_allclose(R, builtin_tab.R)


def test_general_parameterization_is_preconsistent(rng):
    spec = SearchSpec(4, parameterization="general-zero-stable")
    _, P, _ = search.decode(rng.standard_normal(spec.n_implicit), spec)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)


def test_builtin_point_is_feasible(peer2s):
    spec = SearchSpec(2)
    terms = search.implicit_terms(peer2s, spec)
    assert terms["a_stability"] < 1e-12
    assert terms["superconv"] < 1e-9
    assert terms["rho"] == pytest.approx(0.128, abs=0.001)
    assert search.implicit_objective(search.encode(peer2s, spec), spec) < 10.0


def test_duplicate_nodes_penalized():
    spec = SearchSpec(3)
    x = search.encode(methods.builtin("imex-peer3s"), spec)
    x[1] = x[0]
    assert search.implicit_objective(x, spec) >= 1e6


def test_nonpositive_gamma_penalized(peer2s):
    spec = SearchSpec(2)
    x = search.encode(peer2s, spec)
    x[1] = 0.0
    assert search.implicit_objective(x, spec) >= 1e6


def test_zero_stability_penalty_for_general_path():
    spec = SearchSpec(4, parameterization="general-zero-stable")
    tab = methods.builtin("imex-peer4s")
    assert search.implicit_terms(tab, spec)["zero_stability"] == 0.0
    bad = np.array([[1.0, 0.0], [3.0, -2.0]])
    assert search._zero_stability_excess(bad) > 0.0
    assert search._zero_stability_excess(np.array([[1.0, 0.0], [1.5, -0.5]])) == 0.0


def test_explicit_objective_at_builtin(peer2s):
    spec = SearchSpec(2)
    y = peer2s.S2[np.tril_indices(2, -1)]
    terms = search.explicit_terms(y, peer2s.replace(S2=np.zeros((2, 2))), spec)
    assert terms["superconv_explicit"] < 1e-9
    assert terms["area_e"] < 0 and terms["area_alpha"] < 0


def test_explicit_objective_zero_s2(peer2s):
    assert math.isfinite(search.explicit_objective([0.0], peer2s, SearchSpec(2)))


def test_explicit_objective_grows_with_huge_s2():
    tab = methods.builtin("imex-peer3s")
    spec = SearchSpec(3)
    y = tab.S2[np.tril_indices(3, -1)]
    base = search.explicit_objective(y, tab, spec)
    huge = search.explicit_objective(y + np.array([1e6, -2e6, 3e6]), tab, spec)
    assert math.isfinite(huge) and huge > base + 1e4


def test_polish_explicit_is_exact():
    tab = methods.builtin("imex-peer3s")
    y = search.polish_explicit(np.array([0.3, -0.2, 0.5]), tab)
    full = tab.replace(S2=search.decode_s2(y, 3))
    assert abs(full.v @ full.R @ full.extrap_defect_l()) < 1e-13


def test_polish_implicit(peer2s):
    spec = SearchSpec(2)
    x = search.encode(peer2s, spec)
    x[2] += 1e-3
    y = search.polish_implicit(x, spec)
    tab = search._build(y, spec)
    assert abs(tab.v @ defect_d(3, tab)) < 1e-13
    assert np.abs(y - x).max() < 1e-2


def test_spec_invariants():
    with pytest.raises(search.SearchError):
        SearchSpec(2, multistart=0)
    with pytest.raises(search.SearchError):
        SearchSpec(2, weights={"rho": -1.0})
    with pytest.raises(search.SearchError):
        SearchSpec(2, parameterization="free")
    with pytest.raises(search.SearchError):
        search.preset("s9")


# -- driver --------------------------------------------------------------------

def small_spec(**kw):
    base = dict(multistart=2, start_near=methods.builtin("imex-peer2s"), spread=0.02,
                simplex=SimplexOptions(max_evals=600), candidates=1, final_grid=80, seed=7)
    base.update(kw)
    return SearchSpec(2, **base)


@pytest.fixture(scope="module")
def near_result():
    return search.run_search(small_spec())


def test_search_near_builtin_recovers_method(near_result):
    assert near_result.candidates
    cand = near_result.candidates[0]
    assert cand.report.a_stable and stability.is_a_stable(cand.tableau)[0]
    assert abs(cand.tableau.v @ defect_d(3, cand.tableau)) < 1e-7
    assert cand.report.superconv_explicit < 1e-7
    assert max(cand.report.stage_order_defects[:2]) < 1e-10
    assert near_result.evals <= small_spec().max_evals


def test_search_is_deterministic(near_result):
    again = search.run_search(small_spec())
    assert len(again.candidates) == len(near_result.candidates)
    for a, b in zip(again.candidates, near_result.candidates):
        np.testing.assert_array_equal(a.tableau.c, b.tableau.c)
        np.testing.assert_array_equal(a.tableau.S2, b.tableau.S2)
        assert a.tableau.label == b.tableau.label
    assert again.evals == near_result.evals


def test_search_threads_do_not_change_result(near_result):
    other = search.run_search(small_spec(workers=2))
    np.testing.assert_array_equal(other.candidates[0].tableau.P, near_result.candidates[0].tableau.P)


def test_search_reports_infeasibility():
    res = search.run_search(small_spec(max_evals=8, multistart=1, start_near=None,
                                       weights={"norms": 1.0}))
    assert res.candidates or res.diagnostics


@pytest.mark.slow
def test_three_stage_search_finds_candidate():
    spec = replace(search.preset("s3"), simplex=SimplexOptions(max_evals=2000), candidates=1, final_grid=80)
    res = search.run_search(spec)
    assert res.evals <= 100_000
    assert res.candidates
    rep = res.candidates[0].report
    assert rep.a_stable and rep.superconv_implicit < 1e-7 and rep.superconv_explicit < 1e-7
