import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from deconvcde.errors import BadScenario, GridMismatch, NeedReplicates
from deconvcde.estimators import ESTIMATORS, P1, P2, P3, P4, BandwidthSet, DensityGrid
from deconvcde.simulation import (
    DEFAULT_R,
    DEFAULT_XGRID,
    DEFAULT_YGRID,
    Scenario,
    decompose_eise,
    eise,
    eise_mean,
    estimate_sigma_u_replicates,
    generate_scenario,
    optimal_bandwidths_oracle,
    read_scenario_file,
    run_mc_study,
    sample_laplace,
    study_to_csv,
    table1_layout,
    true_density,
    true_fx,
    true_mstar,
)
from deconvcde.simulation import _oracle_search, oracle_grids


def test_sample_laplace_moments():
    rng = np.random.default_rng(1)
    n, loc, scale = 10**6, 0.7, 0.4
    x = sample_laplace(n, loc, scale, rng)
    assert abs(x.mean() - loc) <= 4 * scale * math.sqrt(2) / math.sqrt(n)
    assert x.var() == pytest.approx(2 * scale**2, rel=0.05)


def test_sample_laplace_deterministic():
    a = sample_laplace(1000, 0.0, 1.0, np.random.default_rng(5))
    b = sample_laplace(1000, 0.0, 1.0, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample_laplace(3, 0.0, 0.0, np.random.default_rng(0))


def test_sample_laplace_follows_inverse_cdf():
    r = np.random.default_rng(9).random(5)
    x = sample_laplace(5, 1.0, 2.0, np.random.default_rng(9))
    want = 1.0 - np.sign(r - 0.5) * 2.0 * (np.log(2) + np.where(r < 0.5, np.log(r), np.log1p(-r)))
    np.testing.assert_array_equal(x, want)


def test_scenario_error_scales():
    assert Scenario("C1", "a").sigma_u == pytest.approx(0.5)
    assert Scenario("C1", "b").sigma_u == pytest.approx(math.sqrt(1 / 9))
    assert Scenario("C1", "d").sigma_u == pytest.approx(0.5 * 4 / math.sqrt(12))
    assert Scenario("C1", "a", assumed_lambda=0.7).sigma_u_used == pytest.approx(math.sqrt(3 / 7))
    assert Scenario("C1", "a", assumed_sigma_u=0.2).sigma_u_used == 0.2
    assert Scenario("C1", "c").error_model().kind.value == "gaussian"
    for bad in (dict(primary="C5", secondary="a"), dict(primary="C1", secondary="e"),
                dict(primary="C1", secondary="a", n=2), dict(primary="C1", secondary="a", lambda_override=0.0)):
        with pytest.raises(BadScenario):
            Scenario(**bad)


def test_generate_linear_normal_attenuation():
    d = generate_scenario(Scenario("C3", "c", n=10**6, seed=3))
    r2 = np.corrcoef(d.W, d.Y)[0, 1] ** 2
    # corr(W, Y)^2 = lambda var(X) / var(Y); var(Y) = 1 + E exp(2 - 2X/3) / 64 by the normal mgf
    var_y = 1.0 + math.exp(2 + 2 / 9) / 64
    assert r2 == pytest.approx(0.8 / var_y, rel=0.01)
    slope = np.cov(d.W, d.Y)[0, 1] / np.var(d.W, ddof=1)
    assert slope == pytest.approx(0.8, rel=0.01)


def test_generate_variance_ratio():
    d = generate_scenario(Scenario("C1", "a", n=10**6, seed=4))
    assert np.var(d.W) / np.var(d.X) == pytest.approx(1.25, rel=0.02)


def test_generate_without_error():
    d = generate_scenario(Scenario("C1", "a", n=1000, lambda_override=1 - 1e-12))
    np.testing.assert_allclose(d.W, d.X, atol=1e-4)
    d = generate_scenario(Scenario("C1", "d", n=1000, lambda_override=1.0))
    np.testing.assert_array_equal(d.W, d.X)
    assert d.X.min() >= -2 and d.X.max() <= 2


def test_generate_is_seeded():
    a = generate_scenario(Scenario("C2", "b", n=50, seed=11))
    b = generate_scenario(Scenario("C2", "b", n=50, seed=11))
    assert a.W.tobytes() == b.W.tobytes() and a.Y.tobytes() == b.Y.tobytes()


def test_true_density_examples():
    assert true_density("C1", 0.0, 0.0) == pytest.approx(8 / (math.e * math.sqrt(2 * math.pi)))
    for x in (-1.7, 0.0, 0.9):
        mass = integrate.simpson(true_density("C2", x, np.linspace(-4, 4, 8001)), x=np.linspace(-4, 4, 8001))
        assert mass == pytest.approx(1.0, abs=1e-8)
    y = np.linspace(0, 2, 2001)
    assert y[np.argmax(true_density("C3", 1.0, y))] == pytest.approx(1.0)
    assert true_density("C4", 0.3, 1.0) == pytest.approx(1 / (math.sqrt(2 * math.pi) * math.exp(0.9) / 8))


def test_true_mstar_examples():
    assert true_mstar("C3", "c", 1.0) == pytest.approx(0.8, abs=1e-12)
    np.testing.assert_array_equal(true_mstar("C4", "a", np.array([-1.0, 0.5])), [1.0, 1.0])
    assert true_mstar("C1", "a", 0.0) == pytest.approx(0.0, abs=1e-10)
    # odd mean, symmetric covariate and error
    assert true_mstar("C1", "d", 0.7) == pytest.approx(-true_mstar("C1", "d", -0.7), abs=1e-9)


def test_true_mstar_laplace_linear_against_direct_quadrature():
    # (C3, a): E(X | W = x) by brute-force Riemann sum on a fine grid
    b = 0.5 / math.sqrt(2)
    v = np.linspace(-12, 12, 400001)
    for x in (-1.0, 0.4):
        k = np.exp(-v * v / 2) * np.exp(-np.abs(x - v) / b)
        assert true_mstar("C3", "a", x) == pytest.approx(np.sum(v * k) / np.sum(k), abs=1e-7)


def _truth_grid(primary, x, y):
    return DensityGrid(x, y, true_density(primary, x[:, None], y[None, :]), "truth")


def test_eise_examples():
    x, y = DEFAULT_XGRID, DEFAULT_YGRID
    g = _truth_grid("C1", x, y)
    assert eise(g, "C1", "a") == pytest.approx(0.0, abs=1e-15)
    c = 0.03
    shifted = DensityGrid(x, y, g.values + c, "truth")
    want = c * c * 0.04 * 0.04 * np.sum(true_fx("a", x)) * y.size
    assert eise(shifted, "C1", "a") == pytest.approx(want, rel=1e-10)
    with pytest.raises(GridMismatch):
        eise(DensityGrid(np.linspace(-3, 3, 7), y, np.zeros((7, y.size)), "zero"), "C1", "a")


def test_eise_handcrafted_two_by_two():
    x, y = np.array([0.0, 0.5]), np.array([0.0, 1.0])
    vals = np.array([[0.5, 0.1], [np.nan, 0.2]])
    p = true_density("C3", x[:, None], y[None, :])
    fx = true_fx("a", x)
    want = ((0.5 - p[0, 0]) ** 2 + (0.1 - p[0, 1]) ** 2) * fx[0] * 0.5 + (p[1, 0] ** 2 + (0.2 - p[1, 1]) ** 2) * fx[1] * 0.5
    assert eise(DensityGrid(x, y, vals, "toy"), "C3", "a") == pytest.approx(want, rel=1e-12)


def test_eise_mean_examples():
    x = DEFAULT_XGRID
    ms = true_mstar("C3", "c", x)
    assert eise_mean(ms, "C3", "c") == 0.0
    assert eise_mean(ms + 0.1, "C3", "c") == pytest.approx(0.01 * 0.04 * np.sum(true_fx("c", x)))
    x3 = np.array([-1.0, 0.0, 1.0])
    mhat = np.array([0.0, 0.1, 0.5])
    want = ((0.0 + 0.8) ** 2 * true_fx("c", -1.0) + 0.01 * true_fx("c", 0.0) + 0.09 * true_fx("c", 1.0)) * 1.0
    assert eise_mean(mhat, "C3", "c", x3) == pytest.approx(want)
    with pytest.raises(GridMismatch):
        eise_mean(mhat[:2], "C3", "c", x3)


def _grids(stack, x=DEFAULT_XGRID, y=DEFAULT_YGRID):
    return [DensityGrid(x, y, v, "rep") for v in stack]


def test_decompose_identical_replicates():
    g = _truth_grid("C1", DEFAULT_XGRID, DEFAULT_YGRID)
    shifted = g.values + 0.02
    rep = decompose_eise(_grids([shifted] * 3), "C1", "a")
    np.testing.assert_allclose(rep.eiv, 0.0, atol=1e-25)
    np.testing.assert_allclose(rep.eise, rep.eisb, rtol=1e-14)
    assert rep.iqr == 0.0


def test_decompose_symmetric_pair():
    g = _truth_grid("C1", DEFAULT_XGRID, DEFAULT_YGRID)
    eps = 0.01
    rep = decompose_eise(_grids([g.values + eps, g.values - eps]), "C1", "a")
    mass = 0.04 * 0.04 * np.sum(true_fx("a", DEFAULT_XGRID)) * DEFAULT_YGRID.size
    assert rep.eisb == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(rep.eiv, eps * eps * mass, rtol=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), R=st.integers(2, 6))
def test_decompose_cross_terms_cancel(seed, R):
    rng = np.random.default_rng(seed)
    x, y = np.linspace(-2, 2, 11), np.linspace(-3, 3, 13)
    stack = rng.normal(0.2, 0.1, size=(R, x.size, y.size))
    stack[rng.random(stack.shape) < 0.05] = np.nan
    rep = decompose_eise(_grids(stack, x, y), "C2", "d")
    resid = np.mean(rep.eise - rep.eiv - rep.eisb)
    assert abs(resid) <= 1e-9 * np.mean(rep.eise)
    assert np.all(rep.eiv >= 0) and rep.eisb >= 0


def test_decompose_rejects_mismatched_grids():
    a = DensityGrid(np.linspace(-2, 2, 5), np.linspace(0, 1, 3), np.zeros((5, 3)), "zero")
    b = DensityGrid(np.linspace(-1, 1, 5), np.linspace(0, 1, 3), np.zeros((5, 3)), "zero")
    with pytest.raises(GridMismatch):
        decompose_eise([a, b], "C1", "a")
    with pytest.raises(GridMismatch):
        decompose_eise([], "C1", "a")


def test_oracle_single_cell_and_exhaustive():
    s = Scenario("C1", "a", n=150, seed=21)
    bw = optimal_bandwidths_oracle(s, P3, [0.2], [0.3])
    assert (bw.h1, bw.h2, bw.provenance) == (0.2, 0.3, "oracle")
    d = generate_scenario(s)
    g1, g2 = np.array([0.1, 0.2, 0.35]), np.array([0.1, 0.25])
    bw, grid, best = _oracle_search(d, s, P1, g1, g2)
    from deconvcde.estimators import estimate_naive_onestep
    from deconvcde.kernels import GAUSSIAN
    scores = {(a, b): eise(estimate_naive_onestep(d, BandwidthSet(a, b), GAUSSIAN, GAUSSIAN,
                                                  DEFAULT_XGRID, DEFAULT_YGRID), "C1", "a")
              for a in g1 for b in g2}
    (a, b), want = min(scores.items(), key=lambda kv: kv[1])
    assert (bw.h1, bw.h2) == (a, b) and best == pytest.approx(want, rel=1e-12)
    assert eise(grid, "C1", "a") == pytest.approx(best, rel=1e-12)


def test_oracle_two_step_picks_h3_first():
    s = Scenario("C3", "a", n=150, seed=22)
    d = generate_scenario(s)
    h3_grid = np.array([0.1, 0.3, 0.9])
    from deconvcde.regression import local_linear_fit
    errs = [eise_mean(local_linear_fit(d.W, d.Y, h, DEFAULT_XGRID), "C3", "a") for h in h3_grid]
    bw = optimal_bandwidths_oracle(s, P2, [0.3], [0.2], data=d, h3_grid=h3_grid)
    assert bw.h3 == h3_grid[int(np.argmin(errs))]


def test_oracle_grids_use_kernel_reference_rules():
    d = generate_scenario(Scenario("C1", "a", n=200, seed=2))
    h1, h2 = oracle_grids(d, P4)
    sw, sy = np.std(d.W, ddof=1), np.std(d.Y, ddof=1)
    assert h1[0] == pytest.approx(0.427398 * sw * 200 ** -0.2 * 0.2)
    assert h2[-1] == pytest.approx(0.427398 * sy * 200 ** -0.2 * 1.5)


def test_oracle_dominates_data_driven(c1a_oracle, c1a_data_driven):
    for est in ESTIMATORS:
        o, dd = c1a_oracle[est].eise, c1a_data_driven[est].eise
        share = np.mean(o <= dd)
        print(f"{est}: oracle <= data-driven in {share:.0%} of replicates")
        assert share >= 0.9, est


def test_study_single_replicate_and_csv():
    rows = run_mc_study([Scenario("C3", "a", n=120)], [P1, P2], R=1)
    assert [r.method for r in rows] == [P1, P2]
    for r in rows:
        assert r.median == r.eise[0] and r.iqr == 0.0 and r.failures == 0
    text = study_to_csv(rows)
    assert text.splitlines()[0] == "primary,secondary,method,median_eise,iqr_eise,failures"
    assert text.splitlines()[1].startswith("C3,a,1,")
    wide = table1_layout(rows).splitlines()
    assert wide[0] == "model,method,(a)" and wide[1].startswith("(C3),1,")


def test_study_deterministic_and_independent_of_jobs():
    sc = [Scenario("C1", "b", n=100)]
    a = run_mc_study(sc, [P1, P3], R=2)
    b = run_mc_study(sc, [P1, P3], R=2, jobs=2)
    c = run_mc_study(sc, [P1, P3], R=2, master_seed=99)
    for x, y, z in zip(a, b, c):
        np.testing.assert_array_equal(x.eise, y.eise)
        assert not np.array_equal(x.eise, z.eise)


def test_study_counts_failures():
    # n = 3 leaves too few points for the rule-of-thumb mean bandwidth
    rows = run_mc_study([Scenario("C1", "a", n=3)], [P2], R=2)
    assert rows[0].failures == 2 and math.isnan(rows[0].median)


def test_study_input_validation():
    with pytest.raises(BadScenario):
        run_mc_study([Scenario("C1", "a")], R=0)
    with pytest.raises(BadScenario):
        run_mc_study([Scenario("C1", "a")], bandwidth_mode="plugin")
    with pytest.raises(BadScenario):
        run_mc_study([Scenario("C1", "a")], ["p5"])
    assert DEFAULT_R == 200


def test_assumed_error_scale_keeps_replicate_data():
    from deconvcde.simulation import replicate_seed
    s, t = Scenario("C1", "a"), Scenario("C1", "a", assumed_lambda=0.7)
    a = generate_scenario(s, np.random.default_rng(replicate_seed(1, s, 0)))
    b = generate_scenario(t, np.random.default_rng(replicate_seed(1, t, 0)))
    np.testing.assert_array_equal(a.W, b.W)


def test_sigma_u_replicate_examples():
    assert estimate_sigma_u_replicates(np.array([[1.0, 1.0], [2.0, 2.0]])) == 0.0
    assert estimate_sigma_u_replicates(np.array([[0.0, 2.0], [1.0, 1.0]])) == pytest.approx(1.0)
    rng = np.random.default_rng(8)
    X = rng.normal(size=5000)
    Wrep = X[:, None] + sample_laplace(5000 * 6, 0.0, 0.5 / math.sqrt(2), rng).reshape(5000, 6)
    assert 0.47 <= estimate_sigma_u_replicates(Wrep) <= 0.53
    ragged = np.array([[0.0, 2.0, np.nan], [1.0, np.nan, np.nan], [3.0, 4.0, 5.0]])
    assert estimate_sigma_u_replicates(ragged) == pytest.approx(math.sqrt((2 + 2) / 3))
    with pytest.raises(NeedReplicates):
        estimate_sigma_u_replicates(np.array([[1.0], [2.0]]))


def test_read_scenario_file(tmp_path):
    p = tmp_path / "study.cfg"
    p.write_text("# desk run\nprimary = C1, C3\nsecondary: a\nn = 200\nlambda = 0.9\nseed = 7\nR = 5\n"
                 "bandwidth_mode = oracle\nassumed_sigma_u = 0.3\nestimators = p1,p4\n")
    scenarios, opts = read_scenario_file(p)
    assert [(s.primary, s.secondary) for s in scenarios] == [("C1", "a"), ("C3", "a")]
    s = scenarios[0]
    assert (s.n, s.lam, s.seed, s.sigma_u_used) == (200, 0.9, 7, 0.3)
    assert opts == {"R": 5, "bandwidth_mode": "oracle", "estimators": [P1, P4], "mean_method": "local-linear"}
    p.write_text("primary = C1\nsecondary = a\n")
    assert read_scenario_file(p)[1]["R"] == DEFAULT_R
    for bad in ("primary = C1\n", "primary = C1\nsecondary = a\ncolour = red\n",
                "primary = C9\nsecondary = a\n", "primary = C1\nsecondary = a\nn = many\n"):
        p.write_text(bad)
        with pytest.raises(BadScenario):
            read_scenario_file(p)
    with pytest.raises(BadScenario):
        read_scenario_file(tmp_path / "missing.cfg")
