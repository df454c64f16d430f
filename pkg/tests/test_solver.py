import math

import numpy as np
import pytest

from sgspde.fundsol import Propagator, duhamel_solve
from sgspde.grid import Grid
from sgspde.nemytskii import Locality, NemytskiiFn
from sgspde.noise import SpectralMeasure, build_basis, sample_increments
from sgspde.sgcalc import SgSymbol, sk_norm
from sgspde.solver import (
    CauchyProblemSpec,
    HypothesisError,
    NonConvergenceError,
    PathFailureError,
    PicardSolver,
    SolverConfig,
    StepProcess,
    contraction_factor,
    ito_isometry_test,
    linear_crosscheck,
    mc_moments,
    ou_second_moment,
    picard_map,
    solve_path,
    solve_paths,
    sweep_T0,
    uniqueness_check,
)

GRID = Grid(1, 32, 6.0)
LIP0 = (0.0, 0.0, 0.0, 0.0)


def bessel(T=1.0):
    return SgSymbol.from_expr("br(xi)^2", 1, (0, 2), (0, 2), T)


def nl(source, C=1.0, locality=None):
    if source == "0":
        return NemytskiiFn.zero()
    return NemytskiiFn.from_expr(source, 1, LIP0, C, locality)


def make_spec(gamma="0", sigma="0", u0="0.5 * exp(-x^2)", measure=None, generator=None, T=0.2,
              grid=GRID, lam=0.25):
    x = grid.x[..., 0]
    u0_field = grid.field(eval(u0.replace("^", "**"), {"exp": np.exp, "x": x}) + 0 * x)
    g = nl(gamma) if isinstance(gamma, str) else gamma
    s = nl(sigma) if isinstance(sigma, str) else sigma
    return CauchyProblemSpec(generator or bessel(), g, s, u0_field,
                             measure or SpectralMeasure.bracket_power(2.0), T, (0, 0), 0.0, lam)


def cfg(**kw):
    base = dict(dt=0.02, K=8, tol=1e-10, max_iter=60, paths=4, seed=3)
    base.update(kw)
    return SolverConfig(**base)


# --- spec validation -----------------------------------------------------------

def test_lambda_out_of_range():
    with pytest.raises(HypothesisError, match=r"λ ∉ \[0,1/2\)"):
        make_spec(lam=0.6)


def test_validate_reports_each_hypothesis():
    rep = make_spec(sigma="u / br(x)").validate()
    assert rep.ok
    names = [n for n, _, _ in rep.items]
    assert {"parabolicity", "spectral_condition", "gamma_lip_class", "sigma_lip_class"} <= set(names)


def test_validate_flags_nonparabolic_generator():
    spec = make_spec(generator=SgSymbol.from_expr("-br(xi)^2", 1, (0, 2), (0, 2)))
    rep = spec.validate()
    assert not rep.ok and "parabolicity" in rep.failures()


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0, K=4)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, K=0)


# --- map and fixed point -----------------------------------------------------

def test_zero_nonlinearities_give_constant_map():
    spec = make_spec()
    config = cfg()
    assert contraction_factor(spec, config, spec.T) == 0.0
    rep = sweep_T0(spec, config)
    assert rep.T0 == spec.T and rep.certified
    sol = solve_path(spec, config, 0)
    assert sol.converged and sol.iterations == 1
    solver = PicardSolver(spec, config)
    assert np.array_equal(sol.values, solver.v0)


def test_linear_problem_converges_in_two_iterations():
    spec = make_spec(gamma="exp(-x^2)", sigma="1 / br(x)")
    sol = solve_path(spec, cfg(), 1)
    assert sol.converged and sol.iterations == 2


def test_deterministic_drift_matches_duhamel():
    spec = make_spec(gamma="exp(-x^2)")
    config = cfg(dt=0.05)
    solver = PicardSolver(spec, config)
    path = sample_increments(solver.K, solver.n_steps, config.dt, 0)
    out = picard_map(spec, config, path, np.zeros((solver.n_steps + 1,) + GRID.shape))
    P = Propagator(spec.generator, GRID)
    gam = GRID.field(np.exp(-GRID.x[..., 0] ** 2))
    want = duhamel_solve(P, spec.u0, lambda t: gam, 0.0, solver.times[1:])
    for got, ref in zip(out[1:], want):
        assert np.max(np.abs(got - ref.values)) < 1e-8


def test_identity_propagator_noise_variance():
    zero = SgSymbol.multiplier(lambda t, xi: np.zeros(np.shape(xi)[:-1]), (0, 0), 1)
    M = SpectralMeasure.dirac()
    spec = make_spec(sigma="1", u0="0", measure=M, generator=zero)
    config = cfg(dt=0.05, K=1, paths=4000)
    solver = PicardSolver(spec, config)
    inc = solver.increments(range(config.paths))
    U = np.zeros((config.paths, solver.n_steps + 1) + GRID.shape)
    out = solver.apply(U, inc)
    # single constant mode: the field at any node is the Brownian value
    vals = out[:, :, 0].real
    for k in range(1, solver.n_steps + 1):
        var = vals[:, k].var(ddof=1)
        se = k * config.dt * math.sqrt(2 / (config.paths - 1))
        assert abs(var - k * config.dt) < 4 * se


def test_cubic_damping_fixed_point():
    u0 = "0.5 * exp(-x^2)"
    spec = make_spec(gamma=nl("-u^3", 4.0, Locality(1.0)), sigma="0.1 * u / br(x)", u0=u0, T=0.5)
    config = cfg(dt=0.02, K=1, tol=1e-9)
    spec = CauchyProblemSpec(spec.generator, NemytskiiFn.from_expr("-u^3", 1, LIP0, 4.0,
                             Locality(1.0, spec.u0)), spec.sigma, spec.u0,
                             SpectralMeasure.dirac(), spec.T, (0, 0), 0.0, 0.25)
    sweep = sweep_T0(spec, config)
    assert sweep.certified and sweep.certificate_q < 0.9
    sol = solve_path(spec, config, 0, horizon=sweep.T0)
    assert sol.converged and sol.q_hat < 0.9
    r = sol.residuals
    assert all(b <= 0.9 * a for a, b in zip(r[:-1], r[1:]) if a > 1e-13)
    solver = PicardSolver(spec, config, sweep.T0)
    path = sample_increments(solver.K, solver.n_steps, config.dt, config.seed, 0)
    Tu = picard_map(spec, config, path, sol.values, sweep.T0)
    assert float(solver.sup_norm((Tu - sol.values)[None])[0]) <= 2 * config.tol
    dist, _ = uniqueness_check(spec, config, 0, sweep.T0)
    assert dist <= 2 * config.tol


def test_locality_failure_is_reported():
    w0 = GRID.field(0.5 * np.exp(-GRID.x[..., 0] ** 2))
    g = NemytskiiFn.from_expr("u^2 + 2", 1, LIP0, 100.0, Locality(0.05, w0))
    spec = CauchyProblemSpec(bessel(), g, NemytskiiFn.zero(), w0, SpectralMeasure.dirac(), 0.5,
                             (0, 0), 0.0, 0.25)
    sol = solve_path(spec, cfg(dt=0.05, K=1), 0)
    assert not sol.converged and "locality" in sol.failure
    with pytest.raises(PathFailureError):
        mc_moments(spec, cfg(dt=0.05, K=1, paths=3), horizon=0.5)


def test_sweep_without_contraction_raises():
    spec = make_spec(gamma="60 * u", T=0.2)
    with pytest.raises(NonConvergenceError):
        sweep_T0(spec, cfg(dt=0.05))


def test_sweep_returns_largest_contracting_horizon():
    spec = make_spec(gamma="8 * u", T=1.0)
    config = cfg(dt=0.01)
    rep = sweep_T0(spec, config)
    qs = dict(rep.sweep)
    assert qs[rep.T0] < 0.9
    if rep.T0 < spec.T:
        assert qs[2 * rep.T0] >= 0.9
    hs = [h for h, _ in rep.sweep]
    assert all(qs[a] >= qs[b] for a, b in zip(hs, hs[1:]))


def test_small_linear_forcing_keeps_full_horizon():
    spec = make_spec(gamma="0.001 * u", T=1.0)
    rep = sweep_T0(spec, cfg(dt=0.02))
    assert rep.T0 == 1.0 and rep.certified


def test_T0_nonincreasing_in_lambda():
    T0s = []
    for lam in (0.1, 0.3, 0.45):
        spec = make_spec(gamma="5 * u", sigma="0.5 * u", T=1.0, lam=lam,
                         measure=SpectralMeasure.bracket_power(0.5))
        T0s.append(sweep_T0(spec, cfg(dt=0.01)).T0)
    assert T0s[0] >= T0s[1] >= T0s[2]


def test_drift_map_norm_scales_linearly_in_horizon():
    # linear drift with ell = 0: halving the horizon halves the map norm up to slack
    spec = make_spec(gamma="0.5 * u", T=0.4)
    config = cfg(dt=0.01)
    q1 = contraction_factor(spec, config, 0.4)
    q2 = contraction_factor(spec, config, 0.2)
    assert 2 * 0.7 <= q1 / q2 <= 2 * 1.3


def test_drift_only_reduction():
    spec = make_spec(gamma=nl("-u^3", 4.0), T=0.2)
    config = cfg(dt=0.02, K=1, tol=1e-12)
    sol = solve_path(spec, config, 0)
    P = Propagator(spec.generator, GRID)
    gam = [-(v**3) for v in sol.values]

    def f(tau):
        # the scheme holds the source at the left end of each step
        return gam[int(np.floor(tau / config.dt + 1e-9))]

    want = duhamel_solve(P, spec.u0, f, 0.0, sol.times[1:], substeps=1)
    for got, ref in zip(sol.values[1:], want):
        assert np.max(np.abs(got - ref.values)) < 1e-9


def test_seed_determinism_and_thread_independence():
    spec = make_spec(gamma=nl("-u^3", 4.0), sigma="0.2 * u / br(x)")
    a = solve_path(spec, cfg(), 2)
    b = solve_path(spec, cfg(), 2)
    assert np.array_equal(a.values, b.values) and a.residuals == b.residuals
    one = solve_paths(spec, cfg(paths=10, chunk=3, threads=1))
    four = solve_paths(spec, cfg(paths=10, chunk=3, threads=4))
    for s1, s4 in zip(one, four):
        assert np.array_equal(s1.values, s4.values)
    assert np.array_equal(one[2].values, a.values)


# --- Monte Carlo ---------------------------------------------------------------

def test_deterministic_problem_has_zero_variance():
    spec = make_spec(gamma=nl("-u^3", 4.0))
    rep = mc_moments(spec, cfg(paths=5), horizon=0.2)
    assert np.all(rep.variance == 0) and rep.n_failed == 0


def test_moments_csv_round_trip(tmp_path):
    spec = make_spec(sigma="1 / br(x)")
    rep = mc_moments(spec, cfg(paths=6), horizon=0.2)
    rep.to_csv(tmp_path / "m.csv")
    data = np.loadtxt(tmp_path / "m.csv", delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 0], rep.times)
    assert np.array_equal(data[:, 1], rep.mean)
    assert np.array_equal(data[:, 3], rep.std_err)


def test_standard_error_scaling():
    spec = make_spec(sigma="1", u0="0")
    se1 = mc_moments(spec, cfg(paths=500), horizon=0.2).std_err[-1]
    se4 = mc_moments(spec, cfg(paths=2000), horizon=0.2).std_err[-1]
    assert 0.5 * 0.7 <= se4 / se1 <= 0.5 * 1.3


def test_additive_noise_matches_ou_form():
    spec = make_spec(sigma="1", u0="0", measure=SpectralMeasure.bracket_power(2.0), T=0.05)
    config = cfg(dt=0.005, K=31, paths=2000, seed=8)
    rep = mc_moments(spec, config, horizon=0.05)
    basis = build_basis(spec.measure, GRID, 31)
    exact = ou_second_moment(spec, basis, rep.times, discrete_dt=config.dt)
    z = np.abs(rep.mean[1:] - exact[1:]) / rep.std_err[1:]
    assert np.all(z < 4)


def test_ou_continuous_limit():
    spec = make_spec(sigma="1", u0="0", T=0.05)
    basis = build_basis(spec.measure, GRID, 31)
    cont = ou_second_moment(spec, basis, 0.05)
    disc = ou_second_moment(spec, basis, 0.05, discrete_dt=1e-5)
    assert disc == pytest.approx(cont, rel=1e-3)


# --- Ito isometry and cross-check --------------------------------------------

def test_isometry_zero_process():
    spec = make_spec(sigma="1", u0="0")
    rep = ito_isometry_test(spec, cfg(paths=50), StepProcess.zero(10))
    assert rep.mc_mean == 0 and rep.hs_sum == 0 and rep.ok


def test_isometry_identity_with_dirac():
    spec = make_spec(sigma="1", u0="0", measure=SpectralMeasure.dirac())
    config = cfg(dt=0.02, K=1, paths=4000)
    rep = ito_isometry_test(spec, config, StepProcess.identity(10))
    one = sk_norm(GRID.field(np.ones(GRID.shape)), (0, 0))
    assert rep.hs_sum == pytest.approx(10 * 0.02 * one**2, rel=1e-12)
    assert rep.ok


def test_isometry_propagated():
    spec = make_spec(sigma="1 / br(x)", u0="0")
    config = cfg(dt=0.02, K=16, paths=3000)
    P = Propagator(spec.generator, GRID)
    times = np.arange(10) * 0.02
    sigma = 1 / np.sqrt(1 + GRID.x[..., 0] ** 2)
    rep = ito_isometry_test(spec, config, StepProcess.propagated(P, 0.2, times, sigma))
    assert rep.ok


def test_crosscheck_rejects_nonlinear():
    with pytest.raises(HypothesisError):
        linear_crosscheck(make_spec(sigma="u"), cfg())


def test_crosscheck_without_noise():
    rep = linear_crosscheck(make_spec(gamma="exp(-x^2)"), cfg())
    assert rep.relative_l2 == 0.0


def test_crosscheck_single_mode():
    spec = make_spec(sigma="1", u0="0", measure=SpectralMeasure.dirac())
    rep = linear_crosscheck(spec, cfg(K=1))
    assert rep.relative_l2 < 1e-12


def test_crosscheck_full_basis_is_exact():
    spec = make_spec(sigma="exp(-x^2)", u0="0")
    rep = linear_crosscheck(spec, cfg(K=31))
    assert rep.K == rep.K_full and rep.relative_l2 < 1e-10
