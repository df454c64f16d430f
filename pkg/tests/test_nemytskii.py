import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgspde.grid import Grid
from sgspde.nemytskii import (
    Locality,
    LocalityError,
    NemytskiiFn,
    apply_nemytskii,
    lip_compatible,
    random_smooth_fields,
    verify_lip,
)
from sgspde.sgcalc import SobolevKatoIndex, sk_norm

GRID = Grid(1, 64, 8.0)


def gaussian():
    return GRID.from_function(lambda x: np.exp(-x[..., 0] ** 2))


def pairs(n, idx, radius, seed=0, center=None):
    rng = np.random.default_rng(seed)
    f = random_smooth_fields(GRID, 2 * n, idx, radius, rng, center=center)
    return list(zip(f[::2], f[1::2]))


def test_identity_map():
    g = NemytskiiFn.from_expr("u", 1, (0, 0, 0, 0))
    w = gaussian()
    assert np.array_equal(apply_nemytskii(g, 0.0, w).values, w.values)


def test_square_is_pointwise():
    g = NemytskiiFn.from_expr("u^2", 1, (0, 1, 0, 0))
    w = gaussian()
    assert np.max(np.abs(apply_nemytskii(g, 0.0, w).values - w.values**2)) < 1e-13


def test_weighted_linear_map():
    g = NemytskiiFn.from_expr("u / br(x)", 1, (-1, 0, 1, 0))
    w = gaussian()
    want = w.values / np.sqrt(1 + GRID.x[..., 0] ** 2)
    assert np.allclose(apply_nemytskii(g, 0.0, w).values, want, rtol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_commutes_with_pointwise_evaluation(seed, t):
    g = NemytskiiFn.from_expr("sin(u) * exp(-t * x^2) + u^3", 1, (0, 0, 0, 0))
    w = np.random.default_rng(seed).standard_normal(GRID.shape)
    out = apply_nemytskii(g, t, GRID.field(w)).values
    x = GRID.x
    for j in range(0, 64, 7):
        assert out[j] == g.func(t, x[j : j + 1], np.complex128(w[j]))[0]
    assert np.allclose(out, np.sin(w) * np.exp(-t * x[..., 0] ** 2) + w**3, rtol=1e-14, atol=1e-14)


def test_identity_lip_certificate_is_exact():
    g = NemytskiiFn.from_expr("u", 1, (0, 0, 0, 0), C=1.0)
    rep = verify_lip(g, pairs(10, (0, 0), 3.0), [0.0, 1.0])
    assert rep.ok
    assert rep.bound_margin > 0 and rep.lipschitz_margin >= 0
    assert rep.lipschitz_constant == 1.0


def test_linear_map_lipschitz_equals_homogeneous_bound():
    g = NemytskiiFn.from_expr("exp(-x^2) * u + 0.5 * u / br(x)", 1, (0, 0, 0, 0), C=2.0)
    rep = verify_lip(g, pairs(12, (0, 0), 2.0, seed=1), [0.0])
    assert rep.lipschitz_constant == pytest.approx(rep.homogeneous_constant, abs=1e-10)


@pytest.mark.parametrize("r", [0.0, 1.0])
def test_affine_shift_certificate(r):
    kappa = gaussian()
    C0 = 0.7
    g = NemytskiiFn(lambda t, x, w: C0 * (kappa.values + w), (1.0, 0.0, r, 0.0),
                    C=C0 * max(1.0, sk_norm(kappa, (1, 0))), name="affine")
    rep = verify_lip(g, pairs(15, (1 + r, 0), 4.0, seed=2), [0.0, 0.5])
    assert rep.ok
    assert rep.lipschitz_constant <= C0 * (1 + 1e-12)


def test_square_constant_grows_linearly_with_radius():
    # algebra property of H^{0,1} in one dimension
    g = NemytskiiFn.from_expr("u^2", 1, (0, 1, 0, 0), C=1e6)
    consts = []
    for R in (1.0, 2.0, 4.0):
        rep = verify_lip(g, pairs(20, (0, 1), R, seed=3), [0.0])
        consts.append(rep.lipschitz_constant)
    for R, c in zip((2.0, 4.0), consts[1:]):
        assert c <= consts[0] * R * 1.5


def test_locality_enforced():
    w0 = gaussian()
    g = NemytskiiFn.from_expr("-u^3", 1, (0, 0, 0, 0), locality=Locality(0.5, w0))
    apply_nemytskii(g, 0.0, w0 * 1.1)
    with pytest.raises(LocalityError) as err:
        apply_nemytskii(g, 0.25, w0 * 3)
    assert err.value.t == 0.25
    far = pairs(2, (0, 0), 0.4, center=w0 * 5)
    with pytest.raises(LocalityError):
        verify_lip(g, far, [0.0])


def test_random_fields_respect_radius():
    rng = np.random.default_rng(4)
    center = gaussian()
    for f in random_smooth_fields(GRID, 10, (1, 1), 0.3, rng, center=center):
        assert 0 < sk_norm(f - center, (1, 1)) <= 0.3 * (1 + 1e-12)
        assert np.all(np.isreal(f.values))


@pytest.mark.parametrize("lip,idx,kappa_m,ok", [
    ((0, 0, 0, 0), (0, 0), 0.0, True),
    ((-1, 0, 1, 0), (0, 0), 1.0, True),
    ((-1, 0, 2, 0), (0, 0), 1.0, False),
    ((0, 1, 0, 0), (0, 0), 0.0, False),
    ((0, 0, 0, 0), (0, 1), 0.0, False),
])
def test_lip_compatibility(lip, idx, kappa_m, ok):
    g = NemytskiiFn.from_expr("u", 1, lip)
    got, why = lip_compatible(g, SobolevKatoIndex(*idx), kappa_m)
    assert got == ok
    assert bool(why) != ok


def test_real_preservation():
    assert NemytskiiFn.from_expr("u^3 - x * u", 1, (0, 0, 0, 0)).real_preserving(GRID)
    assert not NemytskiiFn.from_expr("I * u", 1, (0, 0, 0, 0)).real_preserving(GRID)


def test_negative_r_rejected():
    with pytest.raises(ValueError):
        NemytskiiFn.from_expr("u", 1, (0, 0, -1, 0))
