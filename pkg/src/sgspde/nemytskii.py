"""Nemytskii operators ``w -> g(t, x, w(x))`` with empirical Lipschitz certificates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import parse_expression
from .grid import Field, Grid
from .sgcalc import SobolevKatoIndex, sk_norm_values

__all__ = [
    "LocalityError",
    "Locality",
    "NemytskiiFn",
    "LipReport",
    "apply_nemytskii",
    "verify_lip",
    "random_smooth_fields",
    "lip_compatible",
]


class LocalityError(ValueError):
    """The argument left the neighbourhood on which a local Lipschitz bound is declared."""

    def __init__(self, message: str, t: float | None = None):
        self.t = t
        super().__init__(message if t is None else f"{message} (t={t:g})")


@dataclass(frozen=True, eq=False)
class Locality:
    """Ball ``||w - center||_{z+r, zeta+rho} <= radius``; ``center=None`` means the initial datum."""

    radius: float = 1.0
    center: Field | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("locality radius must be positive")

    def with_center(self, center: Field) -> "Locality":
        return Locality(self.radius, center)


@dataclass(frozen=True, eq=False)
class NemytskiiFn:
    """Scalar map ``g(t, x, w)`` declared in ``Lip(z, zeta, r, rho)`` with modulus ``C(t)``.

    ``locality=None`` declares a global bound; otherwise the bound only holds
    on a :class:`Locality` ball.
    """

    func: Callable
    lip_params: tuple[float, float, float, float]
    C: Callable[[float], float] | float = 1.0
    locality: Locality | None = None
    dim: int = 1
    name: str = ""
    depends_on_u: bool = True
    depends_on_t: bool = True

    def __post_init__(self):
        z, zeta, r, rho = (float(p) for p in self.lip_params)
        if r < 0 or rho < 0:
            raise ValueError("r and rho must be nonnegative")
        object.__setattr__(self, "lip_params", (z, zeta, r, rho))

    @classmethod
    def from_expr(cls, source: str, dim: int, lip_params, C=1.0, locality: Locality | None = None
                  ) -> "NemytskiiFn":
        ex = parse_expression(source, dim, ("t", "x", "u"))

        def func(t, x, w):
            return ex(t=t, x=x, u=w)

        return cls(func, tuple(lip_params), C, locality, dim, source,
                   ex.depends_on("u"), ex.depends_on("t"))

    @classmethod
    def zero(cls, dim: int = 1, lip_params=(0.0, 0.0, 0.0, 0.0)) -> "NemytskiiFn":
        return cls(lambda t, x, w: np.zeros_like(w), lip_params, 0.0, None, dim, "0", False, False)

    @property
    def source_index(self) -> SobolevKatoIndex:
        """Index ``(z + r, zeta + rho)`` of the argument space."""
        z, zeta, r, rho = self.lip_params
        return SobolevKatoIndex(z + r, zeta + rho)

    @property
    def target_index(self) -> SobolevKatoIndex:
        z, zeta, _, _ = self.lip_params
        return SobolevKatoIndex(z, zeta)

    def modulus(self, t: float) -> float:
        return float(self.C(t)) if callable(self.C) else float(self.C)

    def evaluate(self, t: float, grid: Grid, values: np.ndarray) -> np.ndarray:
        """Pointwise ``g(t, x_j, w_j)`` for a batch of arrays with trailing grid axes."""
        w = np.asarray(values, dtype=complex)
        out = np.asarray(self.func(t, grid.x, w), dtype=complex)
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, w.shape)).copy()

    def locality_excess(self, grid: Grid, values: np.ndarray, center: np.ndarray | None = None
                        ) -> np.ndarray:
        """``||w - center|| - radius`` per batch entry (nonpositive inside the ball)."""
        if self.locality is None:
            return np.full(np.shape(values)[: np.ndim(values) - grid.dim], -np.inf)
        c = center
        if c is None:
            if self.locality.center is None:
                raise ValueError("locality ball has no center; attach the initial datum")
            c = self.locality.center.values
        dist = sk_norm_values(grid, np.asarray(values) - c, self.source_index)
        return dist - self.locality.radius

    def real_preserving(self, grid: Grid, rng: np.random.Generator | None = None, trials: int = 4
                        ) -> bool:
        """Whether real arguments give real values on random real samples."""
        rng = rng or np.random.default_rng(0)
        for _ in range(trials):
            w = rng.standard_normal(grid.shape)
            for t in (0.0, 0.5):
                out = self.evaluate(t, grid, w)
                if np.max(np.abs(out.imag)) > 1e-14 * max(1.0, float(np.max(np.abs(out.real)))):
                    return False
        return True


def apply_nemytskii(g: NemytskiiFn, t: float, w: Field) -> Field:
    """``x -> g(t, x, w(x))``; checks the locality ball first."""
    if w.domain != "x":
        raise ValueError("apply_nemytskii expects a spatial field")
    if g.locality is not None:
        excess = float(g.locality_excess(w.grid, w.values))
        if excess > 0:
            raise LocalityError(
                f"argument is {excess:.3g} outside the ball of radius {g.locality.radius:g} "
                f"in H^{{{g.source_index.z:g},{g.source_index.zeta:g}}}",
                t,
            )
    return Field(w.grid, g.evaluate(t, w.grid, w.values), "x")


def lip_compatible(g: NemytskiiFn, idx: SobolevKatoIndex, kappa_m: float) -> tuple[bool, str]:
    """Whether ``g``'s declared class provides ``Lip(z - kappa m', zeta, kappa m', 0)``.

    A class ``Lip(z1, zeta1, r, rho)`` works if it maps a space containing
    ``H^{z, zeta}`` into one contained in ``H^{z - kappa m', zeta}``.
    """
    z1, zeta1, r, rho = g.lip_params
    problems = []
    if z1 < idx.z - kappa_m - 1e-12:
        problems.append(f"target weight {z1:g} < z - kappa m' = {idx.z - kappa_m:g}")
    if zeta1 < idx.zeta - 1e-12:
        problems.append(f"target smoothness {zeta1:g} < zeta = {idx.zeta:g}")
    if z1 + r > idx.z + 1e-12:
        problems.append(f"source weight {z1 + r:g} > z = {idx.z:g}")
    if zeta1 + rho > idx.zeta + 1e-12:
        problems.append(f"source smoothness {zeta1 + rho:g} > zeta = {idx.zeta:g}")
    return not problems, "; ".join(problems)


@dataclass
class LipReport:
    """Empirical certificate for the two bounds of the Lipschitz class."""

    ok: bool
    bound_margin: float
    lipschitz_margin: float
    boundedness_constant: float
    lipschitz_constant: float
    homogeneous_constant: float
    C_hat: dict = field(default_factory=dict)
    real_preserving: bool = True
    n_samples: int = 0


def verify_lip(g: NemytskiiFn, samples: Sequence[tuple[Field, Field]], t_samples: Sequence[float],
               center: Field | None = None) -> LipReport:
    """Check on every sample pair and time

    (i)  ``||g(v)||_{z,zeta} <= C(t) (1 + ||v||_{z+r,zeta+rho})``
    (ii) ``||g(v1) - g(v2)||_{z,zeta} <= C(t) ||v1 - v2||_{z+r,zeta+rho}``

    and report the worst margins ``C(t) - ratio`` and the smallest admissible
    constants. ``homogeneous_constant`` is the boundedness ratio of
    ``g(v) - g(0)`` evaluated on the differences ``v1 - v2``.
    """
    if not samples:
        raise ValueError("need at least one sample pair")
    grid = samples[0][0].grid
    v1 = np.stack([a.values for a, _ in samples])
    v2 = np.stack([b.values for _, b in samples])
    if g.locality is not None:
        c = None if center is None else center.values
        excess = np.max(g.locality_excess(grid, np.concatenate([v1, v2]), c))
        if excess > 0:
            raise LocalityError(f"samples leave the locality ball by {excess:.3g}")
    src, tgt = g.source_index, g.target_index
    diff = v1 - v2
    n_src = sk_norm_values(grid, np.concatenate([v1, v2]), src)
    n_diff = sk_norm_values(grid, diff, src)
    zero = np.zeros(grid.shape)
    bound_margin = lip_margin = np.inf
    c_bound = c_lip = c_hom = 0.0
    C_hat = {}
    for t in t_samples:
        C = g.modulus(t)
        g1 = g.evaluate(t, grid, v1)
        g2 = g.evaluate(t, grid, v2)
        gb = sk_norm_values(grid, np.concatenate([g1, g2]), tgt)
        rb = gb / (1.0 + n_src)
        gl = sk_norm_values(grid, g1 - g2, tgt)
        nz = n_diff > 0
        rl = np.where(nz, gl / np.where(nz, n_diff, 1.0), 0.0)
        hom = sk_norm_values(grid, g.evaluate(t, grid, diff) - g.evaluate(t, grid, zero), tgt)
        rh = np.where(nz, hom / np.where(nz, n_diff, 1.0), 0.0)
        bound_margin = min(bound_margin, float(np.min(C - rb)))
        lip_margin = min(lip_margin, float(np.min(C - rl)))
        c_bound = max(c_bound, float(np.max(rb)))
        c_lip = max(c_lip, float(np.max(rl)))
        c_hom = max(c_hom, float(np.max(rh)))
        C_hat[float(t)] = max(float(np.max(rb)), float(np.max(rl)))
    return LipReport(
        bound_margin >= 0 and lip_margin >= 0,
        bound_margin,
        lip_margin,
        c_bound,
        c_lip,
        c_hom,
        C_hat,
        g.real_preserving(grid),
        len(samples),
    )


def random_smooth_fields(grid: Grid, n: int, idx, radius: float, rng: np.random.Generator,
                         center: Field | None = None, width: float | None = None,
                         bandwidth: float = 3.0) -> list[Field]:
    """Real fields ``center + v`` with ``v`` a random smooth bump of ``idx``-norm in ``(0, radius]``.

    Each ``v`` is a Gaussian-windowed random combination of frequencies up to
    ``bandwidth``, rescaled to a norm drawn uniformly from ``(0, radius]``.
    """
    width = width or grid.half_width / 4
    env = np.exp(-np.sum(grid.x**2, axis=-1) / (2 * width**2))
    out = []
    for _ in range(n):
        freqs = rng.uniform(-bandwidth, bandwidth, size=(4, grid.dim))
        amps = rng.standard_normal(4)
        phases = rng.uniform(0, 2 * np.pi, 4)
        v = sum(a * np.cos(grid.x @ f + p) for a, f, p in zip(amps, freqs, phases)) * env
        nrm = float(sk_norm_values(grid, v, idx))
        target = radius * rng.uniform(0.05, 1.0)
        v = v * (target / nrm)
        if center is not None:
            v = v + center.values
        out.append(Field(grid, v, "x"))
    return out

