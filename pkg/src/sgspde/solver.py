"""Mild-solution Picard solver, contraction horizon sweep and Monte Carlo harnesses.

On the uniform grid ``t_n = n dt`` the map is

    (T u)(t_n) = E0(t_n, 0) u0
               + sum_{k<n} W_{n,k} gamma(s_k, u(s_k))
               + sum_{k<n} E0(t_n, s_k) [sigma(s_k, u(s_k)) dW_k]

with ``W_{n,k} = int_{s_k}^{s_{k+1}} E0(t_n, tau) dtau`` formed at symbol level
and ``dW_k = sum_{j<=K} h_j beta_{k,j}`` the truncated noise increment.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fundsol import Propagator
from .grid import Field, Grid
from .nemytskii import LocalityError, NemytskiiFn, lip_compatible, random_smooth_fields
from .noise import (
    CameronMartinBasis,
    MeasureSymmetryError,
    NoisePath,
    RankError,
    SpectralMeasure,
    mirror_frequencies,
    build_basis,
    check_spectral_condition,
    sample_increments,
    sample_paths,
)
from .sgcalc import SgSymbol, SobolevKatoIndex, StressGrid, check_parabolicity, sk_norm_values

__all__ = [
    "to_jsonable",
    "HypothesisError",
    "NonConvergenceError",
    "PathFailureError",
    "CauchyProblemSpec",
    "SolverConfig",
    "PathSolution",
    "PicardSolver",
    "HypothesisReport",
    "SweepReport",
    "MomentsReport",
    "StepProcess",
    "IsometryReport",
    "CrosscheckReport",
    "CONTRACTION_THRESHOLD",
    "FAILURE_FRACTION",
    "estimate_T0",
    "sweep_T0",
    "picard_map",
    "solve_path",
    "solve_paths",
    "mc_moments",
    "ito_isometry_test",
    "linear_crosscheck",
    "ou_second_moment",
    "uniqueness_check",
]

CONTRACTION_THRESHOLD = 0.9
FAILURE_FRACTION = 0.10


class HypothesisError(ValueError):
    """A hypothesis needed for a mild solution to exist is violated."""


class NonConvergenceError(RuntimeError):
    """Picard iteration or the horizon sweep did not converge."""


class PathFailureError(RuntimeError):
    """Too many Monte Carlo paths failed."""


@dataclass(frozen=True, eq=False)
class CauchyProblemSpec:
    """``(d_t + Op(a)) u = gamma(t, x, u) + sigma(t, x, u) dW``, ``u(0) = u0`` on ``[0, T]``."""

    generator: SgSymbol
    gamma: NemytskiiFn
    sigma: NemytskiiFn
    u0: Field
    measure: SpectralMeasure
    T: float
    index: SobolevKatoIndex
    kappa: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if not 0 <= self.kappa < 0.5:
            raise HypothesisError(f"κ ∉ [0,1/2) (kappa = {self.kappa:g})")
        if not 0 <= self.lam < 0.5:
            raise HypothesisError(f"λ ∉ [0,1/2) (lambda = {self.lam:g})")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.generator.T < self.T - 1e-12:
            raise ValueError(f"generator horizon {self.generator.T} shorter than T = {self.T}")
        if self.u0.domain != "x":
            raise ValueError("u0 must be a spatial field")
        dims = {self.generator.dim, self.u0.grid.dim, self.measure.dim}
        if len(dims) != 1:
            raise ValueError(f"inconsistent dimensions {dims}")
        if not isinstance(self.index, SobolevKatoIndex):
            object.__setattr__(self, "index", SobolevKatoIndex(*self.index))

    @property
    def grid(self) -> Grid:
        return self.u0.grid

    @property
    def kappa_m(self) -> float:
        hyp = self.generator.hypo_order
        return 0.0 if hyp is None else self.kappa * hyp[0]

    @property
    def is_linear(self) -> bool:
        return not (self.gamma.depends_on_u or self.sigma.depends_on_u)

    def validate(self, stress_grid=None) -> "HypothesisReport":
        """Check parabolicity, the spectral condition and the Lipschitz classes."""
        items = []
        sg = stress_grid or StressGrid.from_grid(self.grid)
        if self.generator.hypo_order is None:
            items.append(("parabolicity", False, {"reason": "generator has no hypo_order"}))
            mu_p = None
        else:
            rep = check_parabolicity(self.generator, sg)
            items.append(("parabolicity", rep.ok, {"C": rep.C, "reason": rep.failure or "",
                                                   "quotients": rep.quotient_constants}))
            mu_p = self.generator.hypo_order[1]
        items.append(("kappa_range", 0 <= self.kappa < 0.5, {"kappa": self.kappa}))
        items.append(("lambda_range", 0 <= self.lam < 0.5, {"lambda": self.lam}))
        if mu_p is not None and mu_p > 0:
            try:
                sc = check_spectral_condition(self.measure, self.lam, mu_p, self.grid)
            except MeasureSymmetryError as exc:
                items.append(("spectral_condition", False, {"reason": str(exc)}))
            else:
                items.append(("spectral_condition", sc.admissible,
                              {"value": sc.value, "eta0_value": sc.eta0_value, "ratio": sc.ratio,
                               "growth_ratio": sc.growth_ratio, "reason": sc.reason}))
        else:
            items.append(("spectral_condition", False, {"reason": "needs mu' > 0"}))
        for name, g in (("gamma", self.gamma), ("sigma", self.sigma)):
            ok, why = lip_compatible(g, self.index, self.kappa_m)
            items.append((f"{name}_lip_class", ok, {"lip_params": list(g.lip_params), "reason": why}))
        return HypothesisReport(items)


@dataclass
class HypothesisReport:
    items: list

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.items)

    def failures(self) -> list[str]:
        return [name for name, ok, _ in self.items if not ok]

    def as_dict(self) -> dict:
        return {"ok": self.ok,
                "hypotheses": [{"name": n, "pass": bool(ok), **to_jsonable(d)} for n, ok, d in self.items]}


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    K: int
    tol: float = 1e-8
    max_iter: int = 50
    paths: int = 1
    seed: int = 0
    threads: int = 1
    symmetry: str = "hermitian"
    chunk: int = 256

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.K < 1 or self.paths < 1 or self.max_iter < 1 or self.threads < 1 or self.chunk < 1:
            raise ValueError("K, paths, max_iter, threads and chunk must be positive")


@dataclass
class PathSolution:
    times: np.ndarray
    values: np.ndarray = field(repr=False)  # (n_t, *shape)
    residuals: list
    q_hat: float
    converged: bool
    iterations: int
    path: int = 0
    failure: str | None = None

    def fields(self, grid: Grid) -> list[Field]:
        return [Field(grid, v, "x") for v in self.values]


# --- the discrete map ---------------------------------------------------------

class PicardSolver:
    """Precomputed data for the discrete map on ``[0, horizon]``."""

    def __init__(self, spec: CauchyProblemSpec, config: SolverConfig, horizon: float | None = None,
                 propagator: Propagator | None = None, basis: CameronMartinBasis | None = None):
        self.spec = spec
        self.config = config
        horizon = spec.T if horizon is None else horizon
        n = int(math.floor(horizon / config.dt + 1e-9))
        if n < 1:
            raise ValueError(f"horizon {horizon:g} shorter than dt = {config.dt:g}")
        self.n_steps = n
        self.dt = config.dt
        self.times = config.dt * np.arange(n + 1)
        self.grid = spec.grid
        self.P = propagator or Propagator(spec.generator, self.grid)
        self.basis = basis or _basis(spec.measure, self.grid, config.K, config.symmetry)
        self.K = self.basis.K
        u0 = spec.u0.values
        self.v0 = np.stack([self.P.apply(t, 0.0, u0) for t in self.times])
        self._fast = self.P.kind in ("multiplier", "weight") and not spec.generator.time_dependent
        if self._fast:
            self._e1 = self.P.operator(self.dt, 0.0)
            self._w1 = self.P.weight_operator(self.dt, 0.0, self.dt)

    # increments
    def increments(self, paths: Sequence[int]) -> np.ndarray:
        return sample_paths(self.K, self.n_steps, self.dt, self.config.seed, paths)

    def _centers(self, g: NemytskiiFn):
        if g.locality is None:
            return None
        return (g.locality.center or self.spec.u0).values

    def locality_excess(self, U: np.ndarray) -> np.ndarray:
        """Largest excess over the locality balls of gamma and sigma at the used times, per path."""
        out = np.full(U.shape[0], -np.inf)
        for g in (self.spec.gamma, self.spec.sigma):
            if g.locality is None or not g.depends_on_u:
                continue
            ex = g.locality_excess(self.grid, U[:, : self.n_steps], self._centers(g))
            out = np.maximum(out, ex.max(axis=1))
        return out

    def sources(self, U: np.ndarray, noise: np.ndarray):
        """Drift and noise sources ``gamma(s_k, u_k)`` and ``sigma(s_k, u_k) dW_k``."""
        G = np.empty(noise.shape, dtype=complex)
        S = np.empty(noise.shape, dtype=complex)
        for k in range(self.n_steps):
            s = self.times[k]
            G[:, k] = self.spec.gamma.evaluate(s, self.grid, U[:, k])
            S[:, k] = self.spec.sigma.evaluate(s, self.grid, U[:, k]) * noise[:, k]
        return G, S

    def convolve(self, G: np.ndarray | None, S: np.ndarray | None) -> np.ndarray:
        """``sum_{k<n} W_{n,k} G_k + E0(t_n, s_k) S_k`` for every ``n``; batch-first arrays."""
        ref = G if G is not None else S
        B = ref.shape[0]
        n = self.n_steps
        out = np.zeros((B, n + 1) + self.grid.shape, dtype=complex)
        if self._fast:
            spectral = self.P.kind == "multiplier"
            tf = self.grid.fft if spectral else (lambda v: v)
            Gh = tf(G) if G is not None else None
            Sh = tf(S) if S is not None else None
            Z = np.zeros((B,) + self.grid.shape, dtype=complex)
            acc = np.zeros_like(out)
            for m in range(1, n + 1):
                Z = self._e1 * Z
                if Gh is not None:
                    Z = Z + self._w1 * Gh[:, m - 1]
                if Sh is not None:
                    Z = Z + self._e1 * Sh[:, m - 1]
                acc[:, m] = Z
            return self.grid.ifft(acc) if spectral else acc
        P = self.P
        if self.spec.generator.time_dependent:
            for m in range(1, n + 1):
                t = self.times[m]
                for k in range(m):
                    if G is not None:
                        op = P.weight_operator(t, self.times[k], self.times[k + 1])
                        out[:, m] += P.apply_operator(op, G[:, k])
                    if S is not None:
                        out[:, m] += P.apply_operator(P.operator(t, self.times[k]), S[:, k])
            return out
        # time-independent: one operator per lag L = m - k, applied to all k at once
        for L in range(1, n + 1):
            t = self.times[L]
            if G is not None:
                out[:, L:] += P.apply_operator(P.weight_operator(t, 0.0, self.dt), G[:, : n - L + 1])
            if S is not None:
                out[:, L:] += P.apply_operator(P.operator(t, 0.0), S[:, : n - L + 1])
        return out

    def noise(self, inc: np.ndarray) -> np.ndarray:
        """Truncated increments ``dW_k`` as fields, shape ``(B, n, *shape)``."""
        if _is_zero(self.spec.sigma):
            return np.zeros((inc.shape[0], self.n_steps) + self.grid.shape)
        return self.basis.noise_fields(inc[..., : self.K])

    def apply(self, U: np.ndarray, inc: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        """The map on a batch ``U`` of shape ``(B, n+1, *shape)`` with increments ``(B, n, K)``."""
        if U.shape[1] != self.n_steps + 1 or inc.shape[1] != self.n_steps:
            raise ValueError("time grid of u or of the noise path does not match")
        gamma_zero = _is_zero(self.spec.gamma)
        sigma_zero = _is_zero(self.spec.sigma)
        if gamma_zero and sigma_zero:
            return np.broadcast_to(self.v0, U.shape).copy()
        if noise is None:
            noise = self.noise(inc)
        G, S = self.sources(U, noise)
        conv = self.convolve(None if gamma_zero else G, None if sigma_zero else S)
        return self.v0[None] + conv

    def sup_norm(self, D: np.ndarray) -> np.ndarray:
        """``max_n ||D(t_n)||_{z,zeta}`` per batch entry."""
        return sk_norm_values(self.grid, D, self.spec.index).max(axis=1)

    def iterate(self, inc: np.ndarray, paths: Sequence[int], U0: np.ndarray | None = None
                ) -> list[PathSolution]:
        """Picard iteration for a batch of paths with per-path convergence masking."""
        B = inc.shape[0]
        U = np.broadcast_to(self.v0, (B,) + self.v0.shape).copy() if U0 is None else np.array(U0, complex)
        residuals = [[] for _ in range(B)]
        done = np.zeros(B, bool)
        failure: list[str | None] = [None] * B
        iters = np.zeros(B, int)
        noise = self.noise(inc)
        for it in range(1, self.config.max_iter + 1):
            active = np.flatnonzero(~done)
            if len(active) == 0:
                break
            Ua = U[active]
            excess = self.locality_excess(Ua)
            bad = excess > 0
            for i in active[bad]:
                failure[i] = f"locality ball left by {excess[active == i][0]:.3g} at iteration {it}"
                done[i] = True
            keep = active[~bad]
            if len(keep) == 0:
                continue
            new = self.apply(U[keep], inc[keep], noise[keep])
            if not np.all(np.isfinite(new)):
                fin = np.all(np.isfinite(new.reshape(len(keep), -1)), axis=1)
                for i in keep[~fin]:
                    failure[i] = f"non-finite iterate at iteration {it}"
                    done[i] = True
                new, keep = new[fin], keep[fin]
            res = self.sup_norm(new - U[keep])
            U[keep] = new
            for i, r in zip(keep, res):
                residuals[i].append(float(r))
                iters[i] = it
                if r <= self.config.tol:
                    done[i] = True
        out = []
        for i in range(B):
            conv = failure[i] is None and bool(residuals[i]) and residuals[i][-1] <= self.config.tol
            if failure[i] is None and not conv:
                failure[i] = f"no convergence in {self.config.max_iter} iterations"
            out.append(PathSolution(self.times.copy(), U[i], residuals[i], _q_hat(residuals[i]),
                                    conv, int(iters[i]), int(paths[i]), failure[i]))
        return out


def _is_zero(g: NemytskiiFn) -> bool:
    return g.name.strip() == "0"


def _q_hat(res: list[float]) -> float:
    """Largest ratio of successive Picard residuals (0 if the map was constant)."""
    if len(res) < 2:
        return 0.0
    ratios = [b / a for a, b in zip(res[:-1], res[1:]) if a > 0]
    return max(ratios) if ratios else 0.0


def _basis(M: SpectralMeasure, grid: Grid, K: int, symmetry: str) -> CameronMartinBasis:
    try:
        return build_basis(M, grid, K, symmetry)
    except RankError:
        avail = _basis_dimension(M, grid, symmetry)
        warnings.warn(f"truncation K = {K} exceeds the basis dimension; using K = {avail}",
                      stacklevel=3)
        return build_basis(M, grid, avail, symmetry)


def _basis_dimension(M: SpectralMeasure, grid: Grid, symmetry: str) -> int:
    w = M.grid_weights(grid)
    n_pos = int(np.count_nonzero(w > 0))
    zero_pos = tuple([grid.n_points // 2] * grid.dim)
    has_zero = w[zero_pos] > 0
    pairs = (n_pos - int(has_zero)) // 2
    return int(has_zero) + (2 * pairs if symmetry == "hermitian" else pairs)


def _as_trajectory(u, n_t: int, grid: Grid) -> np.ndarray:
    if isinstance(u, (list, tuple)):
        u = np.stack([f.values if isinstance(f, Field) else np.asarray(f) for f in u])
    u = np.asarray(u, dtype=complex)
    if u.shape != (n_t,) + grid.shape:
        raise ValueError(f"trajectory has shape {u.shape}, expected {(n_t,) + grid.shape}")
    return u


def picard_map(spec: CauchyProblemSpec, config: SolverConfig, path: NoisePath, u,
               horizon: float | None = None, solver: PicardSolver | None = None) -> np.ndarray:
    """One application of the map to a trajectory ``u`` of shape ``(n+1, *shape)``."""
    solver = solver or PicardSolver(spec, config, horizon)
    U = _as_trajectory(u, solver.n_steps + 1, solver.grid)
    if path.n_steps != solver.n_steps:
        raise ValueError("noise path has a different number of steps")
    if path.K < solver.K:
        raise ValueError(f"noise path has K = {path.K} < {solver.K}")
    excess = float(solver.locality_excess(U[None])[0])
    if excess > 0:
        raise LocalityError(f"trajectory leaves the locality ball by {excess:.3g}")
    return solver.apply(U[None], path.increments[None])[0]


def solve_path(spec: CauchyProblemSpec, config: SolverConfig, path: NoisePath | int = 0,
               horizon: float | None = None, initial=None, solver: PicardSolver | None = None
               ) -> PathSolution:
    """Fixed point of the map for one noise path, started from ``v0`` or ``initial``."""
    solver = solver or PicardSolver(spec, config, horizon)
    if isinstance(path, int):
        path = sample_increments(solver.K, solver.n_steps, solver.dt, config.seed, path)
    U0 = None if initial is None else _as_trajectory(initial, solver.n_steps + 1, solver.grid)[None]
    return solver.iterate(path.increments[None, :, : solver.K], [path.path], U0)[0]


def solve_paths(spec: CauchyProblemSpec, config: SolverConfig, paths: Sequence[int] | None = None,
                horizon: float | None = None, solver: PicardSolver | None = None
                ) -> list[PathSolution]:
    """Solve many paths in fixed-size chunks, optionally on a thread pool.

    Chunking does not depend on the thread count, and results are returned by
    path index, so the output is identical for any ``threads``.
    """
    solver = solver or PicardSolver(spec, config, horizon)
    paths = list(range(config.paths)) if paths is None else list(paths)
    chunks = [paths[i : i + config.chunk] for i in range(0, len(paths), config.chunk)]

    def run(chunk):
        return solver.iterate(solver.increments(chunk), chunk)

    if config.threads > 1 and len(chunks) > 1:
        _warm_cache(solver)
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return [s for chunk in results for s in chunk]


def _warm_cache(solver: PicardSolver):
    # populate the propagator cache before parallel sections
    if solver._fast:
        return
    zero = np.zeros((1, solver.n_steps) + solver.grid.shape, complex)
    solver.convolve(zero, zero)


# --- contraction horizon --------------------------------------------------------

@dataclass
class SweepReport:
    T0: float
    sweep: list  # (horizon, q_hat)
    certificate_q: float
    certified: bool
    threshold: float = CONTRACTION_THRESHOLD

    def as_dict(self) -> dict:
        return {"T0": self.T0, "sweep": [{"T": t, "q_hat": q} for t, q in self.sweep],
                "certificate_q": self.certificate_q, "certified": self.certified,
                "threshold": self.threshold}


def contraction_factor(spec: CauchyProblemSpec, config: SolverConfig, horizon: float,
                       n_pairs: int = 5, n_paths: int = 3, seed: int = 0,
                       solver: PicardSolver | None = None) -> float:
    """``max_pairs (E sup_t ||Tu1 - Tu2||^2 / sup_t ||u1 - u2||^2)^(1/2)`` over random pairs.

    Pairs are ``v0 + d`` with ``d`` smooth random perturbations inside the
    locality balls; the expectation runs over ``n_paths`` noise paths.
    """
    solver = solver or PicardSolver(spec, config, horizon)
    if _is_zero(spec.gamma) and _is_zero(spec.sigma):
        return 0.0
    rng = np.random.default_rng([int(seed), 7919])
    radius = _perturbation_radius(spec)
    paths = list(range(n_paths))
    inc = solver.increments(paths)
    worst = 0.0
    n_t = solver.n_steps + 1
    for _ in range(n_pairs):
        pair = []
        for _ in range(2):
            base = random_smooth_fields(solver.grid, 1, spec.index, radius, rng)[0].values
            prof = rng.uniform(0.5, 1.0, n_t)
            pair.append(solver.v0 + prof.reshape((n_t,) + (1,) * solver.grid.dim) * base)
        U1 = np.broadcast_to(pair[0], (n_paths,) + pair[0].shape)
        U2 = np.broadcast_to(pair[1], (n_paths,) + pair[1].shape)
        if np.any(solver.locality_excess(U1) > 0) or np.any(solver.locality_excess(U2) > 0):
            return math.inf
        num = solver.sup_norm(solver.apply(U1, inc) - solver.apply(U2, inc)) ** 2
        den = float(solver.sup_norm((pair[0] - pair[1])[None])[0]) ** 2
        if den > 0:
            worst = max(worst, math.sqrt(math.fsum(num) / n_paths / den))
    return worst


def _perturbation_radius(spec: CauchyProblemSpec) -> float:
    radii = [g.locality.radius for g in (spec.gamma, spec.sigma) if g.locality is not None]
    return 0.25 * min(radii) if radii else 0.5


def sweep_T0(spec: CauchyProblemSpec, config: SolverConfig, n_pairs: int = 5, n_paths: int = 3
             ) -> SweepReport:
    """Largest ``T0`` in ``T, T/2, T/4, ...`` (not below ``dt``) with ``q_hat < 0.9``,
    then re-measured on fresh pairs as a certificate."""
    sweep = []
    horizon = spec.T
    while horizon >= config.dt * (1 - 1e-9):
        q = contraction_factor(spec, config, horizon, n_pairs, n_paths, seed=config.seed)
        sweep.append((horizon, q))
        if q < CONTRACTION_THRESHOLD:
            cert = contraction_factor(spec, config, horizon, n_pairs, n_paths, seed=config.seed + 1)
            return SweepReport(horizon, sweep, cert, cert < CONTRACTION_THRESHOLD)
        horizon /= 2
    raise NonConvergenceError(
        "no contraction horizon above dt: " + ", ".join(f"T={t:g}: q={q:.3g}" for t, q in sweep)
    )


def estimate_T0(spec: CauchyProblemSpec, config: SolverConfig, **kw) -> float:
    return sweep_T0(spec, config, **kw).T0


def uniqueness_check(spec: CauchyProblemSpec, config: SolverConfig, path: int = 0,
                     horizon: float | None = None) -> tuple[float, list[PathSolution]]:
    """Solve from ``v0``, from zero and from a perturbed ``v0``; return the largest
    ``sup_t`` distance between the fixed points."""
    solver = PicardSolver(spec, config, horizon)
    rng = np.random.default_rng([config.seed, path, 104729])
    bump = random_smooth_fields(solver.grid, 1, spec.index, _perturbation_radius(spec), rng)[0].values
    starts = [None, np.zeros_like(solver.v0), solver.v0 + bump]
    sols = [solve_path(spec, config, path, initial=s, solver=solver) for s in starts]
    dist = max(float(solver.sup_norm((a.values - b.values)[None])[0])
               for i, a in enumerate(sols) for b in sols[i + 1 :])
    return dist, sols


# --- Monte Carlo -----------------------------------------------------------------

@dataclass
class MomentsReport:
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    std_err: np.ndarray
    n_paths: int
    n_failed: int
    failures: dict
    horizon: float
    solutions: list = field(default_factory=list, repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t,mean,variance,std_err\n")
            for row in zip(self.times, self.mean, self.variance, self.std_err):
                fh.write(",".join(f"{float(v):.17g}" for v in row) + "\n")


def _moments(samples: np.ndarray):
    """Per-column mean, unbiased variance and standard error with exactly rounded sums.

    Sums run over deviations from the first sample, so identical samples give
    exactly zero variance.
    """
    P = samples.shape[0]
    shift = samples[0]
    dev = samples - shift
    s1 = np.array([math.fsum(c) for c in dev.T])
    mean = shift + s1 / P
    if P > 1:
        s2 = np.array([math.fsum(c * c) for c in dev.T])
        var = np.maximum(s2 - s1 * s1 / P, 0.0) / (P - 1)
    else:
        var = np.zeros_like(mean)
    return mean, var, np.sqrt(var / P)


def mc_moments(spec: CauchyProblemSpec, config: SolverConfig, horizon: float | None = None,
               keep_solutions: bool = False) -> MomentsReport:
    """``E ||u(t_n)||^2_{z,zeta}`` over ``config.paths`` paths with standard errors.

    ``horizon=None`` runs the horizon sweep first. Aborts if more than 10% of
    the paths fail.
    """
    if horizon is None:
        horizon = estimate_T0(spec, config)
    solver = PicardSolver(spec, config, horizon)
    sols = solve_paths(spec, config, solver=solver)
    failures = {s.path: s.failure for s in sols if not s.converged}
    if len(failures) > FAILURE_FRACTION * len(sols):
        raise PathFailureError(
            f"{len(failures)} of {len(sols)} paths failed; first: "
            + "; ".join(f"path {p}: {m}" for p, m in list(failures.items())[:3])
        )
    good = [s for s in sols if s.converged]
    X = np.stack([sk_norm_values(solver.grid, s.values, spec.index) ** 2 for s in good])
    mean, var, se = _moments(X)
    return MomentsReport(solver.times, mean, var, se, len(sols), len(failures), failures, horizon,
                         sols if keep_solutions else [])


def ou_second_moment(spec: CauchyProblemSpec, basis: CameronMartinBasis, t: float | np.ndarray,
                     discrete_dt: float | None = None) -> np.ndarray:
    """Closed-form ``E ||u(t)||^2_{L^2}`` for ``u0 = 0``, ``gamma = 0``, ``sigma = 1`` and a
    real multiplier generator ``a(xi)``: ``(2X)^d sum_xi w(xi) (1 - e^{-2ta}) / (2a)`` over the
    frequencies spanned by the basis. With ``discrete_dt`` the left-point sum
    ``dt sum_{L=1}^{n} e^{-2 L dt a}`` replaces the time integral.
    """
    g = basis.grid
    a = np.real(np.broadcast_to(spec.generator(0.0, np.zeros(g.dim), g.xi), g.shape))
    # each cosine or sine function at frequency xi carries (2X)^d w(xi) of L^2 mass
    k = np.rint(basis.frequencies / g.dxi).astype(int) + g.n_points // 2
    a_j = a[tuple(k.T)]
    w_j = basis.weights[tuple(k.T)]
    ts = np.atleast_1d(np.asarray(t, float))
    out = []
    for tt in ts:
        if discrete_dt is None:
            with np.errstate(divide="ignore", invalid="ignore"):
                phi = np.where(np.abs(a_j) > 1e-14, -np.expm1(-2 * tt * a_j) / (2 * a_j), tt)
        else:
            steps = int(round(tt / discrete_dt))
            L = np.arange(1, steps + 1)
            phi = discrete_dt * np.sum(np.exp(-2 * discrete_dt * np.multiply.outer(L, a_j)), axis=0)
        out.append((2 * g.half_width) ** g.dim * math.fsum(w_j * phi))
    return np.array(out) if np.ndim(t) else out[0]


# --- Ito isometry ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepProcess:
    """Deterministic operator-valued step function: ``ops[k]`` acts on ``[s_k, s_{k+1})``.

    Each operator maps a batch of spatial arrays to arrays of the same shape and
    must be linear.
    """

    ops: tuple
    name: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.ops)

    @classmethod
    def zero(cls, n_steps: int) -> "StepProcess":
        return cls(tuple(lambda v: np.zeros_like(v) for _ in range(n_steps)), "zero")

    @classmethod
    def identity(cls, n_steps: int) -> "StepProcess":
        return cls(tuple(lambda v: np.asarray(v, complex) for _ in range(n_steps)), "identity")

    @classmethod
    def propagated(cls, P: Propagator, t_end: float, times: Sequence[float], sigma: np.ndarray
                   ) -> "StepProcess":
        """``Phi(s_k) v = E0(t_end, s_k)[sigma v]``."""
        sig = np.asarray(sigma)

        def make(s):
            return lambda v: P.apply(t_end, s, sig * v)

        return cls(tuple(make(s) for s in times), "propagated")


@dataclass
class IsometryReport:
    mc_mean: float
    std_err: float
    hs_sum: float
    z_score: float
    ok: bool
    n_paths: int


def ito_isometry_test(spec: CauchyProblemSpec, config: SolverConfig, step_process: StepProcess,
                      n_sigma: float = 4.0) -> IsometryReport:
    """Compare ``E ||sum_k Phi_k dW_k||^2_{z,zeta}`` with ``sum_k dt sum_j ||Phi_k h_j||^2``."""
    grid = spec.grid
    basis = _basis(spec.measure, grid, config.K, config.symmetry)
    n, dt, K = step_process.n_steps, config.dt, basis.K
    hs = math.fsum(
        dt * float(np.sum(sk_norm_values(grid, op(basis.fields), spec.index) ** 2))
        for op in step_process.ops
    )
    samples = []
    for start in range(0, config.paths, config.chunk):
        chunk = list(range(start, min(start + config.chunk, config.paths)))
        inc = sample_paths(K, n, dt, config.seed, chunk)
        noise = basis.noise_fields(inc)
        total = sum(op(noise[:, k]) for k, op in enumerate(step_process.ops))
        samples.append(sk_norm_values(grid, total, spec.index) ** 2)
    X = np.concatenate(samples)[:, None]
    mean, _, se = _moments(X)
    m, s = float(mean[0]), float(se[0])
    if s == 0:
        z = 0.0 if abs(m - hs) <= 1e-12 * max(1.0, hs) else math.inf
    else:
        z = abs(m - hs) / s
    return IsometryReport(m, s, hs, z, z <= n_sigma, config.paths)


# --- linear cross-check --------------------------------------------------------

@dataclass
class CrosscheckReport:
    relative_l2: float
    relative_l2_final: float
    K: int
    K_full: int
    basis_term: np.ndarray = field(repr=False)
    synthesis_term: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.relative_l2 < 0.01


def _circular_convolution_matrix(spec_hat: np.ndarray, grid: Grid) -> np.ndarray:
    """Matrix ``C`` with ``(C v)[m] = (dxi / 2pi)^d sum_k s_hat[m - k] v[k]`` (natural order)."""
    n = grid.n_points
    s_nat = np.fft.ifftshift(spec_hat)
    idx = np.indices(grid.shape).reshape(grid.dim, -1)
    diff = (idx[:, :, None] - idx[:, None, :]) % n
    flat = np.ravel_multi_index(tuple(diff), grid.shape)
    return s_nat.ravel()[flat] * (grid.dxi / (2 * np.pi)) ** grid.dim


def linear_crosscheck(spec: CauchyProblemSpec, config: SolverConfig, path: int = 0,
                      horizon: float | None = None) -> CrosscheckReport:
    """Stochastic convolution computed two ways on one noise path.

    (a) basis expansion truncated at ``K``: ``sum_k E0(t, s_k)[sigma sum_{j<=K} h_j beta_kj]``.
    (b) frequency-space synthesis with every grid mode: the increment spectrum is
        built directly from the coefficients, multiplied by ``sigma`` as a
        circular convolution of spectra, and propagated by the symbol.
    Both use the same path; the increments are prefix-stable in ``K``.
    """
    if not spec.is_linear:
        raise HypothesisError("linear_crosscheck needs gamma and sigma independent of u")
    grid = spec.grid
    solver = PicardSolver(spec, config, horizon)
    full = _basis(spec.measure, grid, _basis_dimension(spec.measure, grid, config.symmetry),
                  config.symmetry)
    n, dt = solver.n_steps, solver.dt
    inc_full = sample_paths(full.K, n, dt, config.seed, [path])[0]

    # (a)
    noise = solver.basis.noise_fields(inc_full[:, : solver.K])[None]
    S = np.stack([spec.sigma.evaluate(solver.times[k], grid, np.zeros(grid.shape)) * noise[0, k]
                  for k in range(n)])[None]
    a_term = solver.convolve(None, S)[0]

    # (b)
    scale = (2 * np.pi / grid.dxi) ** grid.dim

    b_term = np.zeros((n + 1,) + grid.shape, complex)
    P = solver.P
    for k in range(n):
        coeffs = np.tensordot(inc_full[k], full.coefficients, axes=(0, 0))
        w_hat = mirror_frequencies(coeffs * full.weights, grid) * scale
        sig_hat = grid.fft(spec.sigma.evaluate(solver.times[k], grid, np.zeros(grid.shape)))
        C = _circular_convolution_matrix(sig_hat, grid)
        prod_nat = C @ np.fft.ifftshift(w_hat).ravel()
        prod_hat = np.fft.fftshift(prod_nat.reshape(grid.shape))
        for m in range(k + 1, n + 1):
            e = P.symbol_values(solver.times[m], solver.times[k])
            if P.base.kind == "multiplier":
                b_term[m] += grid.ifft(e * prod_hat)
            elif P.base.kind == "weight":
                b_term[m] += e * grid.ifft(prod_hat)
            else:
                mat = P.operator(solver.times[m], solver.times[k])
                b_term[m] += (mat @ prod_hat.ravel()).reshape(grid.shape)
    num = math.fsum(float(grid.l2_norm(a_term[m] - b_term[m])) ** 2 for m in range(1, n + 1))
    den = math.fsum(float(grid.l2_norm(b_term[m])) ** 2 for m in range(1, n + 1))
    rel = math.sqrt(num / den) if den > 0 else 0.0
    fin_den = float(grid.l2_norm(b_term[-1]))
    rel_final = float(grid.l2_norm(a_term[-1] - b_term[-1])) / fin_den if fin_den > 0 else 0.0
    return CrosscheckReport(rel, rel_final, solver.K, full.K, a_term, b_term)
