"""Uniform periodic grids on [-X, X)^d, discrete Fourier transforms and quadrature.

Fourier convention: ``u_hat(xi) = int exp(-i x.xi) u(x) dx``, discretized as
``u_hat(xi_k) = h^d sum_j exp(-i x_j.xi_k) u(x_j)`` with inverse
``u(x_j) = (2 pi)^-d dxi^d sum_k exp(i x_j.xi_k) u_hat(xi_k)``.

Spatial arrays are stored with ``x_j = -X + j h``. Frequency arrays are stored
internally in the symmetric (fftshift) layout, ascending from ``-xi_max``.
Serialized frequency fields use the natural FFT order instead.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "GridMismatchError",
    "forward_dft",
    "inverse_dft",
    "quadrature",
    "save_field",
    "load_field",
]


class GridMismatchError(ValueError):
    """Raised when two fields living on different grids are combined."""


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``n_points`` nodes per axis on ``[-half_width, half_width)^dim``."""

    dim: int
    n_points: int
    half_width: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.n_points < 2 or self.n_points % 2:
            raise ValueError(f"n_points must be a positive even integer, got {self.n_points}")
        if not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.n_points

    @property
    def dxi(self) -> float:
        return np.pi / self.half_width

    @property
    def xi_max(self) -> float:
        return np.pi * self.n_points / (2.0 * self.half_width)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_points,) * self.dim

    @property
    def size(self) -> int:
        return self.n_points**self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    @cached_property
    def x1d(self) -> np.ndarray:
        return -self.half_width + self.h * np.arange(self.n_points)

    @cached_property
    def xi1d(self) -> np.ndarray:
        """Frequencies in ascending (shifted) order."""
        k = np.arange(self.n_points) - self.n_points // 2
        return k * self.dxi

    @cached_property
    def x(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``."""
        return _mesh(self.x1d, self.dim)

    @cached_property
    def xi(self) -> np.ndarray:
        """Frequency coordinates in shifted layout, shape ``(*shape, dim)``."""
        return _mesh(self.xi1d, self.dim)

    @cached_property
    def _phase(self) -> np.ndarray:
        # exp(i X xi_k) = (-1)^k, per axis, in natural FFT order
        k = np.fft.fftfreq(self.n_points, 1.0 / self.n_points).astype(int)
        s1 = np.where(k % 2 == 0, 1.0, -1.0)
        out = s1
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, s1)
        return out

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on frequencies with any component at ``-xi_max`` (no mirror on the grid)."""
        edge = np.zeros(self.n_points, dtype=bool)
        edge[0] = True
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            idx = [np.newaxis] * self.dim
            idx[ax] = slice(None)
            mask = mask | edge[tuple(idx)]
        return mask

    def fft(self, values: np.ndarray) -> np.ndarray:
        """Forward transform over the trailing ``dim`` axes, shifted output."""
        spec = np.fft.fftn(values, axes=self.axes) * (self._phase * self.h**self.dim)
        return np.fft.fftshift(spec, axes=self.axes)

    def ifft(self, spectrum: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`fft`."""
        spec = np.fft.ifftshift(spectrum, axes=self.axes) * self._phase
        return np.fft.ifftn(spec, axes=self.axes) / self.h**self.dim

    def l2_norm(self, values: np.ndarray) -> np.ndarray:
        """``(h^d sum |v|^2)^(1/2)`` over the trailing axes."""
        return np.sqrt(self.h**self.dim * np.sum(np.abs(values) ** 2, axis=self.axes))

    def spectral_l2_norm(self, spectrum: np.ndarray) -> np.ndarray:
        """L2 norm of the function whose transform is ``spectrum`` (Parseval)."""
        s = np.sum(np.abs(spectrum) ** 2, axis=self.axes) * self.dxi**self.dim
        return np.sqrt(s / (2 * np.pi) ** self.dim)

    def field(self, values, domain: str = "x") -> "Field":
        return Field(self, np.asarray(values, dtype=complex), domain)

    def from_function(self, func) -> "Field":
        """Sample ``func(x)`` with ``x`` of shape ``(*shape, dim)``."""
        return self.field(func(self.x))

    def boundary_max(self, values: np.ndarray) -> float:
        """Largest modulus on the outermost layer of nodes (wrap-around guard)."""
        v = np.abs(np.asarray(values))
        out = 0.0
        for ax in range(self.dim):
            out = max(out, float(np.take(v, 0, axis=ax - self.dim).max()))
            out = max(out, float(np.take(v, -1, axis=ax - self.dim).max()))
        return out


def _mesh(c: np.ndarray, dim: int) -> np.ndarray:
    return np.stack(np.meshgrid(*([c] * dim), indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class Field:
    """Complex samples on a :class:`Grid`, either in space (``"x"``) or frequency (``"xi"``)."""

    grid: Grid
    values: np.ndarray = field(repr=False)
    domain: str = "x"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ValueError(f"values have shape {v.shape}, grid expects {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if self.domain not in ("x", "xi"):
            raise ValueError(f"unknown domain {self.domain!r}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def _check(self, other: "Field"):
        if other.grid != self.grid:
            raise GridMismatchError(f"{self.grid} vs {other.grid}")
        if other.domain != self.domain:
            raise GridMismatchError(f"domain {self.domain} vs {other.domain}")

    def _binary(self, other, op):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, op(self.values, other.values), self.domain)
        return Field(self.grid, op(self.values, other), self.domain)

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values, self.domain)

    def norm(self) -> float:
        if self.domain == "x":
            return float(self.grid.l2_norm(self.values))
        return float(self.grid.spectral_l2_norm(self.values))

    @property
    def real(self) -> np.ndarray:
        return self.values.real


def _finite(f: Field):
    if not np.all(np.isfinite(f.values)):
        raise ValueError("non-finite field")


def forward_dft(f: Field) -> Field:
    """Transform a spatial field; the result lives in the ``"xi"`` domain."""
    if f.domain != "x":
        raise ValueError("forward_dft expects a spatial field")
    _finite(f)
    return Field(f.grid, f.grid.fft(f.values), "xi")


def inverse_dft(f: Field) -> Field:
    if f.domain != "xi":
        raise ValueError("inverse_dft expects a frequency field")
    _finite(f)
    return Field(f.grid, f.grid.ifft(f.values), "x")


def quadrature(f: Field) -> complex:
    """Rectangle rule ``h^d sum f(x_j)``; exact trapezoid on the periodic cell."""
    _finite(f)
    if f.domain != "x":
        raise ValueError("quadrature expects a spatial field")
    return complex(f.grid.h**f.grid.dim * np.sum(f.values))


# --- serialization -----------------------------------------------------------

_DTYPES = {"complex128": "<c16", "complex64": "<c8"}


def save_field(f: Field, path, dtype: str = "complex128") -> tuple[Path, Path]:
    """Write ``path.bin`` (raw little-endian) and ``path.json`` (sidecar)."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    values = f.values
    if f.domain == "xi":
        values = np.fft.ifftshift(values, axes=f.grid.axes)
        layout = "frequency-natural"
        index_map = "k-th entry along an axis is xi = fftfreq(N, 1/N)[k] * pi / X"
    else:
        layout = "space"
        index_map = "j-th entry along an axis is x = -X + j * 2X/N"
    bin_path = base.with_suffix(".bin")
    meta_path = base.with_suffix(".json")
    np.ascontiguousarray(values, dtype=_DTYPES[dtype]).tofile(bin_path)
    meta = {
        "dim": f.grid.dim,
        "n_points": f.grid.n_points,
        "half_width": f.grid.half_width,
        "dtype": dtype,
        "byte_order": "little",
        "order": "C",
        "layout": layout,
        "index_map": index_map,
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return bin_path, meta_path


def load_field(path) -> Field:
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    grid = Grid(int(meta["dim"]), int(meta["n_points"]), float(meta["half_width"]))
    raw = np.fromfile(base.with_suffix(".bin"), dtype=_DTYPES[meta["dtype"]])
    values = raw.reshape(grid.shape).astype(complex)
    if meta["layout"] == "frequency-natural":
        return Field(grid, np.fft.fftshift(values, axes=grid.axes), "xi")
    return Field(grid, values, "x")
