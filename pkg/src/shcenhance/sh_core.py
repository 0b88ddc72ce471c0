"""Complex spherical harmonics and quadrature on the unit sphere.

Conventions
-----------
* ``theta`` is the polar angle measured from +z, in ``[0, pi]``.
* ``phi`` is the azimuth measured counterclockwise from +x, in ``[0, 2 pi)``.
* Coefficients are stored in ACN order, ``i = n**2 + n + m``.
* The Condon-Shortley phase ``(-1)**m`` is part of the normalized Legendre
  function, so ``Y_n^{-m} = (-1)**m conj(Y_n^m)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "Direction",
    "HarmonicIndex",
    "QuadratureGrid",
    "PrecisionWarning",
    "SHAnalysis",
    "acn_index",
    "acn_unindex",
    "n_coeffs",
    "order_from_count",
    "assoc_legendre_norm",
    "legendre_table",
    "sph_harm",
    "sph_harm_matrix",
    "quadrature_grid",
    "design_directions",
    "available_designs",
    "sh_analyze_continuous",
    "sh_synthesize",
]

TWO_PI = 2.0 * math.pi


class PrecisionWarning(UserWarning):
    """Quadrature not exact for the requested order."""


@dataclass(frozen=True)
class Direction:
    theta: float
    phi: float

    def __post_init__(self):
        if not (0.0 <= self.theta <= math.pi) or not math.isfinite(self.theta):
            raise DomainError(f"theta={self.theta} outside [0, pi]")
        object.__setattr__(self, "phi", float(self.phi) % TWO_PI)

    def unit_vector(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])


@dataclass(frozen=True)
class HarmonicIndex:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise DomainError(f"invalid harmonic index (n={self.n}, m={self.m})")

    @property
    def acn(self) -> int:
        return acn_index(self.n, self.m)


def acn_index(n: int, m: int) -> int:
    if n < 0 or abs(m) > n:
        raise DomainError(f"invalid harmonic index (n={n}, m={m})")
    return n * n + n + m


def acn_unindex(i: int) -> HarmonicIndex:
    if i < 0:
        raise DomainError(f"negative ACN index {i}")
    n = math.isqrt(i)
    return HarmonicIndex(n, i - n * n - n)


def n_coeffs(order: int) -> int:
    return (order + 1) ** 2


def order_from_count(count: int) -> int:
    order = math.isqrt(count) - 1
    if (order + 1) ** 2 != count:
        raise DomainError(f"{count} is not a valid coefficient count (must be (N+1)^2)")
    return order


def legendre_table(order: int, x) -> np.ndarray:
    """Fully normalized associated Legendre functions for all ``0 <= m <= n <= order``.

    Returns an array of shape ``(order + 1, order + 1) + x.shape`` indexed
    ``[n, m]``; entries with ``m > n`` are zero. Values include the
    ``sqrt((2n+1)/(4 pi) (n-m)!/(n+m)!)`` factor and the Condon-Shortley phase,
    so ``Y_n^m = P[n, m] * exp(1j m phi)``.

    Uses the standard upward recurrences in ``n`` at fixed ``m``, seeded by the
    sectoral terms, which avoids factorial ratios entirely.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        raise DomainError("Legendre argument must satisfy |x| <= 1")
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((order + 1, order + 1) + x.shape)
    pmm = np.full(x.shape, 1.0 / math.sqrt(4.0 * math.pi))
    for m in range(order + 1):
        if m > 0:
            pmm = -math.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        out[m, m] = pmm
        if m + 1 > order:
            break
        out[m + 1, m] = math.sqrt(2.0 * m + 3.0) * x * pmm
        for n in range(m + 2, order + 1):
            a = math.sqrt((4.0 * n * n - 1.0) / (n * n - m * m))
            b = math.sqrt(((n - 1.0) ** 2 - m * m) / (4.0 * (n - 1.0) ** 2 - 1.0))
            out[n, m] = a * (x * out[n - 1, m] - b * out[n - 2, m])
    return out


def assoc_legendre_norm(n: int, m: int, x):
    """Fully normalized ``P_n^m(x)`` for ``0 <= m <= n``, Condon-Shortley phase included."""
    if m < 0 or m > n:
        raise DomainError(f"degree m={m} outside [0, n={n}]")
    val = legendre_table(n, x)[n, m]
    return float(val) if np.ndim(val) == 0 else val


def sph_harm_matrix(order: int, theta, phi) -> np.ndarray:
    """Evaluate all ``Y_n^m`` up to ``order``.

    Parameters
    ----------
    order : int
        Truncation order N.
    theta, phi : array_like
        Polar angle and azimuth, broadcast against each other.

    Returns
    -------
    ndarray, complex, shape ``theta.shape + ((N+1)**2,)``
    """
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    leg = legendre_table(order, np.cos(theta))
    out = np.empty(theta.shape + (n_coeffs(order),), dtype=np.complex128)
    for m in range(order + 1):
        e = np.exp(1j * m * phi)
        sign = -1.0 if m % 2 else 1.0
        for n in range(m, order + 1):
            y = leg[n, m] * e
            out[..., n * n + n + m] = y
            if m:
                out[..., n * n + n - m] = sign * np.conj(y)
    return out


def sph_harm(idx: HarmonicIndex, direction: Direction) -> complex:
    """Single ``Y_n^m(theta, phi)``."""
    m = abs(idx.m)
    y = assoc_legendre_norm(idx.n, m, math.cos(direction.theta)) * np.exp(1j * m * direction.phi)
    if idx.m < 0:
        y = (-1) ** m * np.conj(y)
    return complex(y)


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and positive weights on the sphere; ``degree`` is the exactness degree."""

    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    degree: int
    kind: str = ""

    def __len__(self):
        return len(self.weights)

    @property
    def nodes(self) -> list[Direction]:
        return [Direction(float(t), float(p)) for t, p in zip(self.theta, self.phi)]

    def integrate(self, values) -> complex:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


@lru_cache(maxsize=None)
def _design_table() -> dict:
    text = resources.files("shcenhance").joinpath("data/designs.json").read_text()
    return {int(k): v for k, v in json.loads(text)["designs"].items()}


def available_designs() -> tuple[int, ...]:
    return tuple(sorted(_design_table()))


def design_directions(t: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar angles and azimuths of the bundled spherical t-design."""
    table = _design_table()
    if t not in table:
        raise ConfigError(f"no bundled spherical design of degree {t}; available: {available_designs()}")
    pts = np.asarray(table[t]["points"], dtype=np.float64)
    theta = np.arccos(np.clip(pts[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), TWO_PI)
    return theta, phi


def quadrature_grid(kind: str, n_theta: int | None = None, n_phi: int | None = None,
                    t: int | None = None) -> QuadratureGrid:
    """Build a quadrature rule on the sphere.

    ``kind="gauss-uniform"`` is a Gauss-Legendre rule in ``cos(theta)`` times a
    uniform rule in ``phi``; it is exact to degree ``min(2 n_theta - 1, n_phi - 1)``.
    ``kind="spherical-design"`` returns the bundled equal-weight t-design.
    """
    if kind == "gauss-uniform":
        if not n_theta or not n_phi or n_theta < 1 or n_phi < 1:
            raise ConfigError("gauss-uniform grid needs n_theta >= 1 and n_phi >= 1")
        x, wx = np.polynomial.legendre.leggauss(n_theta)
        phi = TWO_PI * np.arange(n_phi) / n_phi
        th, ph = np.meshgrid(np.arccos(x), phi, indexing="ij")
        w = np.repeat(wx * (TWO_PI / n_phi), n_phi)
        return QuadratureGrid(th.ravel(), ph.ravel(), w, min(2 * n_theta - 1, n_phi - 1), kind)
    if kind == "spherical-design":
        if t is None:
            raise ConfigError("spherical-design grid needs a degree t")
        th, ph = design_directions(t)
        w = np.full(len(th), 4.0 * math.pi / len(th))
        return QuadratureGrid(th, ph, w, t, kind)
    raise ConfigError(f"unknown quadrature kind {kind!r}")


@dataclass(frozen=True)
class SHAnalysis:
    coeffs: np.ndarray
    exact: bool


def sh_analyze_continuous(values, grid: QuadratureGrid, order: int) -> SHAnalysis:
    """Project sampled field values onto ``Y_n^m``, ``n <= order``.

    ``values`` has the grid nodes along axis 0; trailing axes are carried
    through. ``exact`` is False (and a :class:`PrecisionWarning` is issued)
    when the grid cannot integrate degree ``2 * order`` products exactly.
    """
    values = np.asarray(values)
    if values.shape[0] != len(grid):
        raise DomainError(f"expected {len(grid)} samples along axis 0, got {values.shape[0]}")
    ymat = sph_harm_matrix(order, grid.theta, grid.phi)
    proj = np.conj(ymat) * grid.weights[:, None]
    coeffs = np.tensordot(proj, values, axes=(0, 0))
    exact = grid.degree >= 2 * order
    if not exact:
        warnings.warn(f"grid degree {grid.degree} < {2 * order}; coefficients are approximate",
                      PrecisionWarning, stacklevel=2)
    return SHAnalysis(coeffs, exact)


def sh_synthesize(coeffs, theta, phi) -> np.ndarray:
    """Evaluate ``sum_nm c_nm Y_n^m`` at the given directions (coefficients on axis 0)."""
    coeffs = np.asarray(coeffs)
    order = order_from_count(coeffs.shape[0])
    ymat = sph_harm_matrix(order, theta, phi)
    return np.tensordot(ymat, coeffs, axes=(-1, 0))
