"""Array-domain spherical harmonic transforms and order-group bookkeeping.

Spectra are complex arrays shaped ``(channel, frame, bin)``; SHC tensors are
shaped ``(coefficient, frame, bin)`` with coefficients in ACN order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, DomainError
from .sh_core import TWO_PI, Direction, design_directions, n_coeffs, order_from_count, sph_harm_matrix


class UnderdeterminedWarning(UserWarning):
    """More coefficients requested than there are microphones."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in spherical coordinates about the array center."""

    radius: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.radius, dtype=float))
        th = np.atleast_1d(np.asarray(self.theta, dtype=float))
        ph = np.mod(np.atleast_1d(np.asarray(self.phi, dtype=float)), TWO_PI)
        if not (r.shape == th.shape == ph.shape) or r.ndim != 1 or r.size < 1:
            raise ShapeError("radius, theta and phi must be equal-length 1-D arrays")
        if np.any(r < 0) or np.any(th < 0) or np.any(th > math.pi):
            raise DomainError("negative radius or theta outside [0, pi]")
        object.__setattr__(self, "radius", r)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "phi", ph)

    @property
    def n_mics(self) -> int:
        return self.radius.size

    def direction(self, i: int) -> Direction:
        return Direction(float(self.theta[i]), float(self.phi[i]))

    def positions(self) -> np.ndarray:
        """Cartesian mic positions relative to the array center, shape ``(I, 3)``."""
        st = np.sin(self.theta)
        return self.radius[:, None] * np.stack(
            [st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)], axis=1)

    def to_dict(self) -> dict:
        return {"radius": self.radius.tolist(), "theta": self.theta.tolist(), "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        return cls(d["radius"], d["theta"], d["phi"])


def uca_geometry(n_mics: int, radius: float) -> ArrayGeometry:
    """Uniform circular array in the horizontal plane, mic 0 on the +x axis."""
    if n_mics < 1 or radius <= 0:
        raise DomainError("uniform circular array needs n_mics >= 1 and radius > 0")
    phi = TWO_PI * np.arange(n_mics) / n_mics
    return ArrayGeometry(np.full(n_mics, float(radius)), np.full(n_mics, math.pi / 2), phi)


def design_geometry(t: int, radius: float) -> ArrayGeometry:
    """Spherical array whose mic directions form the bundled t-design."""
    theta, phi = design_directions(t)
    return ArrayGeometry(np.full(theta.size, float(radius)), theta, phi)


@dataclass(frozen=True)
class FrequencyGrid:
    fs: float = 16000.0
    n_fft: int = 400
    c: float = 343.0

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.fs / self.n_fft

    @property
    def wavenumbers(self) -> np.ndarray:
        return TWO_PI * self.freqs / self.c


def basis_matrix(geom: ArrayGeometry, order: int) -> np.ndarray:
    """``Y[i, nm] = Y_n^m(theta_i, phi_i)``, shape ``(I, (N+1)**2)``."""
    return sph_harm_matrix(order, geom.theta, geom.phi)


def _check_spectrum(spec, geom: ArrayGeometry, order: int) -> np.ndarray:
    spec = np.asarray(spec)
    if spec.ndim < 1 or spec.shape[0] != geom.n_mics:
        raise ShapeError(f"spectrum has {spec.shape[0] if spec.ndim else 0} channels, "
                         f"geometry has {geom.n_mics}")
    if n_coeffs(order) > geom.n_mics:
        warnings.warn(f"{n_coeffs(order)} coefficients from {geom.n_mics} microphones",
                      UnderdeterminedWarning, stacklevel=3)
    return spec


def sht_forward(spec, geom: ArrayGeometry, order: int) -> np.ndarray:
    """Equal-weight quadrature encoder ``p_nm = 4 pi / I * sum_i p_i conj(Y_n^m(dir_i))``."""
    spec = _check_spectrum(spec, geom, order)
    proj = np.conj(basis_matrix(geom, order)) * (4.0 * math.pi / geom.n_mics)
    extra = (1,) * (spec.ndim - 1)
    out = np.zeros((proj.shape[1],) + spec.shape[1:], dtype=np.complex128)
    # accumulate mic by mic so the result matches per_mic_contributions().sum(axis=1)
    for i in range(geom.n_mics):
        out += proj[i].reshape((-1,) + extra) * spec[i]
    return out


def per_mic_contributions(spec, geom: ArrayGeometry, order: int) -> np.ndarray:
    """Per-microphone terms of :func:`sht_forward`, shape ``((N+1)**2, I) + spec.shape[1:]``."""
    spec = _check_spectrum(spec, geom, order)
    proj = np.conj(basis_matrix(geom, order)) * (4.0 * math.pi / geom.n_mics)
    extra = (1,) * (spec.ndim - 1)
    return proj.T.reshape(proj.T.shape + extra) * spec[None]


def sht_forward_ls(spec, geom: ArrayGeometry, order: int, ridge: float = 1e-8) -> np.ndarray:
    """Tikhonov-regularized least-squares encoder.

    Solves ``min_p ||Y p - x||^2 + ridge ||p||^2`` for every frame and bin
    through the SVD of the basis matrix; with ``ridge=0`` this is the
    minimum-norm pseudo-inverse solution.
    """
    if ridge < 0:
        raise DomainError("ridge must be non-negative")
    spec = _check_spectrum(spec, geom, order)
    u, s, vh = np.linalg.svd(basis_matrix(geom, order), full_matrices=False)
    if ridge > 0:
        gain = s / (s * s + ridge)
    else:
        keep = s > s.max() * max(u.shape) * np.finfo(float).eps
        gain = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    pinv = (vh.conj().T * gain) @ u.conj().T
    return np.tensordot(pinv, spec, axes=(1, 0))


def sht_inverse(shc, theta, phi) -> np.ndarray:
    """Evaluate the truncated expansion at directions; output channels on axis 0."""
    shc = np.asarray(shc)
    order = order_from_count(shc.shape[0])
    ymat = sph_harm_matrix(order, np.atleast_1d(theta), np.atleast_1d(phi))
    return np.tensordot(ymat, shc, axes=(1, 0))


def order_groups(order: int) -> list[slice]:
    """ACN slices: orders 0-1 together, then one slice per order ``2..N``."""
    if order < 1:
        raise DomainError("order grouping needs N >= 1")
    return [slice(0, 4)] + [slice(n * n, (n + 1) ** 2) for n in range(2, order + 1)]


def group_sizes(order: int) -> list[int]:
    return [s.stop - s.start for s in order_groups(order)]


def partition_groups(shc) -> list[np.ndarray]:
    shc = np.asarray(shc)
    return [shc[s] for s in order_groups(order_from_count(shc.shape[0]))]


def merge_groups(groups) -> np.ndarray:
    return np.concatenate(list(groups), axis=0)
