"""Covariance kernels: isotropic RBF plus two wind-informed variants.

The wind-informed kernels augment a standard squared-exponential (RBF)
kernel with a second RBF acting on the distance *orthogonal* to the
prevailing wind direction, so that covariance decays slowly along the
wind axis and quickly across it.  ``SumParams`` adds the two terms,
``ProductParams`` multiplies them (which collapses to a single
anisotropic exponential).

Conventions, used everywhere in this package:

* the RBF exponent is ``-||tau||^2 / l^2`` (no factor of 2);
* the wind angle is pi-periodic, stored canonically in ``[0, pi)``;
* positive hyperparameters (length scales, variances) are optimised in
  log domain, the wind angle in raw radians, and gradients returned by
  :func:`kernel_gradient` follow that convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import ClassVar, Union

import numpy as np

__all__ = [
    "DEFAULT_JITTER",
    "KERNELS",
    "KernelSpec",
    "ProductParams",
    "RbfParams",
    "SumParams",
    "WindGeometry",
    "canonical_angle",
    "crosswind_projector",
    "elongation_matrix",
    "gram_matrix",
    "kernel_gradient",
    "n_hyperparameters",
    "orthogonal_distance",
    "pairwise_displacements",
    "product_kernel",
    "rbf",
    "sum_kernel",
    "wind_vector",
]

# Stability jitter added to the Gram diagonal by default.
DEFAULT_JITTER = 1e-8


def canonical_angle(angle: float) -> float:
    """Wrap an angle into ``[0, pi)``; the kernels are pi-periodic in it."""
    return float(angle) % math.pi


def wind_vector(angle: float) -> np.ndarray:
    """Unit vector ``[cos(angle), sin(angle)]`` along the wind axis."""
    return np.array([math.cos(angle), math.sin(angle)])


def crosswind_projector(angle: float) -> np.ndarray:
    """2x2 projector onto the direction orthogonal to the wind axis.

    Equals ``I - b b^T`` for the unit wind vector ``b``; symmetric and
    idempotent with eigenvalues {0, 1}.
    """
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[s * s, -s * c], [-s * c, c * c]])


def elongation_matrix(
    length_scale: float, directional_length_scale: float, angle: float
) -> np.ndarray:
    """Matrix ``E = (l_D^2 / l^2) I + A`` of the product kernel's closed form."""
    ratio = (directional_length_scale / length_scale) ** 2
    return ratio * np.eye(2) + crosswind_projector(angle)


@dataclass(frozen=True)
class WindGeometry:
    """Derived wind geometry: unit vector, crosswind projector, elongation.

    Always computed from ``(angle, length scales)`` via :meth:`from_params`;
    never free state of its own.
    """

    wind: np.ndarray
    projector: np.ndarray
    elongation: np.ndarray

    @classmethod
    def from_params(
        cls, angle: float, length_scale: float, directional_length_scale: float
    ) -> "WindGeometry":
        return cls(
            wind=wind_vector(angle),
            projector=crosswind_projector(angle),
            elongation=elongation_matrix(length_scale, directional_length_scale, angle),
        )


def _check_positive(obj) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if not math.isfinite(v):
            raise ValueError(f"{type(obj).__name__}.{f.name} must be finite, got {v!r}")
        if f.name != "wind_angle" and v <= 0.0:
            raise ValueError(f"{type(obj).__name__}.{f.name} must be > 0, got {v!r}")


@dataclass(frozen=True)
class RbfParams:
    """Isotropic squared-exponential: ``sv * exp(-||tau||^2 / l^2)``."""

    length_scale: float
    signal_variance: float

    kind: ClassVar[str] = "rbf"
    param_names: ClassVar[tuple] = ("length_scale", "signal_variance")

    def __post_init__(self):
        _check_positive(self)

    def k0(self) -> float:
        return self.signal_variance

    def to_theta(self) -> np.ndarray:
        return np.log([self.length_scale, self.signal_variance])

    @classmethod
    def from_theta(cls, theta) -> "RbfParams":
        return cls(math.exp(theta[0]), math.exp(theta[1]))

    def value(self, dx, dy):
        sq = (np.asarray(dx) ** 2 + np.asarray(dy) ** 2) / self.length_scale**2
        return self.signal_variance * np.exp(-sq)

    def gradients(self, dx, dy):
        sq = (np.asarray(dx) ** 2 + np.asarray(dy) ** 2) / self.length_scale**2
        k = self.signal_variance * np.exp(-sq)
        return [k * 2.0 * sq, k]


@dataclass(frozen=True)
class SumParams:
    """Wind-informed sum kernel: RBF plus an RBF on the crosswind distance."""

    length_scale: float
    directional_length_scale: float
    signal_variance: float
    directional_signal_variance: float
    wind_angle: float

    kind: ClassVar[str] = "sum"
    param_names: ClassVar[tuple] = (
        "length_scale",
        "directional_length_scale",
        "signal_variance",
        "directional_signal_variance",
        "wind_angle",
    )

    def __post_init__(self):
        _check_positive(self)
        object.__setattr__(self, "wind_angle", canonical_angle(self.wind_angle))

    def k0(self) -> float:
        return self.signal_variance + self.directional_signal_variance

    def to_theta(self) -> np.ndarray:
        return np.array(
            [
                math.log(self.length_scale),
                math.log(self.directional_length_scale),
                math.log(self.signal_variance),
                math.log(self.directional_signal_variance),
                self.wind_angle,
            ]
        )

    @classmethod
    def from_theta(cls, theta) -> "SumParams":
        return cls(
            math.exp(theta[0]),
            math.exp(theta[1]),
            math.exp(theta[2]),
            math.exp(theta[3]),
            float(theta[4]),
        )

    def _terms(self, dx, dy):
        dx = np.asarray(dx)
        dy = np.asarray(dy)
        c, s = math.cos(self.wind_angle), math.sin(self.wind_angle)
        along = dx * c + dy * s
        across = dy * c - dx * s
        sq = (dx**2 + dy**2) / self.length_scale**2
        dq = across**2 / self.directional_length_scale**2
        radial = self.signal_variance * np.exp(-sq)
        directional = self.directional_signal_variance * np.exp(-dq)
        return radial, directional, sq, dq, along, across

    def value(self, dx, dy):
        radial, directional, *_ = self._terms(dx, dy)
        return radial + directional

    def gradients(self, dx, dy):
        radial, directional, sq, dq, along, across = self._terms(dx, dy)
        d_angle = directional * 2.0 * along * across / self.directional_length_scale**2
        return [radial * 2.0 * sq, directional * 2.0 * dq, radial, directional, d_angle]


@dataclass(frozen=True)
class ProductParams:
    """Wind-informed product kernel: RBF times an RBF on the crosswind distance."""

    length_scale: float
    directional_length_scale: float
    signal_variance: float
    wind_angle: float

    kind: ClassVar[str] = "product"
    param_names: ClassVar[tuple] = (
        "length_scale",
        "directional_length_scale",
        "signal_variance",
        "wind_angle",
    )

    def __post_init__(self):
        _check_positive(self)
        object.__setattr__(self, "wind_angle", canonical_angle(self.wind_angle))

    def k0(self) -> float:
        return self.signal_variance

    def to_theta(self) -> np.ndarray:
        return np.array(
            [
                math.log(self.length_scale),
                math.log(self.directional_length_scale),
                math.log(self.signal_variance),
                self.wind_angle,
            ]
        )

    @classmethod
    def from_theta(cls, theta) -> "ProductParams":
        return cls(math.exp(theta[0]), math.exp(theta[1]), math.exp(theta[2]), float(theta[3]))

    def _terms(self, dx, dy):
        dx = np.asarray(dx)
        dy = np.asarray(dy)
        c, s = math.cos(self.wind_angle), math.sin(self.wind_angle)
        along = dx * c + dy * s
        across = dy * c - dx * s
        sq = (dx**2 + dy**2) / self.length_scale**2
        dq = across**2 / self.directional_length_scale**2
        return self.signal_variance * np.exp(-sq - dq), sq, dq, along, across

    def value(self, dx, dy):
        k, *_ = self._terms(dx, dy)
        return k

    def gradients(self, dx, dy):
        k, sq, dq, along, across = self._terms(dx, dy)
        d_angle = k * 2.0 * along * across / self.directional_length_scale**2
        return [k * 2.0 * sq, k * 2.0 * dq, k, d_angle]


KernelSpec = Union[RbfParams, SumParams, ProductParams]

KERNELS = {cls.kind: cls for cls in (RbfParams, SumParams, ProductParams)}


def n_hyperparameters(kind: str) -> int:
    """Number of fitted hyperparameters for a kernel kind, noise included."""
    return len(KERNELS[kind].param_names) + 1


def _as_displacement(tau) -> tuple:
    dx, dy = float(tau[0]), float(tau[1])
    if not (math.isfinite(dx) and math.isfinite(dy)):
        raise ValueError(f"displacement must be finite, got ({dx!r}, {dy!r})")
    return dx, dy


def orthogonal_distance(tau, angle: float) -> float:
    """Norm of the component of ``tau`` orthogonal to the wind direction.

    Computed as ``||tau - (tau . b) b||`` for the unit wind vector ``b``;
    always in ``[0, ||tau||]``.
    """
    dx, dy = _as_displacement(tau)
    return abs(dy * math.cos(angle) - dx * math.sin(angle))


def rbf(tau, params: RbfParams) -> float:
    """Isotropic RBF covariance at displacement ``tau``."""
    dx, dy = _as_displacement(tau)
    return float(params.value(dx, dy))


def sum_kernel(tau, params: SumParams) -> float:
    """Wind-informed sum covariance at displacement ``tau``."""
    dx, dy = _as_displacement(tau)
    return float(params.value(dx, dy))


def product_kernel(tau, params: ProductParams) -> float:
    """Wind-informed product covariance at displacement ``tau``."""
    dx, dy = _as_displacement(tau)
    return float(params.value(dx, dy))


def kernel_gradient(tau, spec: KernelSpec) -> np.ndarray:
    """Partial derivatives of the kernel value at ``tau``.

    One entry per hyperparameter in ``spec.param_names`` order; taken with
    respect to the log of each positive parameter and raw radians for the
    wind angle.
    """
    dx, dy = _as_displacement(tau)
    return np.array([float(g) for g in spec.gradients(dx, dy)])


def pairwise_displacements(points) -> tuple:
    """Pairwise ``(dx, dy)`` matrices for an ``(n, 2)`` array of locations."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (n, 2) locations, got shape {pts.shape}")
    dx = pts[:, 0][:, None] - pts[:, 0][None, :]
    dy = pts[:, 1][:, None] - pts[:, 1][None, :]
    return dx, dy


def gram_matrix(
    points,
    spec: KernelSpec,
    noise_variance: float = 0.0,
    jitter: float = DEFAULT_JITTER,
) -> np.ndarray:
    """Covariance matrix of ``points`` with noise and jitter on the diagonal.

    ``K[i, j] = k(x_i - x_j)`` off the diagonal and ``k(0) + noise + jitter``
    on it.  Symmetric by construction.
    """
    if noise_variance < 0.0 or jitter < 0.0:
        raise ValueError("noise_variance and jitter must be >= 0")
    dx, dy = pairwise_displacements(points)
    k = np.atleast_2d(spec.value(dx, dy))
    k[np.diag_indices_from(k)] += noise_variance + jitter
    return k
