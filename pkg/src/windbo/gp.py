"""Exact Gaussian-process posterior inference and marginal likelihood.

Everything is built on one Cholesky factorisation of the data Gram
matrix, reused across posterior queries.  The prior mean is the zero
function: observations are assumed normalized upstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import DEFAULT_JITTER, KernelSpec, pairwise_displacements

__all__ = [
    "Dataset",
    "FactorizationFailure",
    "ModelSpec",
    "Posterior",
    "lml_gradient",
    "log_marginal_likelihood",
    "posterior",
]

# Jitter escalation ceiling; beyond this a Gram matrix is declared broken.
MAX_JITTER = 1e-2


class FactorizationFailure(RuntimeError):
    """Cholesky factorisation failed even after jitter escalation."""


@dataclass
class Dataset:
    """Observed (location, value) pairs held by the GP.

    ``locations`` is ``(n, 2)`` float, ``values`` ``(n,)`` float, in
    whatever coordinate units the kernel length scales live in.
    """

    locations: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(self.locations) != len(self.values):
            raise ValueError(
                f"locations ({len(self.locations)}) and values ({len(self.values)}) "
                "must have equal length"
            )

    def __len__(self) -> int:
        return len(self.values)

    def with_observation(self, location, value: float) -> "Dataset":
        """New dataset with one more (location, value) pair appended."""
        return Dataset(
            np.vstack([self.locations, np.asarray(location, dtype=float).reshape(1, 2)]),
            np.append(self.values, float(value)),
        )

    def has_duplicates(self) -> bool:
        if len(self) < 2:
            return False
        return len(np.unique(self.locations, axis=0)) < len(self.locations)


@dataclass(frozen=True)
class ModelSpec:
    """Kernel choice plus observation-noise variance."""

    kernel: KernelSpec
    noise_variance: float = 0.0

    def __post_init__(self):
        if self.noise_variance < 0.0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance!r}")


@dataclass
class Posterior:
    """Posterior mean and standard deviation at the query points."""

    mean: np.ndarray
    std: np.ndarray


def _gram(data: Dataset, model: ModelSpec, jitter: float) -> np.ndarray:
    dx, dy = pairwise_displacements(data.locations)
    k = np.atleast_2d(model.kernel.value(dx, dy))
    k[np.diag_indices_from(k)] += model.noise_variance + jitter
    return k


def _factorize(data: Dataset, model: ModelSpec, jitter: float):
    """Cholesky of the data Gram matrix, escalating jitter tenfold on failure.

    Returns ``(L, alpha, jitter_used)`` with ``alpha = K^{-1} y``.
    """
    if data.has_duplicates() and model.noise_variance + jitter == 0.0:
        raise ValueError("duplicate locations require positive noise or jitter")
    current = jitter
    while True:
        try:
            chol = np.linalg.cholesky(_gram(data, model, current))
        except np.linalg.LinAlgError:
            nxt = current * 10.0 if current > 0.0 else 1e-10
            if nxt > MAX_JITTER:
                raise FactorizationFailure(
                    f"Gram matrix not positive definite up to jitter {current:g} "
                    f"(n={len(data)}, kernel={model.kernel.kind})"
                ) from None
            current = nxt
            continue
        alpha = cho_solve((chol, True), data.values)
        return chol, alpha, current


def posterior(
    data: Dataset, model: ModelSpec, queries, jitter: float = DEFAULT_JITTER
) -> Posterior:
    """Exact GP posterior at ``queries`` given ``data``.

    With no data the prior is returned: zero mean, std ``sqrt(k(0) + noise)``.

    Raises
    ------
    FactorizationFailure
        If the data Gram matrix stays indefinite through jitter escalation.
    """
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    prior_var = model.kernel.k0() + model.noise_variance
    if len(data) == 0:
        return Posterior(
            mean=np.zeros(len(queries)),
            std=np.full(len(queries), np.sqrt(prior_var)),
        )
    chol, alpha, _ = _factorize(data, model, jitter)
    dxs = data.locations[:, 0][:, None] - queries[:, 0][None, :]
    dys = data.locations[:, 1][:, None] - queries[:, 1][None, :]
    k_star = model.kernel.value(dxs, dys)  # (n, m)
    mean = k_star.T @ alpha
    v = solve_triangular(chol, k_star, lower=True)
    var = np.maximum(prior_var - np.sum(v * v, axis=0), 0.0)
    return Posterior(mean=mean, std=np.sqrt(var))


def log_marginal_likelihood(
    data: Dataset, model: ModelSpec, jitter: float = DEFAULT_JITTER
) -> float:
    """Log marginal likelihood of ``data`` under ``model``.

    ``-y^T K^{-1} y / 2 - log|K| / 2 - n log(2 pi) / 2`` via Cholesky.
    """
    if len(data) == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    chol, alpha, _ = _factorize(data, model, jitter)
    return float(
        -0.5 * data.values @ alpha
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * len(data) * np.log(2.0 * np.pi)
    )


def lml_gradient(
    data: Dataset, model: ModelSpec, jitter: float = DEFAULT_JITTER
) -> np.ndarray:
    """Gradient of the log marginal likelihood over all hyperparameters.

    Ordering matches ``model.kernel.param_names`` (log domain for positive
    parameters, radians for the wind angle) with ``log(noise_variance)``
    last.  Uses ``dLML/dtheta = tr((a a^T - K^{-1}) dK/dtheta) / 2``.
    """
    if len(data) == 0:
        raise ValueError("lml gradient needs at least one observation")
    chol, alpha, _ = _factorize(data, model, jitter)
    k_inv = cho_solve((chol, True), np.eye(len(data)))
    dx, dy = pairwise_displacements(data.locations)
    grads = []
    for dk in model.kernel.gradients(dx, dy):
        dk = np.atleast_2d(dk)
        grads.append(0.5 * (alpha @ dk @ alpha - np.sum(k_inv * dk)))
    # noise enters the diagonal only: dK/dlog(noise) = noise * I
    grads.append(
        0.5 * model.noise_variance * (alpha @ alpha - np.trace(k_inv))
    )
    return np.array(grads)
