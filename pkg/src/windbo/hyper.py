"""Hyperparameter machinery: prior estimation, multi-start fitting, BIC.

Priors are independent log-normals over every positive hyperparameter
(length scales, variances, observation noise) plus a fixed uniform prior
on the wind angle.  They are estimated from tuning images by maximising
the log marginal likelihood per image and fitting a log-normal to the
per-image optima.  Fitting itself is plain gradient ascent with Armijo
backtracking, restarted from prior draws (or broad ranges when no prior
exists yet), best restart wins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve

from . import gp
from .kernels import DEFAULT_JITTER, KERNELS, KernelSpec, n_hyperparameters, pairwise_displacements

__all__ = [
    "AllRestartsFailed",
    "BicScore",
    "FitResult",
    "HyperPrior",
    "LogNormalParams",
    "NonPositiveSample",
    "PriorConstructionFailure",
    "bic",
    "build_priors",
    "fit_lognormal",
    "fit_tuning_images",
    "multistart_fit",
    "priors_from_fits",
    "theta_names",
]

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 30
MAX_STEP = 1024.0
ANGLE_LINE = "gamma uniform 0 pi"
# sigma_log assigned to degenerate (zero-spread) prior components before use
WIDENED_SIGMA = 0.1


class NonPositiveSample(ValueError):
    """A log-normal fit received a sample <= 0."""


class PriorConstructionFailure(RuntimeError):
    """Every tuning image failed to produce a hyperparameter sample."""


class AllRestartsFailed(RuntimeError):
    """Every restart of a multi-start fit raised FactorizationFailure."""


def theta_names(kind: str) -> tuple:
    """Canonical hyperparameter ordering for a kernel kind, noise last."""
    return KERNELS[kind].param_names + ("noise_variance",)


@dataclass(frozen=True)
class LogNormalParams:
    """Log-normal prior component; degenerate marks a single-sample fit."""

    mu_log: float
    sigma_log: float
    degenerate: bool = False

    def __post_init__(self):
        if self.sigma_log < 0.0:
            raise ValueError(f"sigma_log must be >= 0, got {self.sigma_log!r}")

    def log_pdf(self, value: float) -> float:
        """Log density of the log-normal at a positive value."""
        w = math.log(value)
        z = (w - self.mu_log) / self.sigma_log
        return -w - math.log(self.sigma_log) - 0.5 * math.log(2.0 * math.pi) - 0.5 * z * z


def fit_lognormal(samples, bessel: bool = True) -> LogNormalParams:
    """Maximum-likelihood log-normal fit to positive samples.

    ``bessel`` switches the variance denominator from ``n`` to ``n - 1``.
    A single sample yields ``sigma_log = 0`` with the degenerate flag set.

    Raises
    ------
    NonPositiveSample
        If any sample is <= 0 (or the list is empty).
    """
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise NonPositiveSample("need at least one positive sample")
    if np.any(arr <= 0.0) or not np.all(np.isfinite(arr)):
        raise NonPositiveSample(f"samples must be finite and > 0, got {arr!r}")
    logs = np.log(arr)
    mu = float(np.mean(logs))
    if arr.size == 1:
        return LogNormalParams(mu, 0.0, degenerate=True)
    var = float(np.var(logs, ddof=1 if bessel else 0))
    return LogNormalParams(mu, math.sqrt(var))


@dataclass(frozen=True)
class HyperPrior:
    """Independent log-normals per positive hyperparameter, uniform angle.

    ``components`` maps hyperparameter names (see :func:`theta_names`) to
    their log-normal parameters; the wind angle, when present, always
    carries the fixed uniform density ``1/pi`` on ``[0, pi)``.
    """

    components: dict = field(default_factory=dict)
    include_angle: bool = False

    @property
    def degenerate(self) -> bool:
        return any(c.degenerate or c.sigma_log == 0.0 for c in self.components.values())

    def widened(self, sigma_floor: float = WIDENED_SIGMA) -> "HyperPrior":
        """Copy with zero-spread components widened so they can be sampled."""
        widened = {
            name: replace(c, sigma_log=sigma_floor, degenerate=False)
            if c.sigma_log == 0.0
            else c
            for name, c in self.components.items()
        }
        return HyperPrior(widened, self.include_angle)

    def log_density(self, kind: str, theta) -> float:
        """Log prior density at a full hyperparameter vector (optimised domain)."""
        total = 0.0
        for name, w in zip(theta_names(kind), theta):
            if name == "wind_angle":
                total += -math.log(math.pi)
            else:
                total += self.components[name].log_pdf(math.exp(w))
        return total

    def density_gradient(self, kind: str, theta) -> np.ndarray:
        """Gradient of :meth:`log_density` in the optimised domain."""
        out = np.zeros(len(theta))
        for i, (name, w) in enumerate(zip(theta_names(kind), theta)):
            if name != "wind_angle":
                c = self.components[name]
                out[i] = -1.0 - (w - c.mu_log) / c.sigma_log**2
        return out

    def sample_theta(self, kind: str, rng: np.random.Generator) -> np.ndarray:
        """Draw a full hyperparameter vector in the optimised domain."""
        theta = np.empty(len(theta_names(kind)))
        for i, name in enumerate(theta_names(kind)):
            if name == "wind_angle":
                theta[i] = rng.uniform(0.0, math.pi)
            else:
                c = self.components[name]
                theta[i] = c.mu_log + c.sigma_log * rng.standard_normal()
        return theta

    def save(self, path) -> None:
        """Write the plain-text prior file: ``name mu_log sigma_log`` lines."""
        lines = [
            f"{name} {c.mu_log:.17g} {c.sigma_log:.17g}"
            for name, c in self.components.items()
        ]
        if self.include_angle:
            lines.append(ANGLE_LINE)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "HyperPrior":
        components = {}
        include_angle = False
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if line == ANGLE_LINE:
                    include_angle = True
                    continue
                name, mu, sigma = line.split()
                sigma = float(sigma)
                components[name] = LogNormalParams(
                    float(mu), sigma, degenerate=sigma == 0.0
                )
        return cls(components, include_angle)


@dataclass
class FitResult:
    """Outcome of a multi-start hyperparameter fit."""

    params: KernelSpec
    noise_variance: float
    objective: float
    lml: float
    n_restarts_used: int
    converged: bool
    endpoints: list | None = None

    @property
    def model(self) -> gp.ModelSpec:
        return gp.ModelSpec(self.params, self.noise_variance)


class _MapObjective:
    """MAP (or plain ML) objective over a fixed dataset, with gradient.

    Pairwise displacements are computed once; each evaluation is a Gram
    build plus one Cholesky.
    """

    def __init__(self, data: gp.Dataset, kind: str, priors: HyperPrior | None, jitter: float):
        self.dx, self.dy = pairwise_displacements(data.locations)
        self.y = data.values
        self.n = len(data)
        self.kind = kind
        self.cls = KERNELS[kind]
        self.priors = priors
        self.jitter = jitter
        self.diag = np.diag_indices(self.n)

    def split(self, theta):
        spec = self.cls.from_theta(theta[:-1])
        return spec, math.exp(theta[-1])

    def value(self, theta):
        """Objective, LML, and a factorisation cache at ``theta``.

        Raises FactorizationFailure / ValueError / OverflowError on
        numerically hopeless points; callers treat those as -inf.
        """
        spec, noise = self.split(theta)
        # extreme ascent excursions underflow length scales; the non-finite
        # check below turns the resulting garbage into a clean failure
        with np.errstate(all="ignore"):
            k = np.atleast_2d(np.array(spec.value(self.dx, self.dy), dtype=float))
            k[self.diag] += noise + self.jitter
            if not np.all(np.isfinite(k)):
                raise gp.FactorizationFailure("non-finite Gram matrix")
            try:
                chol = np.linalg.cholesky(k)
            except np.linalg.LinAlgError:
                raise gp.FactorizationFailure(
                    f"Gram matrix not positive definite at jitter {self.jitter:g}"
                ) from None
            alpha = cho_solve((chol, True), self.y)
            lml = float(
                -0.5 * self.y @ alpha
                - np.sum(np.log(np.diag(chol)))
                - 0.5 * self.n * math.log(2.0 * math.pi)
            )
        obj = lml if self.priors is None else lml + self.priors.log_density(self.kind, theta)
        if not math.isfinite(obj):
            raise gp.FactorizationFailure("non-finite objective")
        return obj, lml, (spec, noise, chol, alpha)

    def gradient(self, theta, cache) -> np.ndarray:
        spec, noise, chol, alpha = cache
        with np.errstate(all="ignore"):
            k_inv = cho_solve((chol, True), np.eye(self.n))
            grads = [
                0.5 * (alpha @ np.atleast_2d(dk) @ alpha - np.sum(k_inv * np.atleast_2d(dk)))
                for dk in spec.gradients(self.dx, self.dy)
            ]
            grads.append(0.5 * noise * (alpha @ alpha - np.trace(k_inv)))
            out = np.array(grads)
        if self.priors is not None:
            out += self.priors.density_gradient(self.kind, theta)
        return out


_FAILURES = (gp.FactorizationFailure, ValueError, OverflowError, FloatingPointError)


def _ascend(obj: _MapObjective, theta0, max_iter: int, tol: float):
    """Gradient ascent with Armijo backtracking (halving line search).

    Returns ``(theta, objective, lml, converged)``; raises on a failed
    initial evaluation so the restart can be skipped.
    """
    f, lml, cache = obj.value(theta0)
    theta = np.array(theta0, dtype=float)
    grad = obj.gradient(theta, cache)
    converged = False
    step = 0.5  # warm-started across iterations: try twice the last accepted step
    for _ in range(max_iter):
        gnorm2 = float(grad @ grad)
        if gnorm2 == 0.0:
            converged = True
            break
        step = min(2.0 * step, MAX_STEP)
        accepted = None
        for _ in range(MAX_HALVINGS):
            candidate = theta + step * grad
            try:
                f_new, lml_new, cache = obj.value(candidate)
            except _FAILURES:
                f_new = -math.inf
            if f_new >= f + ARMIJO_C * step * gnorm2:
                accepted = (candidate, f_new, lml_new)
                break
            step *= 0.5
        if accepted is None:
            # no improving step exists at line-search resolution
            converged = True
            break
        improvement = accepted[1] - f
        theta, f, lml = accepted
        grad = obj.gradient(theta, cache)
        if improvement < tol:
            converged = True
            break
    return theta, f, lml, converged


def _broad_theta(kind: str, rng: np.random.Generator, span: float) -> np.ndarray:
    """Initialisation draw when no prior exists; ``span`` is the data diagonal."""
    theta = np.empty(len(theta_names(kind)))
    for i, name in enumerate(theta_names(kind)):
        if name == "wind_angle":
            theta[i] = rng.uniform(0.0, math.pi)
        elif name.endswith("length_scale"):
            theta[i] = rng.uniform(math.log(0.1 * span), math.log(3.0 * span))
        elif name == "noise_variance":
            theta[i] = rng.uniform(math.log(1e-6), math.log(1.0))
        else:
            theta[i] = rng.uniform(math.log(0.01), math.log(10.0))
    return theta


def _data_span(data: gp.Dataset) -> float:
    if len(data) == 0:
        return 1.0
    extent = data.locations.max(axis=0) - data.locations.min(axis=0)
    span = float(np.linalg.norm(extent))
    return span if span > 0.0 else 1.0


def multistart_fit(
    data: gp.Dataset,
    kind: str,
    priors: HyperPrior | None = None,
    n_restarts: int = 100,
    rng_seed=0,
    max_iter: int = 200,
    tol: float = 1e-6,
    jitter: float = DEFAULT_JITTER,
    collect_endpoints: bool = False,
) -> FitResult:
    """Best-of-``n_restarts`` gradient-ascent fit of the hyperparameters.

    Restarts start from prior draws when ``priors`` is given (MAP
    objective: LML plus log prior density) and from broad ranges
    otherwise (pure LML).  Per-restart seeds derive from ``rng_seed``
    and the restart index, so results are reproducible and independent
    of any restart-level parallelism.

    Raises
    ------
    AllRestartsFailed
        If every restart fails to factorise at its starting point.
    """
    if len(data) == 0:
        raise ValueError("multistart_fit needs a nonempty dataset")
    sampling_prior = priors.widened() if priors is not None else None
    objective = _MapObjective(data, kind, sampling_prior, jitter)
    span = _data_span(data)
    if isinstance(rng_seed, np.random.SeedSequence):
        seeds = rng_seed.spawn(n_restarts)
    else:
        seeds = np.random.SeedSequence(rng_seed).spawn(n_restarts)
    best = None
    used = 0
    endpoints = [] if collect_endpoints else None
    for seq in seeds:
        rng = np.random.default_rng(seq)
        if sampling_prior is not None:
            theta0 = sampling_prior.sample_theta(kind, rng)
        else:
            theta0 = _broad_theta(kind, rng, span)
        try:
            theta, f, lml, converged = _ascend(objective, theta0, max_iter, tol)
        except _FAILURES:
            continue
        used += 1
        spec, noise = objective.split(theta)
        if endpoints is not None:
            endpoints.append((spec, noise))
        if best is None or f > best[1]:
            best = (theta, f, lml, converged, spec, noise)
    if best is None:
        raise AllRestartsFailed(
            f"all {n_restarts} restarts failed for kernel {kind!r} (n={len(data)})"
        )
    theta, f, lml, converged, spec, noise = best
    return FitResult(
        params=spec,
        noise_variance=noise,
        objective=f,
        lml=lml,
        n_restarts_used=used,
        converged=converged,
        endpoints=endpoints,
    )


def build_priors(
    tuning_images,
    kind: str,
    n_restarts: int = 200,
    bessel: bool = True,
    rng_seed=0,
    use_all_restarts: bool = False,
) -> HyperPrior:
    """Estimate hyperparameter priors from preprocessed tuning images.

    Each image is fitted by pure maximum likelihood (no prior term) with
    ``n_restarts`` broad-range restarts; the per-image optima (or every
    restart endpoint with ``use_all_restarts``) become the samples a
    log-normal is fitted to, component by component.  The wind angle
    always gets the fixed uniform prior instead.

    Raises
    ------
    PriorConstructionFailure
        If every tuning image fails to produce a fit.
    """
    fits = fit_tuning_images(
        tuning_images, kind, n_restarts=n_restarts, rng_seed=rng_seed,
        collect_endpoints=use_all_restarts,
    )
    return priors_from_fits(fits, kind, bessel=bessel, use_all_restarts=use_all_restarts)


def priors_from_fits(
    fits, kind: str, bessel: bool = True, use_all_restarts: bool = False
) -> HyperPrior:
    """Assemble a prior from per-image fit results (``None`` entries skipped).

    Raises
    ------
    PriorConstructionFailure
        If no fit survived.
    """
    fits = [f for f in fits if f is not None]
    if not fits:
        raise PriorConstructionFailure(f"no tuning image produced a {kind!r} fit")
    samples = {name: [] for name in theta_names(kind) if name != "wind_angle"}
    for fit in fits:
        points = fit.endpoints if use_all_restarts else [(fit.params, fit.noise_variance)]
        for spec, noise in points:
            for name in samples:
                samples[name].append(noise if name == "noise_variance" else getattr(spec, name))
    components = {name: fit_lognormal(vals, bessel=bessel) for name, vals in samples.items()}
    return HyperPrior(components, include_angle="wind_angle" in KERNELS[kind].param_names)


def fit_tuning_images(
    tuning_images,
    kind: str,
    n_restarts: int = 200,
    rng_seed=0,
    collect_endpoints: bool = False,
) -> list:
    """Maximum-likelihood fit per tuning image; ``None`` marks a failed image.

    Images must already be log-transformed and normalized; every
    non-missing pixel becomes an observation.
    """
    from .data import image_dataset  # local import to keep module layering flat

    results = []
    for index, image in enumerate(tuning_images):
        data = image_dataset(image)
        try:
            results.append(
                multistart_fit(
                    data, kind, priors=None, n_restarts=n_restarts,
                    rng_seed=[_as_seed_int(rng_seed), index],
                    collect_endpoints=collect_endpoints,
                )
            )
        except AllRestartsFailed:
            log.warning("tuning image %s: all %d restarts failed, skipping", image.id, n_restarts)
            results.append(None)
    return results


def _as_seed_int(rng_seed) -> int:
    if isinstance(rng_seed, (list, tuple)):
        return int(rng_seed[0])
    return int(rng_seed)


@dataclass(frozen=True)
class BicScore:
    """Penalised-likelihood model score; higher is better."""

    value: float
    n: int
    p: int


def bic(data: gp.Dataset, fit: FitResult) -> BicScore:
    """BIC of a fit on its data: ``lml - (p / 2) ln(n)``, higher is better.

    ``p`` counts every fitted hyperparameter including the noise variance.
    """
    p = n_hyperparameters(fit.params.kind)
    n = len(data)
    return BicScore(value=fit.lml - 0.5 * p * math.log(n), n=n, p=p)
