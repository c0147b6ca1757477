"""Bayesian optimisation over an image grid with UCB acquisition.

A run seeds the surrogate with random pixels, then repeatedly refits
hyperparameters by multi-start MAP and samples the pixel maximising
``mean + beta * std`` among non-missing, not-yet-sampled pixels.
Metrics compare the estimated maximiser (best observed pixel by raw
value) against the true one: Euclidean distance in pixel-index units
and the raw concentration ratio.  The random baseline samples uniformly
without replacement and averages metrics over repeats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gp
from .hyper import HyperPrior, multistart_fit

__all__ = [
    "AcquisitionField",
    "BaselineResult",
    "BoConfig",
    "BoTrace",
    "NoCandidates",
    "acquisition_field",
    "bo_step",
    "evaluate",
    "random_baseline",
    "read_trace_metrics",
    "run_bo",
    "running_average",
    "ucb",
    "write_baseline_trace",
    "write_trace",
]

TRACE_HEADER = "iter,x_row,x_col,raw_value,xhat_row,xhat_col,distance,ratio"


class NoCandidates(RuntimeError):
    """Every pixel is either missing or already sampled."""


@dataclass(frozen=True)
class BoConfig:
    """Knobs of a BO run.

    ``use_posterior_argmax`` switches the estimated maximiser from
    best-observed to the posterior-mean argmax (model-based methods
    only); the ratio series is then no longer monotone.
    """

    beta: float = 1.0
    n_init: int = 10
    n_iters: int = 100
    n_restarts_per_iter: int = 100
    sample_noise_std: float = 1e-6
    rng_seed: int = 0
    use_posterior_argmax: bool = False
    fit_max_iter: int = 200
    fit_tol: float = 1e-6

    def __post_init__(self):
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta!r}")
        if self.n_init < 1 or self.n_iters < 1 or self.n_restarts_per_iter < 1:
            raise ValueError("n_init, n_iters and n_restarts_per_iter must be >= 1")
        if self.sample_noise_std < 0.0:
            raise ValueError(f"sample_noise_std must be >= 0, got {self.sample_noise_std!r}")


@dataclass
class BoTrace:
    """Per-iteration record of one BO (or exhaustive) run.

    Positions are (row, col) pixel indices; ``raw_values`` are the true
    concentrations at the sampled pixels (observation noise only enters
    the surrogate).  ``distance`` and ``ratio`` track the estimated
    maximiser against ``x_star``/``y_star``.
    """

    pixels: list
    raw_values: np.ndarray
    xhat_pixels: list
    distance: np.ndarray
    ratio: np.ndarray
    x_star: tuple
    y_star: float
    n_init: int
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class AcquisitionField:
    """Posterior mean, std and UCB score per candidate pixel (row-major)."""

    pixels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    score: np.ndarray


def ucb(mean, std, beta):
    """Upper confidence bound ``mean + beta * std`` (scalar or arrays)."""
    return mean + beta * std


def _open_pixels(image) -> np.ndarray:
    """(m, 2) int array of non-missing (row, col) pixels, row-major."""
    rows, cols = np.nonzero(~image.mask)
    return np.column_stack([rows, cols])


def _location_pixel(location, pixel_size: float) -> tuple:
    x, y = location
    return int(round(y / pixel_size)), int(round(x / pixel_size))


def _pixel_locations(pixels, pixel_size: float) -> np.ndarray:
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return px[:, ::-1] * pixel_size  # (row, col) -> (x, y) = (col, row) * size


def _true_maximiser(image, values) -> tuple:
    """((row, col), value) of the raw maximum over non-missing pixels."""
    open_px = _open_pixels(image)
    if len(open_px) == 0:
        raise ValueError(f"image {image.id!r} has no non-missing pixels")
    vals = values[open_px[:, 0], open_px[:, 1]]
    best = int(np.argmax(vals))
    return (int(open_px[best, 0]), int(open_px[best, 1])), float(vals[best])


def _raw_grid(image) -> np.ndarray:
    return image.raw if image.raw is not None else image.values


def acquisition_field(
    image, data: gp.Dataset, model: gp.ModelSpec, beta: float, candidates=None
) -> AcquisitionField:
    """UCB scores over candidate pixels under a fixed fitted model.

    Candidates default to all non-missing pixels not present in
    ``data`` (matching the sampled-set exclusion of the BO loop).
    """
    if candidates is None:
        sampled = {
            _location_pixel(loc, image.pixel_size) for loc in data.locations
        }
        open_px = _open_pixels(image)
        keep = [
            i for i, rc in enumerate(map(tuple, open_px)) if rc not in sampled
        ]
        candidates = open_px[keep]
    candidates = np.asarray(candidates, dtype=int).reshape(-1, 2)
    post = gp.posterior(data, model, _pixel_locations(candidates, image.pixel_size))
    return AcquisitionField(
        pixels=candidates,
        mean=post.mean,
        std=post.std,
        score=ucb(post.mean, post.std, beta),
    )


def bo_step(
    image,
    data: gp.Dataset,
    priors: HyperPrior | None,
    cfg: BoConfig,
    spec: str = "rbf",
    fit_seed=None,
) -> tuple:
    """One BO iteration: refit, score candidates, pick the UCB maximiser.

    Returns ``((row, col), FitResult, AcquisitionField)``; ties in the
    acquisition break by row-major pixel order.  ``fit_seed`` overrides
    ``cfg.rng_seed`` for the refit (the loop passes per-iteration seeds).

    Raises
    ------
    NoCandidates
        When every pixel is sampled or missing.
    """
    sampled = {_location_pixel(loc, image.pixel_size) for loc in data.locations}
    open_px = _open_pixels(image)
    keep = [i for i, rc in enumerate(map(tuple, open_px)) if rc not in sampled]
    if not keep:
        raise NoCandidates(f"image {image.id!r}: no unsampled non-missing pixel left")
    fit = multistart_fit(
        data,
        spec,
        priors=priors,
        n_restarts=cfg.n_restarts_per_iter,
        rng_seed=cfg.rng_seed if fit_seed is None else fit_seed,
        max_iter=cfg.fit_max_iter,
        tol=cfg.fit_tol,
    )
    field = acquisition_field(image, data, fit.model, cfg.beta, candidates=open_px[keep])
    pick = int(np.argmax(field.score))
    pixel = (int(field.pixels[pick, 0]), int(field.pixels[pick, 1]))
    return pixel, fit, field


def run_bo(image, priors: HyperPrior | None, cfg: BoConfig, spec: str = "rbf") -> BoTrace:
    """Full BO run on a normalized image (raw values must be attached).

    Seeds with ``n_init`` distinct uniform-random non-missing pixels,
    then performs ``n_iters`` UCB steps.  Observations fed to the
    surrogate are the normalized values plus Gaussian noise of std
    ``sample_noise_std``; metrics use raw values only.  Deterministic
    given ``cfg.rng_seed``; stops early (``truncated``) when candidates
    run out.
    """
    if image.raw is None:
        raise ValueError("run_bo needs a normalized image with raw values attached")
    raw = image.raw
    ps = image.pixel_size
    open_px = _open_pixels(image)
    if len(open_px) < cfg.n_init:
        raise ValueError(
            f"image {image.id!r} has {len(open_px)} usable pixels, "
            f"need at least n_init = {cfg.n_init}"
        )
    x_star, y_star = _true_maximiser(image, raw)
    children = np.random.SeedSequence(cfg.rng_seed).spawn(2 + cfg.n_iters)
    init_rng = np.random.default_rng(children[0])
    noise_rng = np.random.default_rng(children[1])

    pixels, raw_values, xhats, dists, ratios = [], [], [], [], []
    best_raw = -math.inf
    best_pixel = None
    data = gp.Dataset()

    def observe(pixel):
        nonlocal data, best_raw, best_pixel
        r, c = pixel
        z = noise_rng.standard_normal()  # drawn even at std 0 to keep streams aligned
        data = data.with_observation((c * ps, r * ps), image.values[r, c] + cfg.sample_noise_std * z)
        value = float(raw[r, c])
        if value > best_raw:
            best_raw, best_pixel = value, pixel
        pixels.append(pixel)
        raw_values.append(value)
        xhats.append(best_pixel)
        dists.append(math.hypot(best_pixel[0] - x_star[0], best_pixel[1] - x_star[1]))
        ratios.append(best_raw / y_star)

    for i in init_rng.choice(len(open_px), size=cfg.n_init, replace=False):
        observe((int(open_px[i, 0]), int(open_px[i, 1])))

    truncated = False
    for i in range(cfg.n_iters):
        try:
            pixel, fit, _ = bo_step(image, data, priors, cfg, spec, fit_seed=children[2 + i])
        except NoCandidates:
            truncated = True
            break
        observe(pixel)
        if cfg.use_posterior_argmax:
            post = gp.posterior(data, fit.model, _pixel_locations(open_px, ps))
            j = int(np.argmax(post.mean))
            xh = (int(open_px[j, 0]), int(open_px[j, 1]))
            xhats[-1] = xh
            dists[-1] = math.hypot(xh[0] - x_star[0], xh[1] - x_star[1])
            ratios[-1] = float(raw[xh]) / y_star

    return BoTrace(
        pixels=pixels,
        raw_values=np.array(raw_values),
        xhat_pixels=xhats,
        distance=np.array(dists),
        ratio=np.array(ratios),
        x_star=x_star,
        y_star=y_star,
        n_init=cfg.n_init,
        truncated=truncated,
    )


@dataclass
class BaselineResult:
    """Random-baseline metric curves averaged over repeats."""

    distance: np.ndarray
    ratio: np.ndarray
    distance_sem: np.ndarray
    ratio_sem: np.ndarray
    n_repeats: int

    def __len__(self) -> int:
        return len(self.distance)


def random_baseline(image, n_samples: int, n_repeats: int = 100, seed=0) -> BaselineResult:
    """Uniform-without-replacement sampling, metrics averaged over repeats.

    Works on raw images or normalized ones (raw values preferred).
    ``n_samples`` is clamped to the number of usable pixels, so an
    exhaustive request always ends at ratio 1.  ``seed`` may be an int
    or a list of ints; each repeat derives its own stream from it.
    """
    values = _raw_grid(image)
    open_px = _open_pixels(image)
    n_open = len(open_px)
    x_star, y_star = _true_maximiser(image, values)
    open_vals = values[open_px[:, 0], open_px[:, 1]]
    k = min(int(n_samples), n_open)
    if k < 1:
        raise ValueError("n_samples must be >= 1")
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    dist = np.empty((n_repeats, k))
    rat = np.empty((n_repeats, k))
    for rep in range(n_repeats):
        rng = np.random.default_rng(np.random.SeedSequence(entropy + [rep]))
        order = rng.choice(n_open, size=k, replace=False)
        best = -math.inf
        best_px = None
        for j, idx in enumerate(order):
            if open_vals[idx] > best:
                best = float(open_vals[idx])
                best_px = open_px[idx]
            dist[rep, j] = math.hypot(best_px[0] - x_star[0], best_px[1] - x_star[1])
            rat[rep, j] = best / y_star
    if n_repeats > 1:
        d_sem = dist.std(axis=0, ddof=1) / math.sqrt(n_repeats)
        r_sem = rat.std(axis=0, ddof=1) / math.sqrt(n_repeats)
    else:
        d_sem = np.zeros(k)
        r_sem = np.zeros(k)
    return BaselineResult(
        distance=dist.mean(axis=0),
        ratio=rat.mean(axis=0),
        distance_sem=d_sem,
        ratio_sem=r_sem,
        n_repeats=n_repeats,
    )


def evaluate(trace: BoTrace, image) -> tuple:
    """Recompute (distance, ratio) series from sampled pixels and raw values.

    Always uses the best-observed definition of the estimated maximiser,
    so it doubles as an independent check of a trace's stored metrics.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    values = _raw_grid(image)
    x_star, y_star = _true_maximiser(image, values)
    best = -math.inf
    best_px = None
    dists, ratios = [], []
    for r, c in trace.pixels:
        if values[r, c] > best:
            best = float(values[r, c])
            best_px = (r, c)
        dists.append(math.hypot(best_px[0] - x_star[0], best_px[1] - x_star[1]))
        ratios.append(best / y_star)
    return np.array(dists), np.array(ratios)


def running_average(series, window: int = 20) -> np.ndarray:
    """Trailing mean over up to ``window`` values (shorter at the start)."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window!r}")
    s = np.asarray(series, dtype=float)
    return np.array([s[max(0, i - window + 1) : i + 1].mean() for i in range(len(s))])


def write_trace(trace: BoTrace, path) -> None:
    """Write the per-iteration trace CSV (17 significant digits)."""
    lines = [TRACE_HEADER]
    for i in range(len(trace)):
        r, c = trace.pixels[i]
        hr, hc = trace.xhat_pixels[i]
        lines.append(
            f"{i},{r},{c},{trace.raw_values[i]:.17g},{hr},{hc},"
            f"{trace.distance[i]:.17g},{trace.ratio[i]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_baseline_trace(result: BaselineResult, path) -> None:
    """Random-baseline trace CSV: positions are NaN (metrics are means)."""
    lines = [TRACE_HEADER]
    for i in range(len(result)):
        lines.append(
            f"{i},NaN,NaN,NaN,NaN,NaN,{result.distance[i]:.17g},{result.ratio[i]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trace_metrics(path) -> tuple:
    """(distance, ratio) arrays from a trace CSV written by this module."""
    dists, ratios = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected trace header {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}: malformed trace row {line!r}")
            dists.append(float(parts[6]))
            ratios.append(float(parts[7]))
    return np.array(dists), np.array(ratios)
