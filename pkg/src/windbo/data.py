"""Image ingestion, subset construction, normalization, synthetic plumes.

Images are rectangular grids of strictly positive concentrations with a
missing-value mask, stored as plain CSV (one row per grid row, ``NaN``
for missing, optional ``#``-prefixed header lines carrying the id and
pixel size).  A pixel at (row, col) sits at coordinates
``(x, y) = (col, row) * pixel_size``; the wind angle lives in that x-y
plane.  Evaluation metrics always use raw pixel units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gp

__all__ = [
    "DegenerateStats",
    "Image",
    "InsufficientImages",
    "NormStats",
    "ParseError",
    "SubsetBundle",
    "build_subsets",
    "compute_norm_stats",
    "denormalize",
    "filter_missing",
    "image_dataset",
    "load_image",
    "normalize",
    "save_image",
    "subset_sizes",
    "synth_plume",
]

# full-protocol subset sizes; below FULL_PROTOCOL_MIN they shrink proportionally
MAIN_SIZE = 50
TUNE_SIZE = 10
SELECTION_SIZE = 100
SELECTION_STRIDE = 9
FULL_PROTOCOL_MIN = 280
ABSOLUTE_MIN = 30


class ParseError(ValueError):
    """A grid file failed to parse; message carries the row/column."""


class InsufficientImages(RuntimeError):
    """Too few images for even the scaled subset protocol."""


class DegenerateStats(RuntimeError):
    """Normalization statistics have zero spread."""


@dataclass
class Image:
    """A concentration grid with missing-value mask.

    ``mask`` is True where a value is missing.  After :func:`normalize`
    the original concentrations stay available in ``raw``.
    """

    values: np.ndarray
    mask: np.ndarray
    id: str
    pixel_size: float = 1.0
    raw: np.ndarray | None = None
    n_coerced: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError(
                f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def missing_fraction(self) -> float:
        return float(self.mask.mean())

    def max_value(self) -> float:
        """Maximum over non-missing pixels."""
        if self.mask.all():
            raise ValueError(f"image {self.id!r} has no non-missing pixels")
        return float(self.values[~self.mask].max())


def load_image(path) -> Image:
    """Parse a grid CSV into an Image.

    ``NaN`` tokens mark missing cells; numeric cells that are
    non-positive or non-finite are coerced to missing and counted in
    ``n_coerced`` (the log transform is undefined there).

    Raises
    ------
    ParseError
        On non-numeric tokens (naming the cell) or ragged rows.
    """
    path = Path(path)
    image_id = path.stem
    pixel_size = 1.0
    rows: list[list[float]] = []
    mask_rows: list[list[bool]] = []
    coerced = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, raw_line in enumerate(fh, start=1):
            line = raw_line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) >= 2 and parts[0] == "id":
                    image_id = parts[1]
                elif len(parts) >= 2 and parts[0] == "pixel_size":
                    pixel_size = float(parts[1])
                continue
            vals, miss = [], []
            for col, token in enumerate(line.split(",")):
                token = token.strip()
                if token.lower() == "nan":
                    vals.append(np.nan)
                    miss.append(True)
                    continue
                try:
                    v = float(token)
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric token {token!r} at row {len(rows) + 1}, "
                        f"column {col + 1} (line {line_no})"
                    ) from None
                if not math.isfinite(v) or v <= 0.0:
                    vals.append(np.nan)
                    miss.append(True)
                    coerced += 1
                else:
                    vals.append(v)
                    miss.append(False)
            if rows and len(vals) != len(rows[0]):
                raise ParseError(
                    f"{path}: row {len(rows) + 1} has {len(vals)} cells, expected {len(rows[0])}"
                )
            rows.append(vals)
            mask_rows.append(miss)
    if not rows:
        raise ParseError(f"{path}: no grid rows found")
    return Image(
        values=np.array(rows),
        mask=np.array(mask_rows),
        id=image_id,
        pixel_size=pixel_size,
        n_coerced=coerced,
    )


def save_image(image: Image, path) -> None:
    """Write the canonical grid CSV (17 significant digits, NaN for missing)."""
    lines = [f"# id {image.id}", f"# pixel_size {image.pixel_size:.17g}"]
    for r in range(image.height):
        cells = [
            "NaN" if image.mask[r, c] else f"{image.values[r, c]:.17g}"
            for c in range(image.width)
        ]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def filter_missing(images, threshold: float = 0.10):
    """Keep images whose missing fraction is at most ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold!r}")
    return [img for img in images if img.missing_fraction <= threshold]


def subset_sizes(n_images: int) -> tuple:
    """(main, tune, selection) subset sizes for a corpus of ``n_images``."""
    if n_images >= FULL_PROTOCOL_MIN:
        return MAIN_SIZE, TUNE_SIZE, SELECTION_SIZE
    if n_images < ABSOLUTE_MIN:
        raise InsufficientImages(
            f"need at least {ABSOLUTE_MIN} images, got {n_images}"
        )
    scale = n_images / FULL_PROTOCOL_MIN
    return (
        max(5, int(MAIN_SIZE * scale)),
        max(2, int(TUNE_SIZE * scale)),
        max(5, int(SELECTION_SIZE * scale)),
    )


@dataclass
class SubsetBundle:
    """The seven rank-ordered image subsets of the evaluation protocol."""

    strong: list
    strong_tune: list
    median: list
    median_tune: list
    weak: list
    weak_tune: list
    selection: list
    scaled: bool = False

    def as_dict(self) -> dict:
        return {
            "strong": self.strong,
            "strong_tune": self.strong_tune,
            "median": self.median,
            "median_tune": self.median_tune,
            "weak": self.weak,
            "weak_tune": self.weak_tune,
            "selection": self.selection,
        }


def build_subsets(images, seed=0) -> SubsetBundle:
    """Split images into Strong/Median/Weak (+tuning) and Selection sets.

    Images are ranked by their per-image maximum, descending, ties
    broken by id; each tuning set sits immediately after its main set in
    the ranking.  The construction is deterministic; ``seed`` is
    accepted for interface uniformity but unused.

    Raises
    ------
    InsufficientImages
        Below the scaled-protocol minimum.
    """
    del seed
    ranked = sorted(images, key=lambda img: (-img.max_value(), img.id))
    n = len(ranked)
    main, tune, sel_cap = subset_sizes(n)
    scaled = n < FULL_PROTOCOL_MIN

    strong = ranked[:main]
    strong_tune = ranked[main : main + tune]
    weak = ranked[n - main :]
    weak_tune = ranked[n - main - tune : n - main]
    m_start = (n - main) // 2
    median = ranked[m_start : m_start + main]
    median_tune = ranked[m_start + main : m_start + main + tune]

    taken = {img.id for block in (strong, strong_tune, median, median_tune, weak, weak_tune) for img in block}
    remaining = [img for img in ranked if img.id not in taken]
    stride = SELECTION_STRIDE if not scaled else max(1, len(remaining) // sel_cap)
    selection = remaining[::stride][:sel_cap]

    return SubsetBundle(
        strong, strong_tune, median, median_tune, weak, weak_tune, selection, scaled
    )


@dataclass(frozen=True)
class NormStats:
    """Pooled mean and standard deviation of tuning-set log concentrations."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0.0:
            raise ValueError(f"std must be > 0, got {self.std!r}")


def compute_norm_stats(tuning_images) -> NormStats:
    """Scalar mean/std over pooled log values of all non-missing pixels.

    Population convention (divisor n).

    Raises
    ------
    DegenerateStats
        If the pooled spread is zero.
    """
    pooled = np.concatenate(
        [np.log(img.values[~img.mask]) for img in tuning_images]
    ) if tuning_images else np.zeros(0)
    if pooled.size < 2:
        raise ValueError("need at least 2 non-missing pixels across the tuning set")
    std = float(np.std(pooled))
    if std == 0.0:
        raise DegenerateStats(
            f"tuning-set log values are constant (mean {float(np.mean(pooled)):g})"
        )
    return NormStats(mean=float(np.mean(pooled)), std=std)


def normalize(image: Image, stats: NormStats) -> Image:
    """Map non-missing values through ``(ln v - mean) / std``.

    The returned image keeps the mask and carries the original
    concentrations in ``raw`` for metric computation.
    """
    values = np.full_like(image.values, np.nan)
    keep = ~image.mask
    values[keep] = (np.log(image.values[keep]) - stats.mean) / stats.std
    return replace(image, values=values, raw=image.values.copy())


def denormalize(values, stats: NormStats):
    """Inverse of :func:`normalize` on an array of normalized values."""
    return np.exp(np.asarray(values) * stats.std + stats.mean)


def image_dataset(image: Image) -> gp.Dataset:
    """Non-missing pixels as a GP dataset, row-major, at image coordinates."""
    rows, cols = np.nonzero(~image.mask)
    locations = np.column_stack([cols, rows]).astype(float) * image.pixel_size
    return gp.Dataset(locations, image.values[rows, cols])


def synth_plume(
    width: int,
    height: int,
    wind_angle: float,
    n_sources: int = 1,
    noise_level: float = 0.0,
    seed=0,
    anisotropy: float | None = None,
    along_scale: float | None = None,
    image_id: str | None = None,
) -> Image:
    """Synthetic plume image: anisotropic bumps elongated along the wind.

    Each source is a Gaussian bump whose along-wind scale exceeds the
    cross-wind scale by ``anisotropy`` (drawn uniformly from [3, 6] per
    source when not given).  Multiplicative log-normal noise of strength
    ``noise_level`` is applied last, so values stay strictly positive.
    Deterministic for a fixed seed.
    """
    if width < 8 or height < 8:
        raise ValueError("plume images need width and height >= 8")
    if n_sources < 1:
        raise ValueError("need at least one source")
    rng = np.random.default_rng(seed)
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    c_ang, s_ang = math.cos(wind_angle), math.sin(wind_angle)
    field = np.zeros((height, width))
    margin_c = max(1, width // 8)
    margin_r = max(1, height // 8)
    for _ in range(n_sources):
        cx = int(rng.integers(margin_c, width - margin_c))
        cy = int(rng.integers(margin_r, height - margin_r))
        s_par = along_scale if along_scale is not None else rng.uniform(0.18, 0.30) * max(width, height)
        ratio = anisotropy if anisotropy is not None else rng.uniform(3.0, 6.0)
        s_perp = s_par / ratio
        amp = rng.uniform(0.5, 2.0)
        t_par = (cols - cx) * c_ang + (rows - cy) * s_ang
        t_perp = (rows - cy) * c_ang - (cols - cx) * s_ang
        field += amp * np.exp(-0.5 * (t_par / s_par) ** 2 - 0.5 * (t_perp / s_perp) ** 2)
    field += 0.02 * field.max()  # strictly positive floor, constant so the argmax is untouched
    if noise_level > 0.0:
        field = field * np.exp(noise_level * rng.standard_normal(field.shape))
    return Image(
        values=field,
        mask=np.zeros_like(field, dtype=bool),
        id=image_id if image_id is not None else f"plume_{seed}",
    )
