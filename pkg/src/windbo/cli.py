"""Command-line driver: ``synth``, ``subsets``, ``tune``, ``run``.

The pipeline is: generate or collect grid CSVs, build ranked subset
manifests, estimate hyperparameter priors on a tuning set (writing the
prior files, normalization stats and a BIC comparison report), then run
the BO experiments (per-run trace CSVs plus summary curves).

Reproducibility: every command is a pure function of its inputs and the
top-level seed.  Stochastic tasks derive their seed as the first eight
bytes of ``sha256("{seed}:{task label}")``, where the label carries the
image id (and kernel), so adding or removing images never perturbs the
randomness of other tasks.

Exit codes: 0 success, 2 insufficient/missing images, 3 prior pipeline
failure, 4 all runs failed.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .bo import (
    BoConfig,
    random_baseline,
    read_trace_metrics,
    run_bo,
    running_average,
    write_baseline_trace,
    write_trace,
)
from .data import (
    DegenerateStats,
    InsufficientImages,
    NormStats,
    ParseError,
    build_subsets,
    compute_norm_stats,
    filter_missing,
    image_dataset,
    load_image,
    normalize,
    save_image,
    synth_plume,
)
from .gp import FactorizationFailure
from .hyper import (
    AllRestartsFailed,
    HyperPrior,
    PriorConstructionFailure,
    bic,
    multistart_fit,
    priors_from_fits,
)
from .kernels import KERNELS

__all__ = [
    "ExperimentConfig",
    "cmd_run",
    "cmd_subsets",
    "cmd_synth",
    "cmd_tune",
    "load_config",
    "main",
    "save_config",
    "task_seed",
]

log = logging.getLogger(__name__)

SUBSET_NAMES = (
    "strong",
    "strong_tune",
    "median",
    "median_tune",
    "weak",
    "weak_tune",
    "selection",
)
RANDOM_METHOD = "random"
SUMMARY_HEADER = "method,iter,distance_mean,distance_sem,ratio_mean,ratio_sem"
RUNNING_HEADER = (
    "method,order_index,image_id,image_max,final_distance,final_ratio,"
    "final_distance_runavg,final_ratio_runavg"
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment configuration; round-trips through a flat file.

    ``pixel_size_override`` replaces every image's own pixel size when
    positive; 0 keeps the values parsed from the grid files.
    """

    image_dir: str = "images"
    out_dir: str = "out"
    manifest_dir: str = "out"
    priors_dir: str = "out"
    subset: str = "strong"
    kernels: tuple = ("rbf", "sum", "product")
    bessel: bool = True
    pixel_size_override: float = 0.0
    seed: int = 0
    beta: float = 1.0
    n_init: int = 10
    n_iters: int = 100
    n_restarts_per_iter: int = 100
    sample_noise_std: float = 1e-6
    n_baseline_repeats: int = 100
    fit_max_iter: int = 200
    use_posterior_argmax: bool = False

    def __post_init__(self):
        for k in self.kernels:
            if k not in KERNELS:
                raise ValueError(f"unknown kernel {k!r}; choose from {sorted(KERNELS)}")

    def bo_config(self, rng_seed: int) -> BoConfig:
        return BoConfig(
            beta=self.beta,
            n_init=self.n_init,
            n_iters=self.n_iters,
            n_restarts_per_iter=self.n_restarts_per_iter,
            sample_noise_std=self.sample_noise_std,
            rng_seed=rng_seed,
            use_posterior_argmax=self.use_posterior_argmax,
            fit_max_iter=self.fit_max_iter,
        )


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_kernels(text: str) -> tuple:
    return tuple(k.strip() for k in text.split(",") if k.strip())


_FIELD_PARSERS = {
    "image_dir": str,
    "out_dir": str,
    "manifest_dir": str,
    "priors_dir": str,
    "subset": str,
    "kernels": _parse_kernels,
    "bessel": _parse_bool,
    "pixel_size_override": float,
    "seed": int,
    "beta": float,
    "n_init": int,
    "n_iters": int,
    "n_restarts_per_iter": int,
    "sample_noise_std": float,
    "n_baseline_repeats": int,
    "fit_max_iter": int,
    "use_posterior_argmax": _parse_bool,
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def save_config(cfg: ExperimentConfig, path) -> None:
    """Write the flat ``key = value`` config file (lossless round-trip)."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read a config file on top of ``base`` (defaults when omitted)."""
    cfg = base if base is not None else ExperimentConfig()
    overrides = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _FIELD_PARSERS:
                raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
            overrides[key] = _FIELD_PARSERS[key](value.strip())
    return replace(cfg, **overrides)


def task_seed(seed: int, label: str) -> int:
    """Per-task seed: first 8 bytes of sha256 over seed and task label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def read_manifest(path) -> list:
    ids = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line and not line.startswith("#"):
                ids.append(line)
    return ids


def _load_dir_images(image_dir) -> list:
    """All parseable grid CSVs in a directory, sorted by filename."""
    images = []
    for path in sorted(Path(image_dir).glob("*.csv")):
        try:
            images.append(load_image(path))
        except ParseError as exc:
            print(f"warning: skipping {path.name}: {exc}", file=sys.stderr)
    return images


def _load_manifest_images(image_dir, manifest_path) -> list:
    ids = read_manifest(manifest_path)
    if not ids:
        raise InsufficientImages(f"manifest {manifest_path} is empty")
    image_dir = Path(image_dir)
    images = []
    for image_id in ids:
        path = image_dir / f"{image_id}.csv"
        if not path.exists():
            raise InsufficientImages(f"image file {path} (from manifest) not found")
        images.append(load_image(path))
    return images


def cmd_synth(args) -> int:
    """Generate a corpus of synthetic plume grid CSVs."""
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        image = synth_plume(
            args.width,
            args.height,
            args.wind_angle,
            n_sources=args.n_sources,
            noise_level=args.noise_level,
            seed=[args.seed, i],
            anisotropy=args.anisotropy,
            image_id=f"synth_{i:04d}",
        )
        save_image(image, out_dir / f"{image.id}.csv")
    print(f"wrote {args.count} images to {out_dir}")
    return 0


def cmd_subsets(args) -> int:
    """Build ranked subset manifests from a directory of grid CSVs."""
    images = _load_dir_images(args.image_dir)
    kept = filter_missing(images)
    print(f"loaded {len(images)} images, {len(kept)} after missing-value filter")
    bundle = build_subsets(kept)
    if bundle.scaled:
        print("warning: fewer than 280 images; subset sizes scaled down", file=sys.stderr)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in SUBSET_NAMES:
        subset = getattr(bundle, name)
        path = out_dir / f"{name}.txt"
        path.write_text("".join(f"{img.id}\n" for img in subset), encoding="utf-8")
        print(f"{name}: {len(subset)} images -> {path}")
    return 0


def _fit_tuning_set(images, kind: str, n_restarts: int, seed: int):
    """Per-image maximum-likelihood fits with id-hashed seeds."""
    fits = []
    for image in images:
        data = image_dataset(image)
        try:
            fits.append(
                multistart_fit(
                    data,
                    kind,
                    priors=None,
                    n_restarts=n_restarts,
                    rng_seed=task_seed(seed, f"tune:{kind}:{image.id}"),
                )
            )
        except (AllRestartsFailed, FactorizationFailure) as exc:
            print(f"warning: {kind} fit failed on {image.id}: {exc}", file=sys.stderr)
            fits.append(None)
    return fits


def _write_bic_report(path, kernels, image_ids, scores) -> None:
    """Per-image BIC table plus pairwise mean differences with SEM.

    ``scores[kind]`` is a list aligned with ``image_ids``; ``None`` marks
    a failed fit and is excluded from the pairwise statistics.
    """
    lines = ["# per-image BIC (higher is better)", "image_id " + " ".join(kernels)]
    for i, image_id in enumerate(image_ids):
        cells = [
            "NaN" if scores[k][i] is None else f"{scores[k][i]:.17g}" for k in kernels
        ]
        lines.append(f"{image_id} " + " ".join(cells))
    lines.append("# pairwise mean differences: mean (sem)")
    for i, a in enumerate(kernels):
        for b in kernels[:i]:
            diffs = [
                scores[a][j] - scores[b][j]
                for j in range(len(image_ids))
                if scores[a][j] is not None and scores[b][j] is not None
            ]
            if not diffs:
                lines.append(f"{a}-{b} NaN (NaN)")
                continue
            mean = float(np.mean(diffs))
            sem = (
                float(np.std(diffs, ddof=1) / math.sqrt(len(diffs)))
                if len(diffs) > 1
                else 0.0
            )
            lines.append(f"{a}-{b} {mean:.17g} ({sem:.17g})")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_tune(args) -> int:
    """Estimate priors on a tuning manifest; write priors, stats, BIC report."""
    kernels = tuple(KERNELS) if args.kernel == "all" else (args.kernel,)
    images = _load_manifest_images(args.image_dir, args.manifest)
    stats = compute_norm_stats(images)
    normalized = [normalize(img, stats) for img in images]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "norm_stats.txt").write_text(
        f"mean {stats.mean:.17g}\nstd {stats.std:.17g}\n", encoding="utf-8"
    )
    scores = {}
    for kind in kernels:
        fits = _fit_tuning_set(normalized, kind, args.restarts, args.seed)
        priors = priors_from_fits(
            fits, kind, bessel=not args.no_bessel, use_all_restarts=False
        )
        path = out_dir / f"priors_{kind}.txt"
        priors.save(path)
        if priors.degenerate:
            print(
                f"warning: {kind} prior is degenerate (single tuning sample); "
                "it will be widened at use",
                file=sys.stderr,
            )
        print(f"{kind}: priors -> {path}")
        scores[kind] = [
            None if f is None else bic(image_dataset(img), f).value
            for img, f in zip(normalized, fits)
        ]
    report = out_dir / "bic_report.txt"
    _write_bic_report(report, kernels, [img.id for img in images], scores)
    print(f"BIC report -> {report}")
    return 0


def _resolve_run_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for name in _FIELD_PARSERS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides.get("kernels") is not None:
        overrides["kernels"] = _parse_kernels(overrides["kernels"])
    return replace(cfg, **overrides)


def _write_summary_curves(path, methods, metric_lists) -> None:
    """Mean and SEM per iteration across images, per method."""
    lines = [SUMMARY_HEADER]
    for method in methods:
        traces = metric_lists[method]
        if not traces:
            continue
        length = min(len(d) for d, _ in traces)
        dist = np.vstack([d[:length] for d, _ in traces])
        rat = np.vstack([r[:length] for _, r in traces])
        n = len(traces)
        d_sem = dist.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(length)
        r_sem = rat.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(length)
        d_mean = dist.mean(axis=0)
        r_mean = rat.mean(axis=0)
        for i in range(length):
            lines.append(
                f"{method},{i},{d_mean[i]:.17g},{d_sem[i]:.17g},"
                f"{r_mean[i]:.17g},{r_sem[i]:.17g}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_running_summary(path, methods, per_image, ordered_ids, maxima) -> None:
    """Final-iteration metrics over images ordered by their maximum,
    with window-20 running averages."""
    lines = [RUNNING_HEADER]
    for method in methods:
        rows = [
            (image_id, per_image[method][image_id])
            for image_id in ordered_ids
            if image_id in per_image[method]
        ]
        if not rows:
            continue
        finals_d = np.array([d for _, (d, _) in rows])
        finals_r = np.array([r for _, (_, r) in rows])
        avg_d = running_average(finals_d, 20)
        avg_r = running_average(finals_r, 20)
        for i, (image_id, (d, r)) in enumerate(rows):
            lines.append(
                f"{method},{i},{image_id},{maxima[image_id]:.17g},"
                f"{d:.17g},{r:.17g},{avg_d[i]:.17g},{avg_r[i]:.17g}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    """Run BO for every configured kernel plus the random baseline."""
    cfg = _resolve_run_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config_used.txt")

    priors_dir = Path(cfg.priors_dir)
    stats_path = priors_dir / "norm_stats.txt"
    if not stats_path.exists():
        raise PriorConstructionFailure(f"normalization stats not found: {stats_path}")
    stats_kv = dict(
        line.split() for line in stats_path.read_text(encoding="utf-8").splitlines() if line
    )
    stats = NormStats(mean=float(stats_kv["mean"]), std=float(stats_kv["std"]))
    priors = {}
    for kind in cfg.kernels:
        prior_path = priors_dir / f"priors_{kind}.txt"
        if not prior_path.exists():
            raise PriorConstructionFailure(f"prior file not found: {prior_path}")
        priors[kind] = HyperPrior.load(prior_path)

    manifest = Path(cfg.manifest_dir) / f"{cfg.subset}.txt"
    images = _load_manifest_images(cfg.image_dir, manifest)
    if cfg.pixel_size_override > 0.0:
        for img in images:
            img.pixel_size = cfg.pixel_size_override

    methods = list(cfg.kernels) + [RANDOM_METHOD]
    metric_lists = {m: [] for m in methods}
    per_image = {m: {} for m in methods}
    completed_images = 0
    for image in images:
        norm_img = normalize(image, stats)
        image_ok = True
        for method in methods:
            trace_path = out_dir / f"trace_{image.id}_{method}.csv"
            if args.resume and trace_path.exists():
                pass
            else:
                seed = task_seed(cfg.seed, f"run:{method}:{image.id}")
                try:
                    if method == RANDOM_METHOD:
                        result = random_baseline(
                            norm_img,
                            n_samples=cfg.n_init + cfg.n_iters,
                            n_repeats=cfg.n_baseline_repeats,
                            seed=seed,
                        )
                        write_baseline_trace(result, trace_path)
                    else:
                        trace = run_bo(norm_img, priors[method], cfg.bo_config(seed), method)
                        write_trace(trace, trace_path)
                except (AllRestartsFailed, FactorizationFailure, ValueError) as exc:
                    print(
                        f"warning: {method} run failed on {image.id}: {exc}",
                        file=sys.stderr,
                    )
                    image_ok = False
                    continue
            dist, rat = read_trace_metrics(trace_path)
            metric_lists[method].append((dist, rat))
            per_image[method][image.id] = (float(dist[-1]), float(rat[-1]))
        if image_ok:
            completed_images += 1

    if completed_images == 0:
        print("error: no image completed", file=sys.stderr)
        return 4

    ordered = sorted(images, key=lambda im: (im.max_value(), im.id))
    maxima = {im.id: im.max_value() for im in images}
    _write_summary_curves(out_dir / "summary_curves.csv", methods, metric_lists)
    _write_running_summary(
        out_dir / "running_summary.csv",
        methods,
        per_image,
        [im.id for im in ordered],
        maxima,
    )
    print(
        f"completed {completed_images}/{len(images)} images; "
        f"summaries -> {out_dir / 'summary_curves.csv'}, {out_dir / 'running_summary.csv'}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windbo",
        description="Wind-informed GP Bayesian optimisation on concentration grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic plume images")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--wind-angle", type=float, default=0.5)
    p.add_argument("--anisotropy", type=float, default=None)
    p.add_argument("--n-sources", type=int, default=1)
    p.add_argument("--noise-level", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("subsets", help="build ranked subset manifests")
    p.add_argument("--image-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_subsets)

    p = sub.add_parser("tune", help="estimate priors and BIC report on a tuning set")
    p.add_argument("--image-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kernel", choices=tuple(KERNELS) + ("all",), default="all")
    p.add_argument("--restarts", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-bessel", action="store_true")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("run", help="run BO experiments and summaries")
    p.add_argument("--config", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--image-dir", dest="image_dir", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--manifest-dir", dest="manifest_dir", default=None)
    p.add_argument("--priors-dir", dest="priors_dir", default=None)
    p.add_argument("--subset", default=None)
    p.add_argument("--kernels", default=None, help="comma-separated kernel list")
    p.add_argument("--bessel", type=_parse_bool, default=None)
    p.add_argument("--pixel-size-override", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--n-init", type=int, default=None)
    p.add_argument("--n-iters", type=int, default=None)
    p.add_argument("--n-restarts-per-iter", type=int, default=None)
    p.add_argument("--sample-noise-std", type=float, default=None)
    p.add_argument("--n-baseline-repeats", type=int, default=None)
    p.add_argument("--fit-max-iter", type=int, default=None)
    p.add_argument("--use-posterior-argmax", type=_parse_bool, default=None)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InsufficientImages as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PriorConstructionFailure, DegenerateStats) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
