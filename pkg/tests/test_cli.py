import hashlib
import math
from pathlib import Path

import numpy as np
import pytest

from windbo.cli import (
    RUNNING_HEADER,
    SUBSET_NAMES,
    SUMMARY_HEADER,
    ExperimentConfig,
    load_config,
    main,
    read_manifest,
    save_config,
    task_seed,
)
from windbo.data import load_image, subset_sizes
from windbo.hyper import HyperPrior


# ---------------------------------------------------------------- seeds / config


def test_task_seed_matches_hash_construction():
    digest = hashlib.sha256(b"7:run:rbf:img_0042").digest()
    assert task_seed(7, "run:rbf:img_0042") == int.from_bytes(digest[:8], "big")
    assert task_seed(7, "a") != task_seed(7, "b")
    assert task_seed(7, "a") != task_seed(8, "a")
    assert 0 <= task_seed(0, "x") < 2**64


def test_config_round_trip_exact(tmp_path):
    cfg = ExperimentConfig(
        image_dir="imgs",
        out_dir="results",
        manifest_dir="m",
        priors_dir="p",
        subset="weak",
        kernels=("product", "rbf"),
        bessel=False,
        pixel_size_override=0.1,
        seed=17,
        beta=2.5,
        n_init=3,
        n_iters=7,
        n_restarts_per_iter=4,
        sample_noise_std=1e-3,
        n_baseline_repeats=11,
        fit_max_iter=55,
        use_posterior_argmax=True,
    )
    path = tmp_path / "cfg.txt"
    save_config(cfg, path)
    assert load_config(path) == cfg  # repr() floats: lossless


def test_load_config_layers_and_validates(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("# comment\n\nseed = 5\nkernels = rbf , product\nbessel = no\n")
    cfg = load_config(path)
    assert cfg.seed == 5
    assert cfg.kernels == ("rbf", "product")
    assert cfg.bessel is False
    assert cfg.n_init == 10  # untouched default

    base = ExperimentConfig(n_init=2)
    assert load_config(path, base).n_init == 2

    bad_key = tmp_path / "bad_key.txt"
    bad_key.write_text("n_widgets = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(bad_key)
    bad_line = tmp_path / "bad_line.txt"
    bad_line.write_text("just some words\n")
    with pytest.raises(ValueError, match="key = value"):
        load_config(bad_line)
    with pytest.raises(ValueError, match="unknown kernel"):
        ExperimentConfig(kernels=("rbf", "linear"))


def test_bo_config_maps_experiment_fields():
    cfg = ExperimentConfig(beta=0.5, n_init=2, n_iters=3, n_restarts_per_iter=4,
                           sample_noise_std=0.1, fit_max_iter=9,
                           use_posterior_argmax=True)
    bo = cfg.bo_config(rng_seed=123)
    assert (bo.beta, bo.n_init, bo.n_iters, bo.n_restarts_per_iter) == (0.5, 2, 3, 4)
    assert bo.sample_noise_std == 0.1 and bo.fit_max_iter == 9
    assert bo.rng_seed == 123 and bo.use_posterior_argmax


# ---------------------------------------------------------------- synth


def test_cmd_synth_deterministic_corpus(tmp_path, capsys):
    args = ["synth", "--count", "3", "--width", "8", "--height", "8", "--seed", "5"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert names == ["synth_0000.csv", "synth_0001.csv", "synth_0002.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    img = load_image(tmp_path / "a" / "synth_0001.csv")
    assert img.id == "synth_0001"
    assert img.height == 8 and img.width == 8
    assert np.all(img.values[~img.mask] > 0.0)


# ---------------------------------------------------------------- pipeline fixture


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small end-to-end workspace: 30-image corpus, manifests, rbf priors."""
    root = tmp_path_factory.mktemp("pipeline")
    images = root / "images"
    out = root / "out"
    rc = main(["synth", "--out-dir", str(images), "--count", "30",
               "--width", "8", "--height", "8", "--seed", "5"])
    assert rc == 0
    rc = main(["subsets", "--image-dir", str(images), "--out-dir", str(out)])
    assert rc == 0
    rc = main(["tune", "--image-dir", str(images),
               "--manifest", str(out / "strong_tune.txt"),
               "--out-dir", str(out), "--kernel", "rbf",
               "--restarts", "4", "--seed", "3"])
    assert rc == 0
    return root


def test_cmd_subsets_manifests(pipeline, capsys):
    out = pipeline / "out"
    for name in SUBSET_NAMES:
        assert (out / f"{name}.txt").exists()
    main_n, tune_n, sel_cap = subset_sizes(30)
    ids = {name: read_manifest(out / f"{name}.txt") for name in SUBSET_NAMES}
    assert len(ids["strong"]) == main_n and len(ids["strong_tune"]) == tune_n
    assert len(ids["median"]) == main_n and len(ids["weak"]) == main_n
    assert len(ids["selection"]) <= sel_cap
    flat = [i for block in ids.values() for i in block]
    assert len(flat) == len(set(flat))  # pairwise disjoint
    # ranking: strong images dominate weak images in per-image maximum
    maxima = {
        p.stem: load_image(p).max_value() for p in (pipeline / "images").glob("*.csv")
    }
    assert min(maxima[i] for i in ids["strong"]) >= max(maxima[i] for i in ids["weak"])


def test_cmd_subsets_scaled_warning_and_insufficient(tmp_path, capsys):
    images = tmp_path / "imgs"
    assert main(["synth", "--out-dir", str(images), "--count", "30",
                 "--width", "8", "--height", "8", "--seed", "1"]) == 0
    assert main(["subsets", "--image-dir", str(images),
                 "--out-dir", str(tmp_path / "o")]) == 0
    assert "scaled down" in capsys.readouterr().err

    few = tmp_path / "few"
    assert main(["synth", "--out-dir", str(few), "--count", "29",
                 "--width", "8", "--height", "8", "--seed", "1"]) == 0
    assert main(["subsets", "--image-dir", str(few),
                 "--out-dir", str(tmp_path / "o2")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cmd_subsets_skips_unparseable_files(tmp_path, capsys):
    images = tmp_path / "imgs"
    assert main(["synth", "--out-dir", str(images), "--count", "30",
                 "--width", "8", "--height", "8", "--seed", "1"]) == 0
    (images / "broken.csv").write_text("1.0, what\n")
    assert main(["subsets", "--image-dir", str(images),
                 "--out-dir", str(tmp_path / "o")]) == 0
    assert "skipping broken.csv" in capsys.readouterr().err


def test_cmd_tune_outputs(pipeline, tmp_path):
    out = pipeline / "out"
    stats_lines = (out / "norm_stats.txt").read_text().splitlines()
    assert stats_lines[0].startswith("mean ") and stats_lines[1].startswith("std ")
    assert float(stats_lines[1].split()[1]) > 0.0

    prior = HyperPrior.load(out / "priors_rbf.txt")
    assert set(prior.components) == {"length_scale", "signal_variance", "noise_variance"}
    assert not prior.include_angle

    report = (out / "bic_report.txt").read_text().splitlines()
    assert report[1] == "image_id rbf"
    tune_ids = read_manifest(out / "strong_tune.txt")
    assert [line.split()[0] for line in report[2 : 2 + len(tune_ids)]] == tune_ids

    # reruns are byte-identical
    again = tmp_path / "again"
    rc = main(["tune", "--image-dir", str(pipeline / "images"),
               "--manifest", str(out / "strong_tune.txt"),
               "--out-dir", str(again), "--kernel", "rbf",
               "--restarts", "4", "--seed", "3"])
    assert rc == 0
    for name in ("norm_stats.txt", "priors_rbf.txt", "bic_report.txt"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_cmd_tune_single_image_degenerate_warning(pipeline, tmp_path, capsys):
    manifest = tmp_path / "one.txt"
    manifest.write_text("synth_0000\n")
    rc = main(["tune", "--image-dir", str(pipeline / "images"),
               "--manifest", str(manifest), "--out-dir", str(tmp_path / "o"),
               "--kernel", "product", "--restarts", "4", "--seed", "2"])
    assert rc == 0
    assert "degenerate" in capsys.readouterr().err
    prior = HyperPrior.load(tmp_path / "o" / "priors_product.txt")
    assert prior.include_angle  # wind-angle line preserved
    assert prior.degenerate


def test_cmd_tune_empty_manifest_exits_2(pipeline, tmp_path, capsys):
    manifest = tmp_path / "empty.txt"
    manifest.write_text("\n")
    rc = main(["tune", "--image-dir", str(pipeline / "images"),
               "--manifest", str(manifest), "--out-dir", str(tmp_path / "o")])
    assert rc == 2


# ---------------------------------------------------------------- run


RUN_ARGS = ["--kernels", "rbf", "--n-init", "4", "--n-iters", "4",
            "--n-restarts-per-iter", "2", "--fit-max-iter", "15",
            "--n-baseline-repeats", "5", "--seed", "9", "--subset", "strong_tune"]


def run_main(pipeline, out_dir, extra=()):
    return main(["run", "--image-dir", str(pipeline / "images"),
                 "--manifest-dir", str(pipeline / "out"),
                 "--priors-dir", str(pipeline / "out"),
                 "--out-dir", str(out_dir)] + RUN_ARGS + list(extra))


def test_cmd_run_produces_traces_and_summaries(pipeline, tmp_path):
    out = tmp_path / "run"
    assert run_main(pipeline, out) == 0
    tune_ids = read_manifest(pipeline / "out" / "strong_tune.txt")
    for image_id in tune_ids:
        assert (out / f"trace_{image_id}_rbf.csv").exists()
        assert (out / f"trace_{image_id}_random.csv").exists()

    cfg = load_config(out / "config_used.txt")
    assert cfg.kernels == ("rbf",) and cfg.seed == 9 and cfg.n_iters == 4

    from windbo.bo import read_trace_metrics

    curves = (out / "summary_curves.csv").read_text().splitlines()
    assert curves[0] == SUMMARY_HEADER
    rbf_rows = [r.split(",") for r in curves[1:] if r.startswith("rbf,")]
    assert len(rbf_rows) == 8  # n_init + n_iters
    dists = np.array([read_trace_metrics(out / f"trace_{i}_rbf.csv")[0] for i in tune_ids])
    rats = np.array([read_trace_metrics(out / f"trace_{i}_rbf.csv")[1] for i in tune_ids])
    for i, row in enumerate(rbf_rows):
        assert float(row[2]) == pytest.approx(dists[:, i].mean(), abs=1e-15)
        assert float(row[4]) == pytest.approx(rats[:, i].mean(), abs=1e-15)
        expected_sem = dists[:, i].std(ddof=1) / math.sqrt(len(tune_ids))
        assert float(row[3]) == pytest.approx(expected_sem, abs=1e-15)

    running = (out / "running_summary.csv").read_text().splitlines()
    assert running[0] == RUNNING_HEADER
    rbf_running = [r.split(",") for r in running[1:] if r.startswith("rbf,")]
    maxima = [float(r[3]) for r in rbf_running]
    assert maxima == sorted(maxima)  # weakest image first
    for row in rbf_running:
        image_id = row[2]
        dist, rat = read_trace_metrics(out / f"trace_{image_id}_rbf.csv")
        assert float(row[4]) == dist[-1] and float(row[5]) == rat[-1]


def test_cmd_run_is_deterministic(pipeline, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_main(pipeline, a) == 0
    assert run_main(pipeline, b) == 0
    for path in sorted(a.glob("*.csv")):
        assert path.read_bytes() == (b / path.name).read_bytes(), path.name


def test_cmd_run_resume_reuses_existing_traces(pipeline, tmp_path):
    out = tmp_path / "run"
    assert run_main(pipeline, out) == 0
    tune_ids = read_manifest(pipeline / "out" / "strong_tune.txt")
    victim = out / f"trace_{tune_ids[0]}_rbf.csv"
    doctored = victim.read_text().splitlines()
    parts = doctored[-1].split(",")
    parts[7] = "0.123456789"  # sentinel final ratio
    doctored[-1] = ",".join(parts)
    victim.write_text("\n".join(doctored) + "\n")
    assert run_main(pipeline, out, extra=["--resume"]) == 0
    assert victim.read_text().splitlines()[-1].split(",")[7] == "0.123456789"
    running = (out / "running_summary.csv").read_text().splitlines()
    row = next(r.split(",") for r in running[1:]
               if r.startswith("rbf,") and r.split(",")[2] == tune_ids[0])
    assert float(row[5]) == 0.123456789  # summary read the file, not a rerun


def test_cmd_run_missing_priors_exits_3(pipeline, tmp_path):
    rc = main(["run", "--image-dir", str(pipeline / "images"),
               "--manifest-dir", str(pipeline / "out"),
               "--priors-dir", str(tmp_path / "nowhere"),
               "--out-dir", str(tmp_path / "o")] + RUN_ARGS)
    assert rc == 3
    # priors present but for the wrong kernel
    rc = run_main(pipeline, tmp_path / "o2", extra=["--kernels", "product"])
    assert rc == 3


def test_cmd_run_all_images_failing_exits_4(pipeline, tmp_path, capsys):
    rc = run_main(pipeline, tmp_path / "o", extra=["--n-init", "100"])
    assert rc == 4
    assert "no image completed" in capsys.readouterr().err


def test_cmd_run_config_file_with_cli_override(pipeline, tmp_path):
    cfg = ExperimentConfig(
        image_dir=str(pipeline / "images"),
        out_dir=str(tmp_path / "from_file"),
        manifest_dir=str(pipeline / "out"),
        priors_dir=str(pipeline / "out"),
        subset="strong_tune",
        kernels=("rbf",),
        seed=9,
        n_init=4,
        n_iters=4,
        n_restarts_per_iter=2,
        fit_max_iter=15,
        n_baseline_repeats=5,
    )
    path = tmp_path / "cfg.txt"
    save_config(cfg, path)
    assert main(["run", "--config", str(path), "--n-iters", "2"]) == 0
    used = load_config(tmp_path / "from_file" / "config_used.txt")
    assert used.n_iters == 2  # command line beats the file
    assert used.seed == 9  # file beats the defaults
    assert used.out_dir == str(tmp_path / "from_file")
