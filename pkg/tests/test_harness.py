import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from loftlab.errors import ConfigError, FormatError, OverPruneError, PreconditionError
from loftlab.harness import cli, pipeline
from loftlab.harness.config import (OUTPUT_DIR_ENV, DatasetSpec, load_config, parse_config, with_overrides)
from loftlab.harness.datasets import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, load_dataset, read_idx, synthetic_images,
                                      synthetic_theory)
from loftlab.harness.outputs import MANIFEST, emit_outputs
from loftlab.harness.pipeline import RESULT_HEADERS, ResultBundle, run_theory_suite, run_ticket_pipeline
from loftlab.util import FileManager, Randomizer

THEORY_INI = """
[experiment]
mode = theory
seeds = 0, 1

[theory]
m = 16
n = 4
T = 5
m_grid = 16, 32
moment_trials = 10000
"""

SYSTEM_INI = """
[experiment]
mode = system
seeds = 0, 1
pretrain_epochs = 2
finetune_epochs = 1
pruning_ratios = 0.0, 0.5
ticket_rounds = 1

[dataset]
n = 64

[schedule]
workers = 2
local_iterations = 2
batch_size = 16

[finetune]
batch_size = 16
"""


@pytest.fixture
def saving(monkeypatch):
    monkeypatch.setattr(FileManager, "saving_enabled", True)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_minimal_theory_config():
    cfg = parse_config("[experiment]\nmode = theory\nseeds = 0\n\n[theory]\nm = 16\nn = 4\n")
    base = cfg.theory.base
    assert (base.m, base.n, base.eta_coeff, base.xi, base.S) == (16, 4, 1.0, 1.0, 1)
    assert base.kappa == pytest.approx(0.5)
    assert cfg.theory.cells() == [(16, 1)]
    assert (cfg.dataset.source, cfg.dataset.h, cfg.dataset.w, cfg.dataset.normalize) == ("synthetic_theory", 4, 4, True)


def test_minimal_system_config():
    cfg = parse_config("[experiment]\nmode = system\nseeds = 3\n")
    assert cfg.schedule.local_iterations == 1
    assert cfg.schedule.eta_schedule == "constant"
    assert cfg.schedule.rounds == 20
    assert cfg.stack.conv_shapes[2] == (16, 16, 3, 3)
    assert cfg.protocols == ("loft", "local_sgd", "dense")
    assert cfg.pruning_ratios == (0.3, 0.5, 0.8)


def test_rounds_follow_epochs():
    assert parse_config(SYSTEM_INI).schedule.rounds == 2
    cfg = parse_config(SYSTEM_INI.replace("workers = 2", "workers = 2\nrounds_per_epoch = 3"))
    assert cfg.schedule.rounds == 6
    assert cfg.schedule.checkpoint_rounds == (1,)


def test_pruning_ratio_out_of_range():
    text = "[experiment]\nmode = system\nseeds = 0\npruning_ratios = 0.5, 1.2\n"
    with pytest.raises(ConfigError, match=r"pruning ratio outside \[0,1\)") as info:
        parse_config(text)
    assert info.value.lineno == 4


def test_indivisible_channels_name_the_workers():
    text = "[experiment]\nmode = system\nseeds = 0\n\n[model]\nchannels = 8, 16, 6, 32\n\n[schedule]\nworkers = 4\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "workers"
    assert info.value.lineno == 9


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError) as info:
        parse_config("[experiment]\nmode = theory\nseeds = 0\nsped = 3\n")
    assert (info.value.field, info.value.lineno) == ("sped", 4)
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nmode = theory\nseeds = 0\n[optimizer]\nlr = 1\n")


def test_syntax_errors_report_their_line():
    with pytest.raises(ConfigError) as info:
        parse_config("[experiment]\nmode = theory\nthis line is broken\n")
    assert info.value.lineno == 3
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nmode = theory\nseeds = zero\n")


@pytest.mark.parametrize("text", [
    "[experiment]\nmode = simulation\nseeds = 0\n",
    "[experiment]\nmode = theory\nseeds =\n[theory]\nm = 4\nn = 2\n",
    "[experiment]\nmode = theory\nseeds = 0\n[theory]\nm = 4\n",
    "[experiment]\nmode = theory\nseeds = 0\n[theory]\nm = 4\nn = 2\nxi = 0\n",
    "[experiment]\nmode = system\nseeds = 0\nprotocols = loft, ring\n",
    "[experiment]\nmode = system\nseeds = 0\n[dataset]\nsource = synthetic_theory\n",
    "[experiment]\nmode = system\nseeds = 0\n[dataset]\nsource = idx_files\n",
    "[experiment]\nmode = system\nseeds = 0\n[schedule]\neta_schedule = linear\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_and_overrides(tmp_path):
    path = write(tmp_path / "theory.ini", THEORY_INI)
    cfg = load_config(path, env={})
    assert cfg.output_dir == "loftlab-out"
    moved = load_config(path, env={OUTPUT_DIR_ENV: str(tmp_path / "elsewhere")})
    assert moved.output_dir == str(tmp_path / "elsewhere")
    assert moved.config_hash() == cfg.config_hash()
    single = with_overrides(cfg, seed=7)
    assert single.seeds == (7,)
    assert single.config_hash() != cfg.config_hash()
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.ini"))


def test_random_streams_are_keyed():
    a = Randomizer.stream(3, "worker", 1, 0).random(4)
    assert np.array_equal(a, Randomizer.stream(3, "worker", 1, 0).random(4))
    assert not np.array_equal(a, Randomizer.stream(3, "worker", 1, 1).random(4))
    assert not np.array_equal(a, Randomizer.stream(3, "partition", 1, 0).random(4))
    with pytest.raises(ValueError):
        Randomizer.stream(3, "weather")
    assert sorted(Randomizer.PURPOSES.values()) == list(range(len(Randomizer.PURPOSES)))


def test_synthetic_datasets():
    X, y = synthetic_theory(DatasetSpec(source="synthetic_theory", n=6, h=4, w=4, label_bound=0.5), 9, np.random.default_rng(0))
    assert X.shape == (6, 1, 4, 4)
    assert np.allclose(np.linalg.norm(X.reshape(6, -1), axis=1), 1 / 3)
    assert np.all(np.abs(y) <= 0.5)
    X, y = synthetic_images(DatasetSpec(n=40, d_hat=2, num_classes=4), np.random.default_rng(0))
    assert X.shape == (40, 2, 8, 8)
    assert np.bincount(y).tolist() == [10, 10, 10, 10]


def test_load_dataset_splits_images():
    spec = DatasetSpec(n=100)
    data = load_dataset(spec, np.random.default_rng(2))
    assert len(data.X) == 80 and len(data.X_test) == 20
    again = load_dataset(spec, np.random.default_rng(2))
    assert np.array_equal(data.X, again.X) and np.array_equal(data.y_test, again.y_test)
    theory = load_dataset(DatasetSpec(source="synthetic_theory", n=5, h=4, w=4), np.random.default_rng(2))
    assert len(theory.X) == 5 and len(theory.X_test) == 0


def idx_bytes(magic, dims, payload):
    return np.array([magic, *dims], dtype=">u4").tobytes() + np.asarray(payload, dtype=np.uint8).tobytes()


def test_idx_files(tmp_path):
    pixels = np.arange(2 * 28 * 28) % 256
    (tmp_path / "images.idx").write_bytes(idx_bytes(IDX_IMAGES_MAGIC, (2, 28, 28), pixels))
    (tmp_path / "labels.idx").write_bytes(idx_bytes(IDX_LABELS_MAGIC, (2,), [3, 7]))
    images = read_idx(str(tmp_path / "images.idx"), IDX_IMAGES_MAGIC)
    assert images.shape == (2, 28, 28)
    assert images[1, 0, 0] == (28 * 28) % 256
    spec = DatasetSpec(source="idx_files", n=2, h=28, w=28, num_classes=10, test_fraction=0.5,
                       images_path=str(tmp_path / "images.idx"), labels_path=str(tmp_path / "labels.idx"))
    data = load_dataset(spec, np.random.default_rng(0))
    assert sorted(data.y.tolist() + data.y_test.tolist()) == [3, 7]
    assert data.X.max() <= 1.0


def test_idx_format_errors(tmp_path):
    (tmp_path / "labels.idx").write_bytes(idx_bytes(IDX_LABELS_MAGIC, (2,), [3, 7]))
    with pytest.raises(FormatError):
        read_idx(str(tmp_path / "labels.idx"), IDX_IMAGES_MAGIC)
    (tmp_path / "short.idx").write_bytes(idx_bytes(IDX_IMAGES_MAGIC, (2, 28, 28), np.zeros(100)))
    with pytest.raises(FormatError):
        read_idx(str(tmp_path / "short.idx"), IDX_IMAGES_MAGIC)
    with pytest.raises(FileNotFoundError):
        read_idx(str(tmp_path / "nothing.idx"), IDX_IMAGES_MAGIC)


def test_csv_files(tmp_path):
    path = write(tmp_path / "data.csv", "label,a,b,c,d\n1,0.1,0.2,0.3,0.4\n0,1,2,3,4\n1,5,6,7,8\n")
    spec = DatasetSpec(source="csv_file", n=3, h=2, w=2, num_classes=2, test_fraction=0.0, csv_path=path)
    data = load_dataset(spec, np.random.default_rng(0))
    assert sorted(data.y.tolist()) == [0, 1, 1]
    assert data.X.shape == (3, 1, 2, 2)
    bad = write(tmp_path / "bad.csv", "0.5,1,2,3,4\n")
    with pytest.raises(FormatError):
        load_dataset(DatasetSpec(source="csv_file", n=1, h=2, w=2, test_fraction=0.0, csv_path=bad), np.random.default_rng(0))


def test_theory_suite():
    cfg = parse_config(THEORY_INI)
    bundle = run_theory_suite(cfg)
    assert bundle.ok
    assert bundle.mode == "theory"
    weight_devs = [row[5] for row in bundle.results if row[4] == "weight_dev"]
    assert len(weight_devs) == 4
    assert max(weight_devs) <= 1e-20
    assert all(row[6] == "ok" for row in bundle.results)
    assert [row[:2] for row in bundle.summary] == [[16, 1], [32, 1]]
    assert all(row[-1] == 2 for row in bundle.summary)
    assert {row[0] for row in bundle.curves} >= {"loss[m=16;S=1]", "drift[m=32;S=1]"}
    assert len(bundle.moments) == 5
    with pytest.raises(PreconditionError):
        run_ticket_pipeline(cfg)


def test_theory_moments_follow_the_grid():
    cfg = parse_config(THEORY_INI.replace("T = 5", "T = 2\nxi = 0.5\nS_grid = 1, 2, 4"))
    bundle = run_theory_suite(cfg)
    thetas = {row[1]: row[3] for row in bundle.moments}
    assert thetas == pytest.approx({1: 0.5, 2: 0.75, 4: 0.9375})


def test_empty_bundle_writes_only_the_manifest(tmp_path, saving):
    manifest = emit_outputs(ResultBundle(mode="theory", config_hash="abc"), str(tmp_path))
    assert manifest["artifacts"] == []
    assert os.listdir(tmp_path) == [MANIFEST]


def test_theory_outputs_are_reproducible(tmp_path, saving):
    cfg = parse_config(THEORY_INI)
    first = emit_outputs(run_theory_suite(cfg), str(tmp_path / "a"))
    second = emit_outputs(run_theory_suite(cfg), str(tmp_path / "b"))
    assert [a["sha256"] for a in first["artifacts"]] == [b["sha256"] for b in second["artifacts"]]
    files = {a["file"] for a in first["artifacts"]}
    assert {"results.csv", "curves.csv", "moments.csv", "summary.csv"} <= files
    assert "heatmap.csv" not in files
    results = pd.read_csv(tmp_path / "a" / "results.csv")
    assert list(results.columns) == RESULT_HEADERS
    assert set(results["metric"]) >= {"weight_dev", "lambda0", "theta"}
    with open(tmp_path / "a" / MANIFEST, encoding="utf-8") as f:
        assert json.load(f)["config_hash"] == cfg.config_hash()


@pytest.fixture(scope="module")
def system_bundle():
    return run_ticket_pipeline(parse_config(SYSTEM_INI))


def test_ticket_pipeline_rows(system_bundle):
    bundle = system_bundle
    assert bundle.ok
    assert len(bundle.heatmap) == 3 * 3 * 3
    assert {row[0] for row in bundle.heatmap} == {"loft/block1.conv0", "local_sgd/block1.conv0", "dense/block1.conv0"}
    assert [row[0] for row in bundle.ledger_summary] == ["loft", "local_sgd", "dense", "gpipe_model"]
    assert bundle.ledger_summary[0][6] == 1.0
    gpipe = bundle.ledger_summary[-1]
    assert gpipe[:6] == ["gpipe_model", 2, 4, 131072 * 4, 131072 * 4, 131072 * 8]
    assert gpipe[6] == pytest.approx(gpipe[5] / bundle.ledger_summary[0][5])
    assert gpipe[6] > 1.0
    assert sum(row[0] == "gpipe_model" for row in bundle.ledger) == 4
    assert len(bundle.summary) == 3 * 2 * 2
    assert all(row[-1] == 2 for row in bundle.summary)
    accuracies = [row[5] for row in bundle.results if row[4] == "test_accuracy"]
    assert all(0.0 <= a <= 1.0 for a in accuracies)
    assert set(bundle.weights) == {f"checkpoint/seed{s}_{p}.pkl" for s in (0, 1) for p in ("loft", "local_sgd", "dense")}
    distances = [row for row in bundle.curves if row[0] == "distance_to_final/loft" and row[3] == 0]
    assert [row[1] for row in distances] == [0, 1, 2]
    assert distances[-1][2] == 0.0


def test_ticket_outputs_are_reproducible(tmp_path, saving, system_bundle):
    first = emit_outputs(system_bundle, str(tmp_path / "a"))
    second = emit_outputs(run_ticket_pipeline(parse_config(SYSTEM_INI)), str(tmp_path / "b"))
    assert [(a["file"], a["sha256"]) for a in first["artifacts"]] == [(b["file"], b["sha256"]) for b in second["artifacts"]]
    assert os.path.exists(tmp_path / "a" / "checkpoint" / "seed0_loft.pkl")
    summary = pd.read_csv(tmp_path / "a" / "summary.csv")
    assert list(summary.columns) == pipeline.TICKET_SUMMARY_HEADERS


def test_failed_cells_are_recorded(monkeypatch):
    original = pipeline.prune_filters

    def fragile(weights, spec, ratio):
        if ratio == 0.5:
            raise OverPruneError("nothing left")
        return original(weights, spec, ratio)
    monkeypatch.setattr(pipeline, "prune_filters", fragile)
    cfg = parse_config(SYSTEM_INI.replace("seeds = 0, 1", "seeds = 0").replace("ticket_rounds = 1\n", ""))
    bundle = run_ticket_pipeline(cfg)
    assert bundle.failures == 3
    failed = [row for row in bundle.results if row[6] != "ok"]
    assert len(failed) == 3
    assert all(row[6].startswith("error:OverPruneError") and math.isnan(row[5]) for row in failed)
    assert any(row[6] == "ok" and "ratio=0.0" in row[2] for row in bundle.results)
    assert [row[-1] for row in bundle.summary if row[1] == 0.5] == [0, 0, 0]


def test_cli_parser():
    args = cli.build_parser().parse_args(["run", "exp.ini", "--seed", "3", "--out", "out"])
    assert (args.command, args.config, args.seed, args.out) == ("run", "exp.ini", 3, "out")
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train"])


def test_cli_check(capsys):
    assert cli.main(["--log-level", "WARNING", "check"]) == 0
    out = capsys.readouterr().out
    assert "loft_matches_gd" in out and "FAIL" not in out


def test_cli_run_and_report(tmp_path, saving, capsys):
    config = write(tmp_path / "theory.ini", THEORY_INI)
    outdir = tmp_path / "out"
    assert cli.main(["--log-level", "WARNING", "theory", config, "--out", str(outdir), "--seed", "0"]) == 0
    with open(outdir / MANIFEST, encoding="utf-8") as f:
        manifest = json.load(f)
    assert manifest["failures"] == 0
    assert cli.main(["report", str(outdir)]) == 0
    assert "median_weight_dev" in capsys.readouterr().out
    assert cli.main(["report", str(tmp_path)]) == 1


def test_cli_error_codes(tmp_path):
    system = write(tmp_path / "system.ini", SYSTEM_INI)
    broken = write(tmp_path / "broken.ini", "[experiment]\nmode = system\nseeds = 0\npruning_ratios = 1.2\n")
    assert cli.main(["--log-level", "WARNING", "theory", system]) == 2
    assert cli.main(["--log-level", "WARNING", "run", broken]) == 2
    assert cli.main(["--log-level", "WARNING", "run", str(tmp_path / "missing.ini")]) == 2


@pytest.mark.slow
def test_partitioned_tickets_match_dense_tickets():
    text = """
[experiment]
mode = system
seeds = 0, 1, 2, 3, 4
pretrain_epochs = 20
finetune_epochs = 10
pruning_ratios = 0.5
protocols = loft, dense

[dataset]
n = 400

[schedule]
workers = 2
local_iterations = 10
batch_size = 32
eta_schedule = cosine
"""
    cfg = parse_config(text)
    bundle = run_ticket_pipeline(cfg)
    assert bundle.ok
    medians = {row[0]: row[3] for row in bundle.summary}
    assert abs(medians["loft"] - medians["dense"]) <= 0.03
    curves = pd.DataFrame(bundle.curves, columns=["metric", "t", "value", "seed"])
    loft = curves[curves.metric == "distance_to_final/loft"].pivot(index="t", columns="seed", values="value")
    median_curve = loft.median(axis=1).to_numpy()
    E = cfg.schedule.rounds + 1
    assert len(median_curve) == E
    assert np.all(np.diff(median_curve[-(E // 3):]) <= 0)
