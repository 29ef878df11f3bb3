import csv
import json

import numpy as np
import pytest

from lightsae import experiment
from lightsae.data import Dataset, synth_grouped, write_csv
from lightsae.errors import InputError, VariantError
from lightsae.experiment import ExperimentConfig


@pytest.fixture(scope="module")
def grouped_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "grouped.csv"
    ds, _ = synth_grouped(6, 1200, 2, noise=0.1, seed=0)
    write_csv(ds, path)
    return path


@pytest.fixture(scope="module")
def planted_csv(tmp_path_factory):
    # period-24 sinusoids; a 96-step window covers whole periods so RevIN stats are exact
    t = np.arange(2000)
    vals = np.column_stack([a * np.sin(2 * np.pi * t / 24 + p) + c
                            for a, p, c in [(1, 0, 0), (3, 1, 5), (0.5, 2, -2)]])
    path = tmp_path_factory.mktemp("data") / "planted.csv"
    write_csv(Dataset("planted", vals), path)
    return path


def config(path, out, variant="LightSAE", **train):
    return ExperimentConfig.from_dict({
        "dataset": str(path), "protocol": "ratio712", "L": 96, "H": 24,
        "backbone": {"kind": "RLinear", "d_model": 16},
        "embedding": {"variant": variant, "r": 2, "K": 2},
        "train": {"learning_rate": 1e-2, "max_epochs": 3, "seed": 0, **train},
        "output_dir": str(out),
    })


def test_planted_linear_run(planted_csv, tmp_path):
    cfg = config(planted_csv, tmp_path, variant="Shared", max_epochs=10, learning_rate=5e-3)
    report = experiment.run(cfg)
    assert report["metrics"]["test_mse"] < 1e-4


def test_report_contents_and_echo(grouped_csv, tmp_path):
    cfg = config(grouped_csv, tmp_path)
    report = experiment.run(cfg)
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == json.loads(json.dumps(report))
    assert ExperimentConfig.from_dict(on_disk["config"]) == cfg
    assert "wall_clock_s" not in on_disk["history"]
    assert json.loads((tmp_path / "timing.json").read_text())["wall_clock_s"] > 0
    assert on_disk["train_defaults"]["patience"] == 3
    for rel in on_disk["artifacts"]:
        assert (tmp_path / rel).is_file()
    assert (tmp_path / "weights" / "aux_c5.csv").is_file()


def test_rerun_is_bit_identical(grouped_csv, tmp_path):
    a = config(grouped_csv, tmp_path / "a")
    b = config(grouped_csv, tmp_path / "b")
    experiment.run(a)
    experiment.run(b)
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    ra["config"].pop("output_dir"), rb["config"].pop("output_dir")
    assert ra == rb


def test_missing_dataset(tmp_path):
    cfg = config(tmp_path / "absent.csv", tmp_path)
    with pytest.raises(InputError, match="absent.csv"):
        experiment.run(cfg)


def test_lookback_off_grid_warns(grouped_csv, tmp_path):
    with pytest.warns(UserWarning, match="L=50"):
        config(grouped_csv, tmp_path).with_(L=50)


def test_ablation_table(grouped_csv, tmp_path):
    rows = experiment.ablate(config(grouped_csv, tmp_path), ["Shared", "SAEFull", "LightSAE"])
    assert [r["variant"] for r in rows] == ["Shared", "SAEFull", "LightSAE"]
    assert rows[0]["dparams_pct"] == 0.0 and rows[0]["dMSE_pct"] == 0.0
    with (tmp_path / "ablation.csv").open() as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 3
    assert list(table[0]) == list(experiment.ABLATION_COLUMNS)
    assert table[2]["framework"] == "SAE" and table[2]["LR"] == "True" and table[2]["Pool"] == "True"


def test_ablation_rejects_unknown_variant(grouped_csv, tmp_path):
    with pytest.raises(VariantError):
        experiment.ablate(config(grouped_csv, tmp_path), ["Bogus"])


def test_apply_point_sweep(grouped_csv, tmp_path):
    rows = experiment.sweep_apply_point(config(grouped_csv, tmp_path / "sweep"))
    assert [r["apply_point"] for r in rows] == ["embedding", "head", "both", "none"]
    shared = experiment.run(config(grouped_csv, tmp_path / "shared", variant="Shared"))
    assert rows[3]["MSE"] == shared["metrics"]["test_mse"]
    assert (tmp_path / "sweep" / "apply_point.csv").is_file()


def test_analyze_modes_on_run_output(grouped_csv, tmp_path):
    experiment.run(config(grouped_csv, tmp_path))
    w = tmp_path / "weights"
    energy = experiment.analyze(w, "energy", tmp_path / "an")
    assert (tmp_path / "an" / "energy_aux_avg.csv").is_file() and len(energy) == 6 + 2
    (cos,) = experiment.analyze(w, "cosine", tmp_path / "an")
    assert np.loadtxt(cos, delimiter=",").shape == (6, 6)
    (gates,) = experiment.analyze(w, "gates", tmp_path / "an")
    assert gates.read_text().startswith("channel,g_1,g_2")
    (pool,) = experiment.analyze(w, "pool", tmp_path / "an")
    assert np.loadtxt(pool, delimiter=",").shape == (2, 2)


def test_analyze_rank_one_and_negation(tmp_path, rng):
    W = rng.standard_normal((4, 3))
    np.savetxt(tmp_path / "aux_c0.csv", np.outer(W[:, 0], W[0]), delimiter=",")
    experiment.analyze(tmp_path, "energy", tmp_path / "e")
    with (tmp_path / "e" / "energy_aux_c0.csv").open() as fh:
        first = list(csv.reader(fh))[1]
    assert float(first[1]) == pytest.approx(1.0, abs=1e-12)
    np.savetxt(tmp_path / "aux_c0.csv", W, delimiter=",")
    np.savetxt(tmp_path / "aux_c1.csv", -W, delimiter=",")
    (cos,) = experiment.analyze(tmp_path, "cosine", tmp_path / "c")
    assert np.allclose(np.loadtxt(cos, delimiter=","), [[1, -1], [-1, 1]], atol=1e-12)


def test_analyze_empty_dir(tmp_path):
    with pytest.raises(InputError):
        experiment.analyze(tmp_path, "energy")


def test_analyze_gates_on_shared_checkpoint(grouped_csv, tmp_path):
    experiment.run(config(grouped_csv, tmp_path, variant="Shared"))
    with pytest.raises(VariantError):
        experiment.analyze(tmp_path / "weights", "gates")
