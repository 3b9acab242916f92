import json

import numpy as np
import pytest

from laserprog.datagen import DatasetSpec, build_dataset
from laserprog.experiments import (
    EXPERIMENTS,
    ExperimentReport,
    ModelCache,
    early_windows,
    pipeline_config,
    run_experiment,
    run_pipeline,
    seeds_for,
)

FAST = {"encoder_sizes": (4, 3), "latent_dim": 2, "epochs": 1, "batch_size": 512}


@pytest.fixture(scope="module")
def spec():
    return DatasetSpec()


def test_pipeline_config_overrides_defaults():
    cfg = pipeline_config(3, epochs=7)
    assert cfg.seed == 3 and cfg.epochs == 7 and cfg.kl_weight == 0.002 and cfg.lr_final == 1e-4
    assert seeds_for(42, 3) == [42, 43, 44]


def test_model_cache_reuses_models(spec, tmp_path):
    ds = build_dataset(spec)
    cache = ModelCache(tmp_path)
    cfg = pipeline_config(0, **FAST)
    a = run_pipeline(ds, cfg, cache)
    b = run_pipeline(ds, cfg, cache)
    assert a.model is b.model and len(list(tmp_path.glob("model-*.json"))) == 1
    c = run_pipeline(ds, cfg, ModelCache(tmp_path))
    assert c.test_scores.tobytes() == a.test_scores.tobytes()


def test_early_windows_select_leading_degraded_windows(spec):
    test = build_dataset(spec).test
    mask = early_windows(test, 5000.0, 833.0)
    assert mask.any()
    assert np.all(test.t_start_h[mask] + 5 * 833.0 <= 5000.0)
    assert np.all(test.is_degraded[mask])


@pytest.mark.parametrize("name", ["early_prediction", "batch_robustness"])
def test_single_model_experiments_write_reports(spec, name, tmp_path):
    rep = run_experiment(name, spec, 0, cache=ModelCache(), **FAST)
    rep.write(tmp_path)
    d = json.loads((tmp_path / f"{name}.json").read_text())
    assert d["experiment"] == name and d["rows"] and d["config"]["seed"] == 0
    assert (tmp_path / f"{name}.txt").read_text().splitlines()[0].split() == rep.columns
    assert (tmp_path / f"{name}.csv").read_text().splitlines()[0] == ",".join(rep.columns)


def test_batch_robustness_rows(spec):
    rep = run_experiment("batch_robustness", spec, 0, cache=ModelCache(), **FAST)
    assert [r["batch_id"] for r in rep.rows] == [0, 1, 2]
    assert rep.rows[2]["currents"] == "10;15;20" and rep.rows[1]["temperatures"] == "50;70;90"


def test_multi_seed_experiments_report_medians(spec):
    rep = run_experiment("oc_ablation", spec, 0, cache=ModelCache(), n_seeds=2, **FAST)
    assert rep.config["options"] == {"n_seeds": 2} and rep.config["model"]["epochs"] == 1
    assert {r["variant"] for r in rep.rows} == {"with oc", "without oc"} and len(rep.rows) == 4
    f1s = [r["f1"] for r in rep.rows if r["variant"] == "with oc"]
    assert rep.summary["with oc"]["median_f1"] == pytest.approx(np.median(f1s))

    rep = run_experiment("baselines", spec, 0, cache=ModelCache(), n_seeds=1, **FAST)
    assert {r["method"] for r in rep.rows} == {"SCVAE", "GRU-AE", "LOF"}
    assert rep.summary["LOF"]["k"] == 100


def test_seqlen_sweep_covers_lengths(spec):
    rep = run_experiment("seqlen_sweep", spec, 0, cache=ModelCache(), lengths=(5, 6), **FAST)
    assert [r["seq_len"] for r in rep.rows] == [5, 6]
    assert rep.summary["best_seq_len"] in (5, 6)


def test_unknown_experiment():
    with pytest.raises(KeyError):
        run_experiment("nope", DatasetSpec(), 0)
    assert set(EXPERIMENTS) == {"oc_ablation", "seqlen_sweep", "baselines", "early_prediction", "batch_robustness"}


def test_report_table_alignment():
    rep = ExperimentReport("t", ["a", "b"], [{"a": 1, "b": 0.5}, {"a": 22, "b": None}], {})
    lines = rep.table().splitlines()
    assert lines[0].split() == ["a", "b"] and set(lines[1]) == {"-", " "}
    assert lines[2].split() == ["1", "0.5000"] and lines[3].split() == ["22"]
