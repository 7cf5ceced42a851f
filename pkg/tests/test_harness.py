"""Configuration, pipeline resume, comparison metrics and export."""
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from momentflow import filtered, formats, harness


def summary(mean, lower, upper, var=None, n=None):
    n = len(mean) if n is None else n
    pts = np.linspace(-1, 1, n)[:, None]
    var = np.ones(n) if var is None else var
    return filtered.FieldSummary(pts, np.asarray(mean, float), np.asarray(lower, float),
                                 np.asarray(upper, float), np.asarray(var, float))


# -- configuration ----------------------------------------------------------


def test_default_configs_validate():
    for pde in ("burgers", "vlasov"):
        harness.desk_config(pde).validate()
        harness.paper_config(pde).validate()
    assert harness.desk_config("burgers").online.mu_test == 0.005
    assert harness.desk_config("vlasov").online.mu_test == 0.375
    full = harness.paper_config("burgers")
    assert (full.data.m, full.data.n_cells, full.data.K) == (34, 256, 100)
    assert full.online.collocation == [1000]


def test_zero_snapshots_rejected():
    d = harness.desk_config().to_dict()
    d["data"]["K"] = 0
    with pytest.raises(harness.ConfigError, match="K"):
        harness.ExperimentConfig.from_dict(d)


def test_unknown_keys_rejected():
    d = harness.desk_config().to_dict()
    d["data"]["grid"] = 5
    with pytest.raises(harness.ConfigError, match="unknown"):
        harness.ExperimentConfig.from_dict(d)
    d = harness.desk_config().to_dict()
    d["extra"] = 1
    with pytest.raises(harness.ConfigError, match="unknown"):
        harness.ExperimentConfig.from_dict(d)


def test_schema_version_checked():
    d = harness.desk_config().to_dict()
    d["schema_version"] = 99
    with pytest.raises(harness.ConfigError, match="schema"):
        harness.ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("section,key,value", [
    ("online", "mu_test", 0.5),
    ("online", "integrator", "midpoint"),
    ("online", "collocation", [16, 16]),
    ("uq", "times", [0.2537]),
    ("uq", "times", [2.0]),
    ("uq", "level", 1.5),
    ("train", "mc_samples", 0),
])
def test_invalid_values_rejected(section, key, value):
    d = harness.desk_config().to_dict()
    d[section][key] = value
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.from_dict(d)


def test_output_dir_must_be_directory(tmp_path):
    f = tmp_path / "file"
    f.write_text("")
    d = harness.desk_config().to_dict()
    d["output_dir"] = str(f)
    with pytest.raises(harness.ConfigError, match="directory"):
        harness.ExperimentConfig.from_dict(d)


def test_config_round_trip(tmp_path):
    cfg = harness.desk_config("vlasov")
    cfg.save(tmp_path / "c.json")
    back = harness.ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.digest() == cfg.digest()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(harness.ConfigError):
        harness.ExperimentConfig.load(tmp_path / "bad.json")


def test_digest_ignores_output_dir():
    a = harness.desk_config()
    b = harness.desk_config(output_dir="elsewhere")
    assert a.digest() == b.digest()
    b.seed = 1
    assert a.digest() != b.digest()


def test_stage_seeds_are_distinct_and_stable():
    s = {harness.stage_seed(0, lab) for lab in harness.STAGES}
    assert len(s) == len(harness.STAGES)
    assert harness.stage_seed(3, "ensemble") == harness.stage_seed(3, "ensemble")


def test_output_override(monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ENV, "/tmp/elsewhere")
    assert harness.apply_output_override(harness.desk_config()).output_dir == "/tmp/elsewhere"


# -- metrics ----------------------------------------------------------------


def test_compare_with_itself():
    rng = np.random.default_rng(0)
    m = rng.normal(size=9)
    s = summary(m, m - 1, m + 1, rng.uniform(size=9))
    rep = harness.compare({0.5: s}, {0.5: s}, [0.5])
    assert rep.mean_rel_l2 == [0.0]
    assert rep.width_rel_diff == [0.0]
    assert rep.overlap == [1.0]
    assert rep.var_correlation[0] == pytest.approx(1.0)


def test_mean_difference_symmetric_and_zero_iff_equal():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 20))
    assert harness.mean_difference(a, b) == harness.mean_difference(b, a)
    assert harness.mean_difference(a, a) == 0.0
    assert harness.mean_difference(a, a + 1e-9) > 0.0


def test_width_and_overlap_values():
    assert harness.width_difference([0, 0], [2, 2], [0, 0], [1, 1]) == 1.0
    assert harness.overlap_fraction(np.array([0, 0, 5.0]), np.array([1, 1, 6.0]),
                                    np.array([0.5, 2, 0]), np.array([2, 3, 1.0])) == pytest.approx(1 / 3)


def test_compare_errors():
    s = summary([1.0, 2.0], [0, 1], [2, 3])
    with pytest.raises(KeyError):
        harness.compare({0.5: s}, {0.25: s}, [0.5])
    t = summary([1.0, 2.0, 3.0], [0, 1, 2], [2, 3, 4])
    with pytest.raises(ValueError, match="grids"):
        harness.compare({0.5: s}, {0.5: t}, [0.5])


def test_summary_table_round_trip(tmp_path):
    s = summary([1.0, 2.0, 3.0], [0, 1, 2], [2, 3, 4], [0.1, 0.2, 0.3])
    harness.write_summary(tmp_path / "f.txt", "burgers", s)
    back = harness.read_summary(tmp_path / "f.txt")
    for k in ("points", "mean", "lower", "upper", "var"):
        assert_array_equal(getattr(back, k), getattr(s, k))


# -- pipeline ---------------------------------------------------------------


def artifact_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_runs_all_stages(tiny_config):
    root = harness.run_pipeline(tiny_config)
    for rel in ("data/manifest.json", "model/model.ngcm", "model/train_log.txt",
                "fng/moments.ngfd", "fng/fields_t0.0200.txt",
                "ensemble/members_M4.ngfd", "ensemble/fields_M2_t0.0100.txt",
                "compare/report.json", "bench/runtime.json"):
        assert (root / rel).exists(), rel
    rep = formats.read_json(root / "compare" / "report.json")
    assert set(rep) == {"fng_vs_reference", "ensembles_vs_reference"}
    assert rep["ensembles_vs_reference"]["2"]["times"] == [0.01, 0.02]
    members = formats.read_blob(root / "ensemble" / "members_M4.ngfd")
    assert members.shape == (4, 3, 3)
    assert_array_equal(formats.read_blob(root / "ensemble" / "members_M2.ngfd"), members[:2])


def test_pipeline_resume_skips_and_regenerates(tiny_config):
    root = harness.run_pipeline(tiny_config)
    before = artifact_bytes(root)
    mtime = (root / "model" / "model.ngcm").stat().st_mtime_ns
    for p in (root / "ensemble").iterdir():
        p.unlink()
    (root / "compare" / "report.json").unlink()
    (root / "compare" / "stage.json").unlink()
    harness.run_pipeline(tiny_config)
    after = artifact_bytes(root)
    assert (root / "model" / "model.ngcm").stat().st_mtime_ns == mtime
    for k, v in before.items():
        if k not in harness.TIMING_FILES:
            assert after[k] == v, k


def test_pipeline_stage_failure_names_stage(tiny_config):
    tiny_config.online.collocation = [2]
    with pytest.raises(harness.StageError, match="solve-fng"):
        harness.run_pipeline(tiny_config, stages=("gen-data", "pretrain", "solve-fng"))
    assert (harness.Pipeline(tiny_config).path("model", "model.ngcm")).exists()


def test_changed_config_invalidates_marker(tiny_config):
    harness.run_pipeline(tiny_config, stages=("gen-data",))
    pipe = harness.Pipeline(tiny_config)
    assert pipe._done("gen-data")
    tiny_config.data.K = 3
    assert not harness.Pipeline(tiny_config)._done("gen-data")


def test_bench_table(tiny_config):
    harness.run_pipeline(tiny_config, stages=("gen-data", "pretrain"))
    model, hyper = harness.Pipeline(tiny_config).load_model()
    table = harness.bench(tiny_config, model, hyper)
    assert set(table["ensemble"]) == {"1", "2"}
    assert table["workers"] == 1
    assert all(v > 0 for v in table["speedup"].values())
    assert table["fng"]["median"] > 0


def test_export_tables(tiny_config):
    root = harness.run_pipeline(tiny_config)
    files = harness.export_plot_data(root)
    assert len(files) == 2 * 3
    header, data = formats.read_table(root / "export" / "fng_t0.0200.txt")
    assert header == ["x", "mean", "lower", "upper"]
    assert data.shape == (32, 4)
    with pytest.raises(ValueError, match="outside"):
        harness.export_plot_data(root, [5.0])
    with pytest.raises(KeyError):
        harness.export_plot_data(root, [0.015])
    (root / "fng" / "fields_t0.0100.txt").unlink()
    with pytest.raises(FileNotFoundError):
        harness.export_plot_data(root, [0.01])


def test_ensemble_size_study_shapes(tiny_config):
    harness.run_pipeline(tiny_config, stages=("gen-data", "pretrain", "ensemble"))
    pipe = harness.Pipeline(tiny_config)
    model, hyper = pipe.load_model()
    ref = pipe.ensemble_summaries(4)
    out = harness.ensemble_size_study(model, pipe.initial_belief(hyper), tiny_config,
                                      [2, 4], [0, 1], ref, tiny_config.uq.times)
    assert set(out) == {2, 4}
    assert all(np.isfinite(v) for v in out.values())


def test_saved_config_is_valid_json(tiny_config):
    root = harness.run_pipeline(tiny_config, stages=("gen-data",))
    d = json.loads((root / "config.json").read_text())
    assert harness.ExperimentConfig.from_dict(d) == tiny_config
