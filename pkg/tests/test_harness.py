import json
from dataclasses import replace
from pathlib import Path

import pytest

from groundbody import harness
from groundbody.augment import STRATEGIES
from groundbody.cli import apply_overrides, main
from groundbody.cloudcore import read_pcd
from groundbody.errors import StageError
from groundbody.harness import ExperimentConfig, SweepResult, run_pipeline, run_sweep
from groundbody.nanocnn import Metrics


class FakeResult:
    def __init__(self, acc):
        m = Metrics(acc, acc, 1, 0, 0, 1)
        self.metrics = {"clean": m, "shifted": m}


def fake_runner(cfg):
    total = sum(cfg.plan.values())
    return FakeResult(0.5 + total / 100000)


def test_sweep_counts_cells(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path))
    res = run_sweep(cfg, csv_path=tmp_path / "s.csv", runner=fake_runner)
    assert len(res.rows) == 1 + len(STRATEGIES) * 10 == 61
    assert res.rows[0]["strategy"] == "baseline" and res.rows[0]["count"] == 0
    back = SweepResult.read_csv(tmp_path / "s.csv")
    assert [(r["strategy"], r["count"]) for r in back.rows] == [(r["strategy"], r["count"]) for r in res.rows]


def test_sweep_empty_strategies_is_baseline(tmp_path):
    res = run_sweep(ExperimentConfig(out_dir=str(tmp_path)), [], [1000], tmp_path / "s.csv", fake_runner)
    assert [r["strategy"] for r in res.rows] == ["baseline"]
    with pytest.raises(ValueError):
        run_sweep(ExperimentConfig(out_dir=str(tmp_path)), [], [], tmp_path / "s.csv", fake_runner)


def test_sweep_flushes_partial_results(tmp_path):
    def flaky(cfg):
        if cfg.plan.get("snp") == 2000:
            raise RuntimeError("cell failed")
        return fake_runner(cfg)

    with pytest.raises(RuntimeError):
        run_sweep(ExperimentConfig(out_dir=str(tmp_path)), ["snp"], [1000, 2000, 3000], tmp_path / "s.csv", flaky)
    rows = SweepResult.read_csv(tmp_path / "s.csv").rows
    assert [(r["strategy"], r["count"]) for r in rows] == [("baseline", 0), ("snp", 1000), ("snp", 3000)]


def test_config_roundtrip_and_validation(tmp_path):
    cfg = ExperimentConfig(out_dir=str(tmp_path), plan={"segment": 400})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(train_per_class=0)
    assert cfg.run_key() == replace(cfg, workers=4, out_dir="elsewhere").run_key()
    assert cfg.run_key() != replace(cfg, master_seed=1).run_key()


def test_out_dir_from_environment(monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, "/somewhere")
    assert ExperimentConfig().out_dir == "/somewhere"


def test_count_scale():
    cfg = ExperimentConfig(plan={"sensor": 2000, "segment": 6000}, count_scale=0.1)
    assert cfg.aug_plan().counts == {"sensor": 200, "segment": 600}


def test_apply_overrides():
    d = apply_overrides({"raster": {"m": 64}}, ["raster.tau=0.05", "plan.segment=400", "min_area=3",
                                                 "domains=[\"clean\"]"])
    assert d == {"raster": {"m": 64, "tau": 0.05}, "plan": {"segment": 400}, "min_area": 3, "domains": ["clean"]}
    with pytest.raises(ValueError):
        apply_overrides({}, ["novalue"])


def tiny(tmp_path, **kw):
    d = dict(train_per_class=6, val_per_class=2, test_per_class=4, train={"epochs": 3},
             out_dir=str(tmp_path), master_seed=3)
    d.update(kw)
    return ExperimentConfig(**d)


def test_small_pipeline_writes_run(tmp_path):
    res = run_pipeline(tiny(tmp_path))
    assert set(res.metrics) == {"clean", "shifted"}
    for m in res.metrics.values():
        assert sum(m.confusion) == 8 and 0 <= m.accuracy <= 1
    assert len(res.history) == 3 and res.n_train_rois > 0
    saved = json.loads((res.run_dir / "metrics.json").read_text())
    assert saved["metrics"]["clean"] == res.metrics["clean"].to_json()
    assert (res.run_dir / "model.bin").exists()


def test_small_pipeline_deterministic_across_workers(tmp_path):
    a = run_pipeline(tiny(tmp_path / "a", plan={"segment": 4, "snp": 2}))
    b = run_pipeline(tiny(tmp_path / "b", plan={"segment": 4, "snp": 2}, workers=2))
    assert a.summary() == b.summary() and a.history == b.history
    assert (a.run_dir / "model.bin").read_bytes() == (b.run_dir / "model.bin").read_bytes()


def test_shifted_domain_is_corrupted(tmp_path):
    cfg = tiny(tmp_path)
    m = harness.make_shifted_domain(cfg)
    assert len(m.entries) == 8
    for e in m.entries:
        assert e["provenance"]["strategy"] == "shifted"
        cloud = read_pcd(m.path_of(e))
        assert cloud.n_valid <= cloud.width * cloud.height // 20 + 1


def test_cli_train_infer_eval(tmp_path, capsys):
    common = ["--out", str(tmp_path), "--set", "train_per_class=6", "--set", "test_per_class=3",
              "--set", "val_per_class=2", "--set", "train.epochs=2"]
    model = tmp_path / "m.bin"
    assert main(["train", *common, "--model", str(model)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["model"] == str(model) and len(out["loss_history"]) == 2

    pcd = next(Path(tmp_path, "data").glob("*/test/clouds/*.pcd"))
    assert main(["infer", str(pcd), "--model", str(model), "--dump", str(tmp_path / "dump")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert isinstance(res["casualty"], bool)
    for r in res["rois"]:
        assert abs(r["p_casualty"] + r["p_non_casualty"] - 1) < 1e-9
    assert any((tmp_path / "dump").iterdir())

    assert main(["eval", *common, "--model", str(model)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"clean", "shifted"}


def test_cli_errors(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "bogus=1"]) == 1
    assert "error: [train] ValueError" in capsys.readouterr().err
    assert main(["infer", str(tmp_path / "missing.pcd"), "--model", str(tmp_path / "m.bin")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--external-pcd-dir", str(tmp_path / "nope")]) == 1
    assert main(["train", "--out", str(tmp_path), "--set", "train_per_class=2", "--set", "test_per_class=1",
                 "--set", "val_per_class=1", "--set", "train.lr=-1"]) == 1
    assert "[train]" in capsys.readouterr().err


def test_stage_error_wraps():
    @harness._stage("demo")
    def boom():
        raise KeyError("x")

    with pytest.raises(StageError) as info:
        boom()
    assert info.value.stage == "demo" and isinstance(info.value.cause, KeyError)


def test_roi_labels_follow_body_overlap(tmp_path):
    cfg = tiny(tmp_path)
    m = harness.make_datasets(cfg)["train"]
    feats = harness.featurize(m, cfg)
    for e, f in zip(m.entries, feats):
        assert len(f.roi_labels) == len(f.patches) == len(f.bboxes)
        if e["label"] == "non-casualty":
            assert set(f.roi_labels) <= {"non-casualty"}
    hits = [("casualty" in f.roi_labels) for e, f in zip(m.entries, feats) if e["label"] == "casualty"]
    assert sum(hits) >= len(hits) - 1
