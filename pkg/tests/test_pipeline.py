import json
import os
import re

import numpy as np
import pytest
import yaml

from lidarsem.cli import main
from lidarsem.errors import ConfigError, DataError
from lidarsem.pipeline import (PipelineConfig, cmd_classify, cmd_eval, cmd_project, cmd_synth, cmd_train)
from lidarsem.scan_io import CLASS_NAMES, read_ground_truth, read_labels, write_labels
from lidarsem.pixel_scorer import load_model, save_model


def write_cfg(d, **sections):
    base = {
        "seed": 0,
        "output": "out",
        "inputs": {"scans": "data/scans", "poses": "data/poses.txt", "gt": "data/gt"},
        "synth": {"scene": "benchmark", "frames": 3, "n_azimuth": 150},
    }
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    path = os.path.join(d, "cfg.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(base, fh)
    return path


def load(path, **over):
    return PipelineConfig.load(path, over)


def manifest(d, cmd):
    with open(os.path.join(d, "out", f"manifest_{cmd}.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Three synthetic frames plus a trained model, shared by the read-only tests."""
    d = str(tmp_path_factory.mktemp("pipe"))
    cfg = write_cfg(d, inputs={"model": "out/model.bin"}, scorer={"epochs": 2})
    cmd_synth(load(cfg))
    cmd_train(load(cfg))
    return d, cfg


def test_project_writes_one_triple_per_frame(dataset):
    d, cfg = dataset
    man = cmd_project(load(cfg))
    imgs = sorted(os.listdir(os.path.join(d, "out", "images")))
    assert len([f for f in imgs if f.endswith(".pgm")]) == 9
    assert len([f for f in imgs if f.endswith(".npz")]) == 3
    assert len(man.frames) == 3 == len(os.listdir(os.path.join(d, "data", "scans")))


def test_empty_scan_dir_is_a_data_error(tmp_path):
    os.makedirs(tmp_path / "data" / "scans")
    cfg = write_cfg(str(tmp_path))
    with pytest.raises(DataError):
        cmd_project(load(cfg))
    m = manifest(str(tmp_path), "project")
    assert m["status"] == "error" and "no .bin scans" in m["error"]
    assert main(["project", "--config", cfg]) == 2


def test_missing_config_and_unknown_section(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "nope.yaml")]) == 1
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"mode": "exp9"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"flow": {"nonsense": 1}})


def test_training_converges_and_is_deterministic(tmp_path):
    d = str(tmp_path)
    cfg = write_cfg(d, inputs={"model": "out/model.bin"}, synth={"frames": 20, "n_azimuth": 200})
    cmd_synth(load(cfg))
    man = cmd_train(load(cfg))
    losses = man.info["losses"]
    assert losses[-1] <= 0.5 * losses[0]
    first = open(os.path.join(d, "out", "model.bin"), "rb").read()
    cmd_train(load(cfg))
    assert open(os.path.join(d, "out", "model.bin"), "rb").read() == first


def test_zero_epochs_keeps_initialization(dataset, tmp_path):
    d, _ = dataset
    cfg = write_cfg(str(tmp_path), inputs={"scans": os.path.join(d, "data/scans"), "gt": os.path.join(d, "data/gt"),
                                           "model": "m.bin"}, scorer={"epochs": 0})
    cmd_train(load(cfg))
    m = load_model(tmp_path / "m.bin")
    assert np.all(m.theta == 0) and np.all(m.bias == 0)


def test_non_finite_model_exits_with_numerical_code(dataset, tmp_path):
    d, _ = dataset
    m = load_model(os.path.join(d, "out/model.bin"))
    m.theta = np.full_like(m.theta, np.nan)
    save_model(tmp_path / "nan.bin", m)
    cfg = write_cfg(str(tmp_path), inputs={"scans": os.path.join(d, "data/scans"), "poses": os.path.join(d, "data/poses.txt"),
                                           "model": "nan.bin"}, mode="exp1")
    assert main(["classify", "--config", cfg]) == 3
    assert manifest(str(tmp_path), "classify")["status"] == "error"


def test_single_class_training_data_is_an_error(tmp_path):
    d = str(tmp_path)
    scene = {"boxes": [{"kind": "static", "center": [0, 11, 3], "extents": [60, 1, 6]}],
             "rays": {"n_rings": 16, "n_azimuth": 90}}
    cfg = write_cfg(d, synth={"scene": scene, "frames": 1})
    cmd_synth(load(cfg))
    with pytest.raises(DataError):
        cmd_train(load(cfg))


def classify_into(dataset, tmp_path, mode, **inputs):
    d, _ = dataset
    ins = {"scans": os.path.join(d, "data/scans"), "poses": os.path.join(d, "data/poses.txt"),
           "gt": os.path.join(d, "data/gt"), **inputs}
    cfg = write_cfg(str(tmp_path), inputs=ins, mode=mode)
    return cfg, cmd_classify(load(cfg))


def test_classify_outputs_and_manifest(dataset, tmp_path):
    d, _ = dataset
    cfg, man = classify_into(dataset, tmp_path, ["exp1", "exp3"], model=os.path.join(d, "out/model.bin"))
    assert man.info["scorer"] == "model"
    for mode in ("exp1", "exp3"):
        files = sorted(os.listdir(tmp_path / "out" / "labels" / mode))
        assert files == ["000000.csv", "000001.csv", "000002.csv"]
    # points in equal labels out
    for fr in man.frames:
        assert set(fr["labels"].values()) == {fr["points"]}
    stages = {k: v for k, v in man.timings.items() if k != "total"}
    assert all(v >= 0 for v in stages.values())
    assert man.timings["total"] >= max(stages.values())
    on_disk = manifest(str(tmp_path), "classify")
    assert on_disk["status"] == "ok" and on_disk["config_hash"] == load(cfg).hash()


def test_exp3_needs_no_scorer(dataset, tmp_path):
    cfg, man = classify_into(dataset, tmp_path, "exp3", scores="does/not/exist")
    assert man.info["scorer"] == "none"


def test_exactly_one_scorer_source(dataset, tmp_path):
    d, _ = dataset
    with pytest.raises(ConfigError):
        classify_into(dataset, tmp_path, "exp1")
    with pytest.raises(ConfigError):
        classify_into(dataset, tmp_path, "exp1", model=os.path.join(d, "out/model.bin"), scores=d)


def test_pose_count_mismatch(dataset, tmp_path):
    d, _ = dataset
    poses = open(os.path.join(d, "data/poses.txt")).read().splitlines()
    (tmp_path / "poses.txt").write_text("\n".join(poses[:2]) + "\n")
    with pytest.raises(DataError):
        classify_into(dataset, tmp_path, "exp3", poses=str(tmp_path / "poses.txt"))


def test_single_frame_exp1_equals_exp2(dataset, tmp_path):
    d, _ = dataset
    os.makedirs(tmp_path / "one")
    os.link(os.path.join(d, "data/scans/000000.bin"), tmp_path / "one" / "000000.bin")
    cfg = write_cfg(str(tmp_path), inputs={"scans": "one", "poses": None, "gt": None,
                                           "model": os.path.join(d, "out/model.bin")}, mode=["exp1", "exp2"])
    man = cmd_classify(load(cfg))
    assert "flow" not in man.timings
    a = (tmp_path / "out/labels/exp1/000000.csv").read_bytes()
    b = (tmp_path / "out/labels/exp2/000000.csv").read_bytes()
    assert a == b


def test_labels_are_byte_identical_across_runs(dataset, tmp_path):
    d, _ = dataset
    outs = []
    for run in ("a", "b"):
        os.makedirs(tmp_path / run)
        classify_into(dataset, tmp_path / run, "exp1", model=os.path.join(d, "out/model.bin"))
        outs.append([(tmp_path / run / "out/labels/exp1" / f).read_bytes()
                     for f in sorted(os.listdir(tmp_path / run / "out/labels/exp1"))])
    assert outs[0] == outs[1]


def test_eval_perfect_labels_give_unit_f1(dataset, tmp_path):
    d, _ = dataset
    ins = {"scans": os.path.join(d, "data/scans"), "gt": os.path.join(d, "data/gt")}
    cfg = write_cfg(str(tmp_path), inputs=ins, mode="exp1")
    ldir = tmp_path / "out/labels/exp1"
    os.makedirs(ldir)
    for k in range(3):
        stem = f"{k:06d}"
        gt = read_ground_truth(os.path.join(d, "data/gt", stem + ".points.csv"),
                               os.path.join(d, "data/gt", stem + ".boxes.csv"))
        write_labels(ldir / (stem + ".csv"), gt.labels, np.eye(3)[gt.labels])
    man = cmd_eval(load(cfg))
    f1 = {(r["mode"], r["class"]): r["f1"] for r in man.info["metrics"]}
    assert all(abs(v - 1.0) < 1e-12 for v in f1.values())
    assert {c for _, c in f1} == set(CLASS_NAMES)


def test_eval_three_modes_share_one_plot(dataset, tmp_path):
    d, _ = dataset
    cfg, _ = classify_into(dataset, tmp_path, ["exp1", "exp2", "exp3"], model=os.path.join(d, "out/model.bin"))
    man = cmd_eval(load(cfg))
    svg = (tmp_path / "out/eval/pr_dynamic_modes.svg").read_text()
    for m in ("exp1", "exp2", "exp3"):
        assert re.search(rf"\b{m}\b", svg)
    rows = (tmp_path / "out/eval/modes.csv").read_text().splitlines()
    assert rows[0] == "mode,f1,precision,recall" and len(rows) == 4
    assert set(man.info["ap"]) == {"exp1", "exp2", "exp3"}


def test_eval_without_ground_truth_warns(dataset, tmp_path):
    d, _ = dataset
    cfg, _ = classify_into(dataset, tmp_path, "exp3")
    with open(cfg) as fh:
        raw = yaml.safe_load(fh)
    raw["inputs"]["gt"] = None
    with open(cfg, "w") as fh:
        yaml.safe_dump(raw, fh)
    man = cmd_eval(load(cfg))
    assert any("ground truth missing" in w for w in man.warnings)
    assert not (tmp_path / "out/eval/metrics.csv").exists()


def test_eval_before_classify_is_a_data_error(dataset, tmp_path):
    d, _ = dataset
    cfg = write_cfg(str(tmp_path), inputs={"scans": os.path.join(d, "data/scans"), "gt": os.path.join(d, "data/gt")})
    assert main(["eval", "--config", cfg]) == 2


def test_cli_overrides(dataset, tmp_path, capsys):
    d, _ = dataset
    cfg, _ = classify_into(dataset, tmp_path, "exp1", model=os.path.join(d, "out/model.bin"))
    out = tmp_path / "elsewhere"
    assert main(["classify", "--config", cfg, "--mode", "exp3", "--seed", "7", "--out", str(out)]) == 0
    assert "classify: ok (3 frames" in capsys.readouterr().out
    m = json.load(open(out / "manifest_classify.json"))
    assert m["seed"] == 7 and m["info"]["modes"] == ["exp3"]
    assert sorted(os.listdir(out / "labels")) == ["exp3"]
    lab, bel = read_labels(out / "labels/exp3/000000.csv")
    assert np.allclose(bel.sum(axis=1), 1, atol=1e-5)
