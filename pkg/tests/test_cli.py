"""End-to-end runs of every subcommand on tiny synthetic data."""
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from unipercept.cli import main
from unipercept.datamodel import encode_rle, read_unified
from unipercept.data_pipeline import read_plan


def run(capsys, *argv):
    assert main([str(a) for a in argv]) == 0
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--count", "3", "--seed", "1", "--out-dir", str(root / "images")]) == 0
    (root / "clip.yaml").write_text(yaml.safe_dump({"clip_length": 3, "objects_per_image": [2, 2]}))
    assert main(["generate", "--spec", str(root / "clip.yaml"), "--count", "2", "--out-dir", str(root / "clips")]) == 0
    cfg = {
        "seed": 0,
        "optim": {"steps": 2, "batch_size": 2},
        "datasets": [
            {"name": "det", "task": "detection", "path": "images/records.jsonl", "sampling_ratio": 1.5},
            {"name": "vid", "task": "video", "path": "clips/records.jsonl", "sampling_ratio": 0.3},
        ],
    }
    (root / "run.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(root / "run.yaml"), "--out-dir", str(root / "run")]) == 0
    return root


def test_generate_writes_pixels(workspace):
    uf = read_unified(workspace / "images" / "records.jsonl")
    assert len(uf.records) == 3
    for r in uf.records:
        arr = np.load(workspace / "images" / r.file)
        assert arr.shape == (3, r.height, r.width)
    clips = read_unified(workspace / "clips" / "records.jsonl").records
    assert all(len(c.frames) == 3 and all(f.file for f in c.frames) for c in clips)


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "checkpoint.pt").exists() and (run_dir / "config.yaml").exists()
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1]


def test_train_overrides(workspace, capsys):
    out = run(capsys, "train", "--config", workspace / "run.yaml", "--steps", 1, "--seed", 3, "--out-dir", workspace / "run1")
    assert out["steps"] == 1
    assert yaml.safe_load((workspace / "run1" / "config.yaml").read_text())["seed"] == 3


def test_eval_det(workspace, capsys):
    rep = run(capsys, "eval-det", "--checkpoint", workspace / "run" / "checkpoint.pt", "--data", workspace / "images" / "records.jsonl", "--out-dir", workspace / "ev")
    assert set(rep["mean"]) == {"box", "mask"}
    assert set(rep["mean"]["box"]) == {"AP50", "AP75"}
    assert json.loads((workspace / "ev" / "eval.json").read_text()) == rep


def test_eval_track(workspace, capsys):
    rep = run(capsys, "eval-track", "--checkpoint", workspace / "run" / "checkpoint.pt", "--data", workspace / "clips" / "records.jsonl", "--score-threshold", 0.0)
    assert 0.0 <= rep["identity_accuracy"] <= 1.0


def test_prompt_segment(workspace, capsys):
    uf = read_unified(workspace / "images" / "records.jsonl")
    image = workspace / "images" / uf.records[0].file
    rep = run(capsys, "prompt-segment", "--checkpoint", workspace / "run" / "checkpoint.pt", "--image", image, "--prompt", "box:0.5,0.5,0.3,0.3", "--out-dir", workspace / "ps")
    mask = np.load(workspace / "ps" / "mask.npy")
    assert mask.shape == (64, 64) and int(mask.sum()) == rep["area"]
    assert 0 <= rep["confidence"] <= 1 and rep["low_confidence"] == (rep["confidence"] < 0.5)


def test_ingest(tmp_path, capsys):
    src = tmp_path / "src.jsonl"
    lines = [
        {"categories": ["cat", "dog"]},
        {"image_id": "a", "height": 8, "width": 8, "objects": [{"bbox": [0, 0, 4, 4], "category": "dog"}, {"bbox": [0, 0, 0, 1], "category": "cat"}]},
    ]
    src.write_text("\n".join(json.dumps(l) for l in lines) + "\n")
    rep = run(capsys, "ingest", "--format", "boxes+categories", "--in", src, "--out", tmp_path / "u.jsonl")
    assert rep == {"records": 1, "annotations_in": 2, "annotations_out": 1, "rejected": 1}
    uf = read_unified(tmp_path / "u.jsonl")
    assert uf.categories == ["cat", "dog"] and uf.records[0].annotations[0].category_id == 1


def test_sample_plan(workspace, capsys, tmp_path):
    rep = run(capsys, "sample-plan", "--config", workspace / "run.yaml", "--steps", 1000, "--seed", 4, "--out", tmp_path / "plan.txt")
    plan = read_plan(tmp_path / "plan.txt")
    assert len(plan) == 1000 and plan.seed == 4
    assert rep["counts"]["det"] + rep["counts"]["vid"] == 1000
    assert rep["counts"]["det"] > rep["counts"]["vid"]


def test_filter_parts(tmp_path, capsys):
    from unipercept.datamodel import ImageRecord, ObjectAnnotation, write_unified

    whole = np.zeros((20, 20), np.uint8)
    whole[:10, :10] = 1
    part = np.zeros((20, 20), np.uint8)
    part[:9, :10] = 1
    other = np.zeros((20, 20), np.uint8)
    other[15:, 15:] = 1
    anns = tuple(ObjectAnnotation(box=encode_rle(m).bbox(), mask=encode_rle(m), is_class_agnostic=True) for m in (part, whole, other))
    write_unified(tmp_path / "in.jsonl", [ImageRecord("a", 20, 20, 3, anns)], ["object"])
    rep = run(capsys, "filter-parts", "--in", tmp_path / "in.jsonl", "--iou", 0.7, "--out", tmp_path / "out.jsonl")
    assert rep == {"annotations_in": 3, "annotations_out": 2}
    kept = read_unified(tmp_path / "out.jsonl").records[0].annotations
    assert [a.mask.area for a in kept] == [100, 25]


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "unipercept", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("generate", "train", "eval-det", "eval-track", "prompt-segment", "ingest", "sample-plan", "filter-parts"):
        assert cmd in out


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["explode"])
