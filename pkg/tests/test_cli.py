import itertools
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from palmpipe.cli import main
from palmpipe.evaluation import read_scores, write_scores
from palmpipe.features import read_embedding
from palmpipe.manifest import read_manifest


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    assert run("synth", "--subjects", 4, "--captures", 3, "--seed", 7, "--out", root / "d") == 0
    return root / "d" / "manifest.csv"


def test_synth_counts_and_rerun(tmp_path, capsys):
    assert run("synth", "--subjects", 10, "--captures", 4, "--seed", 7, "--out", tmp_path / "a") == 0
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 40
    assert len(read_manifest(tmp_path / "a" / "manifest.csv").rows) == 40
    assert run("synth", "--subjects", 10, "--captures", 4, "--seed", 7, "--out", tmp_path / "b") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_usage_errors(tmp_path, capsys):
    assert run("synth", "--subjects", 2, "--captures", 2, "--seed", 1) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--out" in err
    assert run("synth", "--subjects", 2, "--captures", 2, "--out", tmp_path) == 2
    assert run("bogus") == 2
    assert run("eval", "--out", tmp_path) == 2
    assert run("synth", "--subjects", 1, "--captures", 2, "--seed", 1, "--out", tmp_path) == 2


def test_pipeline_writes_unit_embeddings(smoke, tmp_path):
    assert run("pipeline", "--manifest", smoke, "--out", tmp_path / "e", "--save-roi") == 0
    files = sorted((tmp_path / "e").glob("*.emb"))
    assert len(files) == 12 * 5
    for f in files[:5]:
        e = read_embedding(f)
        assert abs(np.linalg.norm(e.values.astype(float)) - 1) < 1e-6
    assert len(list((tmp_path / "e").glob("*.roi.png"))) == 12
    status = json.loads((tmp_path / "e" / "pipeline.json").read_text())
    assert status["failed"] == {}


def test_pipeline_single_image_and_whole_only(smoke, tmp_path):
    d = smoke.parent
    img, kp = d / "images" / "s0000_c00.png", d / "keypoints" / "s0000_c00.json"
    assert run("pipeline", "--image", img, "--keypoint-file", kp, "--no-tps", "--no-enhance", "--no-ensemble", "--out", tmp_path) == 0
    assert [p.name for p in tmp_path.glob("*.emb")] == ["s0000_c00.whole.emb"]
    status = json.loads((tmp_path / "pipeline.json").read_text())
    assert status["config"]["tps"] is False and status["config"]["ensemble"] is False


def test_pipeline_reference_realigns(smoke, tmp_path):
    assert run("pipeline", "--manifest", smoke, "--reference", "s0000_c00", "--out", tmp_path / "r") == 0
    assert run("pipeline", "--manifest", smoke, "--out", tmp_path / "p") == 0
    a = read_embedding(tmp_path / "r" / "s0000_c01.whole.emb")
    b = read_embedding(tmp_path / "p" / "s0000_c01.whole.emb")
    assert a != b
    assert read_embedding(tmp_path / "r" / "s0000_c00.whole.emb") == read_embedding(tmp_path / "p" / "s0000_c00.whole.emb")
    assert run("pipeline", "--manifest", smoke, "--reference", "nope", "--out", tmp_path / "x") == 2


def test_blank_image_heuristic_fails(tmp_path, caplog):
    from PIL import Image as PILImage

    blank = tmp_path / "blank.png"
    PILImage.fromarray(np.zeros((384, 384), np.uint8)).save(blank)
    assert run("pipeline", "--image", blank, "--keypoints", "heuristic", "--out", tmp_path / "o") == 1
    assert "SegmentationFailed" in caplog.text
    status = json.loads((tmp_path / "o" / "pipeline.json").read_text())
    assert list(status["failed"]) == ["blank"]


def test_eval_report_is_byte_stable(smoke, tmp_path, capsys):
    assert run("eval", "--manifest", smoke, "--out", tmp_path / "a") == 0
    summary = json.loads(capsys.readouterr().out)
    assert run("eval", "--manifest", smoke, "--out", tmp_path / "b", "--jobs", 2) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert summary["n_genuine"] == 12 and summary["n_impostor"] == 6
    assert summary["impostor_policy"] == "first-capture"
    assert "whole_only.eer" in summary
    assert any(k.startswith("age_") for k in summary) or summary["n_impostor"] < 10


def test_eval_perfect_duplicates(tmp_path, capsys):
    import shutil

    assert run("synth", "--subjects", 3, "--captures", 2, "--seed", 2, "--out", tmp_path / "d") == 0
    d = tmp_path / "d"
    for s in range(3):
        for kind, ext in (("images", "png"), ("keypoints", "json")):
            shutil.copy(d / kind / f"s{s:04d}_c00.{ext}", d / kind / f"s{s:04d}_c01.{ext}")
    capsys.readouterr()
    assert run("eval", "--manifest", d / "manifest.csv", "--out", tmp_path / "r") == 0
    s = json.loads(capsys.readouterr().out)
    assert s["tar_at_far_0.1%"] == 1.0 and s["tar_at_far_1%"] == 1.0


def test_ablation_flags_compose(smoke, tmp_path):
    flags = ("--no-enhance", "--no-tps", "--no-ensemble")
    for k, on in enumerate(itertools.product([False, True], repeat=3)):
        chosen = [f for f, use in zip(flags, on) if use]
        assert run("eval", "--manifest", smoke, "--out", tmp_path / str(k), *chosen) == 0


def test_config_file_precedence(smoke, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tps": False, "grid_n": 5, "seed": 3}))
    assert run("pipeline", "--manifest", smoke, "--config", cfg, "--grid-n", 4, "--out", tmp_path / "o") == 0
    got = json.loads((tmp_path / "o" / "pipeline.json").read_text())["config"]
    assert got["tps"] is False and got["grid_n"] == 4 and got["seed"] == 3
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("pipeline", "--manifest", smoke, "--config", cfg, "--out", tmp_path / "o") == 2
    cfg.write_text(json.dumps({"tps": "yes"}))
    assert run("pipeline", "--manifest", smoke, "--config", cfg, "--out", tmp_path / "o") == 2


def test_fuse_self(smoke, tmp_path, capsys):
    assert run("eval", "--manifest", smoke, "--out", tmp_path / "a") == 0
    base = json.loads(capsys.readouterr().out)
    recs = read_scores(tmp_path / "a" / "scores.csv")
    for r in recs:
        object.__setattr__(r, "score", 100 * r.score)
    write_scores(recs, tmp_path / "ext.csv")
    assert run("fuse", "--primary", tmp_path / "a" / "scores.csv", "--external", tmp_path / "ext.csv", "--far", 0.01, "--out", tmp_path / "f") == 0
    fused = json.loads(capsys.readouterr().out)
    for k in ("tar_at_far_0.1%", "tar_at_far_1%", "eer"):
        assert fused[k] == pytest.approx(base[k], abs=1e-12)
    n = base["n_genuine"]
    assert fused["contingency_genuine.total"] == n
    assert fused["contingency_genuine.a_only"] == fused["contingency_genuine.b_only"] == 0
    write_scores(recs[:-1], tmp_path / "short.csv")
    assert run("fuse", "--primary", tmp_path / "a" / "scores.csv", "--external", tmp_path / "short.csv", "--out", tmp_path / "g") == 1


def test_gallery_commands(smoke, tmp_path, capsys):
    g = tmp_path / "gal.plmg"
    assert run("enroll", "--gallery", g, "--manifest", smoke, "--capture", "s0000_c00", "--capture", "s0001_c00", "--capture", "s0002_c00") == 0
    assert json.loads(capsys.readouterr().out)["enrolled"] == ["s0000_c00", "s0001_c00", "s0002_c00"]
    first = g.read_bytes()
    assert run("enroll", "--gallery", g, "--manifest", smoke, "--capture", "s0000_c00") == 1
    assert g.read_bytes() == first

    assert run("pipeline", "--manifest", smoke, "--out", tmp_path / "e") == 0
    assert run("identify", "--gallery", g, "--embeddings", tmp_path / "e", "--capture", "s0001_c00", "--top", 2) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["candidates"][0]["subject_id"] == "s0001" and out["candidates"][0]["score"] == 1.0
    assert len(out["candidates"]) == 2
    assert run("verify", "--gallery", g, "--embeddings", tmp_path / "e" / "s0000_c00", "--subject", "s0000") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["decision"] is True and out["score"] == 1.0
    assert run("verify", "--gallery", g, "--embeddings", tmp_path / "e", "--capture", "s0000_c00", "--subject", "nobody") == 1
    assert run("verify", "--gallery", g, "--embeddings", tmp_path / "e", "--capture", "s0000_c00") == 2


def test_enroll_is_byte_stable(smoke, tmp_path):
    for name in ("a", "b"):
        assert run("enroll", "--gallery", tmp_path / f"{name}.plmg", "--manifest", smoke) == 0
    assert (tmp_path / "a.plmg").read_bytes() == (tmp_path / "b.plmg").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "palmpipe.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout
