import json
import shutil

import pytest

from msfseg.cli import main
from msfseg.interchange import read_records

from conftest import SMALL_SCALES


def test_synth_outputs(small_bench):
    for name in ("manifest.json", "detections.jsonl", "synth_config.json"):
        assert (small_bench / name).is_file()
    assert len(list((small_bench / "images").glob("*.pgm"))) == 4
    recs = read_records(small_bench / "detections.jsonl")
    assert len(recs) == 4 * 3
    assert json.loads((small_bench / "synth_config.json").read_text())["phantom"]["native"] == "256x512"


def test_synth_is_reproducible(tmp_path, small_bench):
    from conftest import make_benchmark

    again = make_benchmark(tmp_path / "again")
    for name in ("manifest.json", "detections.jsonl", "images/phantom_00002.pgm"):
        assert (again / name).read_bytes() == (small_bench / name).read_bytes()


def test_pipeline_exit_zero_and_report(small_bench, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["pipeline", "--manifest", str(small_bench / "manifest.json"), "--scales", SMALL_SCALES,
                 "--out-dir", str(out), "--csv"])
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["extra"]["n_images"] == 4 and rep["failures"] == []
    assert (out / "report.pr.csv").is_file() and (out / "fused.jsonl").is_file()
    assert len(read_records(out / "fused.jsonl")) == 4
    assert "TPR" in capsys.readouterr().out


def test_pipeline_reports_are_byte_identical(small_bench, tmp_path):
    args = ["pipeline", "--manifest", str(small_bench / "manifest.json"), "--scales", SMALL_SCALES]
    assert main([*args, "--report", str(tmp_path / "a.json")]) == 0
    assert main([*args, "--report", str(tmp_path / "b.json"), "--workers", "4"]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_pipeline_partial_failure_exit_two(small_bench, tmp_path, capsys):
    bench = tmp_path / "bench"
    shutil.copytree(small_bench, bench)
    (bench / "images" / "phantom_00001.pgm").unlink()
    code = main(["pipeline", "--manifest", str(bench / "manifest.json"), "--scales", SMALL_SCALES,
                 "--report", str(tmp_path / "r.json")])
    assert code == 2
    rep = json.loads((tmp_path / "r.json").read_text())
    assert [f["image_id"] for f in rep["failures"]] == ["phantom_00001"]
    assert rep["extra"]["n_images"] == 3
    assert "FAILED phantom_00001" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra",
    [
        ["--lambda", "-0.5"],
        ["--scales", "64x0"],
        ["--config", "MISSING"],
    ],
)
def test_pipeline_validation_exit_one(small_bench, tmp_path, extra):
    extra = [str(tmp_path / "nope.json") if a == "MISSING" else a for a in extra]
    assert main(["pipeline", "--manifest", str(small_bench / "manifest.json"), *extra]) == 1


def test_bad_manifest_exit_one(tmp_path):
    (tmp_path / "m.json").write_text('{"entries": [{"image_id": "a"}]}')
    assert main(["pipeline", "--manifest", str(tmp_path / "m.json")]) == 1
    assert main(["eval", "--manifest", str(tmp_path / "m.json")]) == 1


def test_fuse_matches_pipeline_candidates(small_bench, tmp_path):
    assert main(["fuse", "--detections", str(small_bench / "detections.jsonl"), "--manifest",
                 str(small_bench / "manifest.json"), "--out-dir", str(tmp_path / "f")]) == 0
    assert main(["pipeline", "--manifest", str(small_bench / "manifest.json"), "--scales", SMALL_SCALES,
                 "--detections", str(small_bench / "detections.jsonl"), "--out-dir", str(tmp_path / "p")]) == 0
    assert (tmp_path / "f" / "fused.jsonl").read_bytes() == (tmp_path / "p" / "fused.jsonl").read_bytes()


def test_fuse_needs_native_size(small_bench, tmp_path):
    assert main(["fuse", "--detections", str(small_bench / "detections.jsonl"),
                 "--output", str(tmp_path / "x.jsonl")]) == 1
    assert main(["fuse", "--detections", str(small_bench / "detections.jsonl"), "--native", "256x512",
                 "--output", str(tmp_path / "x.jsonl")]) == 0


def test_eval_and_sweep(small_bench, tmp_path, capsys):
    assert main(["eval", "--manifest", str(small_bench / "manifest.json"), "--detections",
                 str(small_bench / "detections.jsonl"), "--masks", str(small_bench / "masks"),
                 "--report", str(tmp_path / "e.json")]) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    # the truth masks scored against themselves
    assert rep["mean_dice"] == 1.0
    assert main(["sweep", "--manifest", str(small_bench / "manifest.json"), "--scales", SMALL_SCALES,
                 "--detections", str(small_bench / "detections.jsonl"), "--report", str(tmp_path / "s.json")]) == 0
    rows = json.loads((tmp_path / "s.json").read_text())
    assert [r["label"] for r in rows][-4:] == ["msf@0", "msf@0.5", "msf@0.6", "msf@0.7"]


def test_anchors(small_bench, capsys):
    assert main(["anchors", "--manifest", str(small_bench / "manifest.json"), "--k", "3"]) == 0
    line = capsys.readouterr().out.strip()
    assert len(line.split(",  ")) == 3
