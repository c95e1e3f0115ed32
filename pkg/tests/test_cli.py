from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from osmap.cli import main
from osmap.frames import write_frames
from osmap.synth import CameraParams, SceneParams, generate_scene, perturb_unit, render_frames

FAST = CameraParams(n_poses=6)
BUILD_SETS = ["--set", "min_points=30", "--set", "min_detections=2"]


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneParams(n_objects=4, camera=FAST), seed=55)


@pytest.fixture(scope="module")
def frames_file(scene, tmp_path_factory):
    path = tmp_path_factory.mktemp("frames") / "frames.jsonl"
    write_frames(path, scene.header(), render_frames(scene))
    return path


@pytest.fixture()
def built_map(frames_file, tmp_path):
    out = tmp_path / "map"
    assert main(["build", str(frames_file), "-o", str(out), *BUILD_SETS]) == 0
    return out


def query_payload(scene, rank=1):
    rng = np.random.default_rng(3)
    obj = scene.objects[0]
    emb = perturb_unit(obj.clip_prototype, 0.05, rng, 0.98)
    return {"text": f"a {obj.class_name}", "embedding": [float(v) for v in emb],
            "instance_rank": rank}


# -------------------------------------------------------------------- build

def test_build_produces_artifacts(built_map, capsys):
    assert (built_map / "manifest.json").is_file()
    assert (built_map / "scene.ply").is_file()
    log = (built_map / "build.log").read_text()
    assert log.startswith("# config ")
    assert "frame 0: candidates=" in log
    assert "finalize: nodes=" in log
    manifest = json.loads((built_map / "manifest.json").read_text())
    assert manifest["meta"]["run_config"]["min_points"] == 30
    assert len(manifest["meta"]["input_sha256"]) == 64


def test_build_twice_is_bit_identical(frames_file, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["build", str(frames_file), "-o", str(out_a), *BUILD_SETS]) == 0
    assert main(["build", str(frames_file), "-o", str(out_b), *BUILD_SETS]) == 0
    assert (out_a / "manifest.json").read_bytes() == (out_b / "manifest.json").read_bytes()
    assert (out_a / "scene.ply").read_bytes() == (out_b / "scene.ply").read_bytes()
    assert (out_a / "build.log").read_bytes() == (out_b / "build.log").read_bytes()


def test_build_corrupt_line_exits_2(frames_file, tmp_path, capsys):
    lines = frames_file.read_text().splitlines()
    record = json.loads(lines[3])
    record["pose"]["rotation"] = [2.0, 0.0, 0.0, 0.0]
    lines[3] = json.dumps(record)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code = main(["build", str(bad), "-o", str(tmp_path / "out")])
    assert code == 2
    err = capsys.readouterr().err
    assert f"frame {record['frame_id']}" in err and "quaternion" in err


def test_build_missing_file_exits_2(tmp_path, capsys):
    assert main(["build", str(tmp_path / "nope.jsonl"), "-o", str(tmp_path / "out")]) == 2
    assert "not found" in capsys.readouterr().err


def test_config_file_and_flag_precedence(frames_file, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# test config\nmin_points = 30\nvoxel_size = 0.03\n")
    out = tmp_path / "map"
    code = main(["build", str(frames_file), "-o", str(out),
                 "--config", str(cfg), "--set", "voxel_size=0.04",
                 "--set", "min_detections=2"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["voxel_size"] == 0.04  # flag beats file
    assert manifest["config"]["min_points"] == 30  # file beats default


def test_unknown_config_key_is_usage_error(frames_file, tmp_path, capsys):
    code = main(["build", str(frames_file), "-o", str(tmp_path / "x"),
                 "--set", "bogus=1"])
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


# -------------------------------------------------------------------- query

def test_query_happy_path(built_map, scene, tmp_path, capsys):
    query_file = tmp_path / "query.json"
    query_file.write_text(json.dumps(query_payload(scene)))
    out_file = tmp_path / "goal.json"
    code = main(["query", str(built_map), "--query", str(query_file),
                 "-o", str(out_file), "--emit-grid", str(tmp_path / "grid"),
                 "--set", "robot_radius=0.18"])
    assert code == 0
    response = json.loads(out_file.read_text())
    assert {"goal", "matches", "robot", "config"} <= set(response)
    goal = response["goal"]
    target = scene.objects[0].center
    assert np.hypot(goal["x"] - target[0], goal["y"] - target[1]) < 1.0
    assert (tmp_path / "grid.pgm").is_file()
    assert (tmp_path / "grid_reachable.pgm").is_file()
    assert (tmp_path / "grid.json").is_file()


def test_query_from_stdin(built_map, scene, monkeypatch, capsys):
    import io
    monkeypatch.setattr(sys, "stdin", io.StringIO(json.dumps(query_payload(scene))))
    code = main(["query", str(built_map), "--query", "-",
                 "--set", "robot_radius=0.18"])
    assert code == 0
    response = json.loads(capsys.readouterr().out)
    assert response["matches"][0]["rank"] == 1


def test_query_missing_map_exits_2(tmp_path, capsys):
    query_file = tmp_path / "q.json"
    query_file.write_text(json.dumps({"embedding": [1.0, 0.0]}))
    code = main(["query", str(tmp_path / "absent"), "--query", str(query_file)])
    assert code == 2
    assert "map not found" in capsys.readouterr().err


def test_query_bad_rank_exits_2(built_map, scene, tmp_path, capsys):
    query_file = tmp_path / "q.json"
    query_file.write_text(json.dumps(query_payload(scene, rank=99)))
    code = main(["query", str(built_map), "--query", str(query_file),
                 "--set", "robot_radius=0.18"])
    assert code == 2
    assert "instance rank" in capsys.readouterr().err


# --------------------------------------------------------------------- eval

def test_eval_with_custom_suite(tmp_path, capsys):
    scenes = {"scenes": [{"seed": 55, "n_objects": 4,
                          "camera": {"n_poses": 6}}]}
    episodes = {"seed": 9, "per_scene": 6, "threshold": 1.0,
                "nav": {"robot_radius": 0.18},
                "merge": {"min_points": 30, "min_detections": 2}}
    scenes_file = tmp_path / "scenes.json"
    episodes_file = tmp_path / "episodes.json"
    scenes_file.write_text(json.dumps(scenes))
    episodes_file.write_text(json.dumps(episodes))
    out = tmp_path / "report"
    code = main(["eval", "--scenes", str(scenes_file), "--episodes",
                 str(episodes_file), "-o", str(out), "--recovery"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["episode_count"] == 6
    assert report["success_rate"] >= 0.8
    assert report["scenes"][0]["recovery"]["true_positives"] == 4
    summary = (out / "summary.txt").read_text()
    assert "total" in summary
    # determinism: rerun produces identical bytes
    out2 = tmp_path / "report2"
    assert main(["eval", "--scenes", str(scenes_file), "--episodes",
                 str(episodes_file), "-o", str(out2), "--recovery"]) == 0
    assert (out / "report.json").read_bytes() == (out2 / "report.json").read_bytes()


# ----------------------------------------------------------- export/inspect

def test_export_roundtrip(built_map, tmp_path, capsys):
    out = tmp_path / "copy"
    assert main(["export", str(built_map), "-o", str(out)]) == 0
    original = json.loads((built_map / "manifest.json").read_text())
    copy = json.loads((out / "manifest.json").read_text())
    for node_a, node_b in zip(original["nodes"], copy["nodes"]):
        # clouds round-trip through float32 PLY, so bboxes match to 1e-6 only
        bbox_a, bbox_b = node_a.pop("bbox"), node_b.pop("bbox")
        np.testing.assert_allclose(bbox_a["min"], bbox_b["min"], atol=1e-6)
        np.testing.assert_allclose(bbox_a["max"], bbox_b["max"], atol=1e-6)
        assert (out / node_a["ply"]).read_bytes() == (built_map / node_a["ply"]).read_bytes()
        assert node_a == node_b
    original["nodes"] = copy["nodes"] = None
    assert original == copy


def test_inspect_summarizes(built_map, capsys):
    assert main(["inspect", str(built_map)]) == 0
    out = capsys.readouterr().out
    assert "nodes" in out and "node 0:" in out


# ------------------------------------------------------------------- usage

def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1


def test_missing_required_argument_is_usage_error(capsys):
    assert main(["build"]) == 1


def test_console_entrypoint_runs():
    result = subprocess.run([sys.executable, "-m", "osmap.cli", "--help"],
                            capture_output=True, text=True)
    assert result.returncode == 0
    assert "build" in result.stdout
