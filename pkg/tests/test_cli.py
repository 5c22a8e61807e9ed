import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from latticeprop.cli import main
from latticeprop.geometry import OrientedBox, box_distance
from latticeprop.lattice import LEFT, RIGHT, SELF, Lattice, field_to_dict, normalize_field
from latticeprop.mcl import build_flow_matrix
from latticeprop.synth import SyntheticScene, load_scene
from latticeprop.labels import label_scene

from oracles import dense_mc


def run(*argv) -> int:
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return int(exc.code)


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read(path):
    return json.loads(Path(path).read_text())


def boxes_of(path):
    return [OrientedBox.from_dict(b) for b in read(path)["boxes"]]


def pgm_pixels(path):
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    cols, rows = map(int, dims.split())
    assert magic == b"P5" and maxval == b"255"
    return np.frombuffer(rest, dtype=np.uint8).reshape(rows, cols)


@pytest.fixture
def scene_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("generate", "--seed", 7, "--h", 256, "--w", 256, "--d", 16, "--boxes", 3,
               "-o", "scene.json") == 0
    return Path("scene.json")


# ---------------------------------------------------------------- generate

def test_generate(scene_file):
    first = sha(scene_file)
    manifest = read("scene.manifest.json")
    assert manifest["command"] == "generate"
    assert manifest["config"]["scene"]["aspect_range"] == [1.0, 4.0]
    assert manifest["config"]["scene"]["max_retries"] == 1000
    assert manifest["outputs"]["scene.json"] == first
    assert {"latticeprop", "numpy", "scipy"} <= set(manifest["versions"])
    assert run("generate", "--seed", 7, "--h", 256, "--w", 256, "--d", 16, "--boxes", 3,
               "-o", "scene.json") == 0
    assert sha(scene_file) == first
    assert len(load_scene(scene_file).gt_boxes) == 3


def test_generate_empty_and_errors(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run("generate", "--boxes", 0, "-o", "empty.json", "--field-out", "f.json") == 0
    scene = load_scene("empty.json")
    assert scene.gt_boxes == [] and not scene.labels.fg_mask.any()
    assert Path("f.json").exists()
    assert run("generate", "--h", 0, "-o", "x.json") == 2
    assert run("generate", "--scale", 10, 5, "-o", "x.json") == 2
    assert run("generate", "--h", 64, "--w", 64, "--scale", 90, 100, "-o", "x.json") == 3
    assert "error: PlacementFailed" in capsys.readouterr().err


# ---------------------------------------------------------------- infer

def test_infer_gps_and_cp_agree(scene_file):
    gts = load_scene(scene_file).gt_boxes
    assert run("infer", "--scene", scene_file, "--algo", "gps", "-o", "gps.json") == 0
    assert run("infer", "--scene", scene_file, "--algo", "cp", "-o", "cp.json",
               "--heatmap", "cp.pgm") == 0
    gps, cp = boxes_of("gps.json"), boxes_of("cp.json")
    assert len(gps) == len(cp) == len(gts)
    for a, b in zip(gps, cp):
        assert box_distance(a, b) <= 1e-6
    assert run("eval", "--pred", "gps.json", "--gt", scene_file, "-o", "m.json") == 0
    assert read("m.json")["f_score"] == 1.0
    manifest = read("cp.manifest.json")
    assert manifest["config"]["result"]["update_count"] == (
        manifest["config"]["result"]["steps"] * load_scene(scene_file).lattice.node_count)
    assert "cluster_ms" in manifest["timing"]
    assert pgm_pixels("cp.pgm").shape == (16, 16)


def test_infer_pca_merge(scene_file):
    assert run("infer", "--scene", scene_file, "--merge", "pca", "-o", "pca.json") == 0
    assert run("eval", "--pred", "pca.json", "--gt", scene_file, "-o", "m.json") == 0
    assert read("m.json")["f_score"] == 1.0


def block_inputs():
    """2x4 lattice whose flow graph splits into four 1x2 blocks; two of them are boxes."""
    lat = Lattice(32, 64, 16)
    z = np.full((8, 5), -30.0)
    z[:, SELF] = 0.0
    for left in (0, 2, 4, 6):
        z[left, RIGHT] = 0.0
        z[left + 1, LEFT] = 0.0
    fld = normalize_field(lat, z)
    boxes = [OrientedBox(16, 8, 32, 16), OrientedBox(48, 24, 32, 16)]
    return SyntheticScene(lat, boxes, label_scene(lat, boxes)), fld


def test_infer_mc_block_field(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    scene, fld = block_inputs()
    scene.save("blocks.json")
    Path("blocks_field.json").write_text(json.dumps(field_to_dict(fld)))
    assert run("infer", "--scene", "blocks.json", "--field", "blocks_field.json", "--algo", "mc",
               "-o", "mc.json") == 0
    det = read("mc.json")
    m0 = build_flow_matrix(scene.lattice, fld).dense()
    iters = read("mc.manifest.json")["config"]["result"]["counters"]["iterations"]
    ref = np.argmax(dense_mc(m0, iters, 1e-4)[-1], axis=0)
    fg = scene.labels.fg_mask
    assert det["assignment"] == np.where(fg, ref, -1).tolist()
    assert det["assignment"] == [0, 0, -1, -1, -1, -1, 6, 6]
    assert run("eval", "--pred", "mc.json", "--gt", "blocks.json", "-o", "m.json") == 0
    assert read("m.json")["f_score"] == 1.0
    block = np.kron(np.eye(4), np.ones((2, 2))) > 0
    assert np.all(m0[~block] < 1e-4) and np.all(m0[block] > 0.49)


def test_infer_errors(scene_file, capsys):
    assert run("infer", "--scene", "missing.json", "-o", "x.json") == 4
    assert "error: FileNotFoundError" in capsys.readouterr().err
    Path("bad.json").write_text("{not json")
    assert run("infer", "--scene", "bad.json", "-o", "x.json") == 4
    assert run("infer", "--scene", scene_file, "--algo", "nope", "-o", "x.json") == 2
    # a two-node cycle inside the foreground
    scene = load_scene(scene_file)
    lat = scene.lattice
    z = np.zeros((lat.node_count, 5))
    z[:, SELF] = 6.0
    a = scene.labels.centers[0]
    b = int(lat.neighbor_table[a, RIGHT])
    z[a], z[b] = 0.0, 0.0
    z[a, RIGHT], z[b, LEFT] = 6.0, 6.0
    Path("cycle.json").write_text(json.dumps(field_to_dict(normalize_field(lat, z))))
    if scene.labels.fg_mask[b]:
        assert run("infer", "--scene", scene_file, "--field", "cycle.json", "-o", "x.json") == 5
        assert "error: CycleDetected" in capsys.readouterr().err
    other = Lattice(64, 64, 16)
    Path("other.json").write_text(json.dumps(field_to_dict(normalize_field(other, np.zeros((16, 5))))))
    assert run("infer", "--scene", scene_file, "--field", "other.json", "-o", "x.json") == 4


# ---------------------------------------------------------------- train

def test_train(scene_file):
    assert run("train", "--scene", scene_file, "--iters", 60, "--plot", "-o", "run") == 0
    rows = list(csv.DictReader(open("run/trace.csv")))
    assert len(rows) == 61 and float(rows[-1]["total"]) < float(rows[0]["total"])
    assert read("run/eval.json")["reduction"] > 0.5
    assert Path("run/trace.png").read_bytes()[:4] == b"\x89PNG"
    assert "run/trace.png" in read("run/manifest.json")["outputs"]
    assert run("infer", "--scene", scene_file, "--model", "run/model.json", "-o", "t.json") == 0
    assert len(boxes_of("t.json")) >= 1


def test_train_validation_and_frozen(scene_file):
    assert run("train", "--scene", scene_file, "--iters", 0, "-o", "run") == 2
    assert run("train", "--scene", scene_file, "--lr", -1, "-o", "run") == 2
    assert run("train", "--scene", scene_file, "--lr", 0, "--iters", 10, "-o", "frozen") == 0
    totals = {r["total"] for r in csv.DictReader(open("frozen/trace.csv"))}
    assert len(totals) == 1


def test_train_divergence_exit(scene_file, capsys):
    assert run("train", "--scene", scene_file, "--lr", 1e307, "--iters", 50, "-o", "boom") == 6
    assert "error: DivergedLoss" in capsys.readouterr().err
    assert Path("boom/trace.csv").exists()


# ---------------------------------------------------------------- bench

def test_bench(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    common = ["bench", "--size", 24, "--boxes", 2, "--scale", 32, 80, "--mc"]
    assert run(*common, "--repeats", 20, "--plot", "-o", "b20.json") == 0
    assert run(*common, "--repeats", 1, "-o", "b1.json") == 0
    b20, b1 = read("b20.json"), read("b1.json")
    assert b20["timing"]["gps_median_ms"] < b20["timing"]["cp_median_ms"]
    assert b20["cp"]["update_count"] == b20["cp"]["steps"] * b20["lattice"]["node_count"]
    for key in ("cp", "gps", "mc", "lattice", "agreement"):
        assert b20[key] == b1[key]
    assert b20["agreement"] == 1.0
    assert Path("b20.png").exists()
    assert read("b20.manifest.json")["timing"]["plot"] == "b20.png"


# ---------------------------------------------------------------- render

def test_render(scene_file):
    scene = load_scene(scene_file)
    lat = scene.lattice
    diam = lat.diameter
    assert run("render", "--scene", scene_file, "--steps", "0", "--track", "all", "-o", "r0") == 0
    init = pgm_pixels("r0/heatmap_0000.pgm")
    assert np.all(init == init.flat[0])
    assert run("render", "--scene", scene_file, "--steps", f"0,{diam}", "-o", "r1") == 0
    start = pgm_pixels("r1/heatmap_0000.pgm").ravel()
    assert sorted(np.flatnonzero(start)) == scene.labels.centers
    final = pgm_pixels(f"r1/heatmap_{diam:04d}.pgm").ravel()
    fg = scene.labels.fg_mask
    # the brightest region is exactly the foreground
    assert final[fg].min() > final[~fg].max()
    ppm = Path("r1/omega.ppm").read_bytes()
    assert ppm.startswith(f"P6\n{lat.cols * 16} {lat.rows * 16}\n255\n".encode())
    assert run("render", "--scene", scene_file, "--steps", f"0,{diam}", "-o", "r2") == 0
    for name in ("heatmap_0000.pgm", f"heatmap_{diam:04d}.pgm", "omega.ppm"):
        assert sha(Path("r1") / name) == sha(Path("r2") / name)
    assert run("render", "--scene", scene_file, "--steps", "a,b", "-o", "r3") == 2
    assert run("render", "--scene", scene_file, "--cell", 2, "-o", "r3") == 2


# ---------------------------------------------------------------- process-level behaviour

def test_console_entry_and_log_env(tmp_path):
    env = {"LATTICEPROP_LOG": "info", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "latticeprop.cli", "generate", "--boxes", "1",
                           "-o", str(tmp_path / "s.json")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "INFO latticeprop" in proc.stderr
    env["LATTICEPROP_LOG"] = "error"
    proc = subprocess.run([sys.executable, "-m", "latticeprop.cli", "infer", "--scene",
                           str(tmp_path / "nope.json"), "-o", str(tmp_path / "x.json")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 4
    assert proc.stderr.startswith("error: FileNotFoundError")
