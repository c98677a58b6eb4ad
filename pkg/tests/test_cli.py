import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import textured

from edgeloop import config as C
from edgeloop.cli import build_parser, main
from edgeloop.evaluation import benchmark, load_gt_dir
from edgeloop.flow import flow_to_rgb, interpolate, read_flo, smooth_flow, write_flo
from edgeloop.imageio import read_edge_png, read_image, write_edge_png, write_image
from edgeloop.matching import block_match, filter_frame_pair, read_matches
from edgeloop.motionedge import compute_motion_edges, load_motion_edges
from edgeloop.pipeline import align_params, interp_params
from edgeloop.sedge import GradientDetector, detect, load_model
from edgeloop.synthetic import Scene, boundaries, make_corpus


@pytest.fixture(scope="module")
def frames(tmp_path_factory):
    d = tmp_path_factory.mktemp("frames")
    scene = Scene(np.random.default_rng(5))
    for t in range(2):
        img, lab = scene.render(t)
        write_image(img, d / f"f{t}.png")
        if t == 0:
            g = d / "gt" / "f0"
            g.mkdir(parents=True)
            write_edge_png(boundaries(lab).astype(float), g / "0.png")
    return d


def run_cli(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- exit codes


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "subcommand" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys, tmp_path):
    assert run_cli("eval-flow", "--pred", "a", "--gt", "b", "--bogus", "1") == 1
    assert "unrecognized" in capsys.readouterr().err


def test_unknown_config_key_in_file_is_usage_error(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("[flow]\nbogus = 1\n")
    assert run_cli("eval-flow", "--config", tmp_path / "c.toml", "--pred", "a", "--gt", "b") == 1


def test_bad_config_value_is_usage_error(capsys):
    assert run_cli("eval-flow", "--flow.k", "many", "--pred", "a", "--gt", "b") == 1


def test_missing_file_is_data_error(tmp_path, capsys):
    assert run_cli("eval-flow", "--pred", tmp_path / "a.flo", "--gt", tmp_path / "b.flo") == 2
    err = capsys.readouterr()
    assert err.out == "" and "eval-flow" in err.err


def test_corrupt_model_is_data_error(tmp_path, frames, capsys):
    (tmp_path / "m.sedg").write_bytes(b"SEDG" + bytes(20))
    assert run_cli("detect", "--model", tmp_path / "m.sedg", "--in", frames / "f0.png",
                   "--out", tmp_path / "e.png") == 2


def test_seed_required(capsys):
    assert run_cli("pipeline", "--root", ".") == 1
    assert run_cli("train", "--samples", "x", "--out", "y") == 1


# ---------------------------------------------------------------- help


def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit) as e:
        main(["pipeline", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for s, body in C.DEFAULTS.items():
        for k, v in body.items():
            assert f"--{s}.{k}" in out
            shown = " ".join(map(str, v)) if isinstance(v, list) else str(v)
            assert f"[{shown}]" in " ".join(out.split())


def test_every_subcommand_exists():
    names = set(build_parser()._subparsers._group_actions[0].choices)
    assert names == {"match", "filter", "flow", "colorize", "motion-edges", "detect", "train", "pipeline",
                     "eval-edges", "eval-flow"}


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "edgeloop", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "eval-edges" in r.stdout


# ---------------------------------------------------------------- golden comparisons


def test_match_and_filter_match_library(frames, tmp_path, capsys):
    assert run_cli("match", "--a", frames / "f0.png", "--b", frames / "f1.png", "--out", tmp_path / "m.txt") == 0
    lib = block_match(read_image(frames / "f0.png"), read_image(frames / "f1.png"))
    assert read_matches(tmp_path / "m.txt") == lib
    assert run_cli("filter", "--matches", tmp_path / "m.txt") == 0
    rep = json.loads(capsys.readouterr().out)
    v = filter_frame_pair(lib)
    assert rep["accept"] == v.accept and rep["reason"] == v.reason


def test_flow_colorize_motion_edges_match_library(frames, tmp_path):
    img = read_image(frames / "f0.png")
    run_cli("match", "--a", frames / "f0.png", "--b", frames / "f1.png", "--out", tmp_path / "m.txt")
    assert run_cli("detect", "--model", "gradient", "--in", frames / "f0.png", "--out", tmp_path / "e.png",
                   "--edgm", tmp_path / "e.edgm") == 0
    e = detect(GradientDetector(), img)
    np.testing.assert_array_equal(read_edge_png(tmp_path / "e.png").strength, np.round(e.strength * 255) / 255)

    over = ["--flow.k", "10", "--flow.mode", "nw"]
    assert run_cli("flow", "--matches", tmp_path / "m.txt", "--edges", tmp_path / "e.edgm",
                   "--out", tmp_path / "f.flo", *over) == 0
    cfg = C.load(overrides={"flow.k": 10, "flow.mode": "nw"})
    ms = read_matches(tmp_path / "m.txt")
    from edgeloop.imageio import read_edgm

    ee = read_edgm(tmp_path / "e.edgm")
    f = smooth_flow(interpolate(ms, ee, interp_params(cfg)), ee, 5, 10.0)
    ref = tmp_path / "ref.flo"
    write_flo(f, ref)
    assert (tmp_path / "f.flo").read_bytes() == ref.read_bytes()

    assert run_cli("colorize", "--flow", tmp_path / "f.flo", "--out", tmp_path / "c.png") == 0
    np.testing.assert_array_equal(read_image(tmp_path / "c.png"),
                                  np.round(flow_to_rgb(read_flo(ref)) * 255) / 255)

    assert run_cli("motion-edges", "--model", "gradient", "--flow", tmp_path / "f.flo", "--image",
                   frames / "f0.png", "--out", tmp_path / "g.png", "--iteration", "1") == 0
    m = compute_motion_edges(GradientDetector(), read_flo(ref), img, 1, align_params(C.defaults()),
                             iteration=1, frame_id="f0")
    got = load_motion_edges(tmp_path / "g.png")
    assert got.provenance == m.provenance
    np.testing.assert_array_equal(got.edges.strength, np.round(m.edges.strength * 255) / 255)


def test_eval_edges_matches_library(frames, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    e = detect(GradientDetector(), read_image(frames / "f0.png"))
    write_edge_png(e, pred / "f0.png")
    assert run_cli("eval-edges", "--pred", pred, "--gt", frames / "gt", "--out", tmp_path / "r.json") == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    r = benchmark([read_edge_png(pred / "f0.png")], [load_gt_dir(frames / "gt", "f0")])
    assert doc["ods"] == r.ods and doc["ois"] == r.ois and doc["ap"] == r.ap and doc["p20"] == r.p20
    assert doc["images"] == ["f0"]


def test_eval_edges_plot(frames, tmp_path):
    pytest.importorskip("matplotlib")
    pred = tmp_path / "pred"
    pred.mkdir()
    write_edge_png(detect(GradientDetector(), read_image(frames / "f0.png")), pred / "f0.png")
    assert run_cli("eval-edges", "--pred", pred, "--gt", frames / "gt", "--out", tmp_path / "r.json",
                   "--plot", tmp_path / "pr.png") == 0
    assert (tmp_path / "pr.png").stat().st_size > 0


def test_eval_flow_identical_files(tmp_path, capsys):
    f = np.random.default_rng(0).standard_normal((5, 6, 2))
    write_flo(f, tmp_path / "a.flo")
    assert run_cli("eval-flow", "--pred", tmp_path / "a.flo", "--gt", tmp_path / "a.flo") == 0
    assert json.loads(capsys.readouterr().out) == {"aee": 0.0}


def test_train_and_detect(tmp_path):
    rows = []
    for i in range(3):
        img = textured(48, 48, i)
        sup = np.zeros((48, 48))
        sup[:, 20 + i] = 1.0
        write_image(img, tmp_path / f"i{i}.png")
        write_edge_png(sup, tmp_path / f"s{i}.png")
        rows.append(f"i{i}.png s{i}.png")
    (tmp_path / "samples.txt").write_text("\n".join(rows) + "\n")
    over = ["--sedge.n_trees", "2", "--sedge.n_feature_probe", "30", "--pipeline.sample_budget", "200",
            "--jobs", "1"]
    assert run_cli("train", "--samples", tmp_path / "samples.txt", "--out", tmp_path / "a.sedg",
                   "--seed", "3", *over) == 0
    assert run_cli("train", "--samples", tmp_path / "samples.txt", "--out", tmp_path / "b.sedg",
                   "--seed", "3", *over) == 0
    assert (tmp_path / "a.sedg").read_bytes() == (tmp_path / "b.sedg").read_bytes()
    assert load_model(tmp_path / "a.sedg").params.seed == 3
    assert run_cli("detect", "--model", tmp_path / "a.sedg", "--in", tmp_path / "i0.png",
                   "--out", tmp_path / "e.png", "--sedge.scales", "1", "--nms") == 0
    assert read_edge_png(tmp_path / "e.png").shape == (48, 48)


@pytest.mark.slow
def test_pipeline_twice_identical_checksums(tmp_path, capsys):
    make_corpus(tmp_path / "ds", n_sequences=4, frames_per_sequence=2, seed=2, n_val=0)
    over = ["--flow.k", "10", "--flow.mode", "nw", "--sedge.n_trees", "2", "--sedge.n_feature_probe", "30",
            "--sedge.scales", "1", "--sedge.pos_threshold", "0.4", "--pipeline.sample_budget", "800",
            "--pipeline.min_samples", "5", "--imgproc.px_per_superpixel", "128", "--jobs", "1"]
    for out in ("r1", "r2"):
        assert run_cli("pipeline", "--root", tmp_path / "ds", "--out", tmp_path / out, "--iters", "2",
                       "--seed", "7", *over) == 0
    doc = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert doc["iteration"] == 2
    assert (tmp_path / "r1" / "2" / "model.sedg").read_bytes() == (tmp_path / "r2" / "2" / "model.sedg").read_bytes()
