import json
import subprocess
import sys

import numpy as np
import pytest

from grouptron import tensorcore as tc
from grouptron.cli import build_parser, load_checkpoint, read_scenes, resolve_config, run
from grouptron.dataio import Scene, Track, filter_univ_n, format_scene, make_windows, parse_dataset, read_windows
from grouptron.model import Grouptron, ModelConfig
from grouptron.synthetic import crossing_corpus


def write_scene(path, scene):
    path.write_text(format_scene(scene), encoding="utf-8")
    return path


def crowd(n_ticks=26):
    # two long walkers, five more people crossing for ticks 9..12
    tracks = {i: Track(0, np.column_stack([0.4 * np.arange(n_ticks), np.full(n_ticks, float(i))]))
              for i in range(2)}
    for i in range(2, 7):
        tracks[i] = Track(9, np.column_stack([np.full(4, 3.0 + i), 0.3 * np.arange(4)]))
    return Scene(name="crowd", frame_origin=0, frame_stride=10, n_ticks=n_ticks, tracks=tracks)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """ingest -> windows for two synthetic scenes plus the crowd scene."""
    root = tmp_path_factory.mktemp("pipe")
    files = [write_scene(root / f"{s.name}.txt", s) for s in crossing_corpus(2, seed=3, n_ticks=21)]
    files.append(write_scene(root / "crowd.txt", crowd()))
    assert run(["ingest", *map(str, files), "--out", str(root / "scenes")]) == 0
    assert run(["windows", str(root / "scenes" / "scenes.jsonl"), "--out", str(root / "win")]) == 0
    return root


def header_of(path):
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)["header"]
    except json.JSONDecodeError:
        pass
    first = text.splitlines()[0]
    first = first[2:] if first.startswith("# ") else first
    d = json.loads(first)
    return d.get("header", d)


# ---------------------------------------------------------------- usage


def test_no_subcommand_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_argument_and_file(tmp_path):
    assert run(["train"]) == 1
    assert run(["windows", str(tmp_path / "nope.jsonl")]) == 1
    assert run(["ingest", "--seed", "-1", str(tmp_path)]) == 1


def test_help_and_version_exit_zero(capsys):
    assert run(["--version"]) == 0
    assert run(["train", "--help"]) == 0


def test_malformed_data_is_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("0 1 0.0 0.0\n10 1 x 0.0\n")
    assert run(["ingest", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_bad_config_is_exit_two(tmp_path, pipeline):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"widget": 3}}))
    assert run(["train", str(pipeline / "win" / "windows.jsonl"), "--config", str(cfg)]) == 2
    cfg.write_text("{not json")
    assert run(["train", str(pipeline / "win" / "windows.jsonl"), "--config", str(cfg)]) == 2


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "grouptron.cli"], capture_output=True, text=True)
    assert out.returncode == 1 and "usage" in out.stderr


# ---------------------------------------------------------------- config


def parse(argv):
    return resolve_config(build_parser().parse_args(argv))


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"scene_dim": 12, "alpha": 0.5},
                               "train": {"epochs": 3, "lr0": 0.01}, "seed": 9}))
    c = parse(["train", "w", "--config", str(cfg), "--seed", "4", "--epochs", "2"])
    assert (c.seed, c.train.seed, c.train.epochs, c.train.lr0) == (4, 4, 2, 0.01)
    assert (c.model.scene_dim, c.model.alpha) == (12, 0.5)
    c = parse(["train", "w", "--config", str(cfg)])
    assert (c.seed, c.train.epochs) == (9, 3)
    c = parse(["train", "w"])
    assert (c.seed, c.train.epochs, c.model.scene_dim) == (0, 100, 16)


def test_eth_config_flag_and_key(tmp_path):
    assert parse(["train", "w", "--eth-config"]).model.embed_dim == 48
    assert parse(["train", "w"]).model.embed_dim == 56
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"eth_config": True}))
    assert parse(["train", "w", "--config", str(cfg)]).model.embed_dim == 48


def test_seed_range():
    assert parse(["train", "w", "--seed", str(2**64 - 1)]).seed == 2**64 - 1
    with pytest.raises(Exception):
        parse(["train", "w", "--seed", str(2**64)])


def test_config_hash_tracks_config():
    a = parse(["train", "w"]).digest()
    assert a == parse(["train", "w"]).digest()
    assert a != parse(["train", "w", "--alpha", "0.5"]).digest()
    assert a != parse(["train", "w", "--seed", "1"]).digest()


# ---------------------------------------------------------------- stages


def test_ingest_roundtrip(pipeline):
    scenes = read_scenes(pipeline / "scenes" / "scenes.jsonl")
    assert [s.name for s in scenes] == ["synth000", "synth001", "crowd"]
    direct = parse_dataset((pipeline / "crowd.txt").read_text(), name="crowd")
    assert scenes[2].to_dict() == direct.to_dict()
    h = header_of(pipeline / "scenes" / "scenes.jsonl")
    assert h["version"] and h["seed"] == 0 and len(h["config_hash"]) == 16


def test_windows_min_present_matches_filter(pipeline, tmp_path):
    scenes = pipeline / "scenes" / "scenes.jsonl"
    assert run(["windows", str(scenes), "--min-present", "7", "--out", str(tmp_path)]) == 0
    got = read_windows(tmp_path / "windows.jsonl")
    expect = filter_univ_n([w for s in read_scenes(scenes) for w in make_windows(s)], 7)
    assert expect and len(expect) < len(read_windows(pipeline / "win" / "windows.jsonl"))
    assert [(w.scene, w.t0, w.node) for w in got] == [(w.scene, w.t0, w.node) for w in expect]
    assert {(w.scene, w.last_tick) for w in got} == {("crowd", 9), ("crowd", 10), ("crowd", 11), ("crowd", 12)}
    assert header_of(tmp_path / "windows.jsonl")["min_present"] == 7
    assert run(["windows", str(scenes), "--min-present", "0", "--out", str(tmp_path)]) == 1


def test_train_zero_epochs_is_init(pipeline, tmp_path):
    w = str(pipeline / "win" / "windows.jsonl")
    assert run(["train", w, "--epochs", "0", "--seed", "11", "--out", str(tmp_path)]) == 0
    model, info = load_checkpoint(tmp_path / "checkpoint.bin")
    ref = Grouptron.initialize(ModelConfig(), 11).parameters()
    got = model.parameters()
    assert got.keys() == ref.keys()
    assert all(np.array_equal(got[k].data, ref[k].data) for k in ref)
    assert info["header"]["seed"] == 11 and info["train"]["epochs"] == 0


def trained(pipeline, out, extra=()):
    w = str(pipeline / "win" / "windows.jsonl")
    assert run(["train", w, "--epochs", "1", "--batch-size", "16", "--seed", "5",
                "--out", str(out), *extra]) == 0
    return out / "checkpoint.bin"


def artifacts(pipeline, out, jobs="1"):
    ck = trained(pipeline, out / "t")
    w = str(pipeline / "win" / "windows.jsonl")
    common = ["--seed", "5", "--jobs", jobs]
    assert run(["eval", str(ck), w, "--out", str(out / "e"), *common]) == 0
    assert run(["predict", str(ck), w, "--samples", "3", "--out", str(out / "p"), *common]) == 0
    assert run(["cluster", str(pipeline / "scenes" / "scenes.jsonl"), "--out", str(out / "c"), *common]) == 0
    assert run(["inspect", w, "--index", "3", "--level", "group", "--out", str(out / "i"), *common]) == 0
    assert run(["plot", str(ck), w, "--out", str(out / "svg"), *common]) == 0
    files = [out / "t" / "checkpoint.bin", out / "e" / "report.json", out / "e" / "report.csv",
             out / "p" / "predictions.jsonl", out / "c" / "groups.json", out / "i" / "graph_group.json"]
    files += sorted((out / "svg").glob("*.svg"))
    return {f.relative_to(out).as_posix(): f.read_bytes() for f in files}


def test_reruns_are_byte_identical(pipeline, tmp_path):
    a = artifacts(pipeline, tmp_path / "a")
    b = artifacts(pipeline, tmp_path / "b")
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
    # metrics differ only in the wall-time column
    ma = (tmp_path / "a" / "t" / "metrics.csv").read_text().splitlines()
    mb = (tmp_path / "b" / "t" / "metrics.csv").read_text().splitlines()
    assert [r.rsplit(",", 1)[0] for r in ma] == [r.rsplit(",", 1)[0] for r in mb]


def test_parallel_jobs_match_serial(pipeline, tmp_path):
    ck = trained(pipeline, tmp_path / "t")
    w = str(pipeline / "win" / "windows.jsonl")
    assert run(["eval", str(ck), w, "--out", str(tmp_path / "s")]) == 0
    assert run(["eval", str(ck), w, "--jobs", "2", "--out", str(tmp_path / "j")]) == 0
    assert (tmp_path / "s" / "report.json").read_bytes() == (tmp_path / "j" / "report.json").read_bytes()
    assert run(["train", w, "--epochs", "1", "--batch-size", "16", "--seed", "5", "--jobs", "2",
                "--out", str(tmp_path / "tj")]) == 0
    assert ck.read_bytes() == (tmp_path / "tj" / "checkpoint.bin").read_bytes()


def test_every_artifact_has_header(pipeline, tmp_path):
    arts = artifacts(pipeline, tmp_path)
    for name in ("e/report.json", "e/report.csv", "p/predictions.jsonl", "c/groups.json", "i/graph_group.json"):
        h = header_of(tmp_path / name)
        assert h["seed"] == 5 and h["tool"] == "grouptron" and "config_hash" in h and "version" in h
    _, meta = tc.load_snapshot(tmp_path / "t" / "checkpoint.bin")
    assert json.loads(meta)["header"]["seed"] == 5
    assert header_of(tmp_path / "t" / "metrics.csv")["seed"] == 5
    assert any(k.startswith("svg/") for k in arts)


def test_eval_protocol_filter_and_rows(pipeline, tmp_path):
    ck = trained(pipeline, tmp_path / "t")
    w = str(pipeline / "win" / "windows.jsonl")
    assert run(["eval", str(ck), w, "--protocol", "most_likely", "--out", str(tmp_path / "e")]) == 0
    rows = json.loads((tmp_path / "e" / "report.json").read_text())["rows"]
    assert {r["protocol"] for r in rows} == {"most_likely", "constant_velocity"}
    assert {r["dataset"] for r in rows} == {"win"}
    assert run(["eval", str(ck), w, "--protocol", "best_of_5"]) == 1


def test_predict_records(pipeline, tmp_path):
    ck = trained(pipeline, tmp_path / "t")
    w = pipeline / "win" / "windows.jsonl"
    assert run(["predict", str(ck), str(w), "--samples", "4", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "predictions.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines[1:]]
    assert len(recs) == len(read_windows(w))
    assert all(len(r["samples"]) == 4 and len(r["most_likely"]) == 12 for r in recs)
    assert all(r["log_weights"] == sorted(r["log_weights"], reverse=True) for r in recs)


def test_cluster_dice(pipeline, tmp_path):
    scenes = str(pipeline / "scenes" / "scenes.jsonl")
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps([[[[0, 1, 2], [3, 4, 5]]], [[[0, 1, 2], [3, 4, 5]]]]))
    argv = ["cluster", scenes, "--scene", "synth000", "--ticks", "0,1", "--annotations", str(ann),
            "--out", str(tmp_path)]
    assert run(argv) == 0
    body = json.loads((tmp_path / "groups.json").read_text())
    assert len(body["assignments"]) == 2 and 0.0 <= body["dice"] <= 1.0
    assert run(["cluster", scenes, "--annotations", str(ann), "--out", str(tmp_path)]) == 1
    assert run(["cluster", scenes, "--scene", "synth000", "--ticks", "99", "--out", str(tmp_path)]) == 2


def test_inspect_levels(pipeline, tmp_path):
    w = str(pipeline / "win" / "windows.jsonl")
    assert run(["inspect", w, "--out", str(tmp_path)]) == 0
    g = json.loads((tmp_path / "graph_individual.json").read_text())["graphs"][0]
    assert g["level"] == "individual"
    assert run(["inspect", w, "--level", "scene", "--out", str(tmp_path)]) == 1
    ck = trained(pipeline, tmp_path / "t")
    assert run(["inspect", w, "--level", "scene", "--checkpoint", str(ck), "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "graph_scene.json").read_text())
    assert len(body["graphs"][0]["node_ids"]) == len(body["assignment"])
    assert run(["inspect", w, "--index", "9999", "--out", str(tmp_path)]) == 1


def test_eth_config_checkpoint(pipeline, tmp_path):
    ck = trained(pipeline, tmp_path, extra=["--eth-config", "--epochs", "0"])
    model, _ = load_checkpoint(ck)
    assert model.cfg.embed_dim == 48


def test_corrupt_checkpoint_is_exit_two(pipeline, tmp_path):
    bad = tmp_path / "ck.bin"
    bad.write_bytes(b"not a snapshot")
    assert run(["eval", str(bad), str(pipeline / "win" / "windows.jsonl"), "--out", str(tmp_path)]) == 2
