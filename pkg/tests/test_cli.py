import csv
import json

import numpy as np
import pytest

from cantrack import cli
from cantrack.io import load_model
from cantrack.metrics import REPORT_SCHEMA

TOY_WORLD = {"num_identities": 4, "num_cameras": 2, "num_frames": 400, "embedding_dim": 16,
             "sigma": 0.2, "beta": 0.1, "seed": 3}
TRAIN_FLAGS = ["--hidden", "16", "8", "4", "--num-cameras", "2", "--max-template-len", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_json(path, d):
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert run("generate", "--config", write_json(root / "world.json", TOY_WORLD), "--out", root / "data") == 0
    return root


def read_log(path):
    with open(path) as fh:
        return [(int(r["step"]), float(r["J"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- generate


def test_generate_writes_three_files(toy):
    assert sorted(p.name for p in (toy / "data").iterdir()) == \
        sorted([cli.DETECTIONS_FILE, cli.FEATURES_FILE, cli.GROUND_TRUTH_FILE])


def test_generate_same_seed_same_bytes(toy, tmp_path):
    assert run("generate", "--config", toy / "world.json", "--out", tmp_path) == 0
    for name in (cli.DETECTIONS_FILE, cli.FEATURES_FILE, cli.GROUND_TRUTH_FILE):
        assert (tmp_path / name).read_bytes() == (toy / "data" / name).read_bytes()
    assert run("generate", "--config", toy / "world.json", "--seed", 4, "--out", tmp_path / "b") == 0
    assert (tmp_path / "b" / cli.FEATURES_FILE).read_bytes() != (tmp_path / cli.FEATURES_FILE).read_bytes()


@pytest.mark.parametrize("bad,field", [({"sigma": -1}, "sigma"), ({"num_cameras": "two"}, "num_cameras"),
                                       ({"colour": 1}, "colour")])
def test_generate_malformed_config(tmp_path, capsys, bad, field):
    assert run("generate", "--config", write_json(tmp_path / "w.json", bad), "--out", tmp_path / "o") == 1
    assert field in capsys.readouterr().err


def test_generate_missing_config_is_io_error(tmp_path):
    assert run("generate", "--config", tmp_path / "absent.json", "--out", tmp_path) == 2


def test_usage_errors_exit_one(tmp_path):
    assert run("frobnicate") == 1
    assert run("track", "--mode", "fancy", "--out", tmp_path) == 1


# ---------------------------------------------------------------- train


def test_train_lr_zero_keeps_parameters(toy, tmp_path):
    data = toy / "data"
    assert run("train", "--data", data, "--out", tmp_path / "a", "--steps", 0, *TRAIN_FLAGS) == 0
    assert run("train", "--data", data, "--out", tmp_path / "b", "--steps", 5, "--lr", 0, *TRAIN_FLAGS) == 0
    a, b = load_model(tmp_path / "a" / cli.MODEL_FILE), load_model(tmp_path / "b" / cli.MODEL_FILE)
    for la, lb in zip(a.evalnet.layers, b.evalnet.layers):
        for name in ("weight", "bias", "bn_gamma", "bn_beta"):
            assert np.array_equal(getattr(la, name), getattr(lb, name))
    assert np.array_equal(a.head.weight, b.head.weight) and np.array_equal(a.head.bias, b.head.bias)


@pytest.fixture(scope="module")
def trained(toy):
    out = toy / "train"
    assert run("train", "--data", toy / "data", "--out", out, "--steps", 300, "--seed", 1, *TRAIN_FLAGS) == 0
    return out


def test_train_cost_decreases(trained):
    J = np.array([j for _, j in read_log(trained / cli.TRAIN_LOG_FILE)])
    assert len(J) == 300
    avg = np.convolve(J, np.ones(10) / 10, mode="valid")
    assert avg[-1] < avg[0] and J[-1] < 0.5 * J[0]


def test_train_resume_continues_step_count(toy, tmp_path):
    data = toy / "data"
    assert run("train", "--data", data, "--out", tmp_path / "a", "--steps", 20, *TRAIN_FLAGS) == 0
    assert run("train", "--data", data, "--out", tmp_path / "b", "--steps", 40,
               "--resume", tmp_path / "a" / cli.MODEL_FILE, *TRAIN_FLAGS) == 0
    steps = [s for s, _ in read_log(tmp_path / "b" / cli.TRAIN_LOG_FILE)]
    assert steps == list(range(21, 41))
    assert load_model(tmp_path / "b" / cli.MODEL_FILE).optimizer.step == 40
    # an uninterrupted 40-step run ends in the same model
    assert run("train", "--data", data, "--out", tmp_path / "c", "--steps", 40, *TRAIN_FLAGS) == 0
    assert (tmp_path / "b" / cli.MODEL_FILE).read_bytes() == (tmp_path / "c" / cli.MODEL_FILE).read_bytes()


def test_train_needs_two_identities(tmp_path, capsys):
    world = write_json(tmp_path / "w.json", {**TOY_WORLD, "num_identities": 1})
    assert run("generate", "--config", world, "--out", tmp_path / "d") == 0
    assert run("train", "--data", tmp_path / "d", "--out", tmp_path / "m", *TRAIN_FLAGS) == 1
    assert "2 identities" in capsys.readouterr().err


def test_config_file_and_flags(toy, tmp_path, capsys):
    cfg = write_json(tmp_path / "run.json", {"steps": 3, "lr": 0.0, "hidden": [4, 4, 4], "num_cameras": 2})
    assert run("train", "--config", cfg, "--data", toy / "data", "--out", tmp_path / "m", "--steps", 2) == 0
    assert len(read_log(tmp_path / "m" / cli.TRAIN_LOG_FILE)) == 2
    assert load_model(tmp_path / "m" / cli.MODEL_FILE).evalnet.dims[1:4] == [4, 4, 4]
    bad = write_json(tmp_path / "bad.json", {"stepz": 3})
    assert run("train", "--config", bad, "--data", toy / "data", "--out", tmp_path / "m") == 1
    assert "stepz" in capsys.readouterr().err


# ---------------------------------------------------------------- track


def test_track_mean_needs_no_model(toy, tmp_path):
    assert run("track", "--data", toy / "data", "--mode", "mean", "--out", tmp_path, "--num-cameras", 2) == 0
    assert (tmp_path / cli.TRAJECTORIES_FILE).exists() and (tmp_path / cli.EVENTS_FILE).exists()


def test_track_can_without_model_is_usage_error(toy, tmp_path, capsys):
    assert run("track", "--data", toy / "data", "--out", tmp_path) == 1
    assert "--model" in capsys.readouterr().err


def test_track_missing_model_file_is_io_error(toy, tmp_path):
    assert run("track", "--data", toy / "data", "--model", tmp_path / "none.json", "--out", tmp_path) == 2


def test_track_rerun_byte_identical(toy, trained, tmp_path):
    for sub in ("a", "b"):
        assert run("track", "--data", toy / "data", "--model", trained / cli.MODEL_FILE,
                   "--out", tmp_path / sub, "--threads", 2 if sub == "b" else 1) == 0
    for name in (cli.TRAJECTORIES_FILE, cli.EVENTS_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_track_noiseless_single_identity(tmp_path):
    world = write_json(tmp_path / "w.json", {"num_identities": 1, "num_cameras": 3, "num_frames": 900,
                                             "embedding_dim": 16, "seed": 2})
    assert run("generate", "--config", world, "--out", tmp_path / "d") == 0
    assert run("track", "--data", tmp_path / "d", "--mode", "mean", "--out", tmp_path / "t",
               "--num-cameras", 3) == 0
    with open(tmp_path / "t" / cli.TRAJECTORIES_FILE) as fh:
        rows = list(csv.DictReader(fh))
    assert len({r["track_id"] for r in rows}) > 1  # several visits ...
    assert len({r["global_identity"] for r in rows}) == 1  # ... one person


# ---------------------------------------------------------------- evaluate


def test_evaluate_perfect_noiseless_pipeline(tmp_path, capsys):
    jsonschema = pytest.importorskip("jsonschema")
    world = write_json(tmp_path / "w.json", {"num_identities": 5, "num_cameras": 2, "embedding_dim": 16, "seed": 9})
    assert run("generate", "--config", world, "--out", tmp_path / "d") == 0
    assert run("track", "--data", tmp_path / "d", "--mode", "mean", "--out", tmp_path / "t") == 0
    assert run("evaluate", "--data", tmp_path / "d", "--hypothesis", tmp_path / "t" / cli.TRAJECTORIES_FILE,
               "--events", tmp_path / "t" / cli.EVENTS_FILE, "--seed", 9, "--out", tmp_path / "r") == 0
    report = json.loads((tmp_path / "r" / cli.REPORT_FILE).read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert (report["ie"], report["idf1"], report["mota"], report["mcta"]) == (0.0, 1.0, 1.0, 1.0)
    assert report["seed"] == 9
    table = capsys.readouterr().out
    assert "IDF1" in table and "100.00" in table


def test_evaluate_compare(toy, tmp_path, capsys):
    data = toy / "data"
    assert run("track", "--data", data, "--mode", "mean", "--out", tmp_path / "t", "--num-cameras", 2) == 0
    assert run("evaluate", "--data", data, "--hypothesis", tmp_path / "t" / cli.TRAJECTORIES_FILE,
               "--out", tmp_path / "r") == 0
    base = {**json.loads((tmp_path / "r" / cli.REPORT_FILE).read_text()), "idf1": 0.8}
    capsys.readouterr()
    write_json(tmp_path / "can.json", base)
    write_json(tmp_path / "mean.json", {**base, "idf1": 0.75})
    assert run("evaluate", "--compare", tmp_path / "can.json", tmp_path / "mean.json") == 0
    out = capsys.readouterr().out
    assert "can" in out and "mean" in out
    assert [l for l in out.splitlines() if l.startswith("IDF1")][0].split()[-1] == "+5.00"
    write_json(tmp_path / "junk.json", {"idf1": 1})
    assert run("evaluate", "--compare", tmp_path / "can.json", tmp_path / "junk.json") == 1


def test_evaluate_io_and_schema_errors(toy, tmp_path, capsys):
    assert run("evaluate", "--data", toy / "data", "--hypothesis", tmp_path / "none.csv", "--out", tmp_path) == 2
    (tmp_path / "h.csv").write_text("camera,frame,x,y,w,h,track_id,global_identity\n1,0,1,1,10,10,0,zero\n")
    assert run("evaluate", "--data", toy / "data", "--hypothesis", tmp_path / "h.csv", "--out", tmp_path) == 1
    assert "h.csv:2" in capsys.readouterr().err
