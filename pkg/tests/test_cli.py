import json
import logging

import numpy as np
import pytest

from cvfm import cli
from cvfm.io import read_csv
from cvfm.training import loop as loop_mod

CONFIGS = cli.Path(__file__).resolve().parents[1] / "configs"

TINY_TRAIN = {"steps": 30, "batch_size": 32, "lr": 1e-3, "eval_every": 10, "seed": 3,
              "dataset": {"kind": "gauss_mixture_2d"},
              "head": {"architecture": "mlp", "hidden": [16, 16], "time_embed": 4}}
TINY_POLY = {**TINY_TRAIN, "dataset": {"kind": "typed_polygon_cloud"},
             "head": {"architecture": "equivariant", "hidden": [8], "n_rounds": 2, "time_embed": 4}}


def write_cfg(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


@pytest.fixture
def ring_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("ring")
    cfg = write_cfg(d / "train.json", {"train": TINY_TRAIN, "out": str(d / "run")})
    assert cli.main(["train", "--config", cfg]) == 0
    return d / "run"


@pytest.fixture
def poly_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("poly")
    cfg = write_cfg(d / "train.json", {"train": TINY_POLY, "out": str(d / "run")})
    assert cli.main(["train", "--config", cfg]) == 0
    return d / "run"


# ---------------------------------------------------------------- generate-data

def test_generate_data_replay_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    a.mkdir()
    assert cli.main(["generate-data", "--kind", "typed_polygon_cloud", "--n", "200", "--seed", "4",
                     "--out", str(a / "d.bin")]) == 0
    m = manifest(a)
    assert m["command"] == "generate-data" and m["seed"] == 4 and m["config_hash"]
    b = tmp_path / "b"
    b.mkdir()
    assert cli.main(["generate-data", "--config", str(a / "manifest.json"), "--out", str(b / "d.bin")]) == 0
    assert (a / "d.bin").read_bytes() == (b / "d.bin").read_bytes()


def test_generate_data_bad_kind(tmp_path):
    assert cli.main(["generate-data", "--kind", "nope", "--out", str(tmp_path / "d.bin")]) == cli.EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"n": 10, "colour": "red"})
    assert cli.main(["generate-data", "--config", cfg]) == cli.EXIT_CONFIG


def test_unreadable_config(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert cli.main(["generate-data", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- train

def test_train_replay_is_bit_identical(ring_run, tmp_path):
    m = manifest(ring_run)
    assert m["steps"] == 30 and m["conditioned"] is False and np.isfinite(m["final_loss"])
    assert cli.main(["train", "--config", str(ring_run / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert (ring_run / "checkpoint.bin").read_bytes() == (tmp_path / "again" / "checkpoint.bin").read_bytes()
    first = read_csv(ring_run / "metrics.csv")
    second = read_csv(tmp_path / "again" / "metrics.csv")
    # wall-clock seconds are the only field allowed to differ
    assert [(r["step"], r["loss"], r["grad_norm"]) for r in first] == \
           [(r["step"], r["loss"], r["grad_norm"]) for r in second]


def test_train_controlled_without_labels(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"train": {**TINY_TRAIN, "dataset": {"kind": "categorical_factorized"}},
                                          "loss": "controlled-vfm", "out": str(tmp_path / "run")})
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_CONFIG


def test_train_vfm_on_labelled_data_warns(tmp_path, caplog):
    cfg = write_cfg(tmp_path / "c.json", {"train": {**TINY_TRAIN, "steps": 5}, "loss": "vfm",
                                          "out": str(tmp_path / "run")})
    with caplog.at_level(logging.WARNING):
        assert cli.main(["train", "--config", cfg]) == 0
    assert any("ignored" in r.message for r in caplog.records)


def test_train_numeric_failure_exit_code(tmp_path, monkeypatch):
    real = loop_mod.vfm_loss
    monkeypatch.setattr(loop_mod, "vfm_loss", lambda *a, **k: real(*a, **k) * np.inf)
    cfg = write_cfg(tmp_path / "c.json", {"train": TINY_TRAIN, "out": str(tmp_path / "run")})
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_NUMERIC


def test_train_flags_override_file(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"train": TINY_TRAIN, "out": str(tmp_path / "run")})
    assert cli.main(["train", "--config", cfg, "--steps", "10", "--lr", "0.002"]) == 0
    resolved = manifest(tmp_path / "run")["resolved_config"]["train"]
    assert resolved["steps"] == 10 and resolved["lr"] == 0.002 and resolved["batch_size"] == 32


# ---------------------------------------------------------------- sample

def test_sample_replay_and_nfe(ring_run, tmp_path):
    a = tmp_path / "a"
    a.mkdir()
    assert cli.main(["sample", "--checkpoint", str(ring_run / "checkpoint.bin"), "--n", "50", "--nfe", "20",
                     "--seed", "5", "--out", str(a / "s.csv")]) == 0
    m = manifest(a)
    assert m["nfe"] == 20
    b = tmp_path / "b"
    b.mkdir()
    assert cli.main(["sample", "--config", str(a / "manifest.json"), "--out", str(b / "s.csv")]) == 0
    assert (a / "s.csv").read_bytes() == (b / "s.csv").read_bytes()
    rows = read_csv(a / "s.csv")
    assert len(rows) == 50 and {"index", "seed", "mode", "y", "property", "x_0", "x_1"} <= set(rows[0])


def test_sample_rk4_needs_divisible_nfe(ring_run, tmp_path):
    args = ["sample", "--checkpoint", str(ring_run / "checkpoint.bin"), "--n", "5", "--scheme", "rk4",
            "--out", str(tmp_path / "s.csv")]
    assert cli.main(args + ["--nfe", "10"]) == cli.EXIT_CONFIG
    assert cli.main(args + ["--nfe", "12"]) == 0
    assert manifest(tmp_path)["nfe"] == 12


def test_sample_mode_checks(ring_run, tmp_path):
    base = ["sample", "--checkpoint", str(ring_run / "checkpoint.bin"), "--n", "5", "--out", str(tmp_path / "s.csv")]
    assert cli.main(base + ["--mode", "conditioned", "--y", "1"]) == cli.EXIT_CONFIG
    assert cli.main(base + ["--mode", "guided"]) == cli.EXIT_CONFIG


def test_guided_zero_inner_steps_matches_unconditional(poly_run, tmp_path):
    base = ["sample", "--checkpoint", str(poly_run / "checkpoint.bin"), "--n", "20", "--nfe", "10", "--seed", "2"]
    assert cli.main(base + ["--out", str(tmp_path / "u.csv")]) == 0
    assert cli.main(base + ["--mode", "guided", "--guide", "circumradius", "--target", "1.2", "--inner-steps", "0",
                            "--out", str(tmp_path / "g.csv")]) == 0
    cols = [c for c in read_csv(tmp_path / "u.csv")[0] if c.startswith(("x_", "cat_"))]
    u = [[r[c] for c in cols] for r in read_csv(tmp_path / "u.csv")]
    g = [[r[c] for c in cols] for r in read_csv(tmp_path / "g.csv")]
    assert u == g


def test_corrupted_checkpoint(ring_run, tmp_path):
    bad = tmp_path / "bad.bin"
    data = bytearray((ring_run / "checkpoint.bin").read_bytes())
    data[:8] = b"garbage!"
    bad.write_bytes(bytes(data))
    assert cli.main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path / "s.csv")]) == cli.EXIT_CONFIG
    (tmp_path / "short.bin").write_bytes(bytes(data[:20]))
    assert cli.main(["sample", "--checkpoint", str(tmp_path / "short.bin"),
                     "--out", str(tmp_path / "s.csv")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- eval

def test_eval_metrics_and_thresholds(tmp_path):
    ref = tmp_path / "ref.bin"
    other = tmp_path / "other.bin"
    assert cli.main(["generate-data", "--kind", "typed_polygon_cloud", "--n", "300", "--out", str(ref)]) == 0
    assert cli.main(["generate-data", "--kind", "typed_polygon_cloud", "--n", "300", "--seed", "1",
                     "--out", str(other)]) == 0
    out = tmp_path / "m.csv"
    args = ["eval", "--samples", str(other), "--reference", str(ref), "--property", "circumradius",
            "--target", "1.2", "--out", str(out)]
    assert cli.main(args) == 0
    values = {r["metric"]: float(r["value"]) for r in read_csv(out)}
    assert values["validity_rate"] == 1.0
    assert values["max_marginal_tv"] < 0.15 and values["sliced_w2"] < 0.2
    assert 0.1 < values["property_mae"] < 0.3
    assert cli.main(args + ["--thresholds", '{"validity_rate": 0.9, "sliced_w2": 0.2}']) == 0
    assert cli.main(args + ["--thresholds", '{"property_mae": 0.01}']) == cli.EXIT_THRESHOLD
    assert cli.main(args + ["--thresholds", '{"fid": 1.0}']) == cli.EXIT_CONFIG


def test_eval_reads_sample_csv(ring_run, tmp_path):
    assert cli.main(["generate-data", "--n", "200", "--out", str(tmp_path / "ref.bin")]) == 0
    assert cli.main(["sample", "--checkpoint", str(ring_run / "checkpoint.bin"), "--n", "40", "--nfe", "10",
                     "--out", str(tmp_path / "s.csv")]) == 0
    assert cli.main(["eval", "--samples", str(tmp_path / "s.csv"), "--reference", str(tmp_path / "ref.bin"),
                     "--out", str(tmp_path / "m.csv")]) == 0
    assert cli.main(["eval", "--samples", str(tmp_path / "s.csv"), "--reference", str(tmp_path / "ref.bin"),
                     "--append", "--out", str(tmp_path / "m.csv")]) == 0
    assert [r["metric"] for r in read_csv(tmp_path / "m.csv")] == ["sliced_w2", "sliced_w2"]


def test_eval_width_mismatch(ring_run, tmp_path):
    assert cli.main(["generate-data", "--kind", "typed_polygon_cloud", "--n", "20",
                     "--out", str(tmp_path / "ref.bin")]) == 0
    assert cli.main(["generate-data", "--n", "20", "--out", str(tmp_path / "ring.bin")]) == 0
    assert cli.main(["eval", "--samples", str(tmp_path / "ring.bin"), "--reference", str(tmp_path / "ref.bin"),
                     "--out", str(tmp_path / "m.csv")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- equivariance-audit

@pytest.mark.parametrize("name", ["audit_equivariant", "audit_mlp"])
def test_shipped_audit_configs(name, tmp_path):
    out = tmp_path / "audit.txt"
    assert cli.main(["equivariance-audit", "--config", str(CONFIGS / f"{name}.json"), "--out", str(out)]) == 0
    text = out.read_text()
    assert text.rstrip().endswith("overall: PASS")
    res = manifest(tmp_path)["residuals"]
    assert res["H2"] <= 1e-12 and res["H1"] <= 1e-12
    if name == "audit_mlp":
        assert res["H3"] > 0.1
    else:
        assert res["H3"] <= 1e-9 and res["marginal"] <= 1e-8


def test_audit_wrong_expectation_is_threshold_failure(tmp_path):
    cfg = json.loads((CONFIGS / "audit_mlp.json").read_text())
    cfg["expect"]["H3"] = "pass"
    path = write_cfg(tmp_path / "a.json", cfg)
    assert cli.main(["equivariance-audit", "--config", path, "--out", str(tmp_path / "a.txt")]) == cli.EXIT_THRESHOLD
    assert "MISMATCH" in (tmp_path / "a.txt").read_text()


def test_audit_needs_point_cloud(tmp_path):
    cfg = write_cfg(tmp_path / "a.json", {"dataset": {"kind": "gauss_mixture_2d"}, "head": {"architecture": "mlp"}})
    assert cli.main(["equivariance-audit", "--config", cfg, "--out", str(tmp_path / "a.txt")]) == cli.EXIT_CONFIG


def test_audit_replay_is_identical(tmp_path):
    a = tmp_path / "a"
    a.mkdir()
    assert cli.main(["equivariance-audit", "--trials", "4", "--steps", "10", "--out", str(a / "r.txt")]) == 0
    b = tmp_path / "b"
    b.mkdir()
    assert cli.main(["equivariance-audit", "--config", str(a / "manifest.json"), "--out", str(b / "r.txt")]) == 0
    assert (a / "r.txt").read_text().replace(str(a), "") == (b / "r.txt").read_text().replace(str(b), "")
