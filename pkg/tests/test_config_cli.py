import json
from pathlib import Path

import numpy as np
import pytest

from hetpfl import cli
from hetpfl import tensor as T
from hetpfl.checkpoint import load_checkpoint, save_checkpoint
from hetpfl.config import ExperimentConfig, config_from_dict, load_config, load_datasets, resolve_paths
from hetpfl.data import generate_synthetic
from hetpfl.errors import ChecksumError, ConfigError
from hetpfl.gradcheck import run_check

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "dataset": {"kind": "synthetic", "n": 900},
    "clients": 3,
    "seeds": [0, 1],
    "eval_points": 20,
    "training": {"rounds": 1, "tau_c": 1, "tau_p": 2, "fusion_epochs": 1, "val_grid": 0},
}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = _write(base, {**TINY, "allow_local_epochs": True})
    assert cli.main(["run", str(cfg), "--out", str(base / "out")]) == 0
    return base / "out"


# --- config ---------------------------------------------------------------------


def test_defaults_match_reference_setup():
    cfg = config_from_dict({})
    t = cfg.training
    assert (t.rounds, t.tau_c + t.tau_p, t.batch_size, t.n_prefs, t.ref_point) == (15, 30, 128, 4, (1.0, 1.0))
    assert cfg == ExperimentConfig() and not cfg.warnings()


def test_bundled_config_is_the_default():
    assert load_config(ROOT / "configs" / "synthetic.json") == ExperimentConfig()


@pytest.mark.parametrize(
    "doc, key",
    [
        ({"batch": 3}, "batch"),
        ({"training": {"learning_rate": 0.1}}, "learning_rate"),
        ({"dataset": {"kind": "synthetic", "rows": 10}}, "rows"),
        ({"clients": "3"}, "clients"),
        ({"mode": "fedavg"}, "mode"),
        ({"heterogeneity": 0}, "heterogeneity"),
        ({"seeds": [1, 1]}, "seeds"),
        ({"dataset": {"kind": "csv"}}, "dataset"),
        ({"training": {"alpha_optimizer": "rmsprop"}}, "alpha_optimizer"),
        ({"clients": 1}, "clients"),
    ],
)
def test_invalid_configs_name_the_violation(doc, key):
    with pytest.raises(ConfigError, match=key):
        config_from_dict(doc)


def test_hash_ignores_output_location():
    a = config_from_dict(TINY)
    b = config_from_dict({**TINY, "output_dir": "/elsewhere"})
    c = config_from_dict({**TINY, "clients": 2})
    assert a.hash() == b.hash() != c.hash()


def test_local_epoch_warning():
    cfg = config_from_dict(TINY)
    assert "tau_c + tau_p = 3" in cfg.warnings()[0]
    assert not config_from_dict({**TINY, "allow_local_epochs": True}).warnings()


def test_csv_datasets(tmp_path):
    assert cli.main(["gen-data", "--n", "600", "--clients", "2", "--out", str(tmp_path / "d")]) == 0
    per_client = config_from_dict(
        {"dataset": {"kind": "csv", "paths": ["client-0.csv", "client-1.csv"], "schema": "schema.json"}, "clients": 2}
    )
    parts = load_datasets(resolve_paths(per_client, tmp_path / "d"), 0)
    assert [len(p) for p in parts] == [len(x) for x in generate_synthetic(600, 2, 5.0, 0)]
    assert parts[0].n_features == 3
    single = resolve_paths(
        config_from_dict({"dataset": {"kind": "csv", "paths": ["client-0.csv"], "schema": "schema.json"}, "clients": 3}),
        tmp_path / "d",
    )
    assert len(load_datasets(single, 0)) == 3


# --- run / eval -------------------------------------------------------------------


def test_run_writes_every_artifact(tiny_run):
    summary = json.loads((tiny_run / "summary.json").read_text())
    assert summary["seeds"] == [0, 1] and len(summary["local_hv"]["values"]) == 2
    h = summary["config_hash"]
    for seed in (0, 1):
        d = tiny_run / f"seed-{seed}"
        for rec in map(json.loads, (d / "telemetry.jsonl").read_text().splitlines()):
            assert rec["config_hash"] == h and rec["seed"] == seed
        rep = json.loads((d / "report.json").read_text())
        assert rep["config_hash"] == h and rep["seed"] == seed
        head = (d / "reports" / "global.csv").read_text().splitlines()[0]
        assert f"config_hash={h}" in head and f"seed={seed}" in head
        assert json.loads((d / "reports" / "local-0.json").read_text())["seed"] == seed
    assert not (tiny_run / ".lock").exists()


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    cfg = _write(tmp_path, {**TINY, "allow_local_epochs": True})
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for rel in ("summary.json", "seed-1/telemetry.jsonl", "seed-1/checkpoint.json", "seed-0/reports/global.csv"):
        assert (tiny_run / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_warning_is_recorded_and_run_proceeds(tmp_path):
    doc = {**TINY, "seeds": [0]}
    assert cli.main(["run", str(_write(tmp_path, doc)), "--out", str(tmp_path / "w")]) == 0
    first = json.loads((tmp_path / "w" / "seed-0" / "telemetry.jsonl").read_text().splitlines()[0])
    assert "tau_c + tau_p" in first["warning"]
    assert json.loads((tmp_path / "w" / "summary.json").read_text())["warnings"]


def test_flags_override_config(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    args = ["run", str(_write(tmp_path, TINY)), "--seeds", "3", "--mode", "ablate-both", "--allow-local-epochs"]
    assert cli.main(args) == 0
    (run_dir,) = (tmp_path / "root").iterdir()
    assert run_dir.name.startswith("ablate-both-")
    assert json.loads((run_dir / "summary.json").read_text())["seeds"] == [3]


def test_eval_reproduces_run_reports(tiny_run):
    assert cli.main(["eval", str(tiny_run), "--m", "20"]) == 0
    for seed in (0, 1):
        a = (tiny_run / f"seed-{seed}" / "reports" / "global.csv").read_bytes()
        b = (tiny_run / f"seed-{seed}" / "eval-m20" / "global.csv").read_bytes()
        assert a == b


def test_eval_refinement(tiny_run):
    coarse = cli.evaluate_run(tiny_run, 10)
    fine = cli.evaluate_run(tiny_run, 1000)
    for seed in (0, 1):
        assert coarse["seeds"][seed]["global_hv"] <= fine["seeds"][seed]["global_hv"] + 1e-12
        for c, f in zip(coarse["seeds"][seed]["local_hv"], fine["seeds"][seed]["local_hv"]):
            assert c <= f + 1e-12


def test_eval_missing_checkpoint(tiny_run, tmp_path, capsys):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(tiny_run, copy)
    (copy / "seed-1" / "checkpoint.json").unlink()
    assert cli.main(["eval", str(copy)]) == 1
    assert "missing checkpoint" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tiny_run, tmp_path, capsys):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(tiny_run, copy)
    ck = copy / "seed-0" / "checkpoint.json"
    ck.write_text(ck.read_text().replace("0.", "0.9", 1))
    assert cli.main(["eval", str(copy), "--m", "5"]) == 1
    assert "checksum" in capsys.readouterr().err


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    from hetpfl.federated import RoundConfig, run_experiment

    art = run_experiment(generate_synthetic(600, 2, 5.0, 1), RoundConfig(rounds=1, tau_c=1, tau_p=1, fusion_epochs=1), eval_points=5)
    save_checkpoint(art, tmp_path / "c.json", "abc")
    server, meta = load_checkpoint(tmp_path / "c.json")
    assert meta["config_hash"] == "abc" and meta["mode"] == "hetpfl"
    for ours, theirs in [(art.server.psi, server.psi), (art.server.phi, server.phi), *zip(art.server.hypernets, server.hypernets)]:
        assert ours.keys() == theirs.keys()
        assert all(ours[k].tobytes() == theirs[k].tobytes() and ours[k].shape == theirs[k].shape for k in ours)


def test_truncated_checkpoint(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"sha256": "x", "payl')
    with pytest.raises(ChecksumError):
        load_checkpoint(p)


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["run", str(_write(tmp_path, {"trainig": {}}))]) == 2
    assert "trainig" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "absent.json")]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["run", "--seeds", "a,b"]) == 2


def test_lock_blocks_second_writer(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123\n")
    cfg = _write(tmp_path, {**TINY, "seeds": [0], "allow_local_epochs": True})
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 1
    assert "another process" in capsys.readouterr().err
    assert not (out / "summary.json").exists()


# --- hv / gradcheck ------------------------------------------------------------------


def test_hv_command(tmp_path, capsys):
    p = tmp_path / "pts.csv"
    p.write_text("error,dp\n0.2,0.4\n0.4,0.2\n1.5,0.1\n")
    assert cli.main(["hv", str(p)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "HV 0.6"
    assert [float(line.split()[2]) for line in lines[1:]] == pytest.approx([0.12, 0.12, 0.0])


def test_hv_empty_and_malformed(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert cli.main(["hv", str(empty)]) == 0
    assert capsys.readouterr().out.strip() == "HV 0"
    bad = tmp_path / "bad.csv"
    bad.write_text("0.1,0.2\n0.3\n")
    assert cli.main(["hv", str(bad)]) == 2
    bad.write_text("0.1,0.2\n0.3,abc\n")
    assert cli.main(["hv", str(bad)]) == 2
    assert cli.main(["hv", str(empty), "--ref", "1"]) == 2


def test_hv_custom_reference(tmp_path, capsys):
    p = tmp_path / "p.csv"
    p.write_text("0.5,0.5\n")
    assert cli.main(["hv", str(p), "--ref", "2,1"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "HV 0.75"


@pytest.fixture
def broken_sigmoid(monkeypatch):
    original = T._sigmoid_backward
    monkeypatch.setattr(T, "_sigmoid_backward", lambda out, g, live: -original(out, g, live))


def test_gradcheck_catches_sign_error(broken_sigmoid):
    assert not run_check("sigmoid", instances=3).passed
    assert run_check("matmul", instances=3).passed


def test_gradcheck_command_names_failing_op(broken_sigmoid, capsys):
    assert cli.main(["gradcheck", "--instances", "2", "--nes-batches", "500"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  sigmoid" in out
    assert "failed:" in out and "sigmoid" in out.splitlines()[-1]


def test_gradcheck_command_clean(capsys):
    assert cli.main(["gradcheck", "--instances", "2", "--nes-batches", "2000"]) == 0
    out = capsys.readouterr().out
    assert "max_rel_err=" in out and "FAIL" not in out


def test_gen_data_round_trip(tmp_path):
    from hetpfl.data import CsvSchema, load_csv

    assert cli.main(["gen-data", "--n", "500", "--clients", "2", "--seed", "4", "--out", str(tmp_path)]) == 0
    schema = CsvSchema.load(tmp_path / "schema.json")
    ref = generate_synthetic(500, 2, 5.0, 4)
    for k in range(2):
        ds = load_csv(tmp_path / f"client-{k}.csv", schema)
        np.testing.assert_array_equal(ds.labels, ref[k].labels)
        np.testing.assert_array_equal(ds.sensitive, ref[k].sensitive)
