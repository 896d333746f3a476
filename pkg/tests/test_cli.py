import csv
import subprocess
import sys

import pytest
import yaml

from flextsf.cli import EXIT_CODES, RunConfig, main, parse_overrides

TINY = ["--patch_len", "4", "--latent_dim", "8", "--heads", "2", "--head_dim", "4",
        "--layers", "1", "--solver_hidden", "8", "--epochs", "1", "--batch_size", "8",
        "--lr", "0.003", "--figures", "false"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out_dir", root / "data", "--n_series", 20, "--min_length", 30,
               "--max_length", 40, "--seed", 1) == 0
    data = root / "data" / "data.csv"
    assert run("train", "--out_dir", root / "train", "--data", data, *TINY) == 0
    return root, data, root / "train" / "checkpoint.bin"


def test_synth_outputs(workspace):
    root, data, _ = workspace
    files = {p.name for p in (root / "data").iterdir()}
    assert {"data.csv", "manifest.yaml", "report.txt", "config.echo", "series.png"} <= files
    with open(data) as fh:
        assert len({r["series_id"] for r in csv.DictReader(fh)}) == 20


def test_train_outputs(workspace):
    root, _, ckpt = workspace
    assert ckpt.stat().st_size > 0
    with open(root / "train" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0].keys() >= {"dataset", "variant", "seed", "k", "mse"}
    assert {r["variant"] for r in rows} == {"base", "baseline:mean", "baseline:last-value",
                                         "baseline:linear-trend"}


def test_config_echo_round_trip(workspace):
    root, _, _ = workspace
    echoed = yaml.safe_load((root / "train" / "config.echo").read_text())
    cfg = RunConfig.resolve(echoed, {})
    assert cfg.to_text() == (root / "train" / "config.echo").read_text()
    assert cfg.latent_dim == 8 and cfg.figures is False


def test_forecast_rows_per_series(workspace, tmp_path):
    _, data, ckpt = workspace
    assert run("forecast", "--out_dir", tmp_path, "--data", data, "--checkpoint", ckpt,
               "--horizon", 5, "--split", "test", *TINY) == 0
    with open(tmp_path / "forecast.csv") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert reader.fieldnames == ["series_id", "channel", "time", "value_pred"]
    per = {}
    for r in rows:
        per.setdefault(r["series_id"], []).append(float(r["time"]))
    assert per and all(len(v) == 5 and v == sorted(v) for v in per.values())


def test_eval_is_byte_identical(workspace, tmp_path):
    _, data, ckpt = workspace
    outs = []
    for name in "ab":
        assert run("eval", "--out_dir", tmp_path / name, "--data", data,
                   "--checkpoint", ckpt, *TINY) == 0
        outs.append([(tmp_path / name / f).read_bytes() for f in ("report.txt", "metrics.csv")])
    assert outs[0] == outs[1]


def test_finetune_and_ablate(workspace, tmp_path):
    _, data, ckpt = workspace
    assert run("finetune", "--out_dir", tmp_path / "ft", "--data", data, "--checkpoint", ckpt,
               "--ks", "0,4", *TINY) == 0
    assert "k=4" in (tmp_path / "ft" / "report.txt").read_text()
    assert run("ablate", "--out_dir", tmp_path / "ab", "--data", data, *TINY) == 0
    with open(tmp_path / "ab" / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_pretrain_accepts_several_files(workspace, tmp_path):
    _, data, _ = workspace
    assert run("pretrain", "--out_dir", tmp_path, "--data", f"{data},{data}", *TINY) == 0
    assert (tmp_path / "checkpoint.bin").exists()


@pytest.mark.parametrize("argv, kind", [
    (["train", "--no_such_key", "1"], "config"),
    (["train", "--epochs", "many"], "config"),
    (["eval", "--data", "missing.csv", "--checkpoint", "missing.bin"], "missing_file"),
    ([], "usage"),
])
def test_exit_codes(argv, kind, tmp_path, capsys):
    code = run(*argv, *(["--out_dir", tmp_path] if argv else []))
    assert code == EXIT_CODES[kind]
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith(f"error kind={kind} exit={code} message=")


def test_bad_data_and_bad_checkpoint(tmp_path, workspace):
    _, data, _ = workspace
    bad = tmp_path / "bad.csv"
    bad.write_text("series_id,channel,time,value\na,x,0,notanumber\n")
    assert run("train", "--out_dir", tmp_path, "--data", bad, *TINY) == EXIT_CODES["data"]
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"garbage")
    assert run("eval", "--out_dir", tmp_path, "--data", data, "--checkpoint", junk,
               *TINY) == EXIT_CODES["checkpoint"]


def test_parse_overrides_forms():
    assert parse_overrides(["--a-b", "1", "--c=2"]) == {"a_b": "1", "c": "2"}


def test_help_lists_keys():
    out = subprocess.run([sys.executable, "-m", "flextsf.cli", "train", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "--latent-dim" in out.stdout
