import json
import math

import pytest

from spikealign import cli
from spikealign.io import read_checkpoint

FAST = ["--set", "pretrain.epochs_img=2", "--set", "pretrain.epochs_txt=2", "--set", "finetune.epochs=2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_record(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def trained(desk_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    argv_pre = ["pretrain", "--config", str(desk_dir), *FAST, "--out-dir", str(out / "pre")]
    assert cli.main(argv_pre) == 0
    ckpt = out / "pre" / "model.ckpt"
    argv_ft = ["finetune", "--config", str(desk_dir), *FAST, "--set", f"ckpt.in={ckpt}",
               "--out-dir", str(out / "ft")]
    assert cli.main(argv_ft) == 0
    return out


def test_pretrain_outputs(trained):
    names = {p.name for p in (trained / "pre").iterdir()}
    assert {"model.ckpt", "pretrain_log.jsonl", "run.json", "timestamps.json", "config.resolved"} <= names
    recs = [json.loads(line) for line in (trained / "pre" / "pretrain_log.jsonl").read_text().splitlines()]
    assert recs and all(r["run_seed"] == 0 for r in recs)
    assert "seed = 0" in read_checkpoint(trained / "pre" / "model.ckpt").config_text


def test_finetune_keeps_text(trained):
    summary = json.loads((trained / "ft" / "run.json").read_text())
    assert summary["verb"] == "finetune" and summary["lambda"] == 1.0
    assert (trained / "ft" / "finetune_log.jsonl").exists()


def test_byte_identical_reruns(desk_dir, tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "pretrain", "--config", desk_dir, *FAST, "--seed", 5, "--out-dir", tmp_path / name)[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "timestamps.json" in files
    for name in files:
        if name != "timestamps.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    recs = (tmp_path / "a" / "pretrain_log.jsonl").read_text().splitlines()
    assert all(json.loads(r)["run_seed"] == 5 for r in recs)


def test_eval_and_robustness(trained, desk_dir, capsys):
    ckpt = trained / "ft" / "model.ckpt"
    code, out, _ = run(capsys, "eval", "--config", desk_dir, "--set", f"ckpt.in={ckpt}", "--out-dir", trained / "ev")
    assert code == 0
    rec = json.loads((trained / "ev" / "eval.jsonl").read_text())
    assert rec["setting"] == "baseline" and rec["items"] == 30 and 0 <= rec["accuracy"] <= 1
    code, _, _ = run(capsys, "robustness", "--config", desk_dir, "--set", f"ckpt.in={ckpt}",
                     "--out-dir", trained / "rb")
    assert code == 0
    recs = [json.loads(line) for line in (trained / "rb" / "robustness.jsonl").read_text().splitlines()]
    by = {r["setting"]: r for r in recs if r["seed"] in (None, 0)}
    assert by["expand_x1"]["accuracy"] == by["baseline"]["accuracy"] == rec["accuracy"]
    summary = [r for r in recs if r["setting"] == "replace_40" and r["seed"] == "summary"]
    assert len(summary) == 1 and {"mean", "variance"} <= set(summary[0])


def test_eval_symmetric_init_is_chance(desk_dir, tmp_path, capsys):
    args = ["--config", desk_dir, "--set", "model.init=symmetric", "--set", "pretrain.epochs_img=0",
            "--set", "pretrain.epochs_txt=0"]
    assert run(capsys, "pretrain", *args, "--out-dir", tmp_path / "p")[0] == 0
    assert run(capsys, "eval", *args, "--set", f"ckpt.in={tmp_path / 'p' / 'model.ckpt'}",
               "--out-dir", tmp_path / "e")[0] == 0
    rec = json.loads((tmp_path / "e" / "eval.jsonl").read_text())
    k, n = 3, rec["items"]
    assert abs(rec["accuracy"] - 1 / k) <= 3 * math.sqrt((1 / k) * (1 - 1 / k) / n)


def test_energy_forced_gamma(desk_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "energy", "--config", desk_dir, "--set", "energy.force_gamma=0.2726",
                       "--out-dir", tmp_path)
    assert code == 0
    assert "energy reduction  78.67%" in out
    summary = json.loads((tmp_path / "run.json").read_text())
    assert abs(summary["ecr_percent"] - 78.66) <= 0.05
    assert (tmp_path / "energy.txt").read_text().strip() in out


def test_energy_profile(trained, desk_dir, capsys):
    ckpt = trained / "ft" / "model.ckpt"
    code, _, _ = run(capsys, "energy", "--config", desk_dir, "--set", f"ckpt.in={ckpt}", "--out-dir", trained / "en")
    assert code == 0
    recs = [json.loads(line) for line in (trained / "en" / "energy.jsonl").read_text().splitlines()]
    assert recs[-1]["layer"] == "TOTAL" and recs[-1]["items"] == 30
    assert recs[-1]["sops"] == pytest.approx(sum(r["sops"] for r in recs[:-1] if r["spiking"]))


def test_gradcheck_verb(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--out-dir", tmp_path)
    assert code == 0 and "FAIL" not in out
    recs = [json.loads(line) for line in (tmp_path / "gradcheck.jsonl").read_text().splitlines()]
    assert len(recs) >= 20 and all(r["passed"] and r["rel_err"] <= 1e-4 for r in recs)


@pytest.mark.parametrize("argv,code,kind", [
    (["pretrain", "--set", "lif.bta=1"], 2, "ConfigError"),
    (["explode"], 2, "ConfigError"),
    (["eval", "--set", "seed=abc"], 2, "ConfigError"),
    (["pretrain"], 2, "ConfigError"),
])
def test_config_errors(argv, code, kind, tmp_path, capsys):
    got, out, err = run(capsys, *argv, "--out-dir", tmp_path)
    rec = error_record(err)
    assert got == code and rec["exit_code"] == code and rec["error"] == kind and out == ""


def test_data_error(desk_dir, tmp_path, capsys):
    got, _, err = run(capsys, "eval", "--config", desk_dir, "--set", f"ckpt.in={tmp_path / 'missing.ckpt'}",
                      "--out-dir", tmp_path)
    assert got == 3 and error_record(err)["exit_code"] == 3


def test_numeric_error(desk_dir, tmp_path, capsys):
    got, _, err = run(capsys, "pretrain", "--config", desk_dir, "--set", "pretrain.lr0=1e30",
                      "--set", "pretrain.epochs_img=3", "--set", "pretrain.epochs_txt=0", "--out-dir", tmp_path)
    rec = error_record(err)
    assert got == 4 and rec["error"] == "NumericError" and rec["verb"] == "pretrain"
