import json
import os

import numpy as np
import pytest

from helpers import random_model
from n2n import cli
from n2n.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from n2n.diffcore import Rng


def ckpt_bytes(path):
    return {name: (path / name).read_bytes() for name in ("manifest.json", "params.bin")}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


SMALL = {"n_blocks": 2, "hidden_width": 8, "embed_width": 8, "dim_h": 4}


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip_bits(tmp_path):
    m = random_model(5, 3, n_blocks=3, seed=2)
    save_checkpoint(m, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    rng = Rng(1)
    v, c = rng.normal((16, 5)), rng.normal((16, 3))
    assert m.sample(c, v).tobytes() == loaded.sample(c, v).tobytes()
    for a, b in zip(m.permutations, loaded.permutations):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_save_load_save_identical(tmp_path):
    m = random_model(4, 2, n_blocks=2, seed=3)
    save_checkpoint(m, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    assert ckpt_bytes(tmp_path / "a") == ckpt_bytes(tmp_path / "b")


def test_checkpoint_manifest_layout(tmp_path):
    m = random_model(4, 2, n_blocks=2)
    save_checkpoint(m, tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert man["format"] == "N2N-CKPT/1"
    assert [r["name"] for r in man["params"]] == m.store.names()
    assert man["params"][1]["offset"] == man["params"][0]["length"]
    total = sum(r["length"] for r in man["params"])
    assert (tmp_path / "ck" / "params.bin").stat().st_size == total == 8 * m.store.n_values()


def test_truncated_blob(tmp_path):
    save_checkpoint(random_model(4, 2, n_blocks=2), tmp_path / "ck")
    blob = tmp_path / "ck" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated blob"):
        load_checkpoint(tmp_path / "ck")


def test_wrong_shape_names_parameter(tmp_path):
    save_checkpoint(random_model(4, 2, n_blocks=2), tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    man = json.loads(path.read_text())
    row = man["params"][3]
    row["shape"] = [row["shape"][0] + 1] + row["shape"][1:]
    path.write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match=row["name"]):
        load_checkpoint(tmp_path / "ck")


def test_format_tag_mismatch(tmp_path):
    save_checkpoint(random_model(4, 2, n_blocks=2), tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    man = json.loads(path.read_text())
    man["format"] = "OTHER/2"
    path.write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="format tag"):
        load_checkpoint(tmp_path / "ck")


def test_no_temp_files_left(tmp_path):
    save_checkpoint(random_model(4, 2, n_blocks=2), tmp_path / "ck")
    assert sorted(os.listdir(tmp_path / "ck")) == ["manifest.json", "params.bin"]


# -- config validation --------------------------------------------------------------------

def test_missing_task_key(tmp_path, caplog):
    code = cli.run(["train", "--config", write_cfg(tmp_path, {"world": {"kind": "gaussian"}})])
    assert code == 1
    assert "`task`" in caplog.text


def test_unknown_key_rejected(tmp_path, caplog):
    cfg = {"task": "train", "train": {"n_steps": 1, "momentum": 0.9}}
    assert cli.run(["train", "--config", write_cfg(tmp_path, cfg)]) == 1
    assert "train.momentum" in caplog.text


def test_task_mismatch(tmp_path):
    assert cli.run(["eval", "--config", write_cfg(tmp_path, {"task": "train"})]) == 1


def test_missing_config_file_is_io_error(tmp_path):
    assert cli.run(["train", "--config", str(tmp_path / "nope.json")]) == 3


def test_bad_world_kind(tmp_path):
    cfg = {"task": "train", "world": {"kind": "mnist"}}
    assert cli.run(["train", "--config", write_cfg(tmp_path, cfg)]) == 1


def test_toy_task_needs_toy_world():
    with pytest.raises(cli.ConfigError, match="toyimage"):
        cli.validate_config({"task": "modify", "world": {"kind": "gaussian"}})


def test_validate_fills_defaults():
    cfg = cli.validate_config({"task": "train"})
    assert cfg["world"]["kind"] == "gaussian"
    assert cfg["train"].batch_size == 128 and cfg["train"].n_steps == 5000


# -- commands ---------------------------------------------------------------------------

def test_gradcheck_command(tmp_path):
    cfg = {"task": "gradcheck", "model": SMALL}
    assert cli.run(["gradcheck", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["max_rel_err"] < 1e-4 and report["passed"]


def test_gradcheck_failure_is_numerical_exit(tmp_path):
    cfg = {"task": "gradcheck", "model": SMALL, "task_args": {"step": 3.0}}
    assert cli.run(["gradcheck", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 2


def train_cfg(n_steps=30):
    return {"task": "train", "model": SMALL,
            "train": {"n_steps": n_steps, "batch_size": 32, "eval_every": 10}}


def test_train_twice_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, train_cfg())
    for run in ("a", "b"):
        assert cli.run(["train", "--config", cfg, "--out", str(tmp_path / run)]) == 0
    assert ckpt_bytes(tmp_path / "a" / "model") == ckpt_bytes(tmp_path / "b" / "model")
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def test_seed_flag_changes_run(tmp_path):
    cfg = write_cfg(tmp_path, train_cfg())
    cli.run(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    cli.run(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    assert ckpt_bytes(tmp_path / "a" / "model") != ckpt_bytes(tmp_path / "b" / "model")


def test_train_then_translate_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, train_cfg())
    ck = str(tmp_path / "ck")
    assert cli.run(["train", "--config", cfg, "--out", str(tmp_path), "--ckpt", ck]) == 0
    tcfg = {"task": "translate", "model": SMALL, "task_args": {"n": 64}}
    tpath = write_cfg(tmp_path, tcfg, "t.json")
    outs = []
    for run in ("x", "y"):
        assert cli.run(["translate", "--config", tpath, "--out", str(tmp_path / run), "--ckpt", ck]) == 0
        outs.append((tmp_path / run / "translations.tsv").read_bytes())
        assert json.loads((tmp_path / run / "report.json").read_text())["n"] == 64
    assert outs[0] == outs[1]
    assert len(outs[0].decode().splitlines()) == 64


def test_corrupt_checkpoint_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, train_cfg(5))
    ck = tmp_path / "ck"
    cli.run(["train", "--config", cfg, "--out", str(tmp_path), "--ckpt", str(ck)])
    blob = ck / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    ecfg = write_cfg(tmp_path, {"task": "eval", "model": SMALL}, "e.json")
    assert cli.run(["eval", "--config", ecfg, "--out", str(tmp_path), "--ckpt", str(ck)]) == 3


def test_eval_report_keys(tmp_path):
    cfg = write_cfg(tmp_path, {"task": "eval", "model": SMALL,
                               "train": {"n_steps": 20, "batch_size": 32},
                               "task_args": {"n_probe": 512}})
    assert cli.run(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    for key in ("fd", "max_abs_corr", "optimum_nll"):
        assert key in report
    assert (tmp_path / "report.json").read_text().endswith("}\n")
