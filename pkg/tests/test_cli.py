import json

import numpy as np
import pytest

from red_anticipation import checkpoint
from red_anticipation.cli import main
from red_anticipation.data import FeatureSequence, Video, save_features, write_dataset

from helpers import constant_class_videos, copy_last_model

CONFIG = """t_enc=6
t_dec=4
d=5
h=8
c=2
alpha=1.0
lr=0.001
batch=8
epochs_stage1=2
epochs_stage2=3
seed=4
use_reinforce=true
reward_action_only=false
clip_norm=5.0
w_reg=1.0
w_cls=1.0
w_rl=1.0
batches_per_epoch=2
"""


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--videos", "3", "--chunks", "80",
                 "--classes", "2", "--dim", "5", "--seed", "3"]) == 0
    return out


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text(CONFIG)
    return p


def read_all(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_gen_data_counts_and_determinism(tmp_path):
    args = ["gen-data", "--videos", "8", "--chunks", "400", "--classes", "3", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = read_all(tmp_path / "a")
    assert sum(n.endswith(".feat") for n in a) == 8
    assert sum(n.endswith(".lab") for n in a) == 8
    assert "manifest.txt" in a and "spec.txt" in a
    assert a == read_all(tmp_path / "b")


def test_gen_data_refuses_non_empty_dir(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / "keep").write_text("x")
    assert main(["gen-data", "--out", str(out)]) == 2
    assert (out / "keep").exists()
    assert main(["gen-data", "--out", str(out), "--force", "--videos", "1"]) == 0
    assert not (out / "keep").exists()


def test_gen_data_zero_classes_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", str(tmp_path / "x"), "--classes", "0"])
    assert e.value.code == 2
    assert not (tmp_path / "x").exists()


def test_red_seed_env_and_flag(tmp_path, monkeypatch):
    base = ["gen-data", "--videos", "1", "--chunks", "50"]
    monkeypatch.setenv("RED_SEED", "11")
    assert main(base + ["--out", str(tmp_path / "env")]) == 0
    assert main(base + ["--out", str(tmp_path / "flag"), "--seed", "11"]) == 0
    assert main(base + ["--out", str(tmp_path / "flag2"), "--seed", "12"]) == 0
    monkeypatch.delenv("RED_SEED")
    assert main(base + ["--out", str(tmp_path / "dflt")]) == 0
    assert read_all(tmp_path / "env") == read_all(tmp_path / "flag")
    assert read_all(tmp_path / "flag") != read_all(tmp_path / "flag2")
    assert read_all(tmp_path / "env") != read_all(tmp_path / "dflt")


def test_train_red_ed_share_stage1(tmp_path, dataset, config):
    m = str(dataset / "manifest.txt")
    assert main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "red")]) == 0
    assert main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "ed"),
                 "--arch", "ed"]) == 0
    red, ed = read_all(tmp_path / "red"), read_all(tmp_path / "ed")
    assert red["stage1.ckpt"] == ed["stage1.ckpt"]
    assert red["stage1_log.csv"] == ed["stage1_log.csv"]
    assert red["stage2.ckpt"] != ed["stage2.ckpt"]
    assert len(red["stage1_log.csv"].decode().splitlines()) == 2 + 1
    assert len(red["stage2_log.csv"].decode().splitlines()) == 3 + 1
    assert b"use_reinforce=false" in ed["config.txt"]


def test_train_stage2_from_checkpoint_matches_both(tmp_path, dataset, config):
    m = str(dataset / "manifest.txt")
    assert main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "both")]) == 0
    assert main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "s1"),
                 "--stage", "1"]) == 0
    assert main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "s2"),
                 "--stage", "2", "--init", str(tmp_path / "s1" / "stage1.ckpt")]) == 0
    assert (tmp_path / "both" / "stage2.ckpt").read_bytes() == (tmp_path / "s2" / "stage2.ckpt").read_bytes()
    assert main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "s3"),
                 "--stage", "2"]) == 2


@pytest.mark.parametrize("arch", ["fc", "efc"])
def test_train_single_step_archs(tmp_path, dataset, config, arch):
    out = tmp_path / arch
    assert main(["train", "--config", str(config), "--manifest", str(dataset / "manifest.txt"),
                 "--out", str(out), "--arch", arch]) == 0
    assert checkpoint.load(out / "stage2.ckpt").arch == arch


def test_train_missing_key(tmp_path, dataset, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text(CONFIG.replace("clip_norm=5.0\n", ""))
    rc = main(["train", "--config", str(cfg), "--manifest", str(dataset / "manifest.txt"),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "missing config key clip_norm" in capsys.readouterr().err


def test_train_stage2_without_labels(tmp_path, config):
    rng = np.random.default_rng(0)
    save_features(tmp_path / "a.feat", FeatureSequence("a", rng.normal(size=(40, 5))))
    (tmp_path / "m.txt").write_text("a.feat\n")
    common = ["train", "--config", str(config), "--manifest", str(tmp_path / "m.txt")]
    assert main(common + ["--out", str(tmp_path / "o1"), "--stage", "1"]) == 0
    assert main(common + ["--out", str(tmp_path / "o2")]) == 3


def test_missing_input_is_data_error(tmp_path, config):
    assert main(["train", "--config", str(config), "--manifest", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == 3


@pytest.fixture
def oracle(tmp_path):
    ck = tmp_path / "oracle.ckpt"
    checkpoint.save(ck, copy_last_model(3, t_enc=4, t_dec=8))
    manifest = write_dataset(tmp_path / "const", constant_class_videos(3))
    return ck, manifest


def test_eval_oracle_checkpoint(tmp_path, oracle, capsys):
    ck, manifest = oracle
    out = tmp_path / "report.csv"
    assert main(["eval", "--checkpoint", str(ck), "--manifest", str(manifest),
                 "--horizons", "1,4,8", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text == out.read_text()
    rows = [l.split(",") for l in text.splitlines()[1:]]
    assert {r[1] for r in rows} == {"1", "4", "8"}
    assert {r[2] for r in rows} == {"0.25", "1", "2"}
    assert all(r[4] == "1" for r in rows)


def test_eval_from_prediction_dump(tmp_path, dataset, config, capsys):
    m = str(dataset / "manifest.txt")
    main(["train", "--config", str(config), "--manifest", m, "--out", str(tmp_path / "r")])
    capsys.readouterr()
    ck = str(tmp_path / "r" / "stage2.ckpt")
    assert main(["eval", "--checkpoint", ck, "--manifest", m, "--dump", str(tmp_path / "p.csv")]) == 0
    direct = capsys.readouterr().out
    assert main(["eval", "--predictions", str(tmp_path / "p.csv"), "--manifest", m]) == 0
    assert capsys.readouterr().out == direct
    assert len({l.split(",")[1] for l in direct.splitlines()[1:]}) == 4


def test_eval_invalid_horizon(oracle, capsys):
    ck, manifest = oracle
    assert main(["eval", "--checkpoint", str(ck), "--manifest", str(manifest),
                 "--horizons", "9"]) == 2
    assert "9" in capsys.readouterr().err


def test_anticipate_json_lines(oracle, capsys):
    ck, manifest = oracle
    feat = manifest.parent / "v2.feat"
    assert main(["anticipate", "--checkpoint", str(ck), "--features", str(feat), "--at", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 8
    recs = [json.loads(l) for l in lines]
    assert [r["step"] for r in recs] == list(range(1, 9))
    assert [r["chunk"] for r in recs] == list(range(10, 18))
    for r in recs:
        assert abs(sum(r["probs"]) - 1) < 1e-12
        assert r["predicted"] == 2 and r["feature_norm"] > 0


def test_anticipate_insufficient_history(oracle, capsys):
    ck, manifest = oracle
    rc = main(["anticipate", "--checkpoint", str(ck), "--features",
               str(manifest.parent / "v1.feat"), "--at", "3"])
    assert rc == 3
    assert "history" in capsys.readouterr().err


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [l.split()[1] for l in out] == ["L_reg", "L_cls", "surrogate", "baseline_loss"]
    assert all(l.startswith("PASS") for l in out)
    assert main(["grad-check", "--corrupt"]) == 4
    assert "FAIL" in capsys.readouterr().out


def test_rerun_overwrites_identically(tmp_path, dataset, config, capsys):
    m = str(dataset / "manifest.txt")
    out = tmp_path / "run"
    snaps = []
    for _ in range(2):
        main(["train", "--config", str(config), "--manifest", m, "--out", str(out)])
        main(["eval", "--checkpoint", str(out / "stage2.ckpt"), "--manifest", m,
              "--out", str(out / "report.csv"), "--dump", str(out / "preds.csv")])
        snaps.append(read_all(out))
    assert snaps[0] == snaps[1]
