import json
import os

import pytest

from foresit import ndgrad as nd
from foresit.cli import config_from_ini, config_to_ini, main
from foresit.trainer import TrainConfig

TINY = ["--set", "hidden=8", "--set", "n_train=2", "--set", "n_val=1",
        "--set", "n_test=1", "--set", "size_min=6", "--set", "size_max=7",
        "--set", "t_max=15", "--set", "layout_seed=5", "--set", "m_max=4"]


def train_args(out, mode="baseline", episodes=12, seed=1, extra=()):
    return (["train", "--mode", mode, "--workers", "1", "--episodes", str(episodes),
             "--seed", str(seed), "--out", str(out)] + TINY + list(extra))


def run_dir_of(out):
    dirs = sorted(os.listdir(out))
    assert dirs
    return os.path.join(out, dirs[-1])


# ---------------------------------------------------------------------------
# config plumbing


def test_config_round_trip_identity():
    cfg = TrainConfig(mode="att", seed=9, gamma=0.97, lr=3e-4, hidden=24)
    text = config_to_ini(cfg)
    back, provided = config_from_ini(text)
    assert back == cfg
    assert config_to_ini(back) == text
    assert "gamma" in provided


def test_config_unknown_key_rejected():
    from foresit.trainer import ConfigError
    with pytest.raises(ConfigError, match="not recognised"):
        config_from_ini("[run]\nbogus = 1\n")


def test_missing_required_field_exit_2(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "mode" in err


def test_invalid_set_field_exit_2(tmp_path, capsys):
    code = main(train_args(tmp_path, extra=["--set", "nonsense=4"]))
    assert code == 2
    assert "nonsense" in capsys.readouterr().err


def test_invalid_gamma_exit_2(tmp_path, capsys):
    code = main(train_args(tmp_path, extra=["--set", "gamma=0"]))
    assert code == 2
    assert "gamma" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_writes_run_artifacts(tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(train_args(out)) == 0
    run_dir = run_dir_of(out)
    assert os.path.exists(os.path.join(run_dir, "manifest.json"))
    assert os.path.exists(os.path.join(run_dir, "config.ini"))
    assert os.path.exists(os.path.join(run_dir, "ckpt", "final.ckpt"))
    lines = open(os.path.join(run_dir, "metrics.jsonl")).read().splitlines()
    episodes = [json.loads(l) for l in lines if "\"mode\"" in l]
    assert len(episodes) == 12
    manifest = json.load(open(os.path.join(run_dir, "manifest.json")))
    assert manifest["config"]["train"]["gamma"] == 0.99  # defaults are frozen
    assert manifest["ended"] is not None


def test_train_metrics_bit_identical_across_reruns(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(out_a, episodes=50)) == 0
    assert main(train_args(out_b, episodes=50)) == 0
    bytes_a = open(os.path.join(run_dir_of(out_a), "metrics.jsonl"), "rb").read()
    bytes_b = open(os.path.join(run_dir_of(out_b), "metrics.jsonl"), "rb").read()
    assert bytes_a == bytes_b


def test_manifests_differ_only_in_mode(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(out_a, mode="foresit")) == 0
    assert main(train_args(out_b, mode="rnd")) == 0
    m_a = json.load(open(os.path.join(run_dir_of(out_a), "manifest.json")))
    m_b = json.load(open(os.path.join(run_dir_of(out_b), "manifest.json")))
    assert m_a["config"]["run"]["mode"] == "foresit"
    assert m_b["config"]["run"]["mode"] == "rnd"
    m_a["config"]["run"]["mode"] = m_b["config"]["run"]["mode"]
    assert m_a["config"] == m_b["config"]


def test_env_seed_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("FORESIT_SEED", "77")
    out = tmp_path / "runs"
    assert main(train_args(out, seed=1)) == 0
    manifest = json.load(open(os.path.join(run_dir_of(out), "manifest.json")))
    assert manifest["seed"] == 77


def test_ckpt_every_writes_periodic_checkpoints(tmp_path):
    out = tmp_path / "runs"
    assert main(train_args(out, episodes=9, extra=["--ckpt-every", "4"])) == 0
    ckpts = sorted(os.listdir(os.path.join(run_dir_of(out), "ckpt")))
    assert "ep000004.ckpt" in ckpts and "ep000008.ckpt" in ckpts
    assert "final.ckpt" in ckpts


# ---------------------------------------------------------------------------
# eval


def trained_run(tmp_path, mode="foresit"):
    out = tmp_path / "runs"
    assert main(train_args(out, mode=mode, episodes=15)) == 0
    return run_dir_of(out)


def test_eval_fresh_checkpoint(tmp_path, capsys):
    run_dir = trained_run(tmp_path)
    ckpt = os.path.join(run_dir, "ckpt", "final.ckpt")
    code = main(["eval", ckpt, "--split", "val", "--eval-seeds", "2"])
    assert code == 0
    report = json.load(open(os.path.join(run_dir, "eval", "report_val.json")))
    assert 0.0 <= report["sr"] <= 1.0
    assert 0.0 <= report["spl"] <= report["sr"] + 1e-12
    assert os.path.exists(os.path.join(run_dir, "eval", "episodes_val.csv"))
    assert "overall" in capsys.readouterr().out


def test_eval_greedy_writes_distinct_report(tmp_path):
    run_dir = trained_run(tmp_path)
    ckpt = os.path.join(run_dir, "ckpt", "final.ckpt")
    assert main(["eval", ckpt, "--split", "val", "--eval-seeds", "2"]) == 0
    assert main(["eval", ckpt, "--split", "val", "--eval-seeds", "2", "--greedy"]) == 0
    eval_dir = os.path.join(run_dir, "eval")
    assert os.path.exists(os.path.join(eval_dir, "report_val.json"))
    assert os.path.exists(os.path.join(eval_dir, "report_val_greedy.json"))


def test_eval_truncated_checkpoint_exit_3(tmp_path, capsys):
    run_dir = trained_run(tmp_path, mode="baseline")
    ckpt = os.path.join(run_dir, "ckpt", "final.ckpt")
    data = open(ckpt, "rb").read()
    bad = tmp_path / "broken.ckpt"
    bad.write_bytes(data[: len(data) - 100])
    code = main(["eval", str(bad), "--config", os.path.join(run_dir, "config.ini")])
    assert code == 3
    assert "byte" in capsys.readouterr().err


def test_eval_bad_magic_exit_3(tmp_path, capsys):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"NOPE" * 10)
    assert main(["eval", str(bad)]) == 3


# ---------------------------------------------------------------------------
# ablate / dump-layouts / export-states


def test_ablate_single_cell_table(tmp_path, capsys):
    out = tmp_path / "runs"
    code = main(["ablate", "--modes", "baseline", "--seeds", "1",
                 "--episodes", "10", "--mode", "baseline", "--seed", "1",
                 "--eval-seeds", "1", "--out", str(out)] + TINY)
    assert code == 0
    text = capsys.readouterr().out
    assert "baseline" in text
    table = json.load(open(os.path.join(run_dir_of(out), "ablation.json")))
    assert len(table["cells"]) == 1
    assert table["cells"][0]["status"] == "ok"


def test_ablate_rows_per_mode(tmp_path):
    out = tmp_path / "runs"
    code = main(["ablate", "--modes", "baseline,rnd", "--seeds", "1,2",
                 "--episodes", "8", "--mode", "baseline", "--seed", "1",
                 "--eval-seeds", "1", "--out", str(out)] + TINY)
    assert code == 0
    table = json.load(open(os.path.join(run_dir_of(out), "ablation.json")))
    assert len(table["cells"]) == 4
    modes = {c["mode"] for c in table["cells"]}
    assert modes == {"baseline", "rnd"}


def test_dump_layouts(tmp_path):
    out = tmp_path / "layouts"
    code = main(["dump-layouts", "--out", str(out)] + TINY[:0] +
                ["--set", "n_train=2", "--set", "n_val=1", "--set", "n_test=1",
                 "--set", "size_min=6", "--set", "size_max=7",
                 "--set", "layout_seed=5"])
    assert code == 0
    train_files = os.listdir(out / "train")
    assert len(train_files) == 4 * 2
    assert len(os.listdir(out / "val")) == 4
    assert len(os.listdir(out / "test")) == 4
    text = open(out / "train" / sorted(train_files)[0]).read()
    header = text.splitlines()[0].split()
    assert len(header) == 4


def test_export_states(tmp_path):
    run_dir = trained_run(tmp_path)
    ckpt = os.path.join(run_dir, "ckpt", "final.ckpt")
    out = tmp_path / "states.jsonl"
    code = main(["export-states", ckpt, "--out", str(out), "--split", "val",
                 "--episodes", "2"])
    assert code == 0
    lines = [json.loads(l) for l in open(out).read().splitlines()]
    assert lines
    episodes = {l["episode"] for l in lines}
    assert episodes == {0, 1}
    first = lines[0]
    assert set(first) >= {"episode", "t", "t_star", "s", "s_hat", "i"}
    assert len(first["s"]) == 8  # hidden width of the tiny config
