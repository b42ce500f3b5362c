import hashlib
import json

import numpy as np
import pytest

from pansearch import cli
from pansearch.config import ConfigError, RunConfig, load_run_config, read_csv
from pansearch.synthdata import foreground_fractions, read_volume

TINY = """\
# smoke-scale settings
dqn.epochs=2
dqn.replay_capacity=400
seg.epochs=2
seg.optimizer=adam
unet.depth=2
unet.base_channels=2
unet.input_side=16
loc_side=32
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    data, runs = root / "data", root / "runs"
    common = ["--config", root / "tiny.cfg", "--data-dir", data, "--run-dir", runs]
    assert run("gen-data", "--out-dir", data, "--count", 3, "--dims", "32x32x32", "--seed", 11) == 0
    assert run("train-loc", *common) == 0
    assert run("train-seg", *common) == 0
    assert run("eval", *common) == 0
    assert run("eval-loc", *common, "--view", "axial") == 0
    assert run("action-stats", *common, "--view", "axial") == 0
    return root, data, runs, common


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_outputs(workspace):
    root, data, _, _ = workspace
    rows = read_csv(data / "manifest.csv")
    assert len(rows) == 3
    assert len(list(data.glob("vol_*.psv"))) == 3 and len(list(data.glob("lab_*.psv"))) == 3
    for r in rows:
        lab = read_volume(data / r["label_file"])
        fr = foreground_fractions(lab)
        fr = fr[fr > 0]
        assert float(r["fraction_min"]) == fr.min() and float(r["fraction_max"]) == fr.max()
        assert 0.001 <= fr.min() and fr.max() <= 0.008
        assert int(r["target_voxels"]) == lab.sum()
    again = root / "again"
    assert run("gen-data", "--out-dir", again, "--count", 3, "--dims", "32x32x32", "--seed", 11) == 0
    for f in data.iterdir():
        assert _digest(f) == _digest(again / f.name)


def test_csv_format(workspace):
    _, data, runs, _ = workspace
    for path in [data / "manifest.csv", *runs.glob("*.csv")]:
        raw = path.read_bytes()
        assert b"\r" not in raw and raw.endswith(b"\n")
        header = raw.split(b"\n", 1)[0].split(b",")
        assert header[-2:] == [b"schema_version", b"config_hash"]


def test_training_logs(workspace):
    _, _, runs, _ = workspace
    for view in ("axial", "coronal", "sagittal"):
        assert len(read_csv(runs / f"loc_{view}_log.csv")) == 2
        assert 1 <= len(read_csv(runs / f"seg_{view}_log.csv")) <= 2


def test_eval_summary_echoes_config_and_hashes(workspace):
    root, _, runs, _ = workspace
    summary = json.loads((runs / "eval.json").read_text())
    cfg = load_run_config(root / "tiny.cfg")
    assert summary["config_hash"] == cfg.hash() and summary["config"] == cfg.items()
    assert summary["schema_version"] == "1"
    assert set(summary["checkpoints"]) == {f"{k}_{v}.ckpt" for k in ("loc", "seg") for v in ("axial", "coronal", "sagittal")}
    for name, digest in summary["checkpoints"].items():
        assert digest == _digest(runs / name)
    d = summary["dsc"]
    assert d["min"] <= d["mean"] <= d["max"]


def test_eval_is_repeatable(workspace):
    _, _, runs, common = workspace
    assert run("eval", *common, "--prefix", "eval_again") == 0
    assert (runs / "eval.csv").read_bytes() == (runs / "eval_again.csv").read_bytes()
    assert (runs / "eval.json").read_bytes() == (runs / "eval_again.json").read_bytes()


def test_eval_refuses_config_drift(workspace, capsys):
    _, _, runs, common = workspace
    assert run("eval", *common, "--set", "seg.lr=0.5", "--prefix", "drift") == 1
    assert "config hash" in capsys.readouterr().err
    assert run("eval", *common, "--set", "seg.lr=0.5", "--prefix", "drift", "--force") == 0


def test_localizer_hash_ignores_segmenter_settings(workspace):
    _, _, runs, common = workspace
    assert run("eval-loc", *common, "--view", "axial", "--subset", "train", "--set", "seg.lr=0.5") == 0
    same = json.loads((runs / "eval_loc_axial_train.json").read_text())
    assert same["subset"] == "train"
    assert run("eval-loc", *common, "--view", "axial", "--set", "dqn.lr=0.5") == 1


def test_eval_loc_report(workspace):
    _, _, runs, _ = workspace
    rep = json.loads((runs / "eval_loc_axial.json").read_text())
    assert set(rep["recall"]) == {"mean", "std", "min", "max"}
    assert rep["recall"]["min"] <= rep["recall"]["mean"] <= rep["recall"]["max"]
    assert rep["slices"] == len(read_csv(runs / "eval_loc_axial_episodes.csv"))


def test_action_stats_tables(workspace):
    _, _, runs, _ = workspace
    rows = read_csv(runs / "action_corr_axial.csv")
    names = [r["action"] for r in rows]
    assert len(names) == 9
    val = {(r["action"], c): r[c] for r in rows for c in names}
    for a in names:
        assert val[a, a] in ("1.0", "undefined")
        for b in names:
            assert val[a, b] == val[b, a]
        flagged = set(next(r for r in rows if r["action"] == a)["flags"].split())
        assert flagged == {b for b in names if val[a, b] != "undefined" and float(val[a, b]) > 0.5}
    freq = read_csv(runs / "action_freq_axial.csv")
    assert [r["action"] for r in freq] == names


def test_infer_writes_label_volume(workspace):
    root, data, _, common = workspace
    out = root / "pred.psv"
    assert run("infer", *common, "--volume", data / "vol_0000.psv", "--out", out) == 0
    pred = read_volume(out)
    assert pred.dtype == np.uint8 and pred.shape == (32, 32, 32) and set(np.unique(pred)) <= {0, 1}


def test_different_seed_changes_checkpoint(workspace, tmp_path):
    _, _, runs, common = workspace
    assert run("train-loc", *common[:4], "--run-dir", tmp_path, "--view", "axial", "--seed", 1) == 0
    assert _digest(tmp_path / "loc_axial.ckpt") != _digest(runs / "loc_axial.ckpt")


def test_training_is_reproducible(workspace, tmp_path):
    _, _, runs, common = workspace
    assert run("train-loc", *common[:4], "--run-dir", tmp_path, "--view", "coronal") == 0
    assert _digest(tmp_path / "loc_coronal.ckpt") == _digest(runs / "loc_coronal.ckpt")
    assert _digest(tmp_path / "loc_coronal_log.csv") == _digest(runs / "loc_coronal_log.csv")


def test_ablate_report(workspace, tmp_path):
    _, _, runs, common = workspace
    assert run("ablate", *common[:4], "--run-dir", tmp_path, "--split", "0/3") == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert [r["configuration"] for r in rows] == [label for label, _, _ in cli.ABLATION_ROWS]
    for r in rows:
        assert float(r["min"]) <= float(r["mean"]) <= float(r["max"])
        assert r["volumes"] == "1"


def test_ablate_reuses_matching_segmenters(workspace):
    _, _, runs, common = workspace
    assert run("ablate", *common) == 0
    assert not list((runs / "ablate").glob("seg_loc_deform_*"))
    assert len(list((runs / "ablate").glob("seg_*.ckpt"))) == 9
    rows = {r["configuration"]: float(r["mean"]) for r in read_csv(runs / "ablation.csv")}
    evaluated = json.loads((runs / "eval.json").read_text())["dsc"]["mean"]
    assert rows["DRL localization + deformable"] == pytest.approx(evaluated, abs=1e-12)


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert run("train-loc", "--data-dir", tmp_path / "nothing", "--run-dir", tmp_path) == 1
    assert "manifest" in capsys.readouterr().err
    (tmp_path / "manifest.csv").write_text("volume_id,seed,volume_file,label_file\n0,0,v.psv,l.psv\n")
    assert run("eval", "--data-dir", tmp_path, "--run-dir", tmp_path / "empty") == 1
    assert "checkpoint" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("seed=3\nseg.epochs=7  # trailing comment\n\ndqn.hidden=64,32\n")
    cfg = load_run_config(f, {"seg.epochs": "9"})
    assert cfg.seed == 3 and cfg.dqn.seed == 3 and cfg.unet.seed == 3
    assert cfg.seg.epochs == 9 and cfg.dqn.hidden == (64, 32)
    assert RunConfig.from_items(cfg.items()) == cfg
    assert cfg.hash() != RunConfig().hash()
    for bad in ({"nope": "1"}, {"dqn.seed": "2"}, {"seg.epochs": "x"}, {"unet.input_side": "20"}, {"split": "3/3"}):
        with pytest.raises(ConfigError):
            RunConfig.from_items(bad)
    f.write_text("just words\n")
    with pytest.raises(ConfigError):
        load_run_config(f)


def test_bad_flags_exit_with_usage_code(tmp_path):
    assert run("gen-data", "--out-dir", tmp_path, "--dims", "32x32") == 2
    assert run("eval", "--split", "1", "--data-dir", tmp_path) == 2
    with pytest.raises(SystemExit):
        run("train-loc", "--view", "oblique")
