import os

import numpy as np
import pytest

from lfmnet.cli import main
from lfmnet.data import load_dataset, make_split
from lfmnet.imgio import read_pnm
from lfmnet.masking import parse_decision

TINY_CFG = """
[data]
seed = 3
n_identities = 6
views_per_id = 4
n_cams = 2
train_identities = 4

[model]
stem_channels = 8
stage_widths = 8,8
blocks_per_stage = 1
embedding_dim = 8

[train]
epochs = 1
batch_size = 16
lr = 0.05
lr_decay_epochs =
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(TINY_CFG)
    data_dir = root / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)]) == 0
    return {
        "root": root,
        "cfg": str(cfg_path),
        "data": str(data_dir / "dataset.lfmd"),
        "data_dir": data_dir,
    }


def _run(ws, *argv):
    return main(list(argv) + ["--config", ws["cfg"]])


# -- exit codes ---------------------------------------------------------------


def test_usage_errors_exit_1(workspace):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train"]) == 1  # missing --data


def test_invalid_config_exits_2(workspace):
    code = _run(workspace, "train", "--data", workspace["data"],
                "--out", str(workspace["root"] / "bad"),
                "--set", "lfm.probability=2.0")
    assert code == 2
    code = _run(workspace, "train", "--data", workspace["data"],
                "--out", str(workspace["root"] / "bad"),
                "--set", "train.nope=1")
    assert code == 2


def test_missing_data_exits_3(workspace):
    code = _run(workspace, "train", "--data", "/nonexistent/ds.lfmd",
                "--out", str(workspace["root"] / "missing"))
    assert code == 3
    assert main(["gen-data", "--config", "/nonexistent.cfg", "--out", "/tmp/x"]) == 3


def test_locked_output_dir_exits_3(workspace):
    out = workspace["root"] / "locked"
    os.makedirs(out)
    (out / ".lock").write_text("")
    code = _run(workspace, "train", "--data", workspace["data"], "--out", str(out))
    assert code == 3
    (out / ".lock").unlink()


# -- gen-data -----------------------------------------------------------------


def test_gen_data_outputs_are_loadable_and_deterministic(workspace, tmp_path):
    ds = load_dataset(workspace["data"])
    assert len(ds) == 24
    split = make_split(ds, 4)
    assert set(split.train_ids).isdisjoint(split.test_ids)
    manifest = (workspace["data_dir"] / "manifest.csv").read_text().splitlines()
    assert len(manifest) == 25

    rerun = tmp_path / "again"
    assert _run(workspace, "gen-data", "--out", str(rerun)) == 0
    assert (rerun / "dataset.lfmd").read_bytes() == open(workspace["data"], "rb").read()
    assert (rerun / "manifest.csv").read_text() == (workspace["data_dir"] / "manifest.csv").read_text()


# -- train --------------------------------------------------------------------


def test_train_writes_checkpoint_and_log(workspace):
    out = workspace["root"] / "t_base"
    assert _run(workspace, "train", "--data", workspace["data"], "--out", str(out)) == 0
    assert (out / "checkpoint.lfmc").exists()
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,train_acc,seed"
    assert len(log) == 2  # one epoch


def test_train_zero_epochs_gives_initial_checkpoint_and_empty_log(workspace):
    out = workspace["root"] / "t_zero"
    assert _run(workspace, "train", "--data", workspace["data"], "--out", str(out),
                "--set", "train.epochs=0") == 0
    assert (out / "checkpoint.lfmc").exists()
    log = (out / "train_log.csv").read_text().splitlines()
    assert log == ["epoch,train_loss,train_acc,seed"]


def test_train_lfm_probability_zero_matches_disabled(workspace):
    out_a = workspace["root"] / "t_lfm_off"
    out_b = workspace["root"] / "t_lfm_p0"
    assert _run(workspace, "train", "--data", workspace["data"], "--out", str(out_a),
                "--set", "model.lfm=false") == 0
    assert _run(workspace, "train", "--data", workspace["data"], "--out", str(out_b),
                "--set", "model.lfm=true", "--set", "lfm.probability=0.0") == 0
    assert (out_a / "checkpoint.lfmc").read_bytes() == (out_b / "checkpoint.lfmc").read_bytes()


def test_train_rerun_is_byte_identical(workspace):
    out_a = workspace["root"] / "t_rep_a"
    out_b = workspace["root"] / "t_rep_b"
    for out in (out_a, out_b):
        assert _run(workspace, "train", "--data", workspace["data"], "--out", str(out),
                    "--set", "model.lfm=true") == 0
    assert (out_a / "checkpoint.lfmc").read_bytes() == (out_b / "checkpoint.lfmc").read_bytes()
    assert (out_a / "train_log.csv").read_text() == (out_b / "train_log.csv").read_text()


# -- eval ---------------------------------------------------------------------


def test_eval_writes_csv_row(workspace):
    train_out = workspace["root"] / "t_base"
    out = workspace["root"] / "e1"
    code = _run(workspace, "eval", "--data", workspace["data"],
                "--checkpoint", str(train_out / "checkpoint.lfmc"),
                "--out", str(out), "--method", "baseline")
    assert code == 0
    rows = (out / "eval.csv").read_text().splitlines()
    assert rows[0] == "method,distance,rank1,rank5,rank10,map,n_queries,skipped"
    fields = rows[1].split(",")
    assert fields[0] == "baseline" and fields[1] == "euclidean"
    assert len(fields) == 8

    out2 = workspace["root"] / "e2"
    assert _run(workspace, "eval", "--data", workspace["data"],
                "--checkpoint", str(train_out / "checkpoint.lfmc"),
                "--out", str(out2), "--method", "baseline") == 0
    assert (out / "eval.csv").read_bytes() == (out2 / "eval.csv").read_bytes()


# -- attack -------------------------------------------------------------------


def test_attack_requires_distinct_checkpoints(workspace):
    ckpt = str(workspace["root"] / "t_base" / "checkpoint.lfmc")
    out = workspace["root"] / "a_same"
    code = _run(workspace, "attack", "--data", workspace["data"],
                "--target", ckpt, "--surrogate", ckpt, "--out", str(out))
    assert code == 2


def test_attack_report_schema(workspace):
    target = str(workspace["root"] / "t_base" / "checkpoint.lfmc")
    surr_out = workspace["root"] / "t_surr"
    assert _run(workspace, "train", "--data", workspace["data"], "--out", str(surr_out),
                "--seed", "77") == 0
    out = workspace["root"] / "a1"
    code = _run(workspace, "attack", "--data", workspace["data"],
                "--target", target,
                "--surrogate", str(surr_out / "checkpoint.lfmc"),
                "--out", str(out))
    assert code == 0
    rows = (out / "attack.csv").read_text().splitlines()
    assert rows[0] == "model,attack,epsilon,steps,phase,rank1,rank5,rank10,map"
    assert len(rows) == 3
    assert rows[1].split(",")[4] == "clean"
    assert rows[2].split(",")[4] == "attacked"
    assert "transfer-PGD (DMR substitute)" in rows[1]


# -- sweep --------------------------------------------------------------------


def test_sweep_rows_cover_grid(workspace):
    out = workspace["root"] / "s1"
    code = _run(workspace, "sweep", "--data", workspace["data"], "--out", str(out),
                "--param", "lfm.probability", "--values", "0.0,1.0", "--seeds", "2",
                "--set", "model.lfm=true", "--plot")
    assert code == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "param,value,seed,rank1,map"
    assert len(rows) == 1 + 2 * 2
    values = [r.split(",")[1] for r in rows[1:]]
    assert values == ["0.0", "0.0", "1.0", "1.0"]
    plot = read_pnm(out / "sweep.ppm")
    assert plot.ndim == 3 and plot.shape[2] == 3


def test_sweep_unresolvable_path_exits_2(workspace):
    out = workspace["root"] / "s_bad"
    code = _run(workspace, "sweep", "--data", workspace["data"], "--out", str(out),
                "--param", "lfm.banana", "--values", "1,2", "--seeds", "1")
    assert code == 2


# -- compare ------------------------------------------------------------------


def test_compare_emits_row_per_method(workspace):
    out = workspace["root"] / "c1"
    code = _run(workspace, "compare", "--data", workspace["data"], "--out", str(out),
                "--set", "compare.methods=baseline,lfm,lfm+cutout+dropout")
    assert code == 0
    rows = (out / "compare.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "lfm", "lfm+cutout+dropout"]


# -- viz-masks ----------------------------------------------------------------


def test_viz_masks_emits_per_channel_images(workspace):
    ckpt = str(workspace["root"] / "t_base" / "checkpoint.lfmc")
    out = workspace["root"] / "v1"
    code = _run(workspace, "viz-masks", "--data", workspace["data"],
                "--checkpoint", ckpt, "--out", str(out), "--index", "0",
                "--set", "lfm.probability=1.0")
    assert code == 0
    files = sorted(os.listdir(out))
    assert len(files) == 2 * 8 + 1  # stem has 8 channels, plus the log
    img = read_pnm(out / "before_c00.pgm")
    assert img.shape == (64, 32)
    decisions = [parse_decision(l) for l in (out / "decisions.log").read_text().splitlines()]
    assert len(decisions) == 1 and decisions[0].applied
    # each applied rect appears as a constant block in the matching after image
    for channel, rect in decisions[0].rects:
        after = read_pnm(out / f"after_c{channel:02d}.pgm")
        region = after[rect.y0 : rect.y0 + rect.h_px, rect.x0 : rect.x0 + rect.w_px]
        assert np.all(region == region[0, 0])


def test_viz_masks_p0_before_equals_after(workspace):
    ckpt = str(workspace["root"] / "t_base" / "checkpoint.lfmc")
    out = workspace["root"] / "v0"
    code = _run(workspace, "viz-masks", "--data", workspace["data"],
                "--checkpoint", ckpt, "--out", str(out), "--index", "2",
                "--set", "lfm.probability=0.0")
    assert code == 0
    for c in range(8):
        before = (out / f"before_c{c:02d}.pgm").read_bytes()
        after = (out / f"after_c{c:02d}.pgm").read_bytes()
        assert before == after


def test_viz_masks_index_out_of_range_exits_2(workspace):
    ckpt = str(workspace["root"] / "t_base" / "checkpoint.lfmc")
    out = workspace["root"] / "v_bad"
    code = _run(workspace, "viz-masks", "--data", workspace["data"],
                "--checkpoint", ckpt, "--out", str(out), "--index", "999")
    assert code == 2
