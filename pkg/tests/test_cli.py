import numpy as np
import pytest

from neurolip.checkpoint import load_checkpoint
from neurolip.cli import (EXIT_METRIC, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, UsageError, main,
                          parse_config_text, read_kv, train_config)
from neurolip.metrics import read_report
from neurolip.ttca import read_map_csv

TINY_CFG = """\
# small but complete run
n_rois = 8
n_subjects = 100
n_timepoints = 60
block_size = 2
sensitive_block_start = 2
epochs = 2          # trailing comment
batch_size = 8
n_clusters = 3
heads = 2
text_layers = 1
lr = 1e-3
folds = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["synth", "--config", str(root / "tiny.cfg"), "--out", str(root / "cohort")]) == EXIT_OK
    assert main(["train", "--cohort", str(root / "cohort"), "--config", str(root / "tiny.cfg"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_config_parsing():
    cfg = parse_config_text(TINY_CFG)
    assert cfg["epochs"] == "2" and cfg["lr"] == "1e-3"
    with pytest.raises(UsageError):
        parse_config_text("epochs 3")
    with pytest.raises(UsageError):
        parse_config_text("no_such_key = 1")


def test_precedence_defaults_file_flags(workspace):
    settings = parse_config_text(TINY_CFG)
    assert train_config({}, 32).epochs == 64
    assert train_config(settings, 8).epochs == 2
    assert train_config({**settings, "epochs": "5"}, 8).epochs == 5
    assert train_config({**settings, "attn_loss": "off"}, 8).attn_loss is False
    with pytest.raises(UsageError):
        train_config({"sensitive": "height"}, 32)


def test_synth_outputs(workspace):
    cohort = workspace / "cohort"
    assert (cohort / "phenotypes.csv").is_file() and (cohort / "vocab.txt").is_file()
    meta = read_kv(cohort / "manifest.txt")
    assert meta["n_written"] == "100" and len(meta["cohort_hash"]) == 64
    assert len(list((cohort / "matrices").glob("*.csv"))) == 100


def test_train_outputs(workspace):
    run = workspace / "run"
    meta = read_kv(run / "manifest.txt")
    assert meta["folds"] == "2" and meta["n_test"] == "20"
    header = (run / "fold0" / "loss_log.csv").read_text().splitlines()[0]
    assert header == "epoch,global,calt_dx,calt_sex,calt_age,calt_srs,attn,total"
    ckpt = load_checkpoint(run / "fold1" / "checkpoint.txt")
    assert len(ckpt.meta["test_ids"]) == 20
    assert not set(ckpt.meta["test_ids"]) & set(ckpt.meta["val_ids"])


def test_train_is_deterministic(workspace, tmp_path):
    assert main(["train", "--cohort", str(workspace / "cohort"), "--config", str(workspace / "tiny.cfg"),
                 "--out", str(tmp_path / "again")]) == EXIT_OK
    for fold in ("fold0", "fold1"):
        a = (workspace / "run" / fold / "checkpoint.txt").read_bytes()
        assert a == (tmp_path / "again" / fold / "checkpoint.txt").read_bytes()


def test_eval_and_attmap(workspace, capsys):
    out = workspace / "report.csv"
    assert main(["eval", "--checkpoint", str(workspace / "run"), "--cohort", str(workspace / "cohort"),
                 "--out", str(out)]) == EXIT_OK
    rep = read_report(out)
    assert list(rep) == ["AUC", "ACC", "SEN", "SPC", "DPD", "DEOdds", "ES-AUC"]
    assert "AUC," in capsys.readouterr().out
    amap = workspace / "map.csv"
    assert main(["attmap", "--checkpoint", str(workspace / "run"), "--cohort", str(workspace / "cohort"),
                 "--subject", "sub00", "--token", "dx_group", "--out", str(amap)]) == EXIT_OK
    vals = read_map_csv(amap)
    assert vals.shape == (8,) and np.all((vals >= 0) & (vals <= 1)) and vals.sum() <= 1 + 1e-9


def test_usage_errors(workspace, tmp_path):
    run, cohort = str(workspace / "run"), str(workspace / "cohort")
    assert main(["attmap", "--checkpoint", run, "--cohort", cohort, "--subject", "sub00",
                 "--token", "height"]) == EXIT_USAGE
    assert main(["attmap", "--checkpoint", run, "--cohort", cohort, "--subject", "nobody",
                 "--token", "sex"]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--cohort", cohort]) == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("warp_speed = 9\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "c")]) == EXIT_USAGE
    bad.write_text("n_rois = 4\nblock_size = 8\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "c")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["train", "--cohort", cohort, "--out", str(tmp_path / "r"), "--attn-loss", "maybe"])
    assert exc.value.code == 2


def test_cohort_hash_guard_and_undefined_metric(workspace, tmp_path):
    import shutil
    altered = tmp_path / "altered"
    shutil.copytree(workspace / "cohort", altered)
    pheno = altered / "phenotypes.csv"
    lines = pheno.read_text().splitlines()
    pheno.write_text("\n".join([lines[0]] + [l.replace(",asd,", ",control,") for l in lines[1:]]) + "\n")
    args = ["eval", "--checkpoint", str(workspace / "run"), "--cohort", str(altered),
            "--out", str(tmp_path / "r.csv")]
    assert main(args) == EXIT_USAGE
    assert main(args + ["--force"]) == EXIT_METRIC


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workspace, tmp_path):
    assert main(["train", "--cohort", str(workspace / "cohort"), "--config", str(workspace / "tiny.cfg"),
                 "--lr", "1e300", "--out", str(tmp_path / "nan")]) == EXIT_NUMERIC


def test_ablate(workspace, tmp_path):
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--cohort", str(workspace / "cohort"), "--config", str(workspace / "tiny.cfg"),
                 "--seeds", "1", "--epochs", "1", "--out", str(out)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0].startswith("attn_loss,neg_grad,AUC") and len(rows) == 5
