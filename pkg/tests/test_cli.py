import json

import numpy as np
import pytest

from cc2d.cli import main
from cc2d.config import synthetic_config
from cc2d.data import generate_synthetic_dataset, load_pseudo_labels
from cc2d.pipeline import WORKDIR_SUBDIRS, workdir_lock


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    cfg = synthetic_config()
    for enc in (cfg.model.encoder, cfg.tpl.encoder):
        enc.channels = [4, 4, 8, 8, 8]
        enc.convs = [1, 1, 1, 1, 1]
    cfg.model.aspp_channels = 4
    cfg.model.embed_dim = 4
    cfg.ssl.epochs = 2
    cfg.ssl.batch_size = 2
    cfg.tpl.epochs = 2
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    cfg.validate().save(path)
    return path


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    assert main(["gen-synthetic", "--seed", "0", "--n-images", "3", "--n-test", "2", "--k", "3",
                 "--out", str(root)]) == 0
    return root


def test_gen_synthetic_is_deterministic(tmp_path, data):
    assert main(["gen-synthetic", "--seed", "0", "--n-images", "3", "--n-test", "2", "--k", "3",
                 "--out", str(tmp_path)]) == 0
    a = sorted(p.relative_to(data) for p in data.rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        assert (data / rel).read_bytes() == (tmp_path / rel).read_bytes()


def test_stagewise_commands(tmp_path, data, tiny_config, capsys):
    cfg = ["--config", str(tiny_config)]
    ckpt = tmp_path / "ssl.pt"
    assert main(["train-ssl", "--data", str(data), *cfg, "--out-ckpt", str(ckpt)]) == 0
    assert ckpt.exists() and ckpt.with_suffix(".loss.csv").exists() and ckpt.with_suffix(".loss.png").exists()
    pseudo = tmp_path / "pseudo.json"
    assert main(["gen-pseudo", "--data", str(data), "--template-id", "001", "--ckpt", str(ckpt), *cfg,
                 "--out", str(pseudo), "--figures", str(tmp_path / "fig")]) == 0
    assert len(load_pseudo_labels(pseudo, 3)) == 3
    assert list((tmp_path / "fig").glob("similarity_*.png"))
    tpl = tmp_path / "tpl.pt"
    assert main(["train-tpl", "--data", str(data), "--pseudo", str(pseudo), *cfg, "--out-ckpt", str(tpl)]) == 0
    report = tmp_path / "rep" / "tpl_test.json"
    assert main(["evaluate", "--data", str(data), "--split", "test", "--ckpt", str(tpl), *cfg,
                 "--report", str(report), "--export", str(tmp_path / "export")]) == 0
    doc = json.loads(report.read_text())
    assert set(doc["sdr"]) == {"2", "2.5", "3", "4"}
    assert report.with_suffix(".txt").exists() and (tmp_path / "rep" / "tpl_test_errors.csv").exists()
    assert len(list((tmp_path / "export").glob("*.txt"))) == 2
    assert main(["evaluate", "--data", str(data), "--split", "train", "--pseudo", str(pseudo), *cfg,
                 "--exclude", "001", "--report", str(tmp_path / "rep" / "ssl.json")]) == 0
    abl = tmp_path / "abl.json"
    assert main(["ablate-levels", "--data", str(data), "--template-id", "001", "--ckpt", str(ckpt), *cfg,
                 "--report", str(abl)]) == 0
    assert len(json.loads(abl.read_text())) == 6
    out = capsys.readouterr().out
    assert "MRE" in out


def test_evaluate_k_mismatch_fails(tmp_path, data, tiny_config, capsys):
    other = tmp_path / "other"
    generate_synthetic_dataset(other, seed=0, n_images=2, k=2)
    ckpt = tmp_path / "ssl.pt"
    assert main(["train-ssl", "--data", str(other), "--config", str(tiny_config), "--out-ckpt", str(ckpt)]) == 0
    pseudo = tmp_path / "p.json"
    assert main(["gen-pseudo", "--data", str(other), "--template-id", "001", "--ckpt", str(ckpt),
                 "--config", str(tiny_config), "--out", str(pseudo)]) == 0
    code = main(["evaluate", "--data", str(data), "--split", "train", "--pseudo", str(pseudo),
                 "--config", str(tiny_config), "--report", str(tmp_path / "r.json")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1 and "K mismatch" in err[0]


def test_bad_config_fails_before_side_effects(tmp_path, data, capsys):
    ckpt = tmp_path / "x.pt"
    code = main(["train-ssl", "--data", str(data), "--config", "synthetic", "--override", "alpha=4",
                 "--out-ckpt", str(ckpt)])
    assert code == 1 and not ckpt.exists()
    assert "alpha" in capsys.readouterr().err
    assert main(["train-ssl", "--data", str(tmp_path / "none"), "--config", "synthetic",
                 "--out-ckpt", str(ckpt)]) == 1


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--bogus"])
    assert exc.value.code != 0


def test_visualize(tmp_path, data):
    ann = data / "train" / "annotations" / "synthetic" / "001.txt"
    out = tmp_path / "overlay.png"
    assert main(["visualize", "--image", str(data / "train" / "images" / "001.png"), "--pred", str(ann),
                 "--gt", str(ann), "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_run_cc2d_resumable_and_locked(tmp_path, data, tiny_config, capsys):
    wd = tmp_path / "work"
    args = ["run-cc2d", "--data", str(data), "--template-id", "001", "--config", str(tiny_config),
            "--workdir", str(wd)]
    assert main(args) == 0
    for sub in WORKDIR_SUBDIRS:
        assert (wd / sub).is_dir()
    for rel in ("ckpts/ssl.pt", "ckpts/tpl.pt", "pseudo/train.json", "pseudo/test.json", "logs/ssl_loss.csv",
                "logs/tpl_loss.csv", "reports/tpl_test.json", "reports/ssl_test.json", "reports/pseudo_train.json",
                "reports/summary.json", "figures/sdr.png", "figures/ssl_loss.png", "config.yaml"):
        assert (wd / rel).exists(), rel
    first = (wd / "reports" / "tpl_test.json").read_text()
    assert main(args) == 0
    summary = json.loads((wd / "reports" / "summary.json").read_text())
    assert set(summary["stages"].values()) == {"cached"}
    assert (wd / "reports" / "tpl_test.json").read_text() == first
    assert main([*args[:-2], "--override", "tau=5", "--workdir", str(wd)]) == 1
    with workdir_lock(wd):
        assert main(args) == 1
    assert "locked" in capsys.readouterr().err


def test_rerun_reproduces_outputs(tmp_path, data, tiny_config):
    for name in ("a", "b"):
        assert main(["train-ssl", "--data", str(data), "--config", str(tiny_config),
                     "--out-ckpt", str(tmp_path / f"{name}.pt")]) == 0
    a = np.loadtxt(tmp_path / "a.loss.csv", delimiter=",", skiprows=1, usecols=(0, 7))
    b = np.loadtxt(tmp_path / "b.loss.csv", delimiter=",", skiprows=1, usecols=(0, 7))
    assert np.array_equal(a, b)
