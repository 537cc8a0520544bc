import json
from pathlib import Path

import numpy as np
import pytest

from monoprobe import cli
from monoprobe import config as C
from monoprobe import dataset as D
from monoprobe.encoder import load_checkpoint
from monoprobe.errors import ConfigError

ASTRONAUT = Path(__file__).parent / "data" / "astronaut.png"
TINY = "encoder.widths=[4,6,8,8]"


@pytest.fixture
def source(tmp_path):
    p = tmp_path / "src.png"
    D.save_image(p, np.random.default_rng(0).random((60, 80, 3)))
    return p


@pytest.fixture
def cifar(tmp_path):
    """Five tiny training batches and a test batch in the binary layout."""
    rng = np.random.default_rng(1)
    d = tmp_path / "cifar"
    d.mkdir()
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        labels = rng.integers(0, 10, 20).astype(np.uint8)
        pix = rng.integers(0, 256, (20, 3072), dtype=np.uint8)
        np.concatenate([labels[:, None], pix], axis=1).tofile(d / name)
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


def common(source, out):
    return ["--set", f'data.sources=["{source}"]', "--out", out]


# ------------------------------------------------------------------ synth


def test_synth_prints_and_is_stable(source, tmp_path, capsys):
    args = common(source, tmp_path / "s") + ["--set", "data.d=200", "--set", "seeds.data_seed=7"]
    assert run("synth", *args) == 0
    first = capsys.readouterr().out
    assert run("synth", *args, "--threads", 4) == 0
    second = capsys.readouterr().out
    assert first == second
    assert first.startswith("d=200 N=1 checksum=")
    assert (tmp_path / "s" / "config.json").exists()


def test_synth_astronaut_checksum_matches_library(tmp_path, capsys):
    assert run("synth", *common(ASTRONAUT, tmp_path / "a"), "--set", "data.d=300") == 0
    line = capsys.readouterr().out.strip()
    ds = D.SynthDataset(D.SourceSet.from_paths([ASTRONAUT]), 300, 0, C.augment_config(C.default_config()))
    assert line.endswith(D.dataset_checksum(ds))


def test_synth_bad_beta_lists_field(source, tmp_path, capsys):
    assert run("synth", *common(source, tmp_path / "s"), "--set", "augment.beta=1.5") == 1
    assert "beta" in capsys.readouterr().err


def test_synth_dump(source, tmp_path, capsys):
    assert run("synth", *common(source, tmp_path / "s"), "--set", "data.d=500", "--dump", 50) == 0
    assert len(list((tmp_path / "s" / "dump").glob("*.png"))) == 50


def test_missing_source_is_io_error(tmp_path, capsys):
    assert run("synth", *common(tmp_path / "nope.png", tmp_path / "s")) == 3
    assert "nope.png" in capsys.readouterr().err


def test_unknown_override_key(source, tmp_path, capsys):
    assert run("synth", *common(source, tmp_path / "s"), "--set", "augment.betta=0.1") == 1
    assert "betta" in capsys.readouterr().err


def test_config_file_and_override_order(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"data": {"d": 123}, "pretext": {"epochs": 2}}))
    cfg = C.load_config(path, ["pretext.epochs=3"])
    assert cfg["data"]["d"] == 123 and cfg["pretext"]["epochs"] == 3
    with pytest.raises(ConfigError):
        C.load_config(None, ["pretext.epochs=lots"])


# --------------------------------------------------------------- pretrain


def test_pretrain_rotnet_two_epochs(source, tmp_path, capsys):
    out = tmp_path / "r"
    args = common(source, out) + ["--set", "data.d=32", "--set", "pretext.epochs=2", "--set", TINY]
    assert run("pretrain", *args) == 0
    net = load_checkpoint(out / "model.ckpt")
    assert net.meta["task"] == "rotnet" and net.meta["n_sources"] == 1
    assert len((out / "train.csv").read_text().splitlines()) == 3
    info = json.loads((out / "run.json").read_text())
    assert info["epochs"] == 2 and len(info["checkpoint_sha256"]) == 64


def test_pretrain_is_thread_invariant(source, tmp_path, capsys):
    digests = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        args = common(source, out) + ["--set", "data.d=48", "--set", "pretext.epochs=1", "--set", TINY]
        assert run("pretrain", *args, "--threads", threads) == 0
        digests.append(json.loads((out / "run.json").read_text()))
    assert digests[0]["dataset_sha256"] == digests[1]["dataset_sha256"]
    assert digests[0]["checkpoint_sha256"] == digests[1]["checkpoint_sha256"]


def test_deepcluster_k_above_d_fails_before_compute(tmp_path, capsys):
    out = tmp_path / "dc"
    args = ["--set", 'data.sources=["does-not-exist.png"]', "--out", out]
    args += ["--set", "data.d=10", "--set", "pretext.task=deepcluster", "--set", "pretext.clusters=11"]
    assert run("pretrain", *args) == 1
    assert "clusters" in capsys.readouterr().err
    assert not out.exists()


def test_pretrain_deepcluster(source, tmp_path, capsys):
    out = tmp_path / "dc"
    args = common(source, out) + ["--set", "data.d=40", "--set", "pretext.task=deepcluster", "--set", TINY]
    args += ["--set", "pretext.clusters=4", "--set", "pretext.pca_dim=4", "--set", "pretext.epochs=2"]
    assert run("pretrain", *args) == 0
    rows = (out / "train.csv").read_text().splitlines()
    assert len(rows) == 3 and "min_cluster" in rows[0]
    assert load_checkpoint(out / "model.ckpt").config.num_classes == 4


def test_pretrain_divergence_exit_code(source, tmp_path, capsys):
    out = tmp_path / "div"
    args = common(source, out) + ["--set", "data.d=32", "--set", "pretext.learning_rate=1e30", "--set", TINY]
    with np.errstate(all="ignore"):
        assert run("pretrain", *args) == 2
    assert "epoch" in capsys.readouterr().err


def test_ablation_matrix_directories(source, tmp_path, capsys):
    out = tmp_path / "abl"
    args = common(source, out) + ["--set", "data.d=8", "--set", "pretext.epochs=1", "--set", TINY]
    assert run("pretrain", *args, "--ablate") == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(f"scale{s}_rot{r}_jitter{j}" for s in (0, 1) for r in (0, 1) for j in (0, 1))
    cfg = json.loads((out / "scale1_rot0_jitter1" / "config.json").read_text())
    assert cfg["augment"]["scale_crop"] and not cfg["augment"]["rotation"] and cfg["augment"]["jitter"]


# ------------------------------------------------------- probe / finetune


def probe_args(cifar, out, *extra):
    return ["--set", f'probe.cifar_dir="{cifar}"', "--set", "probe.epochs=1", "--set", TINY, "--out", out, *extra]


def test_probe_random_baseline_and_regeneration(cifar, tmp_path, capsys):
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    assert run("probe", *probe_args(cifar, out1)) == 0
    assert run("probe", *probe_args(cifar, out2)) == 0
    rep = json.loads((out1 / "report.json").read_text())
    assert rep["method"] == "random" and set(rep["accuracies"]) == {"conv1", "conv2", "conv3", "conv4"}
    assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
    assert (out1 / "config.json").exists()


def test_probe_checkpoint_and_report(source, cifar, tmp_path, capsys):
    runs = tmp_path / "runs"
    pre = common(source, runs / "rot") + ["--set", "data.d=16", "--set", "pretext.epochs=1", "--set", TINY]
    assert run("pretrain", *pre) == 0
    ckpt = runs / "rot" / "model.ckpt"
    assert run("probe", *probe_args(cifar, runs / "rot" / "probe", "--set", f'probe.checkpoint="{ckpt}"')) == 0
    assert run("probe", *probe_args(cifar, runs / "baseline")) == 0
    capsys.readouterr()
    assert run("report", runs) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:3] == ["method", "N", "conv1"]
    assert out[1].split()[0] == "random" and out[2].split()[0] == "rotnet"
    assert (runs / "table.csv").exists()


def test_probe_missing_or_mismatched_checkpoint(source, cifar, tmp_path, capsys):
    assert run("probe", *probe_args(cifar, tmp_path / "p", "--set", 'probe.checkpoint="missing.ckpt"')) == 3
    pre = common(source, tmp_path / "r") + ["--set", "data.d=8", "--set", "pretext.epochs=1", "--set", TINY]
    assert run("pretrain", *pre) == 0
    ckpt = tmp_path / "r" / "model.ckpt"
    args = probe_args(cifar, tmp_path / "p", "--set", f'probe.checkpoint="{ckpt}"')
    args += ["--set", "encoder.widths=[4,6,8,9]"]
    capsys.readouterr()
    assert run("probe", *args) == 3
    assert "widths" in capsys.readouterr().err


def test_report_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("report", tmp_path / "empty") != 0
    assert "no runs found" in capsys.readouterr().err


def test_finetune(source, cifar, tmp_path, capsys):
    pre = common(source, tmp_path / "r") + ["--set", "data.d=8", "--set", "pretext.epochs=1", "--set", TINY]
    assert run("pretrain", *pre) == 0
    args = ["--set", f'finetune.checkpoint="{tmp_path / "r" / "model.ckpt"}"', "--set", f'finetune.cifar_dir="{cifar}"']
    args += ["--set", "finetune.epochs=1", "--set", TINY, "--out", tmp_path / "f"]
    assert run("finetune", *args) == 0
    res = json.loads((tmp_path / "f" / "finetune.json").read_text())
    assert res["k_frozen"] == 2 and 0 <= res["accuracy"] <= 100
