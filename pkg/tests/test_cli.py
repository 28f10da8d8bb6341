import csv
import json

import numpy as np
import pytest
from PIL import Image

from dsfas.cli import config_text, main, resolve_config, UsageError
from dsfas.models import load_checkpoint
from dsfas.trainer import TrainConfig

SMALL = [
    "--set", "image_size=16",
    "--set", "latent_channels=4",
    "--set", "width=4",
    "--set", "batch_size=8",
    "--set", "stage2_epochs=1",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = main([
        "synth", "--out", str(out), "--patterns", "stripes,dots,rings",
        "--n-live", "12", "--n-per-attack", "6", "--image-size", "16", "--seed", "1",
    ])
    assert code == 0
    return out


def test_synth_counts_and_determinism(tmp_path, data_dir):
    assert len(list((data_dir / "live").glob("*.png"))) == 12
    for p in ("stripes", "dots", "rings"):
        assert len(list((data_dir / p).glob("*.png"))) == 6
    rows = list(csv.DictReader((data_dir / "manifest.csv").open()))
    assert len(rows) == 30
    again = tmp_path / "again"
    main(["synth", "--out", str(again), "--patterns", "stripes,dots,rings",
          "--n-live", "12", "--n-per-attack", "6", "--image-size", "16", "--seed", "1"])
    assert (again / "manifest.csv").read_bytes() == (data_dir / "manifest.csv").read_bytes()
    assert (again / "live" / "live_0003.png").read_bytes() == (data_dir / "live" / "live_0003.png").read_bytes()


def test_synth_usage_errors(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--patterns", "stripes,laser"]) == 2
    assert not (tmp_path / "x").exists()
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 2


def test_nonempty_output_needs_force(tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["synth", "--out", str(out), "--patterns", "stripes,dots", "--n-live", "2", "--n-per-attack", "1"]
    assert main(args) == 2
    assert (out / "keep.txt").exists()
    assert main(args + ["--force"]) == 0
    assert not (out / "keep.txt").exists() and (out / "manifest.csv").exists()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DSFAS_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["synth", "--patterns", "stripes,dots", "--n-live", "2", "--n-per-attack", "1"]) == 0
    assert (tmp_path / "root" / "synth" / "manifest.csv").exists()


def test_config_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nlr = 0.001\nbatch_size=8\nweights.recon=2.5\n")
    cfg = resolve_config(f, ["batch_size=12"], ["no-triplet"], seed=3)
    assert cfg.lr == 0.001 and cfg.batch_size == 12 and cfg.weights.recon == 2.5
    assert cfg.disable_triplet and cfg.seed == 3
    assert cfg.image_size == TrainConfig().image_size
    echo = tmp_path / "echo.txt"
    echo.write_text(config_text(cfg))
    assert resolve_config(echo) == cfg
    for bad in (["nope=1"], ["lr=abc"], ["batch_size=2"], ["disable_triplet=maybe"], ["justtext"]):
        with pytest.raises(UsageError):
            resolve_config(None, bad)


def test_train_both_stages(tmp_path, data_dir):
    s1 = tmp_path / "s1"
    assert main(["train", "--stage", "1", "--data", str(data_dir), "--out", str(s1), *SMALL]) == 0
    rows = list(csv.DictReader((s1 / "stage1_log.csv").open()))
    assert len(rows) == 10
    ckpt = load_checkpoint(s1 / "stage1.ckpt", expected_stage="stage1")
    assert ckpt.arch["image_size"] == 16
    assert "stage1_epochs=10" in (s1 / "config.txt").read_text()

    s2 = tmp_path / "s2"
    args = ["train", "--stage", "2", "--data", str(data_dir), "--out", str(s2), *SMALL]
    assert main(args) == 2
    assert main(args + ["--stage1-ckpt", str(s1 / "stage1.ckpt")]) == 0
    ck2 = load_checkpoint(s2 / "stage2.ckpt", expected_stage="stage2")
    assert ck2.networks["E_L"].to_bytes() == ckpt.networks["E_L"].to_bytes()

    s3 = tmp_path / "s3"
    assert main(["train", "--stage", "2", "--data", str(data_dir), "--out", str(s3), *SMALL,
                 "--ablate", "no-triplet", "--ablate", "no-stage1"]) == 0
    header = (s3 / "stage2_log.csv").read_text().splitlines()[0].split(",")
    assert "l_t" not in header and "l_recon" in header

    # a stage-2 checkpoint is refused where a stage-1 one is expected
    assert main(["train", "--stage", "2", "--data", str(data_dir), "--out", str(tmp_path / "s4"),
                 *SMALL, "--stage1-ckpt", str(s2 / "stage2.ckpt")]) == 1


def test_divergence_exit_code(tmp_path, data_dir):
    code = main(["train", "--stage", "2", "--ablate", "no-stage1", "--data", str(data_dir), "--out", str(tmp_path / "d"),
                 *SMALL, "--set", "lr=1e300"])
    assert code == 1
    assert not (tmp_path / "d").exists()


def test_protocol_and_translate(tmp_path, data_dir):
    out = tmp_path / "proto"
    args = ["protocol", "--data", str(data_dir), "--out", str(out), *SMALL, "--set", "stage1_epochs=1"]
    assert main(args) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["dots", "rings", "stripes"]
    summary = json.loads((out / "summary.json").read_text())
    for k in ("acer", "eer", "auc"):
        vals = [json.loads((out / d / "report.json").read_text())[k] for d in dirs]
        assert summary["average"][k]["mean"] == float(np.mean(vals))
    lines = (out / "summary.txt").read_text().splitlines()
    assert lines[0].split()[-1] == "Average" and len(lines) == 6
    assert not list(tmp_path.glob(".*tmp"))

    tr = tmp_path / "tr"
    img = data_dir / "dots" / "dots_0000.png"
    ckpt = out / "dots" / "stage2.ckpt"
    assert main(["translate", "--ckpt", str(ckpt), str(img), str(img), "--out", str(tr)]) == 0
    a_t = np.asarray(Image.open(tr / "a_translated.png"))
    assert a_t.tobytes() == np.asarray(Image.open(tr / "a_reconstruction.png")).tobytes()
    assert a_t.shape == np.asarray(Image.open(img)).shape
    assert np.asarray(Image.open(tr / "grid.png")).shape == (48, 32, 3)
    tr2 = tmp_path / "tr2"
    main(["translate", "--ckpt", str(ckpt), str(img), str(img), "--out", str(tr2)])
    assert (tr2 / "grid.png").read_bytes() == (tr / "grid.png").read_bytes()
    assert main(["translate", "--ckpt", str(out / "dots" / "stage1.ckpt"), str(img), str(img),
                 "--out", str(tmp_path / "bad")]) == 1

    feats = tmp_path / "feats"
    assert main(["export-features", "--ckpt", str(ckpt), "--data", str(data_dir), "--out", str(feats)]) == 0
    rows = list(csv.reader((feats / "features.csv").open()))
    assert len(rows) == 31 and len(rows[0]) == 3 + 2 * 4 * 2 * 2


def test_protocol_parallel_matches_serial(tmp_path, data_dir):
    base = ["protocol", "--data", str(data_dir), *SMALL, "--set", "stage1_epochs=1"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for name in ("summary.json", "dots/report.json", "dots/stage2.ckpt", "rings/scores.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
