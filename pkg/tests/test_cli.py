import json
import math

import numpy as np
import pytest
from PIL import Image

from cracknet import cli
from cracknet import data as D
from cracknet import metrics as MT
from cracknet import runconfig as RC
from cracknet import training as TR
from cracknet.errors import ConfigError
from cracknet.fileio import read_csv, write_csv
from cracknet.tensor import Tensor

UNET_CFG = "arch = unet\nepochs = 3\nbatch_size = 4\n"


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("CRACKNET_THREADS", "1")


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert cli.main(["prepare", "--synthesize", "10", "--size", "64", "--seed", "1", "--out", str(root / "data"),
                     "-q"]) == 0
    (root / "unet.cfg").write_text(UNET_CFG)
    assert cli.main(["train", "--config", str(root / "unet.cfg"), "--data", str(root / "data"),
                     "--out", str(root / "run"), "-q"]) == 0
    return root


# -- config file -------------------------------------------------------

def test_config_presets_and_overrides():
    rc = RC.parse_config("# comment\narch = swinunet\n\nembed_dim = 16\ninput_size = 32x32\nlr = 0.01\n")
    assert rc.model.embed_dim == 16 and rc.model.input_size == (32, 32)
    assert rc.model.depths == (2, 2)
    assert rc.train.lr == 0.01 and rc.train.batch_size == 12 and rc.train.loss == "combine1"
    full = RC.parse_config("arch = swinunet\npreset = full\n")
    assert full.model.window_size == 7 and full.model.input_size == (224, 224)
    assert RC.parse_config("arch = unet\nstem_widths = 4,8\ninput_size = 16\n").model.stem_widths == (4, 8)
    assert RC.RunConfig.from_dict(json.loads(json.dumps(rc.to_dict()))) == rc


@pytest.mark.parametrize("text,message", [
    ("arch = unet\nlearning_rate = 0.1\n", "learning_rate"),
    ("arch = unet\nlr = 0.1\nlr = 0.2\n", "twice"),
    ("arch = unet\nepochs = many\n", "epochs"),
    ("epochs = 3\n", "arch"),
    ("arch = unet\njust words\n", "line 2"),
    ("arch = unet\npreset = huge\n", "preset"),
    ("arch = unet\nsplit_ratio = 1.5\n", "split_ratio"),
    ("arch = swinunet\nwindow_size = 5\n", "window"),
])
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        RC.parse_config(text)


def test_unknown_key_exit_code(tmp_path, workspace, capsys):
    (tmp_path / "bad.cfg").write_text("arch = unet\nepoch = 3\n")
    assert run("train", "--config", tmp_path / "bad.cfg", "--data", workspace / "data", "--out", tmp_path / "r") == 1
    assert "'epoch'" in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    assert run("train", "--data", "x") == 1
    assert run("frobnicate") == 1


# -- prepare -----------------------------------------------------------

def test_prepare_synthetic(tmp_path):
    assert run("prepare", "--synthesize", 16, "--size", 64, "--out", tmp_path / "a", "-q") == 0
    assert len(list((tmp_path / "a" / "images").iterdir())) == 16
    assert len(list((tmp_path / "a" / "masks").iterdir())) == 16
    header, rows = read_csv(tmp_path / "a" / "manifest.csv")
    assert header[0] == "id" and len(rows) == 16
    assert run("prepare", "--synthesize", 16, "--size", 64, "--out", tmp_path / "b", "-q") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_prepare_tiles_photo(tmp_path, rng):
    src = tmp_path / "src"
    (src / "images").mkdir(parents=True)
    (src / "masks").mkdir()
    Image.fromarray(rng.integers(0, 256, (448, 448, 3), dtype=np.uint8)).save(src / "images" / "road.png")
    Image.fromarray(((rng.random((448, 448)) > 0.95) * 255).astype(np.uint8)).save(src / "masks" / "road.png")
    assert run("prepare", "--images", src / "images", "--masks", src / "masks", "--out", tmp_path / "t", "-q") == 0
    _, rows = read_csv(tmp_path / "t" / "manifest.csv")
    assert [r["id"] for r in rows] == ["road_y00000_x00000", "road_y00000_x00224",
                                       "road_y00224_x00000", "road_y00224_x00224"]
    loaded = D.load_dataset(tmp_path / "t" / "images", tmp_path / "t" / "masks")
    assert all(s.mask.shape == (224, 224) for s in loaded)


def test_prepare_reports_missing_masks(tmp_path, capsys):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "i" / "orphan.png")
    assert run("prepare", "--images", tmp_path / "i", "--masks", tmp_path / "m", "--out", tmp_path / "o") == 2
    assert "orphan" in capsys.readouterr().err


def test_prepare_needs_one_source(tmp_path):
    assert run("prepare", "--out", tmp_path / "o") == 1
    assert run("prepare", "--synthesize", 2, "--images", tmp_path, "--out", tmp_path / "o") == 1


# -- train -------------------------------------------------------------

def test_train_artifacts(workspace):
    out = workspace / "run"
    header, rows = read_csv(out / "runlog.csv")
    assert tuple(header) == TR.RUNLOG_FIELDS
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    _, timing = read_csv(out / "timing.csv")
    assert len(timing) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["arch"] == "unet"
    assert manifest["dataset"]["files"] == 20
    assert len(manifest["train_ids"]) == 8 and len(manifest["val_ids"]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["img_per_sec"] > 0
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_train_rerun_is_byte_identical(workspace, tmp_path):
    before = tree_bytes(workspace / "data")
    assert run("train", "--config", workspace / "unet.cfg", "--data", workspace / "data", "--out", tmp_path, "-q") == 0
    for name in ("runlog.csv", "model.ckpt"):
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes()
    assert tree_bytes(workspace / "data") == before


def test_fold_two_validation_is_disjoint(workspace, tmp_path):
    assert run("train", "--config", workspace / "unet.cfg", "--data", workspace / "data", "--fold", 2,
               "--out", tmp_path, "-q") == 0
    one = json.loads((workspace / "run" / "manifest.json").read_text())
    two = json.loads((tmp_path / "manifest.json").read_text())
    assert two["fold"] == 2
    assert not set(one["val_ids"]) & set(two["val_ids"])


def test_train_numeric_abort(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(TR, "compute_loss", lambda logits, y, spec: (logits * Tensor(np.nan)).mean())
    assert run("train", "--config", workspace / "unet.cfg", "--data", workspace / "data", "--out", tmp_path) == 3
    assert "epoch 1" in capsys.readouterr().err


def test_train_rejects_wrong_extent(workspace, tmp_path):
    (tmp_path / "c.cfg").write_text("arch = unet\ninput_size = 32\nepochs = 1\n")
    assert run("train", "--config", tmp_path / "c.cfg", "--data", workspace / "data", "--out", tmp_path / "o") == 2


# -- eval --------------------------------------------------------------

def test_eval_outputs(workspace, tmp_path):
    assert run("eval", "--checkpoint", workspace / "run" / "model.ckpt", "--data", workspace / "data",
               "--split", "all", "--out", tmp_path, "-q") == 0
    _, metrics = read_csv(tmp_path / "metrics.csv")
    assert [m["average"] for m in metrics] == ["micro", "macro"]
    _, per_image = read_csv(tmp_path / "per_image.csv")
    assert len(per_image) == 10
    _, hist = read_csv(tmp_path / "histogram.csv")
    assert len(hist) == 20 and sum(int(h["count"]) for h in hist) == 10
    macro_iou = float(metrics[1]["iou"])
    assert abs(macro_iou - np.mean([float(r["iou"]) for r in per_image])) <= 1e-6
    header, fit = read_csv(tmp_path / "gaussfit.csv")
    assert header == ["amplitude", "mu", "sigma", "fwhm", "residual_norm", "converged", "iterations"]
    assert fit[0]["converged"] in ("true", "false")


def test_eval_macro_matches_unrounded_mean(workspace, tmp_path):
    assert run("eval", "--checkpoint", workspace / "run" / "model.ckpt", "--data", workspace / "data",
               "--split", "val", "--out", tmp_path, "-q") == 0
    manifest = json.loads((workspace / "run" / "manifest.json").read_text())
    samples = [s for s in cli.load_data_dir(workspace / "data") if s.id in manifest["val_ids"]]
    _, run_cfg, model = cli._load_run(workspace / "run" / "model.ckpt")
    ev = TR.evaluate(model, sorted(samples, key=lambda s: manifest["val_ids"].index(s.id)))
    assert abs(ev.macro.iou - np.mean([v for _, v in ev.per_image_iou])) <= 1e-9
    _, metrics = read_csv(tmp_path / "metrics.csv")
    assert metrics[1]["iou"] == f"{ev.macro.iou:.6f}"


def test_eval_perfect_oracle(workspace, tmp_path, monkeypatch):
    masks = {s.id: s.mask for s in cli.load_data_dir(workspace / "data")}
    by_bytes = {}
    for s in cli.load_data_dir(workspace / "data"):
        by_bytes[s.image.astype(np.float32).tobytes()] = s.mask

    def oracle(model, x):
        return Tensor(np.stack([np.where(by_bytes[img.tobytes()] == 1, 30.0, -30.0) for img in x.data])[..., None])

    monkeypatch.setattr(TR, "forward", oracle)
    assert len(masks) == 10
    assert run("eval", "--checkpoint", workspace / "run" / "model.ckpt", "--data", workspace / "data",
               "--split", "all", "--out", tmp_path, "-q") == 0
    _, metrics = read_csv(tmp_path / "metrics.csv")
    for row in metrics:
        assert [row[k] for k in ("iou", "f1", "precision", "recall", "accuracy")] == ["1.000000"] * 5


def test_eval_config_mismatch(workspace, tmp_path):
    manifest = json.loads((workspace / "run" / "manifest.json").read_text())
    manifest["config"]["model"]["stem_widths"] = [4, 8, 16, 16, 16]
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert run("eval", "--checkpoint", workspace / "run" / "model.ckpt", "--manifest", tmp_path / "m.json",
               "--data", workspace / "data", "--out", tmp_path / "e") == 2


# -- predict -----------------------------------------------------------

def test_predict_masks_and_closure(workspace, tmp_path):
    ckpt = workspace / "run" / "model.ckpt"
    assert run("predict", "--checkpoint", ckpt, "--images", workspace / "data" / "images",
               "--out", tmp_path / "p1", "-q") == 0
    assert run("predict", "--checkpoint", ckpt, "--images", workspace / "data" / "images",
               "--out", tmp_path / "p2", "-q") == 0
    assert tree_bytes(tmp_path / "p1") == tree_bytes(tmp_path / "p2")
    for path in (tmp_path / "p1").iterdir():
        arr = np.asarray(Image.open(path))
        assert arr.shape == (64, 64)
        assert set(np.unique(arr)) <= {0, 255}
    predicted = D.load_dataset(workspace / "data" / "images", tmp_path / "p1")
    truth = {s.id: s.mask for s in cli.load_data_dir(workspace / "data")}
    pooled = MT.ConfusionCounts()
    for s in predicted:
        pooled = pooled + MT.confusion_counts(s.mask, truth[s.id])
    assert run("eval", "--checkpoint", ckpt, "--data", workspace / "data", "--split", "all",
               "--out", tmp_path / "e", "-q") == 0
    _, metrics = read_csv(tmp_path / "e" / "metrics.csv")
    micro = metrics[0]
    assert [int(micro[k]) for k in ("tp", "fp", "fn", "tn")] == [pooled.tp, pooled.fp, pooled.fn, pooled.tn]


def test_predict_stitches_large_images_and_reports_bad_files(workspace, tmp_path, rng, capsys):
    (tmp_path / "in").mkdir()
    Image.fromarray(rng.integers(0, 256, (100, 80, 3), dtype=np.uint8)).save(tmp_path / "in" / "big.png")
    Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(tmp_path / "in" / "tiny.png")
    (tmp_path / "in" / "junk.png").write_bytes(b"not an image")
    assert run("predict", "--checkpoint", workspace / "run" / "model.ckpt", "--images", tmp_path / "in",
               "--out", tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert "junk.png" in err and "tiny.png" in err
    assert np.asarray(Image.open(tmp_path / "out" / "big.png")).shape == (100, 80)


def test_stitched_logits_match_single_tile(workspace, rng):
    _, _, model = cli._load_run(workspace / "run" / "model.ckpt")
    image = rng.random((64, 64, 3)).astype(np.float32)
    direct = TR.forward(model, Tensor(image[None])).data[0, ..., 0]
    np.testing.assert_allclose(cli.predict_logits(model, image), direct, rtol=0, atol=0)
    big = rng.random((96, 64, 3)).astype(np.float32)
    stitched = cli.predict_logits(model, big)
    top = TR.forward(model, Tensor(big[None, :64])).data[0, ..., 0]
    bottom = TR.forward(model, Tensor(big[None, 32:])).data[0, ..., 0]
    np.testing.assert_allclose(stitched[:32], top[:32], atol=1e-6)
    np.testing.assert_allclose(stitched[32:64], (top[32:] + bottom[:32]) / 2, atol=1e-6)
    np.testing.assert_allclose(stitched[64:], bottom[32:], atol=1e-6)


# -- compare-losses ----------------------------------------------------

def test_compare_losses(workspace, tmp_path):
    assert run("compare-losses", "--data", workspace / "data", "--arch", "unet", "--losses", "dice,combine2",
               "--epochs", 5, "--out", tmp_path, "-q") == 0
    header, rows = read_csv(tmp_path / "compare.csv")
    assert header == ["loss_name", "epoch", "train_loss", "val_iou", "val_f1"]
    assert len(rows) == 10
    assert all(float(r["train_loss"]) >= 0 for r in rows)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["losses"] == ["dice", "combine2"] and len(manifest["val_ids"]) == 2


def test_compare_losses_rejects_bad_names(workspace, tmp_path, capsys):
    assert run("compare-losses", "--data", workspace / "data", "--losses", "bce,focal", "--out", tmp_path) == 1
    assert "lovasz" in capsys.readouterr().err
    assert run("compare-losses", "--data", workspace / "data", "--losses", "bce", "--out", tmp_path) == 1


# -- report ------------------------------------------------------------

def fake_run(root, epochs, arch="mtunet", seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True)
    rows = [list(TR.RUNLOG_FIELDS)]
    for e in range(1, epochs + 1):
        rows.append([str(e)] + [f"{v:.6f}" for v in rng.random(6)])
    write_csv(root / "runlog.csv", rows)
    (root / "manifest.json").write_text("{}")
    (root / "summary.json").write_text(json.dumps({"arch": arch, "epochs": epochs, "img_per_sec": 3.7,
                                                   "param_count": 1000, "size_mb": 1000 * 4 / 2 ** 20}))


def test_report_table_and_series(tmp_path):
    fake_run(tmp_path / "a", 130)
    fake_run(tmp_path / "b", 45, arch="unet", seed=1)
    (tmp_path / "broken").mkdir()
    assert run("report", "--runs", tmp_path / "a", tmp_path / "b", tmp_path / "broken", "--out", tmp_path / "r",
               "-q") == 0
    _, table = read_csv(tmp_path / "r" / "table.csv")
    assert [t["run"] for t in table] == ["a", "b"]
    _, runlog = read_csv(tmp_path / "a" / "runlog.csv")
    ious = [float(r["val_iou"]) for r in runlog]
    assert table[0]["iou"] == f"{MT.tail_average(ious, 100):.6f}"
    assert table[1]["tail_n"] == "45"
    assert table[0]["speed_img_s"] == "3.700000" and table[0]["size_mb"] == f"{1000 * 4 / 2 ** 20:.6f}"
    _, series = read_csv(tmp_path / "r" / "series.csv")
    assert sum(s["run"] == "a" for s in series) == math.floor(130 / 20)
    assert sum(s["run"] == "b" for s in series) == 2
    first = MT.rolling_stats(ious, 20)[0]
    assert series[0]["mean"] == f"{first[0]:.6f}" and series[0]["std"] == f"{first[1]:.6f}"


def test_report_single_real_run(workspace, tmp_path):
    assert run("report", "--runs", workspace / "run", "--out", tmp_path, "-q") == 0
    _, table = read_csv(tmp_path / "table.csv")
    assert len(table) == 1 and table[0]["model"] == "unet"


def test_report_without_valid_runs(tmp_path):
    (tmp_path / "x").mkdir()
    assert run("report", "--runs", tmp_path / "x", "--out", tmp_path / "r") == 2


def test_thread_variable_validation(monkeypatch, tmp_path):
    monkeypatch.setenv("CRACKNET_THREADS", "zero")
    assert run("prepare", "--synthesize", 1, "--out", tmp_path) == 1
