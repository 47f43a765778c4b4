import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from bayes_seg.calibration import McConfig, ece_image, mc_predict
from bayes_seg.cli import main
from bayes_seg.losses import confusion_counts, iou_metric
from bayes_seg.segnet import load_checkpoint, read_checkpoint


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def dataset(tmp_path):
    spec = write_json(tmp_path / "spec.json", {"count": 20, "image_size": 16, "radius_min": 2, "radius_max": 5})
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "ds")]) == 0
    return tmp_path / "ds"


def run_config(tmp_path, dataset, out="out", **arch):
    doc = {
        "seed": 2, "output_dir": out, "dataset": {"path": str(dataset)},
        "architecture": {"depth": 2, "base_channels": 2, "input_size": 16, **arch},
        "train": {"max_epochs": 2, "lr": 0.01}, "mc": {"num_samples": 3},
    }
    return write_json(tmp_path / f"{out}.json", doc)


def test_synth_writes_pairs_and_manifest(tmp_path, dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["count"] == 20
    assert len(list((dataset / "images").glob("*.png"))) == 20
    assert len(list((dataset / "masks").glob("*.png"))) == 20
    assert manifest["files"][0]["image_sha256"] == sha(dataset / manifest["files"][0]["image"])
    spec = tmp_path / "spec.json"
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "again")]) == 0
    for f in ["manifest.json", "images/synth_0007.png", "masks/synth_0019.png"]:
        assert sha(dataset / f) == sha(tmp_path / "again" / f)


def test_synth_rejects_bad_field(tmp_path, capsys):
    spec = write_json(tmp_path / "bad.json", {"count": 10, "radius": 3})
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "radius" in capsys.readouterr().err
    spec = write_json(tmp_path / "bad2.json", {"count": -1})
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "count" in capsys.readouterr().err


def test_train_eval_predict(tmp_path, dataset):
    cfg = run_config(tmp_path, dataset, stochastic_kind="mnf", placement="per_decoder")
    assert main(["train", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    hist = (out / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,val_iou" and len(hist) == 3
    header, _ = read_checkpoint(out / "model.ckpt")
    assert any(".flow." in b["name"] for b in header["blocks"])
    assert any(".aux_flow." in b["name"] for b in header["blocks"])

    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--split", "test", "--mc", "4", "--dump"]) == 0
    ev = out / "eval_test"
    metrics = json.loads((ev / "metrics.json").read_text())
    assert metrics["mc_samples"] == 4 and metrics["num_images"] == 2
    rows = (ev / "reliability.csv").read_text().splitlines()
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == metrics["num_pixels"]
    assert (ev / "reliability.svg").read_text().startswith("<svg")

    # offline recomputation from the dumped predictions
    dump = np.load(ev / "predictions.npz")
    ious, eces, tp, fn = [], [], 0, 0
    for p, y in zip(dump["mean_probs"], dump["masks"]):
        pred = (p > 0.5).astype(float)
        c = confusion_counts(pred, y)
        tp, fn = tp + c.tp, fn + c.fn
        ious.append(iou_metric(pred, y))
        eces.append(ece_image(p, y)[0])
    assert abs(metrics["iou"] - np.mean(ious)) <= 1e-12
    assert abs(metrics["ece"] - np.mean(eces)) <= 1e-12
    assert metrics["true_positives"] == tp and metrics["false_negatives"] == fn

    image = dataset / "images" / "synth_0004.png"
    pred_dir = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(out / "model.ckpt"), "--image", str(image), "--mc", "3",
                 "--emit", "mean,mask,uncertainty,saliency,saliency_std", "--out", str(pred_dir)]) == 0
    side = json.loads((pred_dir / "synth_0004_predict.json").read_text())
    assert set(side["channels"]) == {"mean", "mask", "uncertainty", "saliency", "saliency_std"}
    for info in side["channels"].values():
        assert info["min"] <= info["max"]
    model, _ = load_checkpoint(out / "model.ckpt")
    img = np.asarray(Image.open(image).convert("RGB"), dtype=float).transpose(2, 0, 1) / 255
    _, _, pmask = mc_predict(model, img, McConfig(num_samples=3, seed=2))
    got = np.asarray(Image.open(pred_dir / "synth_0004_mask.png")) / 255
    np.testing.assert_array_equal(got, pmask[0, 0])


def test_deterministic_checkpoint(tmp_path, dataset):
    cfg = run_config(tmp_path, dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = str(tmp_path / "out" / "model.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--mc", "1", "--out", str(tmp_path / "e1")]) == 0
    assert main(["eval", "--checkpoint", ckpt, "--mc", "50", "--out", str(tmp_path / "e50")]) == 0
    m1 = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    m50 = json.loads((tmp_path / "e50" / "metrics.json").read_text())
    assert m1.pop("mc_samples") == 1 and m50.pop("mc_samples") == 50
    assert m1 == m50
    assert sha(tmp_path / "e1" / "reliability.csv") == sha(tmp_path / "e50" / "reliability.csv")

    image = dataset / "images" / "synth_0001.png"
    assert main(["predict", "--checkpoint", ckpt, "--image", str(image), "--emit", "uncertainty",
                 "--out", str(tmp_path / "p")]) == 0
    assert np.all(np.asarray(Image.open(tmp_path / "p" / "synth_0001_uncertainty.png")) == 0)


def test_rerun_is_checksum_identical(tmp_path, dataset):
    digests = []
    for out in ("a", "b"):
        cfg = run_config(tmp_path, dataset, out=out, stochastic_kind="reparam")
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["eval", "--checkpoint", str(tmp_path / out / "model.ckpt")]) == 0
        ev = tmp_path / out / "eval_test"
        digests.append([sha(tmp_path / out / "history.csv"), sha(ev / "metrics.json"),
                        sha(ev / "reliability.csv"), sha(ev / "reliability.svg")])
    assert digests[0] == digests[1]


def test_seed_env_override(tmp_path, dataset, monkeypatch):
    cfg = run_config(tmp_path, dataset, out="s1", stochastic_kind="reparam")
    assert main(["train", "--config", str(cfg)]) == 0
    monkeypatch.setenv("BAYES_SEG_SEED", "11")
    cfg = run_config(tmp_path, dataset, out="s2", stochastic_kind="reparam")
    assert main(["train", "--config", str(cfg)]) == 0
    _, extra = load_checkpoint(tmp_path / "s2" / "model.ckpt")
    assert extra["run_config"]["seed"] == 11
    assert sha(tmp_path / "s1" / "history.csv") != sha(tmp_path / "s2" / "history.csv")


def test_error_exit_codes(tmp_path, dataset, capsys):
    missing = run_config(tmp_path, tmp_path / "nowhere")
    assert main(["train", "--config", str(missing)]) == 2
    assert "dataset not found" in capsys.readouterr().err

    doc = json.loads(run_config(tmp_path, dataset).read_text())
    doc["architecture"]["wings"] = 2
    assert main(["train", "--config", str(write_json(tmp_path / "x.json", doc))]) == 2
    assert "wings" in capsys.readouterr().err

    doc = json.loads(run_config(tmp_path, dataset).read_text())
    doc["architecture"]["placement"] = "everywhere"
    assert main(["train", "--config", str(write_json(tmp_path / "y.json", doc))]) == 2
    assert "placement" in capsys.readouterr().err

    assert main(["predict", "--checkpoint", "x", "--image", "y", "--emit", "mean,depth"]) == 2
    assert "depth" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2
    assert main(["frobnicate"]) == 2

    (dataset / "images" / "synth_0000.png").write_bytes(b"broken")
    assert main(["train", "--config", str(run_config(tmp_path, dataset))]) == 3
    assert "synth_0000" in capsys.readouterr().err


def test_incompatible_checkpoint_version(tmp_path, dataset, capsys):
    cfg = run_config(tmp_path, dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "out" / "model.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[8] = 9
    ckpt.write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(ckpt)]) == 2
    assert "version" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, dataset, capsys):
    doc = json.loads(run_config(tmp_path, dataset).read_text())
    doc["train"]["lr"] = 1e300
    doc["train"]["grad_clip"] = None
    doc["train"]["max_epochs"] = 5
    assert main(["train", "--config", str(write_json(tmp_path / "n.json", doc))]) == 4
    assert "non-finite" in capsys.readouterr().err
