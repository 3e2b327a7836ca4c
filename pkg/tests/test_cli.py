import csv
import json
import re

import numpy as np
import pytest

from s3shift.audio import AudioClip, read_feature_archive, write_wav
from s3shift.cli import main
from s3shift.engine import ShiftEngine

FAST = ["--synthetic", "--per-class", "10", "--arch", "toy", "--lr", "0.02", "--seed", "7"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *FAST, "--mode", "s3", "--epochs", "3", "--out", str(out)]) == 0
    return out


def test_train_outputs(trained):
    for name in ("best.s3ck", "last.s3ck", "history.csv", "train.run.json"):
        assert (trained / name).exists(), name
    rows = list(csv.DictReader(open(trained / "history.csv")))
    assert len(rows) == 3 and set(rows[0]) == {"epoch", "lr", "train_loss", "val_acc", "reg_value"}
    manifest = json.loads((trained / "train.run.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 7
    assert manifest["config"]["mode"] == "s3" and manifest["config"]["epochs"] == 3
    assert manifest["tool_version"] and manifest["wall_time_s"] >= 0
    assert str(trained / "best.s3ck") in manifest["outputs"]


def test_train_is_deterministic(tmp_path, trained):
    assert main(["train", *FAST, "--mode", "s3", "--epochs", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
    assert (tmp_path / "best.s3ck").read_bytes() == (trained / "best.s3ck").read_bytes()


def test_resume(tmp_path, trained):
    assert main(["train", *FAST, "--mode", "s3", "--epochs", "3", "--stop-after", "1", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "history.csv").read_text().splitlines()) == 2
    assert main(["train", *FAST, "--mode", "s3", "--epochs", "3", "--resume", str(tmp_path / "last.s3ck"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
    assert (tmp_path / "best.s3ck").read_bytes() == (trained / "best.s3ck").read_bytes()
    assert main(["train", *FAST, "--mode", "s3", "--epochs", "5", "--resume", str(tmp_path / "last.s3ck"),
                 "--out", str(tmp_path / "other")]) == 2


def test_bad_mode_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--synthetic", "--mode", "q5", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "q5" in capsys.readouterr().err


def test_train_needs_data(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--features", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 3


def test_nan_loss_is_a_numeric_failure(tmp_path):
    with np.errstate(all="ignore"):
        assert main(["train", *FAST[:-4], "--mode", "fp32", "--epochs", "1", "--lr", "1e30",
                     "--out", str(tmp_path)]) == 4


def test_eval_prints_accuracy_and_confusion(trained, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["eval", "--synthetic", "--per-class", "10", "--checkpoint", str(trained / "best.s3ck"),
                 "--split", "train", "--out", str(out)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("accuracy ") and len(line.split()[1].split(".")[1]) == 4
    report = json.loads(out.read_text())
    cm = np.array(report["confusion"])
    assert cm.sum(axis=1).tolist() == [8, 8, 8, 8]
    assert report["accuracy"] == pytest.approx(np.trace(cm) / cm.sum())
    assert (tmp_path / "eval.run.json").exists()


def test_eval_integer_path(trained, tmp_path):
    assert main(["eval", "--synthetic", "--per-class", "10", "--checkpoint", str(trained / "best.s3ck"),
                 "--integer", "--out", str(tmp_path / "i.json")]) == 0
    assert json.loads((tmp_path / "i.json").read_text())["integer_path"] is True


def test_eval_errors(trained, tmp_path):
    feats = tmp_path / "feats"
    feats.mkdir()
    (feats / "test.s3ft").write_bytes(b"S3FT" + (1).to_bytes(4, "little") + (0).to_bytes(4, "little"))
    (feats / "test.labels.csv").write_text("id,label,name\n")
    assert main(["eval", "--features", str(feats), "--checkpoint", str(trained / "best.s3ck")]) == 3
    assert main(["eval", "--synthetic", "--classes", "6", "--per-class", "10",
                 "--checkpoint", str(trained / "best.s3ck"), "--out", str(tmp_path / "x.json")]) == 2
    (tmp_path / "junk.s3ck").write_bytes(b"JUNK")
    assert main(["eval", "--synthetic", "--checkpoint", str(tmp_path / "junk.s3ck")]) == 3


def test_quantize_export(trained, tmp_path, capsys):
    out = tmp_path / "m.s3mx"
    assert main(["quantize-export", "--checkpoint", str(trained / "best.s3ck"), "--out", str(out)]) == 0
    assert "3 bits/weight" in capsys.readouterr().out
    assert ShiftEngine.load(out).header["logical_bits_per_weight"] == 3
    fp = tmp_path / "fp"
    assert main(["train", *FAST, "--mode", "fp32", "--epochs", "1", "--out", str(fp)]) == 0
    assert main(["quantize-export", "--checkpoint", str(fp / "best.s3ck"), "--out", str(tmp_path / "f.s3mx")]) == 3
    assert not (tmp_path / "f.s3mx").exists()


def test_cost_report(tmp_path, capsys):
    out = tmp_path / "cost.json"
    assert main(["cost-report", "--arch", "resnet18", "--mode", "s3", "--out", str(out)]) == 0
    assert "10.6667x" in capsys.readouterr().out
    assert abs(json.loads(out.read_text())["compression_ratio_vs_fp32"] - 32 / 3) < 1e-9
    assert main(["cost-report", "--mode", "q8"]) == 0
    assert "4.0000x" in capsys.readouterr().out


def test_selftest(capsys, monkeypatch):
    monkeypatch.setenv("S3_NUM_THREADS", "1")
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    for suite in ("decode-enumeration", "kernel-equivalence", "fd-gradients", "cosine-schedule", "cmvn-postconditions"):
        assert suite in out
    assert "FAIL" not in out
    assert main(["selftest", "--corrupt-decode"]) == 4
    out = capsys.readouterr().out
    assert re.search(r"^decode-enumeration\s+FAIL", out, re.M)


def test_synth_data_then_train_from_features(tmp_path):
    feats = tmp_path / "feats"
    assert main(["synth-data", "--per-class", "10", "--out", str(feats)]) == 0
    assert len(read_feature_archive(feats / "train.s3ft")) == 32
    run = tmp_path / "run"
    assert main(["train", "--features", str(feats), "--mode", "d3", "--epochs", "1", "--t-fixed", "8",
                 "--out", str(run)]) == 0
    assert main(["eval", "--features", str(feats), "--checkpoint", str(run / "best.s3ck")]) == 0


def test_audio_commands(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for i, (action, obj, loc) in enumerate([("activate", "lights", "kitchen"), ("deactivate", "lights", "none"),
                                            ("activate", "music", "none")]):
        write_wav(tmp_path / f"u{i}.wav", AudioClip((0.2 * rng.normal(size=4000 + 800 * i)).astype(np.float32)))
        rows.append([f"u{i}.wav", "spk", "text", action, obj, loc])
    with open(tmp_path / "train_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "speakerId", "transcription", "action", "object", "location"])
        w.writerows(rows)
    stats = tmp_path / "out" / "cmvn.s3cm"
    assert main(["fit-cmvn", "--manifest", str(tmp_path / "train_data.csv"), "--out", str(stats)]) == 0
    archive = tmp_path / "out" / "train.s3ft"
    assert main(["extract-features", "--manifest", str(tmp_path / "train_data.csv"), "--cmvn", str(stats),
                 "--out", str(archive)]) == 0
    recs = read_feature_archive(archive)
    assert [r[0] for r in recs] == ["u0", "u1", "u2"]
    assert all(f.shape[1] == 400 for _, f in recs)
    labels = list(csv.DictReader(open(archive.with_suffix(".labels.csv"))))
    assert [r["name"] for r in labels] == ["activate_lights", "deactivate_lights", "activate_music"]
    assert (tmp_path / "out" / "fit-cmvn.run.json").exists()
    assert main(["fit-cmvn", "--manifest", str(tmp_path / "missing.csv"), "--out", str(stats)]) == 3
