"""End-to-end command tests at desk scale: tiny images, seconds per run."""

import csv
import json
import os
import shutil

import numpy as np
import pytest

from stainlab import cli
from stainlab.train import train_model
from stainlab.config import from_dict

TINY = {
    "synth": {
        "image_size": 16,
        "train_count": 6,
        "val_count": 3,
        "test_count": 3,
    },
    "model": {
        "variant": "BASELINE",
        "encoder_channels": [4, 8],
        "input_size": 16,
        "branch": {"target_spatial": 4, "embed_dim": 8, "dropout_p": 0.0},
    },
    "train": {"epochs": 2, "batch_size": 3, "lr": 1e-3, "seed": 0},
}


def write_cfg(path, **patches):
    raw = json.loads(json.dumps(TINY))
    for section, vals in patches.items():
        raw.setdefault(section, {}).update(vals)
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: one dataset and one trained baseline."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = write_cfg(root / "exp.json")
    data = root / "data"
    assert cli.main(["synth", "--config", cfg, "--out", str(data)]) == 0
    out = root / "baseline"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    return {"root": root, "cfg": cfg, "data": str(data), "baseline": str(out)}


# ----------------------------------------------------------- synth


def test_synth_writes_all_splits(ws):
    for name, count in (("train", 6), ("val", 3), ("test_shifted", 3), ("val_shifted", 3)):
        d = os.path.join(ws["data"], name)
        meta = json.load(open(os.path.join(d, "meta.json")))
        assert len(meta["samples"]) == count
        assert meta["split"] == name
        for entry in meta["samples"]:
            assert os.path.isfile(os.path.join(d, entry["image"]))
            assert os.path.isfile(os.path.join(d, entry["mask"]))
        if name.endswith("shifted"):
            assert meta["shift_matrix"] is not None
        else:
            assert meta["shift_matrix"] is None


def test_synth_rerun_is_byte_identical(ws, tmp_path):
    again = tmp_path / "data2"
    assert cli.main(["synth", "--config", ws["cfg"], "--out", str(again)]) == 0
    for split in ("train", "val", "test_shifted", "val_shifted"):
        a_dir = os.path.join(ws["data"], split)
        b_dir = str(again / split)
        assert sorted(os.listdir(a_dir)) == sorted(os.listdir(b_dir))
        for name in os.listdir(a_dir):
            with open(os.path.join(a_dir, name), "rb") as fa, open(os.path.join(b_dir, name), "rb") as fb:
                assert fa.read() == fb.read(), f"{split}/{name} differs"


def test_synth_bad_config_exits_2(tmp_path):
    cfg = write_cfg(tmp_path / "bad.json", synth={"typo_key": 3})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 2


# ----------------------------------------------------------- train


def test_train_writes_checkpoints_and_report(ws):
    out = ws["baseline"]
    for sub in ("best", "last"):
        assert os.path.isfile(os.path.join(out, sub, "manifest.json"))
    report = json.load(open(os.path.join(out, "report.json")))
    assert len(report["epochs"]) == 2
    assert report["variant"] == "BASELINE"
    assert 0.0 <= report["final"]["val"]["dice"] <= 1.0
    assert set(report["final"]) == {"val", "test_shifted", "val_shifted"}


def test_train_multi_seed_layout(ws, tmp_path):
    out = tmp_path / "multi"
    rc = cli.main(
        ["train", "--config", ws["cfg"], "--data", ws["data"], "--out", str(out), "--seeds", "0,1"]
    )
    assert rc == 0
    for seed in (0, 1):
        assert os.path.isfile(str(out / f"seed{seed}" / "report.json"))


def test_train_variant_override_trains_branch(ws, tmp_path):
    out = tmp_path / "ca"
    rc = cli.main(
        [
            "train",
            "--config",
            ws["cfg"],
            "--data",
            ws["data"],
            "--out",
            str(out),
            "--variant",
            "STINV_CA",
        ]
    )
    assert rc == 0
    report = json.load(open(str(out / "report.json")))
    assert report["variant"] == "STINV_CA"
    assert report["epochs"][0]["stain_loss"] is not None


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_train_divergence_exits_4_without_corrupt_checkpoint(ws, tmp_path):
    # batch norm tames ordinary blow-ups; this rate overflows float32 in one step
    cfg = write_cfg(tmp_path / "hot.json", train={"lr": 1e38, "epochs": 1})
    out = tmp_path / "boom"
    rc = cli.main(["train", "--config", cfg, "--data", ws["data"], "--out", str(out)])
    assert rc == 4
    # the blow-up happens mid-epoch, before any save: no half-written state
    assert not os.path.exists(str(out / "last" / "manifest.json"))
    assert not os.path.exists(str(out / "report.json"))


def test_train_missing_data_exits_3(ws, tmp_path):
    empty = tmp_path / "nodata"
    empty.mkdir()
    assert cli.main(["train", "--config", ws["cfg"], "--data", str(empty), "--out", str(tmp_path / "o")]) == 3


def test_train_reruns_bit_identical(ws, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--config", ws["cfg"], "--data", ws["data"], "--out", str(out)]) == 0
    a = json.load(open(os.path.join(ws["baseline"], "report.json")))
    b = json.load(open(str(out / "report.json")))
    for rec in a["epochs"] + b["epochs"]:
        rec.pop("seconds")
    assert a == b


def test_resume_continues_at_saved_epoch(ws, tmp_path):
    raw = json.loads(json.dumps(TINY))
    raw["train"]["epochs"] = 1
    first = from_dict(raw)
    splits = {}
    from stainlab import synth

    for name in ("train", "val"):
        samples, _ = synth.load_split(os.path.join(ws["data"], name))
        splits[name] = samples
    out = tmp_path / "stage_one"
    train_model(first, splits, out_dir=str(out))

    raw["train"]["epochs"] = 2
    second = from_dict(raw)
    result = train_model(second, splits, resume_from=str(out / "last"))
    assert [r["epoch"] for r in result["history"]] == [2]


# ----------------------------------------------------------- eval


def test_eval_emits_metrics_json(ws, tmp_path):
    out = tmp_path / "metrics"
    rc = cli.main(
        [
            "eval",
            "--checkpoint",
            os.path.join(ws["baseline"], "best"),
            "--data",
            ws["data"],
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    payload = json.load(open(str(out / "metrics.json")))
    ck = os.path.join(ws["baseline"], "best")
    assert payload["checkpoints"] == [ck]
    scores = payload["per_checkpoint"][ck]
    assert set(scores) == {"train", "val", "test_shifted", "val_shifted"}
    for split_scores in scores.values():
        for metric in ("dice", "precision", "recall"):
            assert 0.0 <= split_scores[metric] <= 1.0
    assert payload["aggregate"]["val"]["dice"]["std"] == 0.0


def test_eval_deterministic(ws, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = cli.main(
            ["eval", "--checkpoint", os.path.join(ws["baseline"], "best"), "--data", ws["data"], "--out", str(out)]
        )
        assert rc == 0
        outs.append(open(str(out / "metrics.json")).read())
    assert outs[0] == outs[1]


def test_eval_without_checkpoint_exits_2(ws):
    assert cli.main(["eval", "--data", ws["data"]]) == 2


def test_eval_bogus_checkpoint_exits_3(ws, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nowhere"), "--data", ws["data"]]) == 3


def test_eval_missing_mask_file_exits_3(ws, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(ws["data"], str(broken))
    os.remove(str(broken / "val" / "mask_0001.png"))
    rc = cli.main(["eval", "--checkpoint", os.path.join(ws["baseline"], "best"), "--data", str(broken)])
    assert rc == 3


# ----------------------------------------------------------- ablate


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_ablate_stage_axis_table(ws, tmp_path):
    out = tmp_path / "ab_stage"
    rc = cli.main(
        [
            "ablate",
            "--config",
            ws["cfg"],
            "--data",
            ws["data"],
            "--out",
            str(out),
            "--axis",
            "stage",
            "--seeds",
            "0",
        ]
    )
    assert rc == 0
    header, rows = read_table(str(out / "ablation_stage.csv"))
    assert header[0] == "cell"
    assert [r[0] for r in rows] == ["baseline", "stage1", "stage2"]
    assert "val_dice_mean" in header and "test_shifted_dice_mean" in header
    assert "seed0_val_dice" in header


def test_ablate_matches_individual_run(ws, tmp_path):
    """Sweep cells must reproduce standalone training runs bit-for-bit."""
    out = tmp_path / "ab_check"
    rc = cli.main(
        ["ablate", "--config", ws["cfg"], "--data", ws["data"], "--out", str(out), "--axis", "stage", "--seeds", "0"]
    )
    assert rc == 0
    cell_report = json.load(open(str(out / "stage1" / "seed0" / "report.json")))

    solo = tmp_path / "solo"
    rc = cli.main(
        [
            "train",
            "--config",
            ws["cfg"],
            "--data",
            ws["data"],
            "--out",
            str(solo),
            "--variant",
            "STINV_CA",
            "--seeds",
            "0",
        ]
    )
    assert rc == 0
    solo_report = json.load(open(str(solo / "report.json")))
    assert cell_report["final"] == solo_report["final"]


def test_ablate_downsample_axis_parallel_matches_serial(ws, tmp_path, monkeypatch):
    results = {}
    for tag, threads in (("serial", "1"), ("parallel", "3")):
        out = tmp_path / tag
        monkeypatch.setenv("STAINLAB_THREADS", threads)
        rc = cli.main(
            ["ablate", "--config", ws["cfg"], "--data", ws["data"], "--out", str(out), "--axis", "downsample", "--seeds", "0"]
        )
        assert rc == 0
        header, rows = read_table(str(out / "ablation_downsample.csv"))
        assert [r[0] for r in rows] == ["MAX", "AVG", "SCONV"]
        results[tag] = (header, rows)
    assert results["serial"] == results["parallel"]


def test_ablate_bad_threads_env_exits_2(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("STAINLAB_THREADS", "many")
    rc = cli.main(
        ["ablate", "--config", ws["cfg"], "--data", ws["data"], "--out", str(tmp_path / "x"), "--axis", "ca_onoff", "--seeds", "0"]
    )
    assert rc == 2


# ----------------------------------------------------------- analyze


def test_analyze_outputs_and_determinism(ws, tmp_path):
    payloads = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = cli.main(
            ["analyze", "--checkpoint", os.path.join(ws["baseline"], "best"), "--data", ws["data"], "--out", str(out)]
        )
        assert rc == 0
        payload = json.load(open(str(out / "divergence.json")))
        assert set(payload["divergence"]) == {"stage1", "stage2"}
        assert all(v >= 0.0 for v in payload["divergence"].values())
        for name in ("divergence.csv", "covariance_mean.csv", "variance_mean.csv", "covariance_mean.png", "variance_mean.png"):
            p = str(out / name)
            assert os.path.isfile(p) and os.path.getsize(p) > 0
        payloads.append(payload)
    assert payloads[0] == payloads[1]


def test_analyze_identical_domains_zero_divergence(ws, tmp_path):
    cfg = write_cfg(tmp_path / "noshift.json", synth={"shift_rotate_deg": 0.0, "shift_elementwise": False})
    data = tmp_path / "data0"
    assert cli.main(["synth", "--config", cfg, "--out", str(data)]) == 0
    out = tmp_path / "an0"
    rc = cli.main(
        ["analyze", "--checkpoint", os.path.join(ws["baseline"], "best"), "--data", str(data), "--out", str(out)]
    )
    assert rc == 0
    payload = json.load(open(str(out / "divergence.json")))
    assert all(v == 0.0 for v in payload["divergence"].values())
