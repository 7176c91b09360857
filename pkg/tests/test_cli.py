import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from toys import write_toy_volumes
from lungseg.cli import main
from lungseg.config import CONFIG_ENV, RunConfig, load_config, parse_override
from lungseg.data.slicepack import read_slicepack
from lungseg.evaluation import read_metrics_csv

TOY = {
    "seed": 3,
    "model": {"widths": [4, 8], "bottleneck": 8, "filters": 2},
    "train": {"epochs": 2, "batch_size": 4, "runs_per_fold": 1, "patience": None},
    "gan": {"depth": 4, "base_width": 4, "disc_width": 4, "disc_layers": 2, "epochs": 1, "batch_size": 2},
    "augment": {"n_classic": 2, "n_gan": 2},
}


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_toy_volumes(root / "raw")
    cfg = dict(TOY, paths={"raw": str(root / "raw"), "output_dir": str(root / "runs")})
    (root / "toy.json").write_text(json.dumps(cfg))
    return root


def cli(root, *args, run=None, expect=0):
    base = ["--config", str(root / "toy.json")] + (["--run", str(run)] if run else [])
    res = CliRunner().invoke(main, base + list(args), catch_exceptions=False)
    assert res.exit_code == expect, res.output
    return res


def pipeline(root, run, folds=(0,), postprocess_variants=False):
    cli(root, "ingest", run=run)
    cli(root, "folds", run=run)
    for f in folds:
        for cmd in ("gan-train", "augment", "train", "eval"):
            cli(root, cmd, "--fold", str(f), run=run)
        if postprocess_variants:
            cli(root, "eval", "--fold", str(f), "--no-postprocess", run=run)
    return cli(root, "report", run=run)


# --------------------------------------------------------------------------
# config


def test_defaults_follow_design_decisions():
    c = RunConfig()
    assert c.threads == 1 and c.precision == "float32"
    assert c.data.hu_window == [-1000.0, 400.0] and c.data.k == 5 and c.data.val_fraction == 0.12
    assert c.model.widths == [32, 64, 128, 256] and c.model.ratio == 4
    assert c.gan.lambda_l1 == 100 and c.gan.depth == 6 and c.gan.base_width == 16 and c.gan.disc_layers == 3
    assert (c.gan.lr, c.gan.beta1) == (2e-4, 0.5)
    assert (c.augment.n_classic, c.augment.n_gan) == (300, 300)
    assert (c.postprocess.bin_thresh, c.postprocess.area_thresh, c.postprocess.per_component) == (0.5, 30, False)


def test_config_file_then_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 5, "train": {"lr": 0.01}}))
    c = load_config(p, ["train.lr=0.5", "model.widths=[8,16]", "train.patience=null"], env={})
    assert c.seed == 5 and c.train.lr == 0.5 and c.model.widths == [8, 16] and c.train.patience is None
    assert c.train.batch_size == 8


def test_config_env_var(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 11}))
    assert load_config(env={CONFIG_ENV: str(p)}).seed == 11
    assert load_config(env={}).seed == 0


@pytest.mark.parametrize("raw,match", [
    ({"sed": 1}, "unknown config field 'sed'"),
    ({"train": {"lrr": 1}}, "unknown config field 'train.lrr'"),
    ({"train": 3}, "must be an object"),
    ({"seed": "x"}, "cannot use"),
    ({"postprocess": {"per_component": 1}}, "true or false"),
    ({"precision": "float16"}, "precision"),
    ({"fold": 5}, "fold 5"),
    ({"data": {"hu_window": [400, -1000]}}, "degenerate"),
])
def test_config_rejections(tmp_path, raw, match):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(raw))
    with pytest.raises(ValueError, match=match):
        load_config(p, env={})


def test_parse_override_forms():
    assert parse_override("a.b=3") == {"a": {"b": 3}}
    assert parse_override("paths.raw=/data/x") == {"paths": {"raw": "/data/x"}}
    with pytest.raises(ValueError):
        parse_override("novalue")


# --------------------------------------------------------------------------
# ingest


def test_ingest_writes_pack_and_prints_stats(toy_root, tmp_path):
    res = cli(toy_root, "ingest", run=tmp_path / "a")
    assert "slices: 15" in res.output and "infected: 10 (66.7%)" in res.output
    samples = read_slicepack(tmp_path / "a" / "slices.slpk")
    assert len(samples) == 15 and {s.volume_id for s in samples} == set(range(5))
    assert all(s.image.shape == (1, 256, 256) for s in samples)
    manifest = json.loads((tmp_path / "a" / "manifests" / "ingest.json").read_text())
    assert len(manifest["inputs"]) == 15 and manifest["stats"]["slices"] == 15
    assert manifest["config"] == load_config(toy_root / "toy.json", env={}).to_dict()


def test_ingest_is_idempotent(toy_root, tmp_path):
    cli(toy_root, "ingest", run=tmp_path / "a")
    cli(toy_root, "ingest", run=tmp_path / "b")
    a = (tmp_path / "a" / "slices.slpk").read_bytes()
    assert a == (tmp_path / "b" / "slices.slpk").read_bytes()


def test_ingest_missing_label_is_an_error(tmp_path):
    raw = write_toy_volumes(tmp_path / "raw", n_volumes=2)
    victim = next((raw / "infection").iterdir())
    victim.unlink()
    res = CliRunner().invoke(main, ["--run", str(tmp_path / "r"), "ingest", "--input", str(raw)])
    assert res.exit_code == 1
    assert "missing infection label" in res.output and victim.name in res.output


def test_ingest_accepts_dataset_folder_names(tmp_path):
    raw = write_toy_volumes(tmp_path / "raw", n_volumes=2)
    for a, b in (("ct", "COVID-19-CT-Seg_20cases"), ("lung", "Lung_Mask"), ("infection", "Infection_Mask")):
        (raw / a).rename(raw / b)
    res = CliRunner().invoke(main, ["--run", str(tmp_path / "r"), "ingest", "--input", str(raw)])
    assert res.exit_code == 0, res.output
    assert "slices: 6" in res.output


def test_fresh_timestamped_run_dirs(toy_root, tmp_path):
    out = tmp_path / "runs"
    r = CliRunner()
    args = ["--config", str(toy_root / "toy.json"), "--set", f"paths.output_dir={out}"]
    assert r.invoke(main, args + ["ingest"]).exit_code == 0
    assert r.invoke(main, args + ["ingest"]).exit_code == 0
    runs = sorted(p.name for p in out.iterdir())
    assert len(runs) == 2 and runs[0][:8].isdigit()
    # commands without --run pick the newest run
    res = r.invoke(main, args + ["folds"])
    assert res.exit_code == 0, res.output
    assert (out / runs[-1] / "folds.json").is_file() and not (out / runs[0] / "folds.json").exists()


# --------------------------------------------------------------------------
# diagnostics


@pytest.mark.parametrize("cmd,producer", [
    (["folds"], "lungseg ingest"),
    (["gan-train"], "lungseg ingest"),
    (["report"], "lungseg folds"),
])
def test_missing_upstream_on_empty_run(toy_root, tmp_path, cmd, producer):
    (tmp_path / "r").mkdir()
    res = CliRunner().invoke(main, ["--config", str(toy_root / "toy.json"), "--run", str(tmp_path / "r")] + cmd)
    assert res.exit_code == 1 and producer in res.output


def test_missing_upstream_artifacts_name_their_producers(toy_root, tmp_path):
    run = tmp_path / "r"
    cli(toy_root, "ingest", run=run)
    assert "lungseg folds" in cli(toy_root, "gan-train", run=run, expect=1).output
    cli(toy_root, "folds", run=run)
    assert "lungseg gan-train --fold 0" in cli(toy_root, "augment", run=run, expect=1).output
    assert "lungseg augment --fold 0" in cli(toy_root, "train", run=run, expect=1).output
    assert "lungseg train --fold 0" in cli(toy_root, "eval", run=run, expect=1).output
    assert "lungseg train --fold 0" in cli(toy_root, "infer", run=run, expect=1).output
    assert "lungseg eval" in cli(toy_root, "report", run=run, expect=1).output
    assert "fold 7" in cli(toy_root, "train", "--fold", "7", run=run, expect=1).output


def test_no_run_directory_yet(tmp_path):
    res = CliRunner().invoke(main, ["--set", f"paths.output_dir={tmp_path / 'none'}", "folds"])
    assert res.exit_code == 1 and "lungseg ingest" in res.output


def test_bad_config_is_a_diagnostic(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    res = CliRunner().invoke(main, ["--config", str(p), "--run", str(tmp_path / "r"), "folds"])
    assert res.exit_code == 1 and "not valid JSON" in res.output


# --------------------------------------------------------------------------
# pipeline


@pytest.mark.slow
def test_full_toy_pipeline(toy_root, tmp_path):
    run = tmp_path / "run"
    t0 = time.perf_counter()
    res = pipeline(toy_root, run, folds=range(5), postprocess_variants=True)
    elapsed = time.perf_counter() - t0
    assert elapsed < 600, elapsed
    assert "Error" not in res.output

    per_fold, agg = read_metrics_csv(run / "report" / "metrics.csv")
    assert len(per_fold) == 5
    for f, m in enumerate(per_fold):
        summary = json.loads((run / f"fold-{f}" / "eval.json").read_text())
        assert m.as_dict() == summary["mean"]
    doc = json.loads((run / "report" / "report.json").read_text())
    assert doc["seed"] == 3 and doc["fold_plan"]["seed"] == 3 and doc["folds"]
    assert doc["config"]["model"]["widths"] == [4, 8]
    assert len(list((run / "report" / "overlays").glob("*.png"))) == 15

    # every manifest hashes its inputs and embeds the resolved config
    names = {p.stem for p in (run / "manifests").glob("*.json")}
    assert {"ingest", "folds", "gan-train-fold-4", "augment-fold-4", "train-fold-4-run-0",
            "eval-fold-4", "eval-nopost-fold-4", "report"} <= names
    m = json.loads((run / "manifests" / "train-fold-2-run-0.json").read_text())
    assert set(m["inputs"]) == {"slices.slpk", "folds.json", "fold-2/train_augmented.slpk"}
    assert all(len(h) == 64 for h in m["inputs"].values())
    assert m["config"]["seed"] == 3

    # the small-area rule only changes slices with fewer than 30 predicted pixels
    for f in range(5):
        a = json.loads((run / f"fold-{f}" / "run-0" / "eval.json").read_text())["per_slice"]
        b = json.loads((run / f"fold-{f}" / "run-0" / "eval-nopost.json").read_text())["per_slice"]
        for ra, rb in zip(a, b):
            if rb["pred_area"] >= 30 or rb["pred_area"] == 0:
                assert ra == rb
            else:
                assert ra["pred_area"] == 0 and ra != rb

    # infer writes probability maps for the test slices
    cli(toy_root, "infer", "--fold", "1", run=run)
    probs = np.load(run / "fold-1" / "run-0" / "infer" / "infection_prob.npy")
    assert probs.shape == (3, 1, 256, 256) and 0 <= probs.min() and probs.max() <= 1


@pytest.mark.slow
def test_same_config_and_seed_give_identical_bytes(toy_root, tmp_path):
    runs = [tmp_path / "a", tmp_path / "b"]
    for r in runs:
        pipeline(toy_root, r, folds=(0, 3))
    a, b = runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.parent.name != "manifests")
    assert Path("report/report.json") in files and Path("fold-3/run-0/segnet.ckpt") in files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


@pytest.mark.slow
def test_different_seed_changes_checkpoints(toy_root, tmp_path):
    for name, seed in (("a", 3), ("b", 4)):
        run = tmp_path / name
        cli(toy_root, "--seed", str(seed), "ingest", run=run)
        cli(toy_root, "--seed", str(seed), "folds", run=run)
        cli(toy_root, "--seed", str(seed), "train", "--no-augment", run=run)
    a = (tmp_path / "a" / "fold-0" / "run-0" / "segnet.ckpt").read_bytes()
    assert a != (tmp_path / "b" / "fold-0" / "run-0" / "segnet.ckpt").read_bytes()
