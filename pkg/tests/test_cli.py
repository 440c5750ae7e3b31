"""End-to-end command-line pipeline on a small workspace."""

import json
from pathlib import Path

import numpy as np
import pytest
from filelock import FileLock

from activated_sr import cli
from activated_sr.imaging import DegradationSpec, load_png, make_pair, save_png

TOY_CONFIG = {
    "kind": "run_config",
    "degradation": {"scale": 2},
    "arch": {"preset": None, "n_resblocks": 2, "n_feats": 16},
    "train": {"total_epochs": 3, "batch_size": 8, "lr_crop": 10, "lr0": 1e-3},
    "extractor": {"epochs": 2},
    "index": {"k_store": 6},
    "adapt": {"m": 2, "k": 2, "epochs": 2, "crop": 10, "lr": 1e-3},
    "g_per": {"target_psnr": 20.0, "max_steps": 60},
}


def _write_config(ws: Path, name: str, **extra) -> Path:
    doc = json.loads(json.dumps(TOY_CONFIG))
    for key, section in extra.items():
        doc.setdefault(key, {}).update(section)
    path = ws / name
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus + extractor + index + trained baseline, built once via the CLI."""
    ws = tmp_path_factory.mktemp("cli_ws")
    assert cli.main(["make-corpus", str(ws / "corpus"), "--n", "24",
                     "--size", "32", "--seed", "3"]) == 0
    cfg_path = _write_config(ws, "toy.json")
    assert cli.main(["train-extractor", "--config", str(cfg_path)]) == 0
    assert cli.main(["build-index", "--config", str(cfg_path)]) == 0
    assert cli.main(["train", "--config", str(cfg_path)]) == 0

    from activated_sr.synth import generate_corpus

    generate_corpus(ws / "testset", 2, size=32, seed=9)
    hr_path = sorted((ws / "testset").glob("*.png"))[0]
    pair = make_pair(load_png(hr_path), DegradationSpec(scale=2), hr_path.name)
    save_png(pair.lr, ws / "lr0.png")
    return {"ws": ws, "cfg": cfg_path, "hr": hr_path, "lr": ws / "lr0.png"}


def test_init_config(tmp_path):
    path = tmp_path / "cfg.json"
    assert cli.main(["init-config", str(path)]) == 0
    doc = json.loads(path.read_text())
    assert doc["kind"] == "run_config"
    assert cli.main(["init-config", str(path)]) == 2
    assert cli.main(["init-config", str(path), "--force"]) == 0


def test_pipeline_artifacts(workspace):
    ws = workspace["ws"]
    assert (ws / "out" / "extractor.zip").exists()
    assert (ws / "out" / "index.json").exists()
    assert (ws / "out" / "scores.npz").exists()
    assert (ws / "out" / "baseline.zip").exists()
    curve = (ws / "out" / "loss_curve.csv").read_text().strip().splitlines()
    assert curve[0] == "epoch,l1_loss,lr"
    assert len(curve) == 4


def test_artifacts_embed_fingerprint(workspace):
    from activated_sr.config import load_config
    from activated_sr.features import load_extractor, load_index
    from activated_sr.model import load_checkpoint

    ws, cfg_path = workspace["ws"], workspace["cfg"]
    fp = load_config(cfg_path).fingerprint()
    assert load_extractor(ws / "out" / "extractor.zip").meta["config_fingerprint"] == fp
    assert load_index(ws / "out" / "index.json").provenance["config_fingerprint"] == fp
    assert load_checkpoint(ws / "out" / "baseline.zip").train_meta["config_fingerprint"] == fp


def test_adapt_command(workspace):
    ws = workspace["ws"]
    assert cli.main(["adapt", "--config", str(workspace["cfg"]), str(workspace["lr"]),
                     "--gt", str(workspace["hr"]), "--stem", "first"]) == 0
    trace = json.loads((ws / "out" / "first.trace.json").read_text())
    assert trace["kind"] == "adaptation_trace"
    assert trace["mode"] == "matched"
    assert len(trace["records"]) == 3
    assert all(r["psnr"] is not None for r in trace["records"])
    assert (ws / "out" / "first.initial.png").exists()
    assert (ws / "out" / "first.final.png").exists()


def test_adapt_epochs_zero_identity(workspace):
    ws = workspace["ws"]
    assert cli.main(["adapt", "--config", str(workspace["cfg"]), str(workspace["lr"]),
                     "--epochs", "0", "--stem", "noop"]) == 0
    initial = (ws / "out" / "noop.initial.png").read_bytes()
    final = (ws / "out" / "noop.final.png").read_bytes()
    assert initial == final


def test_adapt_random_set(workspace):
    ws = workspace["ws"]
    assert cli.main(["adapt", "--config", str(workspace["cfg"]), str(workspace["lr"]),
                     "--stem", "ctrl", "--random-set"]) == 0
    trace = json.loads((ws / "out" / "ctrl.random.trace.json").read_text())
    assert trace["mode"] == "random"
    assert len(trace["selected_image_ids"]) == 4


def test_adapt_byte_identical_reruns(workspace):
    # Same semantic config, separate output directory: every artifact byte
    # must match the first run's.
    ws = workspace["ws"]
    cfg2 = _write_config(ws, "toy2.json", paths={"out_dir": "out2"})
    for cfg_path, out in ((workspace["cfg"], "out"), (cfg2, "out2")):
        assert cli.main(["adapt", "--config", str(cfg_path), str(workspace["lr"]),
                         "--gt", str(workspace["hr"]), "--stem", "det"]) == 0
    for name in ("det.trace.json", "det.initial.png", "det.final.png"):
        a = (ws / "out" / name).read_bytes()
        b = (ws / "out2" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"


def test_evaluate_command(workspace):
    ws = workspace["ws"]
    assert cli.main(["evaluate", "--config", str(workspace["cfg"]),
                     str(ws / "testset"), "--max-images", "2"]) == 0
    report = json.loads((ws / "out" / "eval_report.json").read_text())
    assert report["kind"] == "eval_report"
    assert len(report["per_image"]) == 2
    row = report["per_image"][0]
    for k in ("psnr_baseline", "psnr_activated", "ssim_baseline",
              "ssim_activated", "dpsnr", "dssim"):
        assert k in row
    assert report["aggregate"]["dpsnr"] == pytest.approx(
        np.mean([r["dpsnr"] for r in report["per_image"]])
    )
    csv_lines = (ws / "out" / "eval_report.csv").read_text().strip().splitlines()
    assert csv_lines[0].startswith("id,")
    assert csv_lines[-1].startswith("mean,")
    assert (ws / "out" / "evaluate_summary.csv").exists()
    assert (ws / "out" / "delta_metrics.png").exists()


def test_analyze_filters_command(workspace):
    ws = workspace["ws"]
    assert cli.main(["analyze-filters", "--config", str(workspace["cfg"]),
                     str(ws / "testset"), "--max-images", "1"]) == 0
    doc = json.loads((ws / "out" / "correlation.json").read_text())
    assert doc["kind"] == "correlation_report"
    assert doc["correlation"] == "pearson-of-flattened-filters"
    assert len(doc["per_image"]) == 1
    head = (ws / "out" / "correlation.csv").read_text().splitlines()[0]
    assert head == "epoch,matched_mean_rho,random_mean_rho,baseline_rho,n_images,n_excluded_filters"
    assert (ws / "out" / "correlation.png").exists()


def test_input_errors_exit_2(workspace, tmp_path):
    assert cli.main(["adapt", "--config", str(tmp_path / "missing.json"),
                     str(workspace["lr"])]) == 2
    assert cli.main(["adapt", "--config", str(workspace["cfg"]),
                     str(tmp_path / "missing.png")]) == 2
    assert cli.main(["evaluate", "--config", str(workspace["cfg"]),
                     str(tmp_path / "missing_dir")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    assert cli.main(["train", "--config", str(bad)]) == 2


def test_semantic_mismatch_exits_3(workspace):
    # Same paths, different semantics: stored artifacts must be refused.
    drifted = _write_config(workspace["ws"], "drifted.json", adapt={"lr": 5e-4})
    assert cli.main(["adapt", "--config", str(drifted), str(workspace["lr"])]) == 3
    assert cli.main(["evaluate", "--config", str(drifted),
                     str(workspace["ws"] / "testset")]) == 3


def test_locked_output_exits_2(workspace, monkeypatch):
    # Shorten the acquire timeout so the test does not sit out the full 30s.
    class FastLock(FileLock):
        def acquire(self, timeout=None, **kw):
            return super().acquire(timeout=0.2, **kw)

    monkeypatch.setattr(cli, "FileLock", FastLock)
    lock = FileLock(str(workspace["ws"] / "out" / ".activated-sr.lock"))
    with lock.acquire(timeout=5):
        code = cli.main(["adapt", "--config", str(workspace["cfg"]),
                         str(workspace["lr"]), "--stem", "blocked"])
    assert code == 2


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
