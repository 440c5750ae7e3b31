"""Desk-scale artifact suite shared by the slower end-to-end tests.

Building the corpus, extractor, index, baseline model and the ten
per-image adaptation studies takes tens of minutes, so everything is
cached under tests/_desk_cache/<fingerprint>/ and rebuilt only when the
suite recipe below changes.
"""

import dataclasses
import hashlib
import json
from pathlib import Path

import activated_sr.adapt as adapt_mod
import activated_sr.analysis as analysis_mod
import activated_sr.features as features_mod
import activated_sr.model as model_mod
from activated_sr.imaging import DegradationSpec, load_png, make_pair
from activated_sr.model import SRArchitecture, TrainSchedule
from activated_sr.synth import generate_corpus

# Bump textures_rev whenever the procedural texture generators change;
# cached artifacts depend on them. The extractor architecture version is
# folded in for the same reason.
SUITE = {
    "textures_rev": 4,
    "extractor_arch": features_mod._DESK_ARCH_VERSION,
    "scale": 4,
    "corpus": {"n": 800, "size": 64, "seed": 0},
    "test": {"n": 10, "size": 64, "seed": 1},
    "extractor": {"epochs": 8, "seed": 0},
    "index": {"k_store": 16},
    "schedule": {
        "lr0": 1e-3, "decay_factor": 0.1, "decay_every": 20,
        "total_epochs": 50, "batch_size": 16, "lr_crop": 12, "seed": 0,
    },
    "adapt": {"m": 5, "k": 2, "lr": 1e-4, "crop": 12, "epochs": 30},
}


def suite_fingerprint() -> str:
    return hashlib.sha256(json.dumps(SUITE, sort_keys=True).encode()).hexdigest()[:16]


def suite_dir(tests_root: Path) -> Path:
    return tests_root / "_desk_cache" / suite_fingerprint()


def build_suite(root: Path) -> None:
    """Create every suite artifact under ``root`` (idempotent per step)."""
    root.mkdir(parents=True, exist_ok=True)
    corpus, test = root / "corpus", root / "test"
    spec = DegradationSpec(scale=SUITE["scale"])

    if not (corpus / "labels.csv").exists():
        generate_corpus(corpus, SUITE["corpus"]["n"], size=SUITE["corpus"]["size"],
                        seed=SUITE["corpus"]["seed"])
    if not (test / "labels.csv").exists():
        generate_corpus(test, SUITE["test"]["n"], size=SUITE["test"]["size"],
                        seed=SUITE["test"]["seed"])

    ex_path = root / "extractor.zip"
    if not ex_path.exists():
        ex = features_mod.train_desk_extractor(corpus, epochs=SUITE["extractor"]["epochs"],
                                               seed=SUITE["extractor"]["seed"])
        features_mod.save_extractor(ex, ex_path)
    extractor = features_mod.load_extractor(ex_path)

    index_path = root / "index.json"
    if not index_path.exists():
        idx = features_mod.build_index(extractor, corpus, k_store=SUITE["index"]["k_store"],
                                       cache_path=root / "scores.npz")
        features_mod.save_index(idx, index_path)
    index = features_mod.load_index(index_path)

    baseline_path = root / "baseline.zip"
    if not baseline_path.exists():
        arch = SRArchitecture.preset("desk", SUITE["scale"])
        sched = TrainSchedule(**SUITE["schedule"])
        pairs = [make_pair(load_png(p), spec, p.name) for p in sorted(corpus.glob("*.png"))]
        baseline = model_mod.train(model_mod.build_model(arch, 0), pairs, sched)
        model_mod.save_checkpoint(baseline, baseline_path)
    baseline = model_mod.load_checkpoint(baseline_path)

    report_path = root / "correlation.json"
    if not report_path.exists():
        acfg = adapt_mod.AdaptationConfig(degradation=spec, extractor=extractor,
                                          corpus_dir=str(corpus), **SUITE["adapt"])
        test_pairs = [make_pair(load_png(p), spec, p.name) for p in sorted(test.glob("*.png"))]
        reports = []
        for i, pair in enumerate(test_pairs):
            cfg_i = dataclasses.replace(acfg, rng_seed=i)
            reports.append(analysis_mod.correlation_curve(baseline, pair, index, cfg_i))
        analysis_mod.save_report(analysis_mod.aggregate_reports(reports), report_path)


def ensure_suite(tests_root: Path) -> Path:
    """Return the cached suite dir, building whatever is missing."""
    root = suite_dir(tests_root)
    build_suite(root)
    return root
