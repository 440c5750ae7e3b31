"""Test-time adaptation: initial prediction, filter-matched image selection,
constrained fine-tuning, final prediction.

``adapt`` runs the three-step loop for one LR image: predict with the
baseline, score the prediction's channels to select M·K corpus images that
maximally activate the same filters, fine-tune a frozen-tail copy of the
baseline on those images, and predict again. A per-epoch trace records
PSNR/SSIM against ground truth (when given) and the checkpoint fingerprint,
with epoch 0 being the untouched baseline. ``ablation_random_set`` is the
control: same loop, uniformly sampled images.
"""

import csv
import hashlib
import json
import logging
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ActivatedSRError, CompatibilityError, InputError
from .features import (
    ActivationIndex,
    FeatureExtractor,
    channel_scores,
    select_adaptation_set,
    top_m_filters,
)
from .imaging import (
    DegradationSpec,
    ImageTensor,
    PairedSample,
    load_png,
    make_pair,
    psnr,
    save_png,
    ssim,
    validate_image,
)
from .model import (
    ModelCheckpoint,
    checkpoint_fingerprint,
    fine_tune,
    freeze_upsampling,
    predict,
)

log = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class AdaptationConfig:
    """Knobs for one adaptation run.

    ``crop`` is in LR space. ``epochs`` may be 0, which makes the whole
    run the identity on predictions (the epochs>=1 reading would forbid
    the documented identity case). The extractor is required by ``adapt``
    but not by the random-set control.
    """

    degradation: DegradationSpec
    extractor: FeatureExtractor | None = None
    corpus_dir: str | None = None
    m: int = 5
    k: int = 2
    lr: float = 1e-4
    crop: int = 32
    epochs: int = 30
    rng_seed: int = 0
    metric_mode: str = "rgb"

    def __post_init__(self):
        if self.m * self.k < 1:
            raise InputError(f"M*K must be >= 1, got M={self.m} K={self.k}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.crop < 1:
            raise InputError(f"crop must be >= 1, got {self.crop}")
        if self.lr <= 0:
            raise InputError(f"lr must be > 0, got {self.lr}")
        if self.metric_mode not in ("rgb", "luma"):
            raise InputError(f"metric_mode must be 'rgb' or 'luma', got {self.metric_mode!r}")

    def summary(self) -> dict:
        return {
            "scale": self.degradation.scale,
            "noise_sigma": self.degradation.noise_sigma,
            "m": self.m,
            "k": self.k,
            "lr": self.lr,
            "crop": self.crop,
            "epochs": self.epochs,
            "rng_seed": self.rng_seed,
            "metric_mode": self.metric_mode,
        }


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    psnr: float | None
    ssim: float | None
    fingerprint: str


@dataclass
class AdaptationTrace:
    """Per-epoch log of one adaptation; record 0 is the baseline."""

    records: list[TraceRecord]
    selected_image_ids: list[str]
    mode: str  # "matched" or "random"
    config: dict
    image_id: str | None = None
    initial_path: str | None = None
    final_path: str | None = None

    def validate(self) -> None:
        expected = self.config.get("epochs", len(self.records) - 1) + 1
        if len(self.records) != expected:
            raise InputError(
                f"trace has {len(self.records)} records, expected epochs+1={expected}"
            )

    def psnr_curve(self) -> list[float | None]:
        return [r.psnr for r in self.records]

    def ssim_curve(self) -> list[float | None]:
        return [r.ssim for r in self.records]


AdaptResult = namedtuple("AdaptResult", ["model", "initial_sr", "activated_sr", "trace"])


def _materialize_pairs(
    index: ActivationIndex, ids: list[str], corpus_dir, spec: DegradationSpec
) -> list[PairedSample]:
    if corpus_dir is None:
        raise InputError("corpus_dir is required to materialize selected images")
    root = Path(corpus_dir)
    pairs = []
    for img_id in ids:
        entry = index.manifest.get(img_id)
        if entry is None:
            raise InputError(f"selected id {img_id!r} not in index manifest")
        path = root / entry["path"]
        if hashlib.sha256(path.read_bytes()).hexdigest() != entry["sha256"]:
            raise CompatibilityError(
                f"corpus file {path.name} changed since the index was built"
            )
        pairs.append(make_pair(load_png(path), spec, img_id))
    return pairs


def _run_fine_tune(
    baseline: ModelCheckpoint,
    pairs: list[PairedSample],
    cfg: AdaptationConfig,
    lr_img: ImageTensor,
    gt: ImageTensor | None,
    epoch_callback=None,
) -> tuple[ModelCheckpoint, list[TraceRecord]]:
    records: list[TraceRecord] = []

    def on_epoch(epoch: int, ck: ModelCheckpoint) -> None:
        p = s = None
        if gt is not None:
            pred = predict(ck, lr_img)
            p = psnr(pred, gt, cfg.metric_mode)
            s = ssim(pred, gt, cfg.metric_mode)
        records.append(TraceRecord(epoch, p, s, checkpoint_fingerprint(ck)))
        if epoch_callback is not None:
            epoch_callback(epoch, ck)

    adapted = fine_tune(freeze_upsampling(baseline), pairs, cfg, epoch_callback=on_epoch)
    return adapted, records


def adapt(
    baseline: ModelCheckpoint,
    lr_img: ImageTensor,
    index: ActivationIndex,
    cfg: AdaptationConfig,
    gt: ImageTensor | None = None,
    epoch_callback=None,
) -> AdaptResult:
    """Adapt the baseline to one LR image via its top-activated filters.

    The baseline checkpoint is never mutated; fine-tuning operates on a
    copy with the up-sampling tail frozen. Ground truth, when provided,
    only feeds the trace metrics.
    """
    validate_image(lr_img)
    if cfg.extractor is None:
        raise InputError("adapt requires cfg.extractor")
    index.require_extractor(cfg.extractor)
    if baseline.arch.scale != cfg.degradation.scale:
        raise CompatibilityError(
            f"model scale {baseline.arch.scale} != degradation scale {cfg.degradation.scale}"
        )
    initial = predict(baseline, lr_img)
    scores = channel_scores(cfg.extractor, initial, index.aggregation)
    selection = top_m_filters(scores, cfg.m)
    ids = select_adaptation_set(index, selection, cfg.k)
    pairs = _materialize_pairs(index, ids, cfg.corpus_dir, cfg.degradation)
    adapted, records = _run_fine_tune(baseline, pairs, cfg, lr_img, gt, epoch_callback)
    activated = predict(adapted, lr_img)
    trace = AdaptationTrace(
        records=records,
        selected_image_ids=list(ids),
        mode="matched",
        config=cfg.summary(),
    )
    trace.validate()
    return AdaptResult(adapted, initial, activated, trace)


def ablation_random_set(
    baseline: ModelCheckpoint,
    lr_img: ImageTensor,
    corpus,
    cfg: AdaptationConfig,
    gt: ImageTensor | None = None,
    epoch_callback=None,
) -> AdaptResult:
    """Control run: M·K images sampled uniformly without replacement.

    ``corpus`` is an ActivationIndex (sampling its manifest, with content
    verification) or a directory of images. No extractor is needed.
    """
    validate_image(lr_img)
    if baseline.arch.scale != cfg.degradation.scale:
        raise CompatibilityError(
            f"model scale {baseline.arch.scale} != degradation scale {cfg.degradation.scale}"
        )
    n = cfg.m * cfg.k
    rng = np.random.default_rng(cfg.rng_seed)
    if isinstance(corpus, ActivationIndex):
        ids = sorted(corpus.manifest)
        if len(ids) < n:
            raise InputError(f"corpus has {len(ids)} images, need {n}")
        picked = [ids[i] for i in rng.choice(len(ids), size=n, replace=False)]
        pairs = _materialize_pairs(corpus, picked, cfg.corpus_dir, cfg.degradation)
    else:
        root = Path(corpus)
        files = sorted(
            p for p in root.iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if len(files) < n:
            raise InputError(f"corpus has {len(files)} images, need {n}")
        chosen = [files[i] for i in rng.choice(len(files), size=n, replace=False)]
        picked = [p.name for p in chosen]
        pairs = [make_pair(load_png(p), cfg.degradation, p.name) for p in chosen]
    initial = predict(baseline, lr_img)
    adapted, records = _run_fine_tune(baseline, pairs, cfg, lr_img, gt, epoch_callback)
    activated = predict(adapted, lr_img)
    trace = AdaptationTrace(
        records=records,
        selected_image_ids=picked,
        mode="random",
        config=cfg.summary(),
    )
    trace.validate()
    return AdaptResult(adapted, initial, activated, trace)


def adapt_batch(
    baseline: ModelCheckpoint,
    testset: list[PairedSample],
    index: ActivationIndex,
    cfg: AdaptationConfig,
) -> tuple[list[AdaptationTrace], dict]:
    """Independent per-image adaptations plus a Δ-metric summary.

    Each image starts from a pristine baseline copy; failures are recorded
    in the summary and do not abort the batch. The summary holds, per
    epoch, mean and population σ of PSNR/SSIM change relative to epoch 0
    across the images that succeeded.
    """
    if not testset:
        raise InputError("adapt_batch requires a nonempty testset")
    traces: list[AdaptationTrace] = []
    failures: list[dict] = []
    for pair in testset:
        try:
            res = adapt(baseline, pair.lr, index, cfg, gt=pair.hr)
            res.trace.image_id = pair.id
            traces.append(res.trace)
        except ActivatedSRError as exc:
            log.warning("adaptation failed for %s: %s", pair.id, exc)
            failures.append({"id": pair.id, "error": str(exc)})
    summary = summarize_traces(traces, failures)
    return traces, summary


def summarize_traces(traces: list[AdaptationTrace], failures=()) -> dict:
    summary = {"n_images": len(traces), "failures": list(failures)}
    if not traces:
        return summary
    n_epochs = len(traces[0].records)
    for t in traces:
        if len(t.records) != n_epochs:
            raise InputError("traces disagree on epoch count")
    dpsnr = np.array(
        [[r.psnr - t.records[0].psnr for r in t.records] for t in traces]
    )
    dssim = np.array(
        [[r.ssim - t.records[0].ssim for r in t.records] for t in traces]
    )
    summary.update(
        {
            "epochs": list(range(n_epochs)),
            "mean_dpsnr": dpsnr.mean(axis=0).tolist(),
            "std_dpsnr": dpsnr.std(axis=0).tolist(),
            "mean_dssim": dssim.mean(axis=0).tolist(),
            "std_dssim": dssim.std(axis=0).tolist(),
        }
    )
    return summary


def save_trace(
    trace: AdaptationTrace,
    out_dir,
    stem: str,
    initial_sr: ImageTensor | None = None,
    activated_sr: ImageTensor | None = None,
) -> Path:
    """Persist a trace as JSON plus optional prediction snapshots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if initial_sr is not None:
        trace.initial_path = f"{stem}.initial.png"
        save_png(initial_sr, out / trace.initial_path)
    if activated_sr is not None:
        trace.final_path = f"{stem}.final.png"
        save_png(activated_sr, out / trace.final_path)
    doc = {
        "kind": "adaptation_trace",
        "format_version": TRACE_FORMAT_VERSION,
        "mode": trace.mode,
        "image_id": trace.image_id,
        "config": trace.config,
        "selected_image_ids": trace.selected_image_ids,
        "records": [
            {"epoch": r.epoch, "psnr": r.psnr, "ssim": r.ssim, "fingerprint": r.fingerprint}
            for r in trace.records
        ],
        "initial_path": trace.initial_path,
        "final_path": trace.final_path,
    }
    path = out / f"{stem}.trace.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_trace(path) -> AdaptationTrace:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read trace {path}: {exc}") from exc
    if doc.get("kind") != "adaptation_trace":
        raise InputError(f"{path} is not an adaptation trace")
    if doc.get("format_version") != TRACE_FORMAT_VERSION:
        raise CompatibilityError(f"trace format {doc.get('format_version')} unsupported")
    trace = AdaptationTrace(
        records=[
            TraceRecord(r["epoch"], r["psnr"], r["ssim"], r["fingerprint"])
            for r in doc["records"]
        ],
        selected_image_ids=doc["selected_image_ids"],
        mode=doc["mode"],
        config=doc["config"],
        image_id=doc.get("image_id"),
        initial_path=doc.get("initial_path"),
        final_path=doc.get("final_path"),
    )
    trace.validate()
    return trace


def save_summary_csv(summary: dict, path) -> None:
    """CSV of per-epoch mean/σ metric changes across a test set."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_dpsnr", "std_dpsnr", "mean_dssim", "std_dssim"])
        for i, epoch in enumerate(summary.get("epochs", [])):
            writer.writerow(
                [
                    epoch,
                    summary["mean_dpsnr"][i],
                    summary["std_dpsnr"][i],
                    summary["mean_dssim"][i],
                    summary["std_dssim"][i],
                ]
            )
