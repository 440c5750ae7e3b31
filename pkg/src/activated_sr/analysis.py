"""Filter-correlation study: how far fine-tuning moves the network toward
a per-image ideal.

``build_g_per`` overfits a frozen-tail copy of the baseline on a single
LR/HR pair until the prediction is near-perfect (45 dB by default) — the
"ideal" network for that image. ``correlation_curve`` then tracks, per
fine-tuning epoch, the mean Pearson correlation between index-matched
filters of the adapting network and G_per, for both the filter-matched
image set and the random-set control, against the constant baseline line.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapt import AdaptationConfig, ablation_random_set, adapt
from .errors import (
    CompatibilityError,
    InputError,
    UndefinedCorrelationError,
)
from .features import ActivationIndex
from .imaging import PairedSample, psnr
from .model import (
    BODY_END_LAYER,
    ModelCheckpoint,
    _require_scale,
    _step,
    checkpoint_fingerprint,
    freeze_upsampling,
    from_module,
    to_module,
)

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FilterTensor:
    """One convolutional filter, flattened over input channels and window."""

    values: np.ndarray
    source: tuple  # (model fingerprint, layer name, filter index)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", v)
        if v.size == 0:
            raise InputError("filter tensor is empty")
        if not np.all(np.isfinite(v)):
            raise InputError(f"filter {self.source} has non-finite values")


def _as_values(f) -> np.ndarray:
    if isinstance(f, FilterTensor):
        return f.values
    return np.asarray(f, dtype=np.float64).ravel()


def filter_correlation(fi, fj) -> float:
    """Pearson correlation of two flattened filters.

    Accepts FilterTensors or plain arrays. Both filters constant is
    undefined (error); exactly one constant yields 0.0 by convention, so
    dead filters read as "no correlation" rather than aborting a layer
    average.
    """
    a, b = _as_values(fi), _as_values(fj)
    if a.size != b.size:
        raise InputError(f"filter length mismatch: {a.size} != {b.size}")
    ca, cb = a - a.mean(), b - b.mean()
    na, nb = float(np.linalg.norm(ca)), float(np.linalg.norm(cb))
    if na == 0.0 and nb == 0.0:
        raise UndefinedCorrelationError("both filters are constant")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(float(ca @ cb) / (na * nb), -1.0, 1.0))


def extract_filters(model: ModelCheckpoint, layer: str = BODY_END_LAYER) -> list[FilterTensor]:
    """Per-output-channel filters of one conv layer, flattened."""
    key = f"{layer}.weight"
    if key not in model.params:
        convs = sorted(n[: -len(".weight")] for n in model.params if n.endswith(".weight"))
        raise InputError(f"layer {layer!r} not found; conv layers: {convs}")
    w = model.params[key]
    if w.ndim != 4:
        raise InputError(f"{key} is not a conv weight (ndim={w.ndim})")
    fp = checkpoint_fingerprint(model)
    return [
        FilterTensor(w[k].astype(np.float64).ravel(), (fp, layer, k))
        for k in range(w.shape[0])
    ]


def layer_correlations(
    a: ModelCheckpoint, b: ModelCheckpoint, layer: str = BODY_END_LAYER
) -> tuple[list[float], int]:
    """Index-matched per-filter correlations plus the skipped-pair count."""
    if a.arch != b.arch:
        raise CompatibilityError(f"architecture mismatch: {a.arch} != {b.arch}")
    fa, fb = extract_filters(a, layer), extract_filters(b, layer)
    rhos, skipped = [], 0
    for fi, fj in zip(fa, fb):
        try:
            rhos.append(filter_correlation(fi, fj))
        except UndefinedCorrelationError:
            skipped += 1
    return rhos, skipped


def layer_correlation(
    a: ModelCheckpoint, b: ModelCheckpoint, layer: str = BODY_END_LAYER
) -> float:
    """Mean index-matched filter correlation of one layer."""
    rhos, skipped = layer_correlations(a, b, layer)
    if not rhos:
        raise UndefinedCorrelationError(
            f"all {skipped} filter pairs in {layer!r} are constant"
        )
    return float(np.mean(rhos))


@dataclass(frozen=True)
class GPerCriterion:
    """Stopping rule for the per-image ideal network."""

    target_psnr: float = 45.0
    max_steps: int = 2000
    lr: float = 1e-3

    def __post_init__(self):
        if self.max_steps < 0:
            raise InputError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.lr <= 0:
            raise InputError(f"lr must be > 0, got {self.lr}")


def build_g_per(
    baseline: ModelCheckpoint,
    pair: PairedSample,
    criterion: GPerCriterion | None = None,
) -> ModelCheckpoint:
    """Overfit a frozen-tail copy of the baseline on one LR/HR pair.

    Full-image L1 steps until psnr(prediction, HR) >= target or the step
    budget runs out; the checkpoint's train_meta records g_per_steps,
    g_per_psnr and which condition fired ("target" or "budget"). A pair
    whose prediction is already at target takes zero steps.
    """
    criterion = criterion or GPerCriterion()
    _require_scale(baseline.arch, [pair])
    frozen_ck = freeze_upsampling(baseline)
    net = to_module(frozen_ck)
    net.train()
    frozen = set(frozen_ck.frozen)
    for name, p in net.named_parameters():
        p.requires_grad_(name not in frozen)
    trainable = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=criterion.lr, betas=(0.9, 0.999))

    lr_b = torch.from_numpy(np.transpose(pair.lr, (2, 0, 1))).float().unsqueeze(0)
    hr_b = torch.from_numpy(np.transpose(pair.hr, (2, 0, 1))).float().unsqueeze(0)

    def current_psnr() -> float:
        with torch.no_grad():
            out = net(lr_b).clamp(0.0, 1.0)
        pred = np.transpose(out[0].double().numpy(), (1, 2, 0))
        return psnr(pred, pair.hr)

    steps = 0
    score = current_psnr()
    while score < criterion.target_psnr and steps < criterion.max_steps:
        _step(net, opt, lr_b, hr_b)
        steps += 1
        score = current_psnr()
    stop = "target" if score >= criterion.target_psnr else "budget"

    meta = dict(baseline.train_meta)
    meta.update(
        {
            "g_per_steps": steps,
            "g_per_psnr": score,
            "g_per_stop": stop,
            "g_per_target": criterion.target_psnr,
            "g_per_image": pair.id,
        }
    )
    return from_module(net, frozen_ck.frozen, meta)


@dataclass
class CorrelationReport:
    """Correlation-vs-epoch curves toward G_per, averaged over images.

    ``matched`` tracks the filter-matched adaptation, ``random`` the
    uniform-set control, ``baseline`` the constant no-fine-tuning line.
    ``per_image`` keeps each image's curves and G_per build info.
    """

    layer: str
    epochs: list[int]
    matched: list[float]
    random: list[float]
    baseline: float
    per_image: list[dict] = field(default_factory=list)
    n_excluded_filters: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    def validate(self) -> None:
        for name, curve in (("matched", self.matched), ("random", self.random)):
            if len(curve) != len(self.epochs):
                raise InputError(f"{name} curve length != epochs length")
            for r in curve:
                if not -1.0 <= r <= 1.0:
                    raise InputError(f"{name} correlation {r} outside [-1, 1]")
        if not -1.0 <= self.baseline <= 1.0:
            raise InputError(f"baseline correlation {self.baseline} outside [-1, 1]")


def correlation_curve(
    baseline: ModelCheckpoint,
    pair: PairedSample,
    index: ActivationIndex,
    cfg: AdaptationConfig,
    corpus=None,
    criterion: GPerCriterion | None = None,
    layer: str = BODY_END_LAYER,
) -> CorrelationReport:
    """Single-image correlation study: matched vs random vs baseline.

    Builds G_per once, then runs the matched adaptation and the random-set
    control with a per-epoch callback measuring layer_correlation(·, G_per).
    Epoch-0 values equal the baseline line by construction.
    """
    g_per = build_g_per(baseline, pair, criterion)
    base_rho = layer_correlation(baseline, g_per, layer)
    excluded = 0

    def tracker(acc: list):
        def on_epoch(_epoch, ck):
            nonlocal excluded
            rhos, skipped = layer_correlations(ck, g_per, layer)
            if not rhos:
                raise UndefinedCorrelationError(
                    f"all filter pairs in {layer!r} are constant"
                )
            excluded = max(excluded, skipped)
            acc.append(float(np.mean(rhos)))

        return on_epoch

    matched_curve: list[float] = []
    random_curve: list[float] = []
    matched_res = adapt(
        baseline, pair.lr, index, cfg, gt=pair.hr, epoch_callback=tracker(matched_curve)
    )
    random_res = ablation_random_set(
        baseline, pair.lr, corpus if corpus is not None else index, cfg,
        gt=pair.hr, epoch_callback=tracker(random_curve),
    )

    report = CorrelationReport(
        layer=layer,
        epochs=list(range(cfg.epochs + 1)),
        matched=matched_curve,
        random=random_curve,
        baseline=base_rho,
        per_image=[
            {
                "image_id": pair.id,
                "matched": matched_curve,
                "random": random_curve,
                "baseline": base_rho,
                "excluded": excluded,
                "g_per_steps": g_per.train_meta["g_per_steps"],
                "g_per_psnr": g_per.train_meta["g_per_psnr"],
                "g_per_stop": g_per.train_meta["g_per_stop"],
                # metric curves of the same runs, for fidelity-change studies
                "matched_psnr": matched_res.trace.psnr_curve(),
                "matched_ssim": matched_res.trace.ssim_curve(),
                "random_psnr": random_res.trace.psnr_curve(),
                "random_ssim": random_res.trace.ssim_curve(),
                "selected_image_ids": matched_res.trace.selected_image_ids,
                "random_image_ids": random_res.trace.selected_image_ids,
            }
        ],
        n_excluded_filters=excluded,
    )
    report.validate()
    return report


def aggregate_reports(reports: list[CorrelationReport]) -> CorrelationReport:
    """Mean curves over per-image reports (same layer and epoch grid)."""
    if not reports:
        raise InputError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.layer != first.layer or r.epochs != first.epochs:
            raise InputError("reports disagree on layer or epoch grid")
    per_image = [entry for r in reports for entry in r.per_image]
    matched = np.mean([e["matched"] for e in per_image], axis=0).tolist()
    random_ = np.mean([e["random"] for e in per_image], axis=0).tolist()
    baseline = float(np.mean([e["baseline"] for e in per_image]))
    report = CorrelationReport(
        layer=first.layer,
        epochs=list(first.epochs),
        matched=matched,
        random=random_,
        baseline=baseline,
        per_image=per_image,
        n_excluded_filters=sum(e.get("excluded", 0) for e in per_image),
    )
    report.validate()
    return report


def save_report(report: CorrelationReport, path) -> None:
    doc = {
        "kind": "correlation_report",
        "format_version": REPORT_FORMAT_VERSION,
        "correlation": "pearson-of-flattened-filters",
        "layer": report.layer,
        "epochs": report.epochs,
        "matched": report.matched,
        "random": report.random,
        "baseline": report.baseline,
        "per_image": report.per_image,
        "n_excluded_filters": report.n_excluded_filters,
        "provenance": report.provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_report(path) -> CorrelationReport:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {path}: {exc}") from exc
    if doc.get("kind") != "correlation_report":
        raise InputError(f"{path} is not a correlation report")
    if doc.get("format_version") != REPORT_FORMAT_VERSION:
        raise CompatibilityError(f"report format {doc.get('format_version')} unsupported")
    report = CorrelationReport(
        layer=doc["layer"],
        epochs=doc["epochs"],
        matched=doc["matched"],
        random=doc["random"],
        baseline=doc["baseline"],
        per_image=doc["per_image"],
        n_excluded_filters=doc.get("n_excluded_filters", 0),
        provenance=doc.get("provenance", {}),
    )
    report.validate()
    return report


def save_report_csv(report: CorrelationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "epoch",
                "matched_mean_rho",
                "random_mean_rho",
                "baseline_rho",
                "n_images",
                "n_excluded_filters",
            ]
        )
        for i, epoch in enumerate(report.epochs):
            writer.writerow(
                [
                    epoch,
                    report.matched[i],
                    report.random[i],
                    report.baseline,
                    report.n_images,
                    report.n_excluded_filters,
                ]
            )
