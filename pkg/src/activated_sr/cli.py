"""Command-line pipeline tying the modules together.

Verbs: init-config, make-corpus, train-extractor, build-index, train,
adapt, evaluate, analyze-filters. Every command that writes takes a lock
file in the output directory; every artifact embeds the config
fingerprint and commands refuse inputs produced under different semantic
settings. Exit codes: 0 success, 2 input error, 3 compatibility error,
4 numerical divergence.
"""

import argparse
import csv
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import analysis as analysis_mod
from . import synth
from .adapt import (
    ablation_random_set,
    adapt,
    adapt_batch,
    save_summary_csv,
    save_trace,
)
from .config import RunConfig, apply_determinism, check_fingerprint, default_config, load_config, save_config
from .errors import (
    ActivatedSRError,
    CompatibilityError,
    DivergenceError,
    InputError,
)
from .features import (
    build_index,
    load_extractor,
    load_index,
    load_vgg19,
    save_extractor,
    save_index,
    train_desk_extractor,
)
from .imaging import load_png, make_pair
from .model import build_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@contextmanager
def _output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".activated-sr.lock"))
    try:
        with lock.acquire(timeout=30):
            yield
    except Timeout:
        raise InputError(f"output directory {out_dir} is locked by another run") from None


def _load_baseline(cfg: RunConfig):
    ck = load_checkpoint(cfg.resolve("baseline_checkpoint", must_exist=True))
    check_fingerprint(ck.train_meta.get("config_fingerprint"), cfg, "baseline checkpoint")
    return ck


def _load_index_checked(cfg: RunConfig):
    idx = load_index(cfg.resolve("index_file", must_exist=True))
    check_fingerprint(idx.provenance.get("config_fingerprint"), cfg, "activation index")
    return idx


def _load_extractor_checked(cfg: RunConfig):
    ex = load_extractor(cfg.resolve("extractor_file", must_exist=True))
    check_fingerprint(ex.meta.get("config_fingerprint"), cfg, "extractor archive")
    return ex


def _testset_paths(testset_dir, limit=None) -> list[Path]:
    root = Path(testset_dir)
    if not root.is_dir():
        raise InputError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"no images found in {root}")
    return files[:limit] if limit else files


def cmd_init_config(args) -> None:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise InputError(f"{path} exists (use --force to overwrite)")
    save_config(default_config(), path)
    print(f"wrote default config to {path}")


def cmd_make_corpus(args) -> None:
    labels = synth.generate_corpus(args.out_dir, args.n, size=args.size, seed=args.seed)
    print(f"wrote {len(labels)} images ({args.size}x{args.size}) to {args.out_dir}")


def cmd_train_extractor(cfg: RunConfig) -> None:
    section = cfg.raw["extractor"]
    out_path = cfg.resolve("extractor_file")
    with _output_lock(out_path.parent):
        if section["source"] == "desk":
            corpus = cfg.resolve("corpus_dir", must_exist=True)
            ex = train_desk_extractor(
                corpus,
                epochs=section["epochs"],
                seed=section["seed"],
                tap=section["tap"],
            )
            log.info("train accuracy %.3f", ex.meta["final_train_accuracy"])
        elif section["source"] == "vgg19":
            ex = load_vgg19(tap=section["tap"])
        else:
            raise InputError(f"extractor source must be 'desk' or 'vgg19', got {section['source']!r}")
        ex.meta["config_fingerprint"] = cfg.fingerprint()
        save_extractor(ex, out_path)
    print(f"extractor ({section['source']}, tap {ex.tap}, {ex.tap_channels} channels) -> {out_path}")


def cmd_build_index(cfg: RunConfig) -> None:
    corpus = cfg.resolve("corpus_dir", must_exist=True)
    out_path = cfg.resolve("index_file")
    ex = _load_extractor_checked(cfg)
    with _output_lock(out_path.parent):
        idx = build_index(
            ex,
            corpus,
            k_store=cfg.raw["index"]["k_store"],
            aggregation=cfg.raw["index"]["aggregation"],
            cache_path=cfg.resolve("score_cache"),
            provenance={"config_fingerprint": cfg.fingerprint()},
        )
        save_index(idx, out_path)
    print(
        f"index: {len(idx.channels)} channels x {len(idx.channels[0])} entries "
        f"over {len(idx.manifest)} images ({len(idx.skipped)} skipped) -> {out_path}"
    )


def cmd_train(cfg: RunConfig, resume=None) -> None:
    corpus = cfg.resolve("corpus_dir", must_exist=True)
    out_path = cfg.resolve("baseline_checkpoint")
    spec = cfg.degradation()
    pairs = [
        make_pair(load_png(p), spec, p.name) for p in _testset_paths(corpus)
    ]
    arch = cfg.arch()
    if resume is not None:
        model = load_checkpoint(resume)
        check_fingerprint(model.train_meta.get("config_fingerprint"), cfg, "resume checkpoint")
        if model.arch != arch:
            raise CompatibilityError(f"resume arch {model.arch} != config arch {arch}")
    else:
        model = build_model(arch, cfg.raw["train"]["seed"])
    with _output_lock(out_path.parent):
        trained = train(model, pairs, cfg.schedule())
        trained.train_meta["config_fingerprint"] = cfg.fingerprint()
        save_checkpoint(trained, out_path)
        curve_path = out_path.parent / "loss_curve.csv"
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l1_loss", "lr"])
            for e, (loss, lr) in enumerate(
                zip(trained.train_meta["loss_curve"], trained.train_meta["lr_curve"])
            ):
                writer.writerow([e, loss, lr])
    print(
        f"trained {arch.n_resblocks}x{arch.n_feats} scale {arch.scale} on "
        f"{len(pairs)} pairs, final L1 {trained.train_meta['loss_curve'][-1]:.5f} -> {out_path}"
    )


def cmd_adapt(cfg: RunConfig, args) -> None:
    baseline = _load_baseline(cfg)
    index = _load_index_checked(cfg)
    out_dir = cfg.resolve("out_dir")
    lr_img = load_png(args.image)
    gt = load_png(args.gt) if args.gt else None
    stem = args.stem or Path(args.image).stem
    if args.random_set:
        acfg = cfg.adaptation(extractor=None, epochs=args.epochs)
        result = ablation_random_set(baseline, lr_img, index, acfg, gt=gt)
        stem += ".random"
    else:
        ex = _load_extractor_checked(cfg)
        index.require_extractor(ex)
        acfg = cfg.adaptation(extractor=ex, epochs=args.epochs)
        result = adapt(baseline, lr_img, index, acfg, gt=gt)
    result.trace.image_id = Path(args.image).name
    result.trace.config["config_fingerprint"] = cfg.fingerprint()
    with _output_lock(out_dir):
        trace_path = save_trace(
            result.trace, out_dir, stem, result.initial_sr, result.activated_sr
        )
    line = f"{len(result.trace.selected_image_ids)} images, {acfg.epochs} epochs"
    if gt is not None:
        line += (
            f", psnr {result.trace.records[0].psnr:.2f} -> "
            f"{result.trace.records[-1].psnr:.2f} dB"
        )
    print(f"adapted ({result.trace.mode}): {line} -> {trace_path}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    baseline = _load_baseline(cfg)
    index = _load_index_checked(cfg)
    ex = _load_extractor_checked(cfg)
    index.require_extractor(ex)
    out_dir = cfg.resolve("out_dir")
    spec = cfg.degradation()
    acfg = cfg.adaptation(extractor=ex)
    paths = _testset_paths(args.testset_dir, args.max_images)
    testset = [make_pair(load_png(p), spec, p.name) for p in paths]
    traces, summary = adapt_batch(baseline, testset, index, acfg)

    per_image = []
    for t in traces:
        r0, rn = t.records[0], t.records[-1]
        per_image.append(
            {
                "id": t.image_id,
                "psnr_baseline": r0.psnr,
                "ssim_baseline": r0.ssim,
                "psnr_activated": rn.psnr,
                "ssim_activated": rn.ssim,
                "dpsnr": rn.psnr - r0.psnr,
                "dssim": rn.ssim - r0.ssim,
            }
        )
    keys = [k for k in per_image[0] if k != "id"] if per_image else []
    aggregate = {k: float(np.mean([row[k] for row in per_image])) for k in keys}
    report = {
        "kind": "eval_report",
        "format_version": 1,
        "config_fingerprint": cfg.fingerprint(),
        "metric_mode": acfg.metric_mode,
        "epochs": acfg.epochs,
        "per_image": per_image,
        "aggregate": aggregate,
        "failures": summary["failures"],
    }
    with _output_lock(out_dir):
        (out_dir / "eval_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n"
        )
        with open(out_dir / "eval_report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id"] + keys)
            for row in per_image:
                writer.writerow([row["id"]] + [row[k] for k in keys])
            writer.writerow(["mean"] + [aggregate[k] for k in keys])
        save_summary_csv(summary, out_dir / "evaluate_summary.csv")
        _plot_delta_curves(summary, out_dir / "delta_metrics.png")
    print(
        f"evaluated {len(per_image)}/{len(testset)} images ({acfg.metric_mode}): "
        f"mean dPSNR {aggregate.get('dpsnr', float('nan')):+.3f} dB, "
        f"mean dSSIM {aggregate.get('dssim', float('nan')):+.4f} -> {out_dir}"
    )


def cmd_analyze_filters(cfg: RunConfig, args) -> None:
    baseline = _load_baseline(cfg)
    index = _load_index_checked(cfg)
    ex = _load_extractor_checked(cfg)
    index.require_extractor(ex)
    out_dir = cfg.resolve("out_dir")
    spec = cfg.degradation()
    acfg = cfg.adaptation(extractor=ex)
    criterion = cfg.g_per_criterion()
    reports = []
    for p in _testset_paths(args.testset_dir, args.max_images):
        pair = make_pair(load_png(p), spec, p.name)
        reports.append(
            analysis_mod.correlation_curve(
                baseline, pair, index, acfg, criterion=criterion
            )
        )
        log.info("correlation curve done for %s", p.name)
    agg = analysis_mod.aggregate_reports(reports)
    agg.provenance = {"config_fingerprint": cfg.fingerprint()}
    with _output_lock(out_dir):
        analysis_mod.save_report(agg, out_dir / "correlation.json")
        analysis_mod.save_report_csv(agg, out_dir / "correlation.csv")
        _plot_correlation(agg, out_dir / "correlation.png")
    print(
        f"analyzed {agg.n_images} images: final-epoch mean rho matched "
        f"{agg.matched[-1]:.4f} vs random {agg.random[-1]:.4f} "
        f"(baseline {agg.baseline:.4f}) -> {out_dir}"
    )


def _plot_delta_curves(summary: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = summary["epochs"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, mean_key, std_key, label in (
        (axes[0], "mean_dpsnr", "std_dpsnr", "dPSNR (dB)"),
        (axes[1], "mean_dssim", "std_dssim", "dSSIM"),
    ):
        mean = np.array(summary[mean_key])
        std = np.array(summary[std_key])
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.fill_between(epochs, mean - std, mean + std, alpha=0.2)
        ax.plot(epochs, mean)
        ax.set_xlabel("fine-tuning epoch")
        ax.set_ylabel(label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_correlation(report, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(report.epochs, report.matched, color="red", label="G' (matched set)")
    ax.plot(report.epochs, report.random, color="blue", label="G_rand (random set)")
    ax.axhline(report.baseline, color="black", ls=":", label="baseline G")
    ax.set_xlabel("fine-tuning epoch")
    ax.set_ylabel("mean filter correlation to G_per")
    ax.set_title(f"layer {report.layer}, {report.n_images} images")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activated-sr",
        description="Filter-matched test-time adaptation for single-image super-resolution.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default run config")
    p.add_argument("path", help="where to write the config JSON")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")

    p = sub.add_parser("make-corpus", help="synthesize a labelled texture corpus")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=800, help="number of images")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)

    for name, help_text, extra in (
        ("train-extractor", "train or fetch the feature extractor", ()),
        ("build-index", "score the corpus and build the activation index", ()),
        ("train", "train the baseline SR network", ("resume",)),
        ("adapt", "adapt to one LR image and predict", ("image",)),
        ("evaluate", "batch adaptation metrics over an HR test set", ("testset",)),
        ("analyze-filters", "correlation-to-G_per curves over a test set", ("testset",)),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run config JSON")
        if "resume" in extra:
            p.add_argument("--resume", help="continue from an existing checkpoint")
        if "image" in extra:
            p.add_argument("image", help="LR input image (PNG)")
            p.add_argument("--gt", help="ground-truth HR image for trace metrics")
            p.add_argument("--epochs", type=int, help="override adaptation epochs")
            p.add_argument("--stem", help="output file stem (default: image stem)")
            p.add_argument(
                "--random-set",
                action="store_true",
                help="use the uniformly-sampled control set instead of filter matching",
            )
        if "testset" in extra:
            p.add_argument("testset_dir", help="directory of HR test images")
            p.add_argument("--max-images", type=int, help="limit the test set size")
    return parser


def run(argv=None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "init-config":
        cmd_init_config(args)
        return
    if args.command == "make-corpus":
        cmd_make_corpus(args)
        return
    cfg = load_config(args.config)
    apply_determinism(cfg)
    if args.command == "train-extractor":
        cmd_train_extractor(cfg)
    elif args.command == "build-index":
        cmd_build_index(cfg)
    elif args.command == "train":
        cmd_train(cfg, resume=args.resume)
    elif args.command == "adapt":
        cmd_adapt(cfg, args)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args)
    elif args.command == "analyze-filters":
        cmd_analyze_filters(cfg, args)


def main(argv=None) -> int:
    try:
        run(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ActivatedSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
