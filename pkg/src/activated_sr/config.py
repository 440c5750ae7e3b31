"""Run configuration: one versioned JSON file drives every pipeline stage.

A config names the input/output paths and all semantic knobs (degradation,
architecture, training schedule, extractor, index, adaptation, G_per).
Its fingerprint — a hash of everything except the paths section — is
embedded in every artifact a command writes, so downstream commands can
refuse inputs produced under different settings. Relative paths resolve
against the config file's directory.
"""

import copy
import hashlib
import json
from pathlib import Path

import torch

from .adapt import AdaptationConfig
from .analysis import GPerCriterion
from .errors import CompatibilityError, InputError
from .imaging import DegradationSpec
from .model import SRArchitecture, TrainSchedule

CONFIG_FORMAT_VERSION = 1

DEFAULTS = {
    "kind": "run_config",
    "format_version": CONFIG_FORMAT_VERSION,
    "seed": 0,
    "deterministic": True,
    "paths": {
        "corpus_dir": "corpus",
        "out_dir": "out",
        "index_file": "out/index.json",
        "extractor_file": "out/extractor.zip",
        "baseline_checkpoint": "out/baseline.zip",
        "score_cache": "out/scores.npz",
    },
    "degradation": {"scale": 4, "kernel_a": -0.5, "noise_sigma": 0.0},
    # preset wins when set; clear it to use the explicit fields
    "arch": {"preset": "desk", "n_resblocks": None, "n_feats": None, "residual_scaling": 1.0},
    "train": {
        "lr0": 1e-3,
        "decay_factor": 0.1,
        "decay_every": 20,
        "total_epochs": 50,
        "batch_size": 16,
        "lr_crop": 32,
        "seed": 0,
    },
    "extractor": {"source": "desk", "tap": "conv3", "epochs": 5, "seed": 0},
    "index": {"k_store": 16, "aggregation": "mean"},
    "adapt": {
        "m": 5,
        "k": 2,
        "lr": 1e-4,
        "crop": 32,
        "epochs": 30,
        "rng_seed": 0,
        "metric_mode": "rgb",
    },
    "g_per": {"target_psnr": 45.0, "max_steps": 2000, "lr": 1e-3},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, trail: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{trail}.{key}" if trail else key
        if key not in base:
            raise InputError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise InputError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


class RunConfig:
    """Validated config document plus typed accessors for each stage."""

    def __init__(self, raw: dict, path=None):
        if raw.get("kind", "run_config") != "run_config":
            raise InputError(f"not a run config (kind={raw.get('kind')!r})")
        version = raw.get("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise CompatibilityError(
                f"config format {version} unsupported (expected {CONFIG_FORMAT_VERSION})"
            )
        self.raw = _merge(DEFAULTS, raw)
        self.path = Path(path) if path is not None else None

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def deterministic(self) -> bool:
        return bool(self.raw["deterministic"])

    def fingerprint(self) -> str:
        """Hash of all semantic sections; the paths section is excluded."""
        semantic = {k: v for k, v in self.raw.items() if k != "paths"}
        blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolve(self, path_key: str, must_exist: bool = False) -> Path:
        rel = self.raw["paths"].get(path_key)
        if rel is None:
            raise InputError(f"config paths.{path_key} is not set")
        base = self.path.parent if self.path is not None else Path(".")
        p = (base / rel).resolve()
        if must_exist and not p.exists():
            raise InputError(f"paths.{path_key} does not exist: {p}")
        return p

    def degradation(self) -> DegradationSpec:
        d = self.raw["degradation"]
        return DegradationSpec(
            scale=d["scale"], kernel_a=d["kernel_a"], noise_sigma=d["noise_sigma"]
        )

    def arch(self) -> SRArchitecture:
        a = self.raw["arch"]
        scale = self.raw["degradation"]["scale"]
        if a["preset"] is not None:
            return SRArchitecture.preset(a["preset"], scale)
        if a["n_resblocks"] is None or a["n_feats"] is None:
            raise InputError("arch needs either a preset or n_resblocks + n_feats")
        return SRArchitecture(
            n_resblocks=a["n_resblocks"],
            n_feats=a["n_feats"],
            scale=scale,
            residual_scaling=a["residual_scaling"],
        )

    def schedule(self) -> TrainSchedule:
        t = self.raw["train"]
        return TrainSchedule(
            lr0=t["lr0"],
            decay_factor=t["decay_factor"],
            decay_every=t["decay_every"],
            total_epochs=t["total_epochs"],
            batch_size=t["batch_size"],
            lr_crop=t["lr_crop"],
            seed=t["seed"],
        )

    def adaptation(self, extractor=None, **overrides) -> AdaptationConfig:
        a = dict(self.raw["adapt"])
        a.update({k: v for k, v in overrides.items() if v is not None})
        return AdaptationConfig(
            degradation=self.degradation(),
            extractor=extractor,
            corpus_dir=str(self.resolve("corpus_dir")),
            m=a["m"],
            k=a["k"],
            lr=a["lr"],
            crop=a["crop"],
            epochs=a["epochs"],
            rng_seed=a["rng_seed"],
            metric_mode=a["metric_mode"],
        )

    def g_per_criterion(self) -> GPerCriterion:
        g = self.raw["g_per"]
        return GPerCriterion(
            target_psnr=g["target_psnr"], max_steps=g["max_steps"], lr=g["lr"]
        )


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {p}: {exc}") from exc
    return RunConfig(raw, path=p)


def save_config(cfg: RunConfig | dict, path) -> None:
    raw = cfg.raw if isinstance(cfg, RunConfig) else cfg
    Path(path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")


def apply_determinism(cfg: RunConfig) -> None:
    """Single-threaded deterministic numerics for reproducible artifacts."""
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def check_fingerprint(artifact_fp: str | None, cfg: RunConfig, what: str) -> None:
    """Refuse an input artifact produced under different semantic settings."""
    if artifact_fp is None:
        raise CompatibilityError(f"{what} carries no config fingerprint")
    if artifact_fp != cfg.fingerprint():
        raise CompatibilityError(
            f"{what} was produced under a different config "
            f"({artifact_fp[:12]}… != {cfg.fingerprint()[:12]}…)"
        )
