"""Feature extractor, per-channel activation scoring, and the activation
index used to retrieve fine-tuning images.

The extractor is a classification network truncated at a named tap (default
``conv3``, the post-ReLU output of the third block's first convolution, 256
channels). Each corpus image gets a per-channel score (spatial mean of the
post-ReLU map); the index stores, per channel, the top ``k_store`` images
ranked by (score desc, image id asc). At adaptation time the top M channels
of the prediction's own score vector select M·K distinct corpus images.

Two extractor sources are supported: torchvision's pretrained VGG19
(``load_vgg19``) and a small from-scratch classifier trained on a labelled
texture corpus (``train_desk_extractor``) for machines without the published
weights.
"""

import dataclasses
import hashlib
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CompatibilityError, InputError
from .imaging import ImageTensor, load_png, validate_image
from .synth import read_labels
from .tensor_archive import load_archive, save_archive

log = logging.getLogger(__name__)

DEFAULT_TAP = "conv3"
DEFAULT_K_STORE = 16
AGGREGATIONS = ("mean", "max")
INDEX_FORMAT_VERSION = 1
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# ImageNet normalization used by the published VGG19 weights.
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocSpec:
    """Per-channel normalization applied before the classifier."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocSpec":
        return cls(mean=tuple(d["mean"]), std=tuple(d["std"]))


class FeatureExtractor:
    """A classifier trunk with a named activation tap.

    ``layers`` is an ordered (name, module) list; ``tap_ends[tap]`` is the
    exclusive slice index such that running modules ``[0:end]`` yields the
    post-activation map for that tap. The fingerprint binds trunk weights,
    tap and preprocessing, so an ActivationIndex can reject queries from a
    different extractor.
    """

    def __init__(
        self,
        layers: list[tuple[str, nn.Module]],
        tap_ends: dict[str, int],
        tap: str,
        preproc: PreprocSpec,
        arch_desc: dict,
        meta: dict | None = None,
    ):
        if tap not in tap_ends:
            raise InputError(f"unknown tap {tap!r}; available: {sorted(tap_ends)}")
        self.layers = layers
        self.tap_ends = dict(tap_ends)
        self.tap = tap
        self.preproc = preproc
        self.arch_desc = dict(arch_desc)
        self.meta = dict(meta or {})
        for _, mod in layers:
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)
        self._fingerprint: str | None = None

    def with_tap(self, tap: str) -> "FeatureExtractor":
        """Same weights, different tap (changes fingerprint and channels)."""
        return FeatureExtractor(
            self.layers, self.tap_ends, tap, self.preproc, self.arch_desc, self.meta
        )

    @property
    def tap_channels(self) -> int:
        for _, mod in reversed(self.layers[: self.tap_ends[self.tap]]):
            if isinstance(mod, nn.Conv2d):
                return mod.out_channels
        raise InputError(f"tap {self.tap!r} has no convolution before it")

    @property
    def min_size(self) -> int:
        """Smallest accepted spatial side: 3 input pixels per tap-level cell."""
        pools = sum(
            isinstance(mod, nn.MaxPool2d)
            for _, mod in self.layers[: self.tap_ends[self.tap]]
        )
        return 3 * 2**pools

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256()
            header = {
                "arch": self.arch_desc,
                "tap": self.tap,
                "preproc": self.preproc.to_dict(),
            }
            h.update(json.dumps(header, sort_keys=True).encode())
            state = self.state_dict()
            for name in sorted(state):
                h.update(name.encode())
                h.update(np.ascontiguousarray(state[name]).tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self.layers:
            for pname, p in _named_tensors(mod):
                out[f"{name}.{pname}"] = p.detach().numpy().copy()
        return out

    def _prepare(self, img: ImageTensor) -> torch.Tensor:
        validate_image(img)
        if img.shape[0] < self.min_size or img.shape[1] < self.min_size:
            raise InputError(
                f"image {img.shape[0]}x{img.shape[1]} below tap {self.tap!r} "
                f"minimum {self.min_size}"
            )
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if img.shape[2] != 3:
            raise InputError(f"extractor expects 1- or 3-channel images, got {img.shape[2]}")
        x = torch.from_numpy(np.transpose(img, (2, 0, 1))).float().unsqueeze(0)
        mean = torch.tensor(self.preproc.mean).view(1, 3, 1, 1)
        std = torch.tensor(self.preproc.std).view(1, 3, 1, 1)
        return (x - mean) / std

    def _tap_forward(self, batch: torch.Tensor) -> torch.Tensor:
        h = batch
        for _, mod in self.layers[: self.tap_ends[self.tap]]:
            h = mod(h)
        return h


def channel_scores(
    extractor: FeatureExtractor, img: ImageTensor, aggregation: str = "mean"
) -> np.ndarray:
    """Per-channel activation score of one image at the extractor's tap.

    The score is the spatial mean (or max) of the post-ReLU activation map,
    one value per channel. Deterministic for a fixed extractor.
    """
    if aggregation not in AGGREGATIONS:
        raise InputError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    with torch.no_grad():
        fmap = extractor._tap_forward(extractor._prepare(img))[0]
        if aggregation == "mean":
            scores = fmap.mean(dim=(1, 2))
        else:
            scores = fmap.amax(dim=(1, 2))
    return scores.double().numpy()


@dataclass(frozen=True)
class FilterSelection:
    """The top-M channels of a score vector, strictly ordered."""

    filter_ids: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.filter_ids) != len(self.scores):
            raise InputError("filter_ids and scores must have equal length")
        if len(set(self.filter_ids)) != len(self.filter_ids):
            raise InputError("duplicate filter ids in selection")
        pairs = list(zip(self.scores, self.filter_ids))
        for (s0, c0), (s1, c1) in zip(pairs, pairs[1:]):
            if s0 < s1 or (s0 == s1 and c0 >= c1):
                raise InputError("selection must be sorted by (score desc, channel asc)")


def top_m_filters(scores: np.ndarray, m: int) -> FilterSelection:
    """The M highest-scoring channels; ties broken by lower channel index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise InputError(f"scores must be a vector, got shape {scores.shape}")
    if not 0 <= m <= scores.size:
        raise InputError(f"M must be in [0, {scores.size}], got {m}")
    order = np.lexsort((np.arange(scores.size), -scores))[:m]
    return FilterSelection(
        filter_ids=tuple(int(c) for c in order),
        scores=tuple(float(scores[c]) for c in order),
    )


@dataclass(frozen=True)
class ActivationIndex:
    """Per-channel top-``k_store`` image rankings over an HR corpus.

    ``channels[c]`` is a tuple of (image_id, score) sorted by (score desc,
    id asc); every id resolves in ``manifest`` (id -> {path, sha256}).
    The index is bound to the extractor that scored it via ``fingerprint``.
    """

    extractor_fingerprint: str
    tap: str
    aggregation: str
    k_store: int
    channels: tuple[tuple[tuple[str, float], ...], ...]
    manifest: dict[str, dict]
    skipped: tuple[dict, ...] = ()
    provenance: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        for c, ranking in enumerate(self.channels):
            if len(ranking) > self.k_store:
                raise InputError(f"channel {c} ranking longer than k_store")
            for (i0, s0), (i1, s1) in zip(ranking, ranking[1:]):
                if s0 < s1 or (s0 == s1 and i0 >= i1):
                    raise InputError(f"channel {c} ranking not sorted by (score desc, id asc)")
            for img_id, _ in ranking:
                if img_id not in self.manifest:
                    raise InputError(f"image id {img_id!r} missing from manifest")

    def require_extractor(self, extractor: FeatureExtractor) -> None:
        if extractor.fingerprint != self.extractor_fingerprint:
            raise CompatibilityError(
                "index was built by a different extractor "
                f"(index {self.extractor_fingerprint[:12]}…, "
                f"query {extractor.fingerprint[:12]}…)"
            )


def _content_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_score_cache(cache_path) -> dict[str, np.ndarray]:
    if cache_path is None or not Path(cache_path).exists():
        return {}
    try:
        with np.load(cache_path) as z:
            return {k: z[k] for k in z.files}
    except Exception as exc:  # corrupt cache is re-derivable, not fatal
        log.warning("ignoring unreadable score cache %s: %s", cache_path, exc)
        return {}


def build_index(
    extractor: FeatureExtractor,
    hr_image_dir,
    k_store: int = DEFAULT_K_STORE,
    aggregation: str = "mean",
    cache_path=None,
    provenance: dict | None = None,
) -> ActivationIndex:
    """Score every image in a directory and rank them per channel.

    Unreadable images are skipped with a warning and recorded in the index.
    With ``cache_path`` set, per-image score vectors are cached by content
    hash so rebuilding only scores new or changed files. Images are scored
    one at a time through the same code path as ``channel_scores`` so a
    per-image recomputation reproduces every ranking exactly.
    """
    if aggregation not in AGGREGATIONS:
        raise InputError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    if k_store < 1:
        raise InputError(f"k_store must be >= 1, got {k_store}")
    root = Path(hr_image_dir)
    if not root.is_dir():
        raise InputError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"no images found in {root}")

    cache = _load_score_cache(cache_path)
    cache_prefix = f"{extractor.fingerprint}:{extractor.tap}:{aggregation}:"
    manifest: dict[str, dict] = {}
    skipped: list[dict] = []
    ids: list[str] = []
    score_rows: list[np.ndarray] = []

    for path in files:
        img_id = path.name
        try:
            digest = _content_hash(path)
            key = cache_prefix + digest
            if key in cache:
                row = cache[key]
            else:
                row = channel_scores(extractor, load_png(path), aggregation)
                cache[key] = row
            manifest[img_id] = {"path": path.name, "sha256": digest}
            ids.append(img_id)
            score_rows.append(row)
        except Exception as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append({"path": path.name, "reason": str(exc)})

    if not ids:
        raise InputError(f"no decodable images in {root}")
    scores = np.stack(score_rows)  # (N, C)
    if cache_path is not None:
        np.savez_compressed(cache_path, **cache)

    id_arr = np.array(ids)
    n_keep = min(k_store, len(ids))
    channels = []
    for c in range(scores.shape[1]):
        order = np.lexsort((id_arr, -scores[:, c]))[:n_keep]
        channels.append(tuple((ids[i], float(scores[i, c])) for i in order))
    return ActivationIndex(
        extractor_fingerprint=extractor.fingerprint,
        tap=extractor.tap,
        aggregation=aggregation,
        k_store=k_store,
        channels=tuple(channels),
        manifest=manifest,
        skipped=tuple(skipped),
        provenance=dict(provenance or {}),
    )


def select_adaptation_set(
    index: ActivationIndex, selection: FilterSelection, k: int
) -> list[str]:
    """Top-K images of each selected filter, deduplicated with backfill.

    Filters are visited in selection order (score desc); an image already
    taken by an earlier filter is replaced by the next-ranked image of the
    current filter. The result has M·K distinct ids unless a filter's
    stored ranking runs out first (only possible when the corpus is small
    relative to ``k_store``).
    """
    if not 1 <= k <= index.k_store:
        raise InputError(f"K must be in [1, {index.k_store}], got {k}")
    chosen: list[str] = []
    seen: set[str] = set()
    for fid in selection.filter_ids:
        if not 0 <= fid < len(index.channels):
            raise InputError(f"filter id {fid} out of range for {len(index.channels)} channels")
        taken = 0
        for img_id, _ in index.channels[fid]:
            if taken == k:
                break
            if img_id not in seen:
                seen.add(img_id)
                chosen.append(img_id)
                taken += 1
    return chosen


def save_index(index: ActivationIndex, path) -> None:
    """Versioned JSON; identical inputs produce identical file bytes."""
    doc = {
        "kind": "activation_index",
        "format_version": INDEX_FORMAT_VERSION,
        "extractor_fingerprint": index.extractor_fingerprint,
        "tap": index.tap,
        "aggregation": index.aggregation,
        "k_store": index.k_store,
        "channels": [[[i, s] for i, s in ranking] for ranking in index.channels],
        "manifest": index.manifest,
        "skipped": list(index.skipped),
        "provenance": index.provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_index(path) -> ActivationIndex:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read index {path}: {exc}") from exc
    if doc.get("kind") != "activation_index":
        raise InputError(f"{path} is not an activation index file")
    if doc.get("format_version") != INDEX_FORMAT_VERSION:
        raise CompatibilityError(
            f"index format {doc.get('format_version')} unsupported "
            f"(expected {INDEX_FORMAT_VERSION})"
        )
    return ActivationIndex(
        extractor_fingerprint=doc["extractor_fingerprint"],
        tap=doc["tap"],
        aggregation=doc["aggregation"],
        k_store=doc["k_store"],
        channels=tuple(
            tuple((i, float(s)) for i, s in ranking) for ranking in doc["channels"]
        ),
        manifest=doc["manifest"],
        skipped=tuple(doc["skipped"]),
        provenance=doc.get("provenance", {}),
    )


# --- desk classifier ---------------------------------------------------------

_DESK_ARCH_VERSION = 2


def _build_desk_trunk() -> list[tuple[str, nn.Module]]:
    """VGG-style trunk: five conv blocks with a 256-channel third block.

    Each convolution is followed by batch normalization, so channel
    activations are scaled relative to corpus statistics rather than raw
    magnitude — without it a few high-contrast channels dominate every
    ranking in the activation index.
    """
    def block(name, cin, cout):
        return [
            (f"conv{name}", nn.Conv2d(cin, cout, 3, padding=1)),
            (f"bn{name}", nn.BatchNorm2d(cout)),
            (f"relu{name}", nn.ReLU(inplace=False)),
        ]

    return [
        *block("1_1", 3, 32), *block("1_2", 32, 32),
        ("pool1", nn.MaxPool2d(2)),
        *block("2_1", 32, 64),
        ("pool2", nn.MaxPool2d(2)),
        *block("3_1", 64, 256),
        ("pool3", nn.MaxPool2d(2)),
        *block("4_1", 256, 256),
        ("pool4", nn.MaxPool2d(2)),
        *block("5_1", 256, 256),
    ]


def _tap_ends(layers: list[tuple[str, nn.Module]]) -> dict[str, int]:
    """taps conv1..conv5 = post-ReLU of each block's first convolution."""
    names = [n for n, _ in layers]
    return {f"conv{b}": names.index(f"relu{b}_1") + 1 for b in range(1, 6)}


def train_desk_extractor(
    corpus_dir,
    epochs: int = 5,
    batch_size: int = 32,
    crop: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    tap: str = DEFAULT_TAP,
) -> FeatureExtractor:
    """Train the from-scratch texture classifier and return its trunk.

    Reads ``labels.csv`` from the corpus directory; trains with random
    crops and horizontal flips (cross-entropy, Adam). Normalization stats
    are the per-channel corpus mean/std and travel with the extractor.
    """
    labels = read_labels(corpus_dir)
    classes = sorted(set(labels.values()))
    root = Path(corpus_dir)
    names = sorted(labels)
    imgs = []
    for name in names:
        img = load_png(root / f"{name}.png")
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        imgs.append(np.transpose(img, (2, 0, 1)).astype(np.float32))
    targets = np.array([classes.index(labels[n]) for n in names])

    stack = np.stack(imgs)  # (N, 3, H, W)
    mean = stack.mean(axis=(0, 2, 3))
    std = stack.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-6)
    preproc = PreprocSpec(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))

    torch.manual_seed(seed)
    layers = _build_desk_trunk()
    trunk = nn.Sequential(OrderedDict(layers))
    head = nn.Sequential(
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(256, len(classes))
    )
    net = nn.Sequential(trunk, head)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    mean_t = torch.from_numpy(mean).view(1, 3, 1, 1)
    std_t = torch.from_numpy(std).view(1, 3, 1, 1)

    n = len(imgs)
    acc = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = []
            for i in idx:
                im = imgs[i]
                h, w = im.shape[1:]
                c = min(crop, h, w)
                y, x = rng.integers(0, h - c + 1), rng.integers(0, w - c + 1)
                patch = im[:, y : y + c, x : x + c]
                if rng.random() < 0.5:
                    patch = patch[:, :, ::-1].copy()
                batch.append(patch)
            xb = (torch.from_numpy(np.stack(batch)) - mean_t) / std_t
            yb = torch.from_numpy(targets[idx])
            opt.zero_grad()
            logits = net(xb)
            loss = nn.functional.cross_entropy(logits, yb)
            loss.backward()
            opt.step()
            correct += int((logits.argmax(dim=1) == yb).sum())
        acc = correct / n
    meta = {
        "source": "desk",
        "classes": classes,
        "epochs": epochs,
        "seed": seed,
        "final_train_accuracy": acc,
    }
    return FeatureExtractor(
        layers, _tap_ends(layers), tap, preproc,
        {"family": "desk", "version": _DESK_ARCH_VERSION}, meta,
    )


def load_vgg19(tap: str = DEFAULT_TAP) -> FeatureExtractor:
    """Pretrained VGG19 trunk from torchvision (needs the published weights)."""
    try:
        from torchvision.models import VGG19_Weights, vgg19
    except ImportError as exc:
        raise InputError("torchvision is required for the VGG19 extractor") from exc
    try:
        net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise InputError(f"cannot load VGG19 weights: {exc}") from exc
    return _wrap_vgg(net.features, tap)


def _wrap_vgg(features: nn.Sequential, tap: str) -> FeatureExtractor:
    layers = []
    block, conv_in_block = 1, 0
    tap_ends = {}
    for mod in features:
        if isinstance(mod, nn.Conv2d):
            conv_in_block += 1
            layers.append((f"conv{block}_{conv_in_block}", mod))
        elif isinstance(mod, nn.ReLU):
            layers.append((f"relu{block}_{conv_in_block}", nn.ReLU(inplace=False)))
            if conv_in_block == 1:
                tap_ends[f"conv{block}"] = len(layers)
        elif isinstance(mod, nn.MaxPool2d):
            layers.append((f"pool{block}", mod))
            block, conv_in_block = block + 1, 0
        else:
            raise InputError(f"unexpected VGG layer {type(mod).__name__}")
    preproc = PreprocSpec(mean=_IMAGENET_MEAN, std=_IMAGENET_STD)
    return FeatureExtractor(
        layers, tap_ends, tap, preproc, {"family": "vgg19", "version": 1},
        {"source": "torchvision"},
    )


def save_extractor(extractor: FeatureExtractor, path) -> None:
    meta = {
        "kind": "feature_extractor",
        "arch": extractor.arch_desc,
        "tap": extractor.tap,
        "preproc": extractor.preproc.to_dict(),
        "extra": extractor.meta,
    }
    save_archive(path, meta, extractor.state_dict())


def load_extractor(path) -> FeatureExtractor:
    meta, tensors = load_archive(path)
    if meta.get("kind") != "feature_extractor":
        raise InputError(f"{path} is not a feature-extractor archive")
    family = meta["arch"].get("family")
    if family == "desk":
        layers = _build_desk_trunk()
    elif family == "vgg19":
        try:
            from torchvision.models import vgg19
        except ImportError as exc:
            raise InputError("torchvision is required to load a VGG19 archive") from exc
        return _load_vgg_archive(vgg19(weights=None).features, meta, tensors)
    else:
        raise CompatibilityError(f"unknown extractor family {family!r}")
    _load_weights(layers, tensors)
    return FeatureExtractor(
        layers, _tap_ends(layers), meta["tap"],
        PreprocSpec.from_dict(meta["preproc"]), meta["arch"], meta.get("extra", {}),
    )


def _load_vgg_archive(features, meta, tensors) -> FeatureExtractor:
    ex = _wrap_vgg(features, meta["tap"])
    _load_weights(ex.layers, tensors)
    return FeatureExtractor(
        ex.layers, ex.tap_ends, meta["tap"],
        PreprocSpec.from_dict(meta["preproc"]), meta["arch"], meta.get("extra", {}),
    )


def _named_tensors(mod: nn.Module):
    """Parameters plus behavior-bearing buffers (normalization statistics)."""
    yield from mod.named_parameters()
    for bname, buf in mod.named_buffers():
        if not bname.endswith("num_batches_tracked"):
            yield bname, buf


def _load_weights(layers: list[tuple[str, nn.Module]], tensors: dict[str, np.ndarray]) -> None:
    expected = {
        f"{name}.{pname}"
        for name, mod in layers
        for pname, _ in _named_tensors(mod)
    }
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise CompatibilityError(
            f"archive parameters do not match architecture (missing {missing}, extra {extra})"
        )
    with torch.no_grad():
        for name, mod in layers:
            for pname, p in _named_tensors(mod):
                arr = tensors[f"{name}.{pname}"]
                if tuple(p.shape) != arr.shape:
                    raise CompatibilityError(
                        f"parameter {name}.{pname} shape {arr.shape} != {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)))
