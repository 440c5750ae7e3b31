"""Procedural texture corpus for desk-scale runs.

Eight visually distinct texture families with continuously varying
parameters. Each family keeps a characteristic two-color palette (with
per-image jitter) and band-limited structure, so downsampled copies retain
enough information to super-resolve while activation-based retrieval and the
desk-scale feature extractor have real family structure to find. The family
label doubles as the class target when training the extractor.
"""

import csv
from pathlib import Path

import numpy as np

from .imaging import save_png

FAMILIES = (
    "stripes",
    "checks",
    "dots",
    "rings",
    "plasma",
    "cells",
    "wood",
    "ramp",
)

# Hues spaced 45-55 degrees apart so color separates the families as
# clearly as geometry does.
_PALETTES = {
    "stripes": ((0.07, 0.09, 0.35), (0.46, 0.50, 0.92)),
    "checks": ((0.35, 0.07, 0.07), (0.92, 0.46, 0.46)),
    "dots": ((0.07, 0.35, 0.16), (0.46, 0.92, 0.61)),
    "rings": ((0.30, 0.07, 0.35), (0.84, 0.46, 0.92)),
    "plasma": ((0.07, 0.30, 0.35), (0.46, 0.84, 0.92)),
    "cells": ((0.26, 0.35, 0.07), (0.77, 0.92, 0.46)),
    "wood": ((0.35, 0.28, 0.07), (0.92, 0.81, 0.46)),
    "ramp": ((0.35, 0.07, 0.19), (0.92, 0.46, 0.65)),
}


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    return y, x


def _colorize(field, family, rng):
    """Map a scalar field in [0,1] to RGB around the family palette."""
    base0, base1 = _PALETTES[family]
    c0 = np.clip(np.asarray(base0) + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
    c1 = np.clip(np.asarray(base1) + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
    img = c0[None, None, :] + field[:, :, None] * (c1 - c0)[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _soft(field, sharp):
    """Smooth threshold keeping edges band-limited enough to super-resolve."""
    return 0.5 + 0.5 * np.tanh(sharp * field)


def _stripes(size, rng):
    y, x = _grid(size)
    theta = rng.uniform(0, np.pi / 6)
    freq = rng.uniform(4.5, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * x + np.sin(theta) * y
    return _soft(np.sin(2 * np.pi * freq * t + phase), rng.uniform(1.6, 2.2))

def _checks(size, rng):
    y, x = _grid(size)
    fx, fy = rng.uniform(4.5, 6.0, 2)
    px, py = rng.uniform(0, 2 * np.pi, 2)
    f = np.sin(2 * np.pi * fx * x + px) * np.sin(2 * np.pi * fy * y + py)
    return _soft(f, rng.uniform(1.8, 2.4))

def _dots(size, rng):
    y, x = _grid(size)
    f = rng.uniform(4.5, 5.5)
    px, py = rng.uniform(0, 2 * np.pi, 2)
    d = np.cos(2 * np.pi * f * x + px) + np.cos(2 * np.pi * f * y + py)
    return _soft(d - rng.uniform(0.5, 0.8), rng.uniform(1.8, 2.4))

def _rings(size, rng):
    y, x = _grid(size)
    cy, cx = rng.uniform(0.3, 0.7, 2)
    r = np.hypot(y - cy, x - cx)
    freq = rng.uniform(3.5, 5.0)
    return _soft(np.sin(2 * np.pi * freq * r + rng.uniform(0, 2 * np.pi)), rng.uniform(1.4, 2.0))

def _plasma(size, rng):
    y, x = _grid(size)
    field = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(3.0, 4.5, 2) * rng.choice([-1, 1], 2)
        ph = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.6, 1.0) * np.sin(2 * np.pi * (fy * y + fx * x) + ph)
    field -= field.min()
    return field / max(field.max(), 1e-9)

def _cells(size, rng):
    y, x = _grid(size)
    n = rng.integers(10, 14)
    seeds = rng.uniform(0, 1, (n, 2))
    dist = np.hypot(
        y[:, :, None] - seeds[None, None, :, 0], x[:, :, None] - seeds[None, None, :, 1]
    )
    dist.sort(axis=2)
    body = 1.0 - dist[:, :, 0] / max(dist[:, :, 0].max(), 1e-9)
    walls = _soft(dist[:, :, 1] - dist[:, :, 0] - rng.uniform(0.03, 0.05),
                  rng.uniform(11.0, 14.0))
    return np.clip(0.35 * body + 0.65 * walls, 0.0, 1.0)

def _wood(size, rng):
    y, x = _grid(size)
    warp = rng.uniform(0.15, 0.22) * np.sin(
        2 * np.pi * rng.uniform(1.5, 2.5) * x + rng.uniform(0, 2 * np.pi)
    )
    freq = rng.uniform(4.5, 6.0)
    return _soft(np.sin(2 * np.pi * freq * (y + warp)), rng.uniform(1.6, 2.1))

def _ramp(size, rng):
    # Terraced gradient: level-set bands in an orientation slot the other
    # line-like families do not use.
    y, x = _grid(size)
    theta = rng.uniform(2.27, 2.62)
    t = np.cos(theta) * x + np.sin(theta) * y
    t -= t.min()
    t /= max(t.max(), 1e-9)
    terrace = 0.22 * np.tanh(2.2 * np.sin(2 * np.pi * rng.uniform(5.5, 6.5) * t))
    return np.clip(t + terrace, 0.0, 1.0)


_GENERATORS = {
    "stripes": _stripes,
    "checks": _checks,
    "dots": _dots,
    "rings": _rings,
    "plasma": _plasma,
    "cells": _cells,
    "wood": _wood,
    "ramp": _ramp,
}


def make_texture(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One RGB texture of the given family; deterministic given the rng state."""
    field = _GENERATORS[family](size, rng)
    return _colorize(field, family, rng)


def generate_corpus(out_dir, n_images: int, size: int = 64, seed: int = 0) -> list[tuple[str, str]]:
    """Write ``n_images`` PNGs cycling through the families.

    Files are named ``tex_<index>_<family>.png``; a ``labels.csv`` with
    (id, family) rows is written alongside. Per-image RNG is derived from
    (seed, index), so any subset regenerates identically.

    Returns:
        List of (image_id, family) in generation order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = []
    for i in range(n_images):
        family = FAMILIES[i % len(FAMILIES)]
        rng = np.random.default_rng([seed, i])
        img = make_texture(family, size, rng)
        image_id = f"tex_{i:04d}_{family}"
        save_png(img, out_dir / f"{image_id}.png")
        labels.append((image_id, family))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "family"])
        writer.writerows(labels)
    return labels


def read_labels(corpus_dir) -> dict[str, str]:
    """Load the id -> family map written by generate_corpus."""
    path = Path(corpus_dir) / "labels.csv"
    with open(path, newline="") as fh:
        return {row["id"]: row["family"] for row in csv.DictReader(fh)}
