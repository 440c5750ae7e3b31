"""Checkpoint container: one zip archive holding a versioned JSON descriptor
plus one ``.npy`` entry per named tensor.

The ``.npy`` format pins a documented little-endian layout; entry timestamps
are fixed so identical contents produce identical archive bytes. Used for
both SR-network checkpoints and feature-extractor weights.
"""

import io
import json
import zipfile

import numpy as np

from .errors import InputError

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_archive(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write meta + named tensors; float arrays are stored as little-endian."""
    payload = dict(meta)
    payload["format_version"] = FORMAT_VERSION
    payload["tensor_names"] = sorted(tensors)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(payload, indent=2, sort_keys=True).encode())
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            buf = io.BytesIO()
            np.save(buf, arr)
            _write_entry(zf, f"tensors/{name}.npy", buf.getvalue())


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, tensors); bit-exact round trip for the tensors."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise InputError(
                    f"{path}: unsupported archive version {meta.get('format_version')!r}"
                )
            tensors = {}
            for name in meta["tensor_names"]:
                buf = io.BytesIO(zf.read(f"tensors/{name}.npy"))
                tensors[name] = np.load(buf)
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise InputError(f"cannot read archive {path}: {exc}") from exc
    return meta, tensors
