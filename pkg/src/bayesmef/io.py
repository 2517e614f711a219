"""On-disk stack bundles, fused-image files and 16-bit graymap previews.

A bundle is a directory holding ``manifest.json`` and raw little-endian,
row-major arrays: counts as ``<u4``, real images as ``<f8``. The manifest
lists, per measurement, the count file, the acquisition time and the dark
level, which is either a number (constant background) or the name of a
``<f8`` image file. An optional ``truth`` entry names a ground-truth image.

Every file is written to a temporary name and renamed into place; the
manifest goes last, so a reader never sees a half-written bundle.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .stack import ExposureStack, StackError, check_stack

__all__ = [
    "BundleError",
    "Bundle",
    "MANIFEST_NAME",
    "save_bundle",
    "load_bundle",
    "save_image",
    "load_image",
    "render_levels",
    "write_pgm",
    "read_pgm",
    "atomic_write_bytes",
    "atomic_write_text",
]

MANIFEST_NAME = "manifest.json"
BUNDLE_VERSION = 1
COUNT_DTYPE = np.dtype("<u4")
REAL_DTYPE = np.dtype("<f8")


class BundleError(StackError):
    """Malformed or unreadable bundle; the message names the file."""


@dataclass
class Bundle:
    stack: ExposureStack
    truth: Optional[np.ndarray] = None
    path: Optional[Path] = None
    name: str = ""


def atomic_write_bytes(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _count_bytes(counts):
    counts = np.asarray(counts)
    if not np.issubdtype(counts.dtype, np.integer):
        if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
            raise BundleError("counts must be integers to be stored in a bundle")
    if counts.size and (counts.min() < 0 or counts.max() > np.iinfo(COUNT_DTYPE).max):
        raise BundleError("counts do not fit in unsigned 32-bit")
    return np.ascontiguousarray(counts, dtype=COUNT_DTYPE).tobytes()


def _real_bytes(image):
    return np.ascontiguousarray(image, dtype=REAL_DTYPE).tobytes()


def save_bundle(path, stack, truth=None):
    """Write ``stack`` (and optional ground truth) as a bundle directory.

    Backgrounds that are constant over a measurement are stored as a number
    in the manifest, others as an image file.
    """
    check_stack(stack)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = stack.shape
    entries = []
    for i in range(stack.n_measurements):
        name = f"counts_{i:03d}.u32"
        atomic_write_bytes(path / name, _count_bytes(stack.counts[i]))
        bg = stack.background[i]
        if np.all(bg == bg.flat[0]):
            dark = float(bg.flat[0])
        else:
            dark = f"dark_{i:03d}.f64"
            atomic_write_bytes(path / dark, _real_bytes(bg))
        entries.append({"file": name, "t": float(stack.times[i]), "dark": dark})
    manifest = {
        "version": BUNDLE_VERSION,
        "height": int(h),
        "width": int(w),
        "n_max": int(stack.n_max),
        "measurements": entries,
    }
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        if truth.shape != (h, w):
            raise BundleError(f"truth shape {truth.shape} != image shape {(h, w)}")
        atomic_write_bytes(path / "truth.f64", _real_bytes(truth))
        manifest["truth"] = "truth.f64"
    atomic_write_text(path / MANIFEST_NAME, json.dumps(manifest, indent=2) + "\n")
    return path


def _read_raw(directory, name, dtype, shape):
    file = Path(directory) / name
    try:
        data = file.read_bytes()
    except OSError as exc:
        raise BundleError(f"{file}: cannot read ({exc.strerror or exc})") from None
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected:
        where = min(len(data), expected)
        raise BundleError(
            f"{file}: expected {expected} bytes for shape {shape}, found {len(data)} "
            f"(mismatch at byte offset {where})"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape)


def _read_manifest(directory):
    file = Path(directory) / MANIFEST_NAME
    try:
        text = file.read_text(encoding="utf-8")
    except OSError as exc:
        raise BundleError(f"{file}: cannot read ({exc.strerror or exc})") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleError(f"{file}: invalid JSON at offset {exc.pos}: {exc.msg}") from None
    if not isinstance(manifest, dict):
        raise BundleError(f"{file}: top level must be an object")
    return file, manifest


def _field(file, obj, key, kind):
    if key not in obj:
        raise BundleError(f"{file}: missing field {key!r}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise BundleError(f"{file}: field {key!r} must be an integer")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise BundleError(f"{file}: field {key!r} must be a number")
    if kind is str and not isinstance(value, str):
        raise BundleError(f"{file}: field {key!r} must be a string")
    return value


def load_bundle(path):
    """Read and validate a bundle directory."""
    path = Path(path)
    mfile, manifest = _read_manifest(path)
    version = _field(mfile, manifest, "version", int)
    if version != BUNDLE_VERSION:
        raise BundleError(f"{mfile}: unsupported version {version}")
    h = _field(mfile, manifest, "height", int)
    w = _field(mfile, manifest, "width", int)
    n_max = _field(mfile, manifest, "n_max", int)
    if h < 1 or w < 1 or n_max < 1:
        raise BundleError(f"{mfile}: height, width and n_max must be positive")
    entries = manifest.get("measurements")
    if not isinstance(entries, list) or not entries:
        raise BundleError(f"{mfile}: 'measurements' must be a non-empty list")

    counts = np.empty((len(entries), h, w), dtype=np.int64)
    background = np.empty((len(entries), h, w))
    times = np.empty(len(entries))
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise BundleError(f"{mfile}: measurement {i} must be an object")
        name = _field(mfile, entry, "file", str)
        raw = _read_raw(path, name, COUNT_DTYPE, (h, w))
        over = raw > n_max
        if over.any():
            flat = int(np.flatnonzero(over)[0])
            raise BundleError(
                f"{path / name}: count {int(raw.flat[flat])} exceeds n_max {n_max} at byte offset "
                f"{flat * COUNT_DTYPE.itemsize} (pixel {divmod(flat, w)})"
            )
        counts[i] = raw
        times[i] = _field(mfile, entry, "t", float)
        dark = entry.get("dark", 0.0)
        if isinstance(dark, str):
            background[i] = _read_raw(path, dark, REAL_DTYPE, (h, w))
        elif isinstance(dark, (int, float)) and not isinstance(dark, bool):
            background[i] = float(dark)
        else:
            raise BundleError(f"{mfile}: measurement {i} has an invalid 'dark' entry")

    truth = None
    if "truth" in manifest:
        truth = _read_raw(path, _field(mfile, manifest, "truth", str), REAL_DTYPE, (h, w)).copy()
    try:
        stack = check_stack(ExposureStack(counts, times, background, n_max))
    except StackError as exc:
        raise BundleError(f"{mfile}: {exc}") from None
    return Bundle(stack=stack, truth=truth, path=path, name=path.name)


def save_image(path, image, **meta):
    """Store a real image as ``<path>.f64`` plus a JSON manifest at ``path``.

    ``path`` names the manifest (conventionally ``*.json``); extra keyword
    arguments are recorded in it verbatim.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    path = Path(path)
    raw_name = path.with_suffix(".f64").name
    atomic_write_bytes(path.parent / raw_name, _real_bytes(image))
    manifest = {
        "version": BUNDLE_VERSION,
        "height": image.shape[0],
        "width": image.shape[1],
        "dtype": REAL_DTYPE.str,
        "file": raw_name,
        **meta,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


def load_image(path):
    """Read an image written by :func:`save_image`.

    A bundle directory is accepted too, in which case its ground truth is
    returned.
    """
    path = Path(path)
    if path.is_dir():
        bundle = load_bundle(path)
        if bundle.truth is None:
            raise BundleError(f"{path / MANIFEST_NAME}: bundle has no ground truth")
        return bundle.truth
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise BundleError(f"{path}: cannot read ({exc.strerror or exc})") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from None
    if not isinstance(manifest, dict):
        raise BundleError(f"{path}: top level must be an object")
    h = _field(path, manifest, "height", int)
    w = _field(path, manifest, "width", int)
    if manifest.get("dtype", REAL_DTYPE.str) != REAL_DTYPE.str:
        raise BundleError(f"{path}: unsupported dtype {manifest['dtype']!r}")
    return _read_raw(path.parent, _field(path, manifest, "file", str), REAL_DTYPE, (h, w)).copy()


def render_levels(image, vmax=None, saturated=None):
    """Map ``log(1 + image)`` linearly onto 16-bit gray levels.

    Zero maps to 0 and ``log(1 + vmax)`` to 65535 (``vmax`` defaults to the
    image maximum); values above are clipped. Pixels flagged in
    ``saturated`` are set to 65535.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    logs = np.log1p(np.maximum(image, 0.0))
    top = logs.max() if vmax is None else np.log1p(max(float(vmax), 0.0))
    if top > 0:
        levels = np.rint(np.clip(logs / top, 0.0, 1.0) * 65535.0)
    else:
        levels = np.zeros_like(logs)
    levels = levels.astype(np.uint16)
    if saturated is not None:
        levels[np.asarray(saturated, dtype=bool)] = 65535
    return levels


def write_pgm(path, image, vmax=None, saturated=None):
    """Write a binary 16-bit graymap (P5, maxval 65535, big-endian samples)."""
    levels = render_levels(image, vmax, saturated)
    h, w = levels.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + levels.astype(">u2").tobytes())
    return Path(path)


def read_pgm(path):
    """Read a 16-bit binary graymap written by :func:`write_pgm`."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise ValueError(f"{path}: not a 16-bit binary graymap")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1 :]
    return np.frombuffer(body, dtype=">u2", count=w * h).reshape(h, w)
