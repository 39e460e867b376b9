"""On-disk formats: binary grids, graymaps, key=value manifests, dataset folders."""
from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .fragmap import NormalizationFactors, ScaleSpec
from .pipeline import Dataset

GRID_MAGIC = b"MFLD1"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<5sIQQ")
LOG_OFFSET = 1e-8


class FormatError(ValueError):
    """A file is truncated, corrupt or of the wrong kind."""


# ---------------------------------------------------------------- grid files

def grid_bytes(field) -> bytes:
    arr = np.asarray(field, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"grid files hold 2-D arrays, got shape {arr.shape}")
    body = np.ascontiguousarray(arr).tobytes()
    head = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, arr.shape[0], arr.shape[1])
    return head + body + struct.pack("<I", zlib.crc32(body))


def grid_from_bytes(raw: bytes) -> np.ndarray:
    hsize = _GRID_HEADER.size
    if len(raw) < hsize + 4:
        raise FormatError("grid file truncated")
    magic, version, rows, cols = _GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad grid magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid version {version}")
    n = rows * cols * 8
    if len(raw) != hsize + n + 4:
        raise FormatError(f"grid payload is {len(raw) - hsize - 4} bytes, expected {n}")
    body = raw[hsize:hsize + n]
    (crc,) = struct.unpack_from("<I", raw, hsize + n)
    if crc != zlib.crc32(body):
        raise FormatError("grid checksum mismatch")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_grid(path, field) -> None:
    Path(path).write_bytes(grid_bytes(field))


def read_grid(path) -> np.ndarray:
    return grid_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- graymaps

def pgm_bytes(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise FormatError("not a binary graymap")
    w, h = int(m[1]), int(m[2])
    # exactly one whitespace byte separates the header from pixel data
    data = raw[m.end():]
    if len(data) < w * h:
        raise FormatError("graymap truncated")
    return np.frombuffer(data[:w * h], dtype=np.uint8).reshape(h, w)


def density_pixels(density) -> np.ndarray:
    """Linear map, void white and solid black."""
    d = np.clip(np.asarray(density, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * (1.0 - d)).astype(np.uint8)


def energy_pixels(energy):
    """``log(U + 1e-8)`` rescaled to 0..255. Returns ``(pixels, lo, hi)``."""
    plot = np.log(np.maximum(np.asarray(energy, dtype=np.float64), 0.0) + LOG_OFFSET)
    lo, hi = float(plot.min()), float(plot.max())
    if hi > lo:
        pix = np.round(255.0 * (plot - lo) / (hi - lo))
    else:
        pix = np.zeros_like(plot)
    return pix.astype(np.uint8), lo, hi


def render(field, path, kind: str) -> Path:
    """Write a P5 graymap; energy renders get a ``.range.txt`` sidecar."""
    path = Path(path)
    if kind == "density":
        path.write_bytes(pgm_bytes(density_pixels(field)))
    elif kind == "energy":
        pix, lo, hi = energy_pixels(field)
        path.write_bytes(pgm_bytes(pix))
        sidecar = path.with_suffix(".range.txt")
        write_manifest(sidecar, {"transform": f"log(U+{LOG_OFFSET:g})", "min": repr(lo),
                                 "max": repr(hi)})
    else:
        raise ValueError(f"render kind must be 'density' or 'energy', got {kind!r}")
    return path


# ---------------------------------------------------------------- manifests

def write_manifest(path, items: dict) -> None:
    lines = []
    for k, v in items.items():
        text = str(v)
        if "\n" in text or "=" in k:
            raise ValueError(f"manifest entry {k!r} cannot be written on one line")
        lines.append(f"{k}={text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{n}: expected key=value")
        key = key.strip()
        if key in out:
            raise FormatError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


# ---------------------------------------------------------------- datasets

def save_dataset(data: Dataset, directory) -> Path:
    """A folder of per-sample grid files plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, it in enumerate(data.iterations):
        write_grid(d / f"coarse_{it:04d}.mfld", data.coarse[k])
        write_grid(d / f"density_{it:04d}.mfld", data.density[k])
        write_grid(d / f"fine_{it:04d}.mfld", data.fine[k])
    meta = {
        "problem": data.problem,
        "method": data.method,
        "fine_w": data.scale.fine_w,
        "fine_h": data.scale.fine_h,
        "ratio": data.scale.ratio,
        "coarse_w": data.scale.coarse_w,
        "coarse_h": data.scale.coarse_h,
        "n_samples": len(data),
        "iterations": ",".join(str(int(i)) for i in data.iterations),
    }
    if data.norm is not None:
        meta["norm_coarse"] = repr(data.norm.coarse)
        meta["norm_fine"] = repr(data.norm.fine)
    write_manifest(d / "manifest.txt", meta)
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = read_manifest(d / "manifest.txt")
    try:
        scale = ScaleSpec(int(meta["fine_w"]), int(meta["fine_h"]), int(meta["ratio"]))
        its = [int(i) for i in meta["iterations"].split(",") if i]
        if len(its) != int(meta["n_samples"]):
            raise FormatError("sample count disagrees with the iteration list")
        norm = None
        if "norm_coarse" in meta:
            norm = NormalizationFactors(float(meta["norm_coarse"]), float(meta["norm_fine"]))
    except KeyError as exc:
        raise FormatError(f"dataset manifest lacks {exc}") from None

    def load(kind):
        return np.stack([read_grid(d / f"{kind}_{i:04d}.mfld") for i in its])

    return Dataset(problem=meta["problem"], method=meta.get("method", ""), scale=scale,
                   coarse=load("coarse"), density=load("density"), fine=load("fine"),
                   iterations=np.array(its), norm=norm)
