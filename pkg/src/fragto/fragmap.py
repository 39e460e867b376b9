"""Coarsening, fragmentation, defragmentation and field normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import DEFAULT_RATIO


class FragmentError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleSpec:
    fine_w: int
    fine_h: int
    ratio: int = DEFAULT_RATIO

    def __post_init__(self):
        if self.ratio < 1 or self.fine_w % self.ratio or self.fine_h % self.ratio:
            raise FragmentError(
                f"fine size {self.fine_w}x{self.fine_h} not divisible by ratio {self.ratio}")

    @property
    def coarse_w(self) -> int:
        return self.fine_w // self.ratio

    @property
    def coarse_h(self) -> int:
        return self.fine_h // self.ratio


@dataclass(frozen=True)
class FragmentSpec:
    """Fragment geometry: square patches of ``coarse_patch`` coarse elements.

    Non-overlapping fragments tile the domain; overlapping ones start at every
    coarse element (stride 1).
    """

    coarse_patch: int
    ratio: int = DEFAULT_RATIO
    overlap: bool = False
    crop_scale: int | None = None

    def __post_init__(self):
        if self.coarse_patch < 1 or self.ratio < 1:
            raise FragmentError("coarse_patch and ratio must be positive")

    @classmethod
    def from_crop_scale(cls, coarse_w: int, crop_scale: int, ratio: int = DEFAULT_RATIO,
                        overlap: bool = False) -> "FragmentSpec":
        if crop_scale < 1 or coarse_w % crop_scale:
            raise FragmentError(f"coarse width {coarse_w} not divisible by crop scale {crop_scale}")
        return cls(coarse_w // crop_scale, ratio, overlap, crop_scale)

    @property
    def fine_patch(self) -> int:
        return self.coarse_patch * self.ratio

    @property
    def stride(self) -> int:
        return 1 if self.overlap else self.coarse_patch

    @property
    def fingerprint(self) -> tuple[int, int, int]:
        return (self.coarse_patch, self.fine_patch, self.ratio)

    def counts(self, coarse_w: int, coarse_h: int) -> tuple[int, int]:
        """Fragments per axis as ``(rows, cols)``."""
        cp = self.coarse_patch
        if cp > coarse_w or cp > coarse_h:
            raise FragmentError(f"patch {cp} larger than coarse grid {coarse_w}x{coarse_h}")
        if self.overlap:
            return coarse_h - cp + 1, coarse_w - cp + 1
        if coarse_w % cp or coarse_h % cp:
            raise FragmentError(f"coarse grid {coarse_w}x{coarse_h} not divisible by patch {cp}")
        return coarse_h // cp, coarse_w // cp

    def with_overlap(self, overlap: bool) -> "FragmentSpec":
        return FragmentSpec(self.coarse_patch, self.ratio, overlap, self.crop_scale)


@dataclass(frozen=True)
class NormalizationFactors:
    coarse: float
    fine: float

    def __post_init__(self):
        for v in (self.coarse, self.fine):
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"normalization factors must be positive and finite, got {v}")


@dataclass
class FragmentBatch:
    coarse: np.ndarray            # (n, cp, cp)
    density: np.ndarray           # (n, fp, fp)
    fine: np.ndarray | None       # (n, fp, fp) targets, absent at inference
    origins: np.ndarray           # (n, 2) coarse-grid (row, col)

    def __len__(self):
        return len(self.coarse)

    def __post_init__(self):
        n = len(self.coarse)
        if len(self.density) != n or len(self.origins) != n or (
                self.fine is not None and len(self.fine) != n):
            raise FragmentError("fragment lists differ in length")

    def take(self, idx) -> "FragmentBatch":
        return FragmentBatch(self.coarse[idx], self.density[idx],
                             None if self.fine is None else self.fine[idx], self.origins[idx])

    @staticmethod
    def concat(batches) -> "FragmentBatch":
        batches = list(batches)
        fine = None
        if all(b.fine is not None for b in batches):
            fine = np.concatenate([b.fine for b in batches])
        return FragmentBatch(np.concatenate([b.coarse for b in batches]),
                             np.concatenate([b.density for b in batches]),
                             fine, np.concatenate([b.origins for b in batches]))


def block_mean(field: np.ndarray, ratio: int) -> np.ndarray:
    h, w = field.shape[-2:]
    if h % ratio or w % ratio:
        raise FragmentError(f"grid {w}x{h} not divisible by {ratio}")
    shape = field.shape[:-2] + (h // ratio, ratio, w // ratio, ratio)
    return field.reshape(shape).mean(axis=(-3, -1))


def coarsen_density(fine: np.ndarray, spec: ScaleSpec) -> np.ndarray:
    fine = np.asarray(fine, dtype=np.float64)
    if fine.shape != (spec.fine_h, spec.fine_w):
        raise FragmentError(f"density shape {fine.shape} != {(spec.fine_h, spec.fine_w)}")
    return np.clip(block_mean(fine, spec.ratio), 0.0, 1.0)


def fragment_origins(fspec: FragmentSpec, coarse_w: int, coarse_h: int) -> np.ndarray:
    nr, nc = fspec.counts(coarse_w, coarse_h)
    r, c = np.meshgrid(np.arange(nr) * fspec.stride, np.arange(nc) * fspec.stride, indexing="ij")
    return np.column_stack([r.ravel(), c.ravel()])


def _windows(field, size, step):
    view = sliding_window_view(field, (size, size))[::step, ::step]
    return view.reshape(-1, size, size).copy()


def fragment(coarse_field: np.ndarray, fine_density: np.ndarray,
             fine_field: np.ndarray | None, fspec: FragmentSpec) -> FragmentBatch:
    """Crop aligned coarse/density/fine patches, row-major by origin."""
    coarse_field = np.asarray(coarse_field, dtype=np.float64)
    ch, cw = coarse_field.shape
    r = fspec.ratio
    if fine_density.shape != (ch * r, cw * r):
        raise FragmentError(
            f"fine density {fine_density.shape} does not match coarse {coarse_field.shape} x {r}")
    if fine_field is not None and fine_field.shape != fine_density.shape:
        raise FragmentError("fine field and fine density differ in shape")
    origins = fragment_origins(fspec, cw, ch)
    cp, fp, s = fspec.coarse_patch, fspec.fine_patch, fspec.stride
    return FragmentBatch(
        coarse=_windows(coarse_field, cp, s),
        density=_windows(np.asarray(fine_density, dtype=np.float64), fp, s * r),
        fine=None if fine_field is None else _windows(np.asarray(fine_field, np.float64), fp, s * r),
        origins=origins,
    )


def defragment(patches: np.ndarray, origins: np.ndarray, fspec: FragmentSpec,
               out_w: int, out_h: int, *, return_counts: bool = False):
    """Reassemble fine patches; overlapping pixels take the plain mean.

    ``out_w``/``out_h`` are fine-grid sizes and ``origins`` coarse-grid ones.
    """
    patches = np.asarray(patches, dtype=np.float64)
    fp, r = fspec.fine_patch, fspec.ratio
    if patches.shape[1:] != (fp, fp):
        raise FragmentError(f"patch shape {patches.shape[1:]} != {(fp, fp)}")
    total = np.zeros((out_h, out_w))
    count = np.zeros((out_h, out_w))
    for patch, (row, col) in zip(patches, np.asarray(origins)):
        y, x = row * r, col * r
        if y + fp > out_h or x + fp > out_w:
            raise FragmentError(f"patch at origin {(row, col)} exceeds the output grid")
        total[y:y + fp, x:x + fp] += patch
        count[y:y + fp, x:x + fp] += 1
    if np.any(count == 0):
        raise FragmentError("defragmentation leaves uncovered pixels")
    out = total / count
    return (out, count) if return_counts else out


def estimate_normalization(fields) -> float:
    """Power of ten nearest the 95th percentile of the pooled nonzero values."""
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one field")
    vals = np.concatenate([np.abs(np.asarray(f, dtype=np.float64)).ravel() for f in fields])
    vals = vals[vals > 0]
    if vals.size == 0:
        raise ValueError("all fields are zero")
    p95 = np.percentile(vals, 95)
    return float(10.0 ** np.round(np.log10(p95)))


def normalize(field, factor: float):
    if not factor > 0:
        raise ValueError("normalization factor must be positive")
    return np.asarray(field, dtype=np.float64) / factor


def denormalize(field, factor: float):
    if not factor > 0:
        raise ValueError("normalization factor must be positive")
    return np.asarray(field, dtype=np.float64) * factor
