"""Raster cubes, patch extraction, splitting, augmentation and synthetic scenes."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

PATCH_SIZE = 13


class CubeFormatError(ValueError):
    """Raised when a cube directory or in-memory cube is malformed."""


@dataclass
class RasterCube:
    """An ``H x W x d`` reflectance raster with an aligned label raster (0 = unlabeled)."""

    bands: np.ndarray
    labels: np.ndarray
    class_count: Optional[int] = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.bands.ndim != 3:
            raise CubeFormatError(f"bands must be H x W x d, got shape {self.bands.shape}")
        if self.labels.shape != self.bands.shape[:2]:
            raise CubeFormatError(
                f"dimension mismatch: labels {self.labels.shape} vs bands {self.bands.shape[:2]}"
            )
        if not np.all(np.isfinite(self.bands)):
            raise CubeFormatError("bands contain non-finite values")
        if self.labels.size and self.labels.min() < 0:
            raise CubeFormatError("labels must be non-negative")
        if self.class_count is None:
            self.class_count = int(self.labels.max()) if self.labels.size else 0
        if self.labels.size and self.labels.max() > self.class_count:
            raise CubeFormatError(
                f"label {int(self.labels.max())} exceeds class count {self.class_count}"
            )

    @property
    def height(self) -> int:
        return self.bands.shape[0]

    @property
    def width(self) -> int:
        return self.bands.shape[1]

    @property
    def band_count(self) -> int:
        return self.bands.shape[2]


@dataclass
class PatchBatch:
    """``N`` square patches (``N x s x s x d``) with 1-based class labels.

    ``coords`` holds the (row, col) of each patch center in its source raster,
    when known.
    """

    patches: np.ndarray
    labels: np.ndarray
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.patches.ndim != 4:
            raise ValueError(f"patches must be N x s x s x d, got {self.patches.shape}")
        if len(self.patches) != len(self.labels):
            raise ValueError("patch count and label count differ")
        s1, s2 = self.patches.shape[1:3]
        if s1 != s2 or s1 % 2 == 0:
            raise ValueError(f"patches must be square and odd-sided, got {s1}x{s2}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    @property
    def band_count(self) -> int:
        return self.patches.shape[3]

    def subset(self, index) -> "PatchBatch":
        coords = None if self.coords is None else self.coords[index]
        return PatchBatch(self.patches[index], self.labels[index], coords)

    def class_counts(self, class_count: Optional[int] = None) -> np.ndarray:
        n = class_count if class_count is not None else (int(self.labels.max()) if len(self) else 0)
        return np.bincount(self.labels, minlength=n + 1)[1:]


# -- cube files ---------------------------------------------------------------

def band_range(bands: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-band minimum and maximum of an ``H x W x d`` raster."""
    return bands.min(axis=(0, 1)), bands.max(axis=(0, 1))


def normalize_bands(bands: np.ndarray, reference: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """Per-band min-max scaling; constant bands become zeros.

    Without ``reference`` the raster's own range maps to [0, 1]. With a
    ``(lo, hi)`` reference (e.g. from :func:`band_range` of another scene) the
    same affine map is applied, so values may leave [0, 1].
    """
    bands = np.asarray(bands, dtype=np.float32)
    lo, hi = band_range(bands) if reference is None else (np.asarray(r, np.float32) for r in reference)
    span = hi - lo
    out = np.zeros_like(bands)
    ok = span > 0
    out[..., ok] = (bands[..., ok] - lo[ok]) / span[ok]
    return out


def save_cube(cube: RasterCube, path) -> Path:
    """Write ``cube`` as ``meta.json`` + ``bands.bin`` (f32 LE) + ``labels.bin`` (u16 LE)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.band_count,
        "classes": int(cube.class_count),
        "dtype": "f32",
        "byte_order": "little",
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    cube.bands.astype("<f4").tofile(path / "bands.bin")
    cube.labels.astype("<u2").tofile(path / "labels.bin")
    return path


def load_cube(path, normalize: bool = True) -> RasterCube:
    """Read a cube directory written by :func:`save_cube`.

    Bands are min-max normalized per band unless ``normalize`` is False.
    """
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise CubeFormatError(f"{path}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        h, w, d, c = (int(meta[k]) for k in ("height", "width", "bands", "classes"))
    except (ValueError, KeyError, TypeError) as exc:
        raise CubeFormatError(f"{meta_path}: malformed header ({exc})") from exc
    if meta.get("dtype", "f32") != "f32" or meta.get("byte_order", "little") != "little":
        raise CubeFormatError(f"{meta_path}: only little-endian f32 cubes are supported")
    if min(h, w, d) <= 0:
        raise CubeFormatError(f"{meta_path}: non-positive dimensions")

    bands = np.fromfile(path / "bands.bin", dtype="<f4")
    labels = np.fromfile(path / "labels.bin", dtype="<u2")
    if bands.size != h * w * d:
        raise CubeFormatError(
            f"{path}: dimension mismatch, bands.bin holds {bands.size} values, header says {h}x{w}x{d}"
        )
    if labels.size != h * w:
        raise CubeFormatError(
            f"{path}: dimension mismatch, labels.bin holds {labels.size} values, header says {h}x{w}"
        )
    bands = bands.reshape(h, w, d).astype(np.float32)
    if not np.all(np.isfinite(bands)):
        raise CubeFormatError(f"{path}: bands contain non-finite values")
    if normalize:
        bands = normalize_bands(bands)
    return RasterCube(bands, labels.reshape(h, w).astype(np.int64), class_count=c)


# -- patches ------------------------------------------------------------------

def _check_patch_size(patch_size: int, height: int, width: int):
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd and positive, got {patch_size}")
    if patch_size > 2 * min(height, width):
        raise ValueError(f"patch_size {patch_size} too large for a {height}x{width} raster")


def patch_windows(bands: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Mirror-padded sliding-window view of shape ``H x W x s x s x d`` (no copy)."""
    h, w, _ = bands.shape
    _check_patch_size(patch_size, h, w)
    r = patch_size // 2
    padded = np.pad(bands, ((r, r), (r, r), (0, 0)), mode="reflect")
    view = sliding_window_view(padded, (patch_size, patch_size), axis=(0, 1))
    # view is H x W x d x s x s
    return view.transpose(0, 1, 3, 4, 2)


def patches_at(bands: np.ndarray, coords: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    windows = patch_windows(bands, patch_size)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return np.ascontiguousarray(windows[coords[:, 0], coords[:, 1]], dtype=np.float32)


def extract_patches(cube: RasterCube, patch_size: int = PATCH_SIZE) -> PatchBatch:
    """One patch per labeled pixel, in row-major order."""
    _check_patch_size(patch_size, cube.height, cube.width)
    coords = np.argwhere(cube.labels > 0)
    patches = patches_at(cube.bands, coords, patch_size)
    if len(coords) == 0:
        patches = np.zeros((0, patch_size, patch_size, cube.band_count), dtype=np.float32)
    return PatchBatch(patches, cube.labels[coords[:, 0], coords[:, 1]], coords)


def split_indices(labels: np.ndarray, ratio: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified train/validation index split. Classes with < 2 samples go to training."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            warnings.warn(f"class {c} has {len(idx)} sample(s); assigned to training only")
            train.append(idx)
            continue
        idx = rng.permutation(idx)
        n_train = min(max(int(round(ratio * len(idx))), 1), len(idx) - 1)
        train.append(idx[:n_train])
        val.append(idx[n_train:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return cat(train), cat(val)


def split_train_val(batch: PatchBatch, ratio: float = 0.8, seed: int = 0) -> Tuple[PatchBatch, PatchBatch]:
    train_idx, val_idx = split_indices(batch.labels, ratio, seed)
    return batch.subset(train_idx), batch.subset(val_idx)


def augment(
    batch: PatchBatch,
    flips: bool = True,
    radiation_noise_sigma: float = 0.1,
    factor: int = 4,
    seed: int = 0,
) -> PatchBatch:
    """Replicate ``batch`` ``factor`` times with random flips and illumination scaling.

    Every replica draws its own horizontal/vertical flip (each with probability
    1/2) and a per-patch multiplicative illumination factor from
    ``Normal(1, radiation_noise_sigma)``; results are clipped to [0, 1].
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if radiation_noise_sigma < 0:
        raise ValueError("radiation_noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(batch)
    out = []
    for _ in range(factor):
        x = batch.patches.copy()
        if flips:
            hflip = rng.random(n) < 0.5
            vflip = rng.random(n) < 0.5
            x[hflip] = x[hflip][:, :, ::-1]
            x[vflip] = x[vflip][:, ::-1]
        if radiation_noise_sigma > 0:
            gain = rng.normal(1.0, radiation_noise_sigma, size=n).astype(np.float32)
            x = np.clip(x * gain[:, None, None, None], 0.0, 1.0)
        out.append(x)
    coords = None if batch.coords is None else np.tile(batch.coords, (factor, 1))
    return PatchBatch(np.concatenate(out), np.tile(batch.labels, factor), coords)


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of a seeded source/target scene pair with a controlled spectral shift.

    ``gain`` and ``offset`` are per-band; ``None`` means a linear gain ramp from 1
    to ``max_gain`` across bands and zero offset.
    """

    class_count: int = 5
    band_count: int = 16
    scene_size: Tuple[int, int] = (56, 56)
    blob_count: int = 3
    gain: Optional[Sequence[float]] = None
    offset: Optional[Sequence[float]] = None
    max_gain: float = 1.3
    nonlinearity: float = 1.2
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.band_count < 1:
            raise ValueError("band_count must be positive")
        if self.gain is None:
            self.gain = tuple(np.linspace(1.0, self.max_gain, self.band_count).tolist())
        if self.offset is None:
            self.offset = (0.0,) * self.band_count
        self.gain = tuple(float(g) for g in self.gain)
        self.offset = tuple(float(o) for o in self.offset)
        if len(self.gain) != self.band_count or len(self.offset) != self.band_count:
            raise ValueError("gain and offset need one entry per band")
        if min(self.gain) <= 0:
            raise ValueError("every band gain must be > 0")
        if self.nonlinearity <= 0:
            raise ValueError("nonlinearity must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def class_signatures(class_count: int, band_count: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-class reflectance curves (``C x d``) built from Gaussian bumps."""
    x = np.linspace(0.0, 1.0, band_count)
    centers = (np.arange(class_count) + rng.uniform(0.2, 0.8, class_count)) / class_count
    sigs = np.empty((class_count, band_count))
    for c in range(class_count):
        base = rng.uniform(0.2, 0.4)
        slope = rng.uniform(-0.1, 0.1)
        bump = rng.uniform(0.1, 0.2) * np.exp(-0.5 * ((x - centers[c]) / rng.uniform(0.08, 0.15)) ** 2)
        sigs[c] = base + slope * (x - 0.5) + bump
    return sigs


def paint_blobs(shape: Tuple[int, int], class_count: int, blob_count: int, rng: np.random.Generator) -> np.ndarray:
    """Label raster with ``blob_count`` random ellipses per class (0 elsewhere)."""
    h, w = shape
    labels = np.zeros(shape, dtype=np.int64)
    rows, cols = np.mgrid[0:h, 0:w]
    order = np.repeat(np.arange(1, class_count + 1), blob_count)
    rng.shuffle(order)
    for c in order:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(2.5, 6.0, size=2)
        t = rng.uniform(0, np.pi)
        dy, dx = rows - cy, cols - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        labels[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = c
    return labels


def synth_pair(spec: SyntheticSpec) -> Tuple[RasterCube, RasterCube]:
    """Generate a source scene and a spectrally shifted target scene with shared geometry."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.scene_size
    labels = paint_blobs((h, w), spec.class_count, spec.blob_count, rng)
    sigs = class_signatures(spec.class_count, spec.band_count, rng)
    background = class_signatures(1, spec.band_count, rng)[0]
    table = np.vstack([background, sigs])

    # per-pixel brightness texture, shared by both scenes
    texture = 1.0 + 0.05 * rng.standard_normal((h, w, 1))
    clean = table[labels] * texture

    sd = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    gain = np.asarray(spec.gain)
    offset = np.asarray(spec.offset)
    td = np.clip(clean * gain + offset, 0.0, None) ** spec.nonlinearity
    if spec.noise_sigma > 0:
        td = td + spec.noise_sigma * rng.standard_normal(clean.shape)
    else:
        sd = clean.copy()
    sd = np.clip(sd, 0.0, 1.0).astype(np.float32)
    td = np.clip(td, 0.0, 1.0).astype(np.float32)
    return (
        RasterCube(sd, labels, class_count=spec.class_count),
        RasterCube(td, labels.copy(), class_count=spec.class_count),
    )


__all__ = [
    "PATCH_SIZE",
    "CubeFormatError",
    "RasterCube",
    "PatchBatch",
    "SyntheticSpec",
    "band_range",
    "normalize_bands",
    "save_cube",
    "load_cube",
    "patch_windows",
    "patches_at",
    "extract_patches",
    "split_indices",
    "split_train_val",
    "augment",
    "class_signatures",
    "paint_blobs",
    "synth_pair",
]
