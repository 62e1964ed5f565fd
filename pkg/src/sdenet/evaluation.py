"""Target-scene inference, accuracy metrics, MMD diagnostics and map rendering."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import PATCH_SIZE, PatchBatch, RasterCube, patches_at, save_cube
from .trainer import ModelState, predict

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingBatch:
    vectors: np.ndarray
    labels: np.ndarray
    domain_tag: Optional[np.ndarray] = None

    def save(self, path) -> Path:
        """Store as a cube directory: one row per sample, one band per embedding dimension."""
        vec = np.asarray(self.vectors, dtype=np.float32)
        cube = RasterCube(vec[:, None, :], np.asarray(self.labels)[:, None],
                          class_count=int(self.labels.max()) if len(self.labels) else 0)
        return save_cube(cube, path)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    overall_accuracy: float
    kappa: float
    sample_count: int
    empty_classes: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": self.per_class_accuracy.tolist(),
            "overall_accuracy": self.overall_accuracy,
            "kappa": self.kappa,
            "sample_count": self.sample_count,
            "empty_classes": self.empty_classes,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def confusion_matrix(predicted, truth, n_classes: int) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    flat = (truth - 1) * n_classes + (predicted - 1)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    rows = confusion.sum(axis=1)
    cols = confusion.sum(axis=0)
    diag = np.diag(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        ca = np.where(rows > 0, diag / np.maximum(rows, 1), 0.0)
    empty = [int(c) + 1 for c in np.flatnonzero(rows == 0)]
    if empty:
        logger.warning("classes %s have no reference samples; their accuracy is reported as 0", empty)
    if total == 0:
        return MetricsReport(confusion, ca, float("nan"), float("nan"), 0, empty)
    p_o = diag.sum() / total
    p_e = float((rows * cols).sum()) / total**2
    kappa = (p_o - p_e) / (1 - p_e) if p_e < 1 else (1.0 if p_o == 1 else 0.0)
    return MetricsReport(confusion, ca, float(p_o), float(kappa), total, empty)


def compute_metrics(predicted, truth, n_classes: int) -> MetricsReport:
    """Confusion matrix (rows true, columns predicted), per-class accuracy, OA and Cohen's kappa."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if truth.size and (truth.min() < 1 or truth.max() > n_classes):
        raise ValueError(f"truth labels must lie in [1, {n_classes}]")
    if predicted.size and (predicted.min() < 1 or predicted.max() > n_classes):
        raise ValueError(f"predicted labels must lie in [1, {n_classes}]")
    return metrics_from_confusion(confusion_matrix(predicted, truth, n_classes))


def predict_scene(
    state: ModelState,
    cube: RasterCube,
    full_map: bool = False,
    patch_size: int = PATCH_SIZE,
    chunk: int = 2048,
) -> Tuple[np.ndarray, EmbeddingBatch]:
    """Classify labeled pixels (or every pixel with ``full_map``) with the discriminator.

    Returns the predicted label raster (0 where not predicted) and the
    projections of every classified pixel.
    """
    if cube.band_count != state.n_bands:
        raise ValueError(f"band mismatch: model expects {state.n_bands} bands, cube has {cube.band_count}")
    mask = np.ones(cube.labels.shape, bool) if full_map else cube.labels > 0
    coords = np.argwhere(mask)
    D = state.discriminator
    raster = np.zeros(cube.labels.shape, dtype=np.int64)
    preds, projs = [], []
    for start in range(0, len(coords), chunk):
        c = coords[start:start + chunk]
        pred, _, proj = predict(D, patches_at(cube.bands, c, patch_size), chunk=chunk)
        preds.append(pred)
        projs.append(proj)
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    proj = np.concatenate(projs) if projs else np.zeros((0, D.proj.out_features), dtype=np.float32)
    raster[coords[:, 0], coords[:, 1]] = pred
    truth = cube.labels[coords[:, 0], coords[:, 1]]
    return raster, EmbeddingBatch(proj, truth, np.full(len(truth), "TD"))


# -- MMD ----------------------------------------------------------------------

def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample (distinct pairs)."""
    z = np.concatenate([a, b])
    d = np.sqrt(_sq_dists(z, z))
    off = d[np.triu_indices(len(z), k=1)]
    med = float(np.median(off)) if off.size else 0.0
    return med if med > 0 else 1.0


def mmd(
    a: np.ndarray,
    b: np.ndarray,
    kernel: str = "rbf",
    bandwidth: Union[str, float] = "median",
) -> float:
    """Unbiased estimate of squared MMD between samples ``a`` (N x k) and ``b`` (M x k).

    For ``N == M`` the paired U-statistic is used, so identical samples give
    exactly 0; otherwise the standard unbiased two-sample form.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise ValueError("mmd needs at least 2 samples on each side")
    if kernel == "linear":
        kaa, kbb, kab = a @ a.T, b @ b.T, a @ b.T
    elif kernel == "rbf":
        bw = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
        g = 1.0 / (2.0 * bw * bw)
        kaa = np.exp(-g * _sq_dists(a, a))
        kbb = np.exp(-g * _sq_dists(b, b))
        kab = np.exp(-g * _sq_dists(a, b))
    else:
        raise ValueError(f"unknown kernel {kernel!r}")

    def off_mean(k):
        return (k.sum() - np.trace(k)) / (k.shape[0] * (k.shape[0] - 1))

    if n == m:
        cross = (kab.sum() - np.trace(kab)) / (n * (n - 1))
        return float(off_mean(kaa) + off_mean(kbb) - 2.0 * cross)
    return float(off_mean(kaa) + off_mean(kbb) - 2.0 * kab.mean())


def mmd_distance(estimate: float) -> float:
    return float(np.sqrt(max(estimate, 0.0)))


@dataclass
class MMDRow:
    label: str
    origin_sq: float
    projection_sq: float
    origin_td_sq: Optional[float] = None
    projection_td_sq: Optional[float] = None

    @property
    def origin(self) -> float:
        return mmd_distance(self.origin_sq)

    @property
    def projection(self) -> float:
        return mmd_distance(self.projection_sq)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = self.origin
        d["projection"] = self.projection
        if self.origin_td_sq is not None:
            d["origin_td"] = mmd_distance(self.origin_td_sq)
            d["projection_td"] = mmd_distance(self.projection_td_sq)
        return d


def mmd_report(
    state: ModelState,
    sd_batch: PatchBatch,
    ed_batch: PatchBatch,
    td_batch: Optional[PatchBatch] = None,
    kernel: str = "rbf",
    max_per_class: int = 500,
    seed: int = 0,
) -> List[MMDRow]:
    """Per-class MMD between SD and ED (and SD and TD) in patch space and projection space.

    A final ``mean`` row averages the class rows. Classes with fewer than two
    samples on either side are skipped.
    """
    rng = np.random.default_rng(seed)

    def proj(batch):
        return predict(state.discriminator, batch.patches)[2]

    def take(batch, c):
        idx = np.flatnonzero(batch.labels == c)
        if len(idx) > max_per_class:
            idx = np.sort(rng.choice(idx, max_per_class, replace=False))
        return idx

    sd_p, ed_p = proj(sd_batch), proj(ed_batch)
    td_p = proj(td_batch) if td_batch is not None else None
    rows: List[MMDRow] = []
    for c in np.unique(sd_batch.labels):
        i_sd, i_ed = take(sd_batch, c), take(ed_batch, c)
        if len(i_sd) < 2 or len(i_ed) < 2:
            continue
        flat = lambda b, i: b.patches[i].reshape(len(i), -1)
        row = MMDRow(
            str(int(c)),
            mmd(flat(sd_batch, i_sd), flat(ed_batch, i_ed), kernel),
            mmd(sd_p[i_sd], ed_p[i_ed], kernel),
        )
        if td_batch is not None:
            i_td = take(td_batch, c)
            if len(i_td) >= 2:
                row.origin_td_sq = mmd(flat(sd_batch, i_sd), flat(td_batch, i_td), kernel)
                row.projection_td_sq = mmd(sd_p[i_sd], td_p[i_td], kernel)
        rows.append(row)
    if rows:
        mean = MMDRow(
            "mean",
            float(np.mean([r.origin_sq for r in rows])),
            float(np.mean([r.projection_sq for r in rows])),
        )
        td_rows = [r for r in rows if r.origin_td_sq is not None]
        if td_rows:
            mean.origin_td_sq = float(np.mean([r.origin_td_sq for r in td_rows]))
            mean.projection_td_sq = float(np.mean([r.projection_td_sq for r in td_rows]))
        rows.append(mean)
    return rows


# -- maps ---------------------------------------------------------------------

DEFAULT_PALETTE: Dict[int, Tuple[int, int, int]] = {
    1: (0, 205, 0),
    2: (127, 255, 0),
    3: (46, 139, 87),
    4: (0, 0, 255),
    5: (255, 0, 0),
    6: (255, 255, 0),
    7: (160, 82, 45),
    8: (255, 0, 255),
    9: (0, 255, 255),
    10: (255, 165, 0),
}

NAMED_COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
}


def colorize(labels: np.ndarray, palette: Optional[Dict[int, Sequence]] = None) -> np.ndarray:
    """``H x W`` label raster to ``H x W x 3`` uint8; label 0 is black."""
    palette = DEFAULT_PALETTE if palette is None else palette
    labels = np.asarray(labels, dtype=np.int64)
    top = int(labels.max()) if labels.size else 0
    missing = sorted(set(np.unique(labels[labels > 0]).tolist()) - set(int(k) for k in palette))
    if missing:
        raise ValueError(f"labels {missing} are not in the palette (max label {top})")
    lut = np.zeros((max(top, max((int(k) for k in palette), default=0)) + 1, 3), dtype=np.uint8)
    for k, color in palette.items():
        lut[int(k)] = NAMED_COLORS[color] if isinstance(color, str) else color
    lut[0] = 0
    return lut[labels]


def render_map(labels: np.ndarray, path, palette: Optional[Dict[int, Sequence]] = None) -> Path:
    """Write a classification map as an 8-bit RGB PNG."""
    from PIL import Image

    path = Path(path)
    Image.fromarray(colorize(labels, palette), mode="RGB").save(path, format="PNG")
    return path


__all__ = [
    "EmbeddingBatch",
    "MetricsReport",
    "confusion_matrix",
    "metrics_from_confusion",
    "compute_metrics",
    "predict_scene",
    "median_bandwidth",
    "mmd",
    "mmd_distance",
    "MMDRow",
    "mmd_report",
    "DEFAULT_PALETTE",
    "colorize",
    "render_map",
]
