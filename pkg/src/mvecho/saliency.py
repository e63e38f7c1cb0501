"""Occlusion sensitivity for key-frame models.

A zero-valued box slides over one view channel. At each position we record
how much the positive-class confidence changes, so negative cells mark
regions the model relies on.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from mvecho import models as M
from mvecho.errors import DataError, DimensionError
from mvecho.preprocess import NUM_VIEWS, MultiViewStack, ViewKind


@dataclass
class OcclusionMap:
    deltas: np.ndarray  # [rows, cols], occluded - baseline
    box: int
    stride: int
    view: ViewKind
    baseline: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.deltas)):
            raise DataError("occlusion deltas must be finite")

    def positions(self):
        """Top-left pixel of the box for every grid cell, as ``(row, col)`` arrays."""
        r, c = self.deltas.shape
        return np.arange(r) * self.stride, np.arange(c) * self.stride

    def argmin(self):
        """Top-left pixel of the most negative cell."""
        i, j = np.unravel_index(int(np.argmin(self.deltas)), self.deltas.shape)
        return int(i) * self.stride, int(j) * self.stride


def grid_extent(size, box, stride):
    if box > size:
        raise DimensionError(f"box {box} larger than input {size}")
    if box < 1 or stride < 1:
        raise DimensionError("box and stride must be positive")
    return (size - box + stride) // stride


def occlude(stack, view, top, left, box):
    """Copy of ``stack`` with a ``box x box`` zero patch in one channel."""
    out = stack.copy()
    out[top : top + box, left : left + box, view] = 0.0
    return out


def confidence(probs, target=None):
    """Positive-class confidence: p(target), or p(any defect) by default."""
    if target is not None:
        return probs[:, target]
    return 1.0 - probs[:, 0]


def occlusion_scan(params, stack, view=ViewKind.A4C, box=4, stride=1, target=None, workers=1, batch_size=64):
    """Dense occlusion map of ``params`` on one ``S x S x 5`` input.

    Positions are evaluated in fixed chunks of ``batch_size``; workers only
    change which thread runs a chunk, so results do not depend on ``workers``.
    """
    x = np.asarray(stack.data if isinstance(stack, MultiViewStack) else stack, dtype=params.dtype)
    if x.ndim != 3 or x.shape[2] != NUM_VIEWS or x.shape[0] != x.shape[1]:
        raise DimensionError(f"expected an S x S x {NUM_VIEWS} stack, got {x.shape}")
    view = ViewKind.parse(view)
    size = x.shape[0]
    n = grid_extent(size, box, stride)
    base_probs, _ = M.predict_proba(params, x[None])
    baseline = float(confidence(base_probs, target)[0])

    # a box over pixels that are already zero leaves the input unchanged: delta 0
    patch = x[:, :, view]
    cells = [
        (i, j) for i in range(n) for j in range(n)
        if np.any(patch[i * stride : i * stride + box, j * stride : j * stride + box])
    ]
    chunks = [cells[k : k + batch_size] for k in range(0, len(cells), batch_size)]

    def run(chunk):
        batch = np.stack([occlude(x, view, i * stride, j * stride, box) for i, j in chunk])
        probs, _ = M.predict_proba(params, batch, batch_size=len(batch))
        return confidence(probs, target)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(run, chunks))
    else:
        scores = [run(c) for c in chunks]
    deltas = np.zeros((n, n))
    if cells:
        rows, cols = zip(*cells)
        deltas[list(rows), list(cols)] = np.concatenate(scores).astype(np.float64) - baseline
    return OcclusionMap(deltas, box, stride, view, baseline)


def ramp(deltas):
    """Min-max normalise to 8-bit gray: most negative -> 0 (black), most positive -> 255.

    A constant map renders mid-gray.
    """
    d = np.asarray(deltas, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.full(d.shape, 128, dtype=np.uint8)
    return np.rint((d - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_heatmap(omap, path, scale=1):
    """Write a grayscale PNG (dark = confidence drop) and a sidecar CSV of raw deltas."""
    img = ramp(omap.deltas)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    path = str(path)
    try:
        Image.fromarray(img).save(path)
        write_deltas_csv(omap, csv_path(path))
    except OSError as exc:
        raise DataError(f"cannot write heatmap {path}: {exc}") from exc
    return path


def csv_path(png_path):
    p = str(png_path)
    return (p[:-4] if p.lower().endswith(".png") else p) + ".csv"


def write_deltas_csv(omap, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "delta"])
        for (i, j), d in np.ndenumerate(omap.deltas):
            writer.writerow([i * omap.stride, j * omap.stride, repr(float(d))])


def read_deltas_csv(path, stride=1):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path} holds no deltas")
    n_r = max(int(r["row"]) for r in rows) // stride + 1
    n_c = max(int(r["col"]) for r in rows) // stride + 1
    grid = np.full((n_r, n_c), np.nan)
    for r in rows:
        grid[int(r["row"]) // stride, int(r["col"]) // stride] = float(r["delta"])
    return grid


def hits_box(omap, defect_box):
    """Whether the centre of the most negative cell's box lies inside ``[top, left, h, w]``.

    Pixel ``i`` spans ``[i, i + 1)``, so a box at ``top`` has its centre at ``top + box / 2``.
    """
    top, left = omap.argmin()
    cy, cx = top + omap.box / 2.0, left + omap.box / 2.0
    d_top, d_left, d_h, d_w = defect_box
    return d_top <= cy <= d_top + d_h and d_left <= cx <= d_left + d_w
