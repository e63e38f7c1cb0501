"""Frame preparation: grayscale, sector masking, ROI crop, resize, view stacking."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from mvecho.errors import DataError, DimensionError


class ViewKind(enum.IntEnum):
    """The five standard views; the ordinal is the stacking channel."""

    PSLAX = 0
    PSSAX = 1
    A4C = 2
    SXLAX = 3
    SSLAX = 4

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown view {value!r}; expected one of {[v.name for v in cls]}") from None


NUM_VIEWS = len(ViewKind)


@dataclass(frozen=True)
class Roi:
    top: int
    left: int
    height: int
    width: int

    def check(self, shape):
        h, w = shape[:2]
        if self.height <= 0 or self.width <= 0:
            raise DimensionError(f"empty roi {self}")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise DimensionError(f"roi {self} outside frame of {h}x{w}", expected=(h, w))


@dataclass
class MultiViewStack:
    """``S x S x 5`` key-frame input; absent views are zero channels."""

    data: np.ndarray
    present: np.ndarray = field(default_factory=lambda: np.zeros(NUM_VIEWS, dtype=bool))

    @property
    def size(self):
        return self.data.shape[0]


@dataclass
class Geometry:
    """Per-source sector polygon (x, y vertices) and ROI rectangle."""

    frame_height: int
    frame_width: int
    polygon: list
    roi: Roi

    def mask(self):
        return polygon_mask(self.frame_height, self.frame_width, self.polygon)

    def to_json(self):
        return {
            "frame_height": self.frame_height,
            "frame_width": self.frame_width,
            "mask": {"polygon": [list(map(float, p)) for p in self.polygon]},
            "roi": {"top": self.roi.top, "left": self.roi.left, "height": self.roi.height, "width": self.roi.width},
        }

    @classmethod
    def from_json(cls, doc):
        try:
            roi = Roi(**{k: int(doc["roi"][k]) for k in ("top", "left", "height", "width")})
            geo = cls(int(doc["frame_height"]), int(doc["frame_width"]), [tuple(p) for p in doc["mask"]["polygon"]], roi)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed geometry document: {exc}") from exc
        if len(geo.polygon) < 3:
            raise DataError("geometry polygon needs at least three vertices")
        return geo

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read geometry {path}: {exc}") from exc
        return cls.from_json(doc)


def sector_polygon(height, width, half_angle_deg=40.0, segments=32):
    """Fan-shaped polygon with its apex at the top centre, spanning the frame height."""
    apex = ((width - 1) / 2.0, 0.0)
    radius = height - 1.0
    pts = [apex]
    for k in range(segments + 1):
        theta = math.radians(-half_angle_deg + 2 * half_angle_deg * k / segments)
        pts.append((apex[0] + radius * math.sin(theta), apex[1] + radius * math.cos(theta)))
    return pts


def default_geometry(height, width, half_angle_deg=40.0):
    """Full-sector mask with the sector's bounding box as ROI (synthetic data default)."""
    poly = sector_polygon(height, width, half_angle_deg)
    xs = [p[0] for p in poly]
    left = max(int(math.floor(min(xs))), 0)
    right = min(int(math.ceil(max(xs))) + 1, width)
    return Geometry(height, width, poly, Roi(0, left, height, right - left))


def polygon_mask(height, width, polygon):
    img = Image.new("1", (width, height), 0)
    ImageDraw.Draw(img).polygon([tuple(map(float, p)) for p in polygon], fill=1, outline=1)
    return np.asarray(img, dtype=bool)


def to_grayscale(rgb_frame):
    """ITU-R 601 luma of an ``H x W x 3`` frame in [0, 1]; 2-D input passes through."""
    rgb = np.asarray(rgb_frame, dtype=np.float64)
    if rgb.ndim == 2:
        return np.clip(rgb, 0.0, 1.0)
    if rgb.ndim != 3 or rgb.shape[2] not in (3, 4):
        raise DimensionError(f"expected H x W x 3 frame, got {rgb.shape}")
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    # exact pass-through for already-gray frames (weights sum to 1 only up to rounding)
    gray_in = (rgb[..., 0] == rgb[..., 1]) & (rgb[..., 1] == rgb[..., 2])
    gray = np.where(gray_in, rgb[..., 0], gray)
    return np.clip(gray, 0.0, 1.0)


def apply_mask_and_crop(frame, mask, roi):
    """Zero pixels outside ``mask`` then take the ``roi`` rectangle."""
    frame = np.asarray(frame)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != frame.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match frame {frame.shape[:2]}")
    roi.check(frame.shape)
    masked = np.where(mask, frame, 0.0)
    return masked[roi.top : roi.top + roi.height, roi.left : roi.left + roi.width]


def resize_bilinear(frame, target):
    """Corner-aligned bilinear resize to ``target`` (int or (h, w))."""
    th, tw = (target, target) if isinstance(target, (int, np.integer)) else target
    if th < 2 or tw < 2:
        raise DimensionError(f"target extents must be >= 2, got {(th, tw)}")
    src = np.asarray(frame, dtype=np.float64)
    h, w = src.shape

    def axis(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1.0, n_out)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, th)
    x0, x1, wx = axis(w, tw)
    rows = src[y0] * (1.0 - wy)[:, None] + src[y1] * wy[:, None]
    out = rows[:, x0] * (1.0 - wx)[None, :] + rows[:, x1] * wx[None, :]
    return np.clip(out, 0.0, 1.0)


def preprocess_frame(frame, geometry=None, size=128):
    """Full per-frame pipeline: grayscale, mask, crop, resize."""
    gray = to_grayscale(frame)
    if geometry is not None:
        if (geometry.frame_height, geometry.frame_width) != gray.shape:
            raise DimensionError(
                f"geometry is for {geometry.frame_height}x{geometry.frame_width} frames, got {gray.shape}"
            )
        gray = apply_mask_and_crop(gray, geometry.mask(), geometry.roi)
    return resize_bilinear(gray, size)


def stack_views(frames, size=None):
    """Place each view's ``S x S`` frame at its fixed channel; missing views stay zero."""
    frames = {ViewKind.parse(k): np.asarray(v) for k, v in frames.items()}
    if size is None:
        size = next(iter(frames.values())).shape[0] if frames else 128
    data = np.zeros((size, size, NUM_VIEWS))
    present = np.zeros(NUM_VIEWS, dtype=bool)
    for view, frame in frames.items():
        if frame.shape != (size, size):
            raise DimensionError(f"{view.name} frame is {frame.shape}, expected {(size, size)}")
        data[:, :, view] = frame
        present[view] = True
    return MultiViewStack(data, present)


def load_png(path):
    """Read an 8-bit gray or RGB PNG as floats in [0, 1] (RGB kept as H x W x 3)."""
    try:
        with Image.open(path) as img:
            img = img.convert("L") if img.mode in ("L", "I", "1", "P", "LA") else img.convert("RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def save_png(path, frame):
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
