"""Manifests, clip cropping, virtual-patient augmentation and the phantom generator.

On disk a dataset is a directory holding ``manifest.json``, ``geometry.json``
and one folder of numbered 8-bit PNG frames per (subject, view)::

    root/
      manifest.json
      geometry.json
      studies/<subject>/<VIEW>/frame_000.png ...
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mvecho.errors import DataError
from mvecho.preprocess import (
    NUM_VIEWS,
    Geometry,
    Roi,
    ViewKind,
    load_png,
    preprocess_frame,
    save_png,
    sector_polygon,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LABELS = ("negative", "VSD", "ASD")
SPLITS = ("train", "val", "test")
DEFECTS = {"negative": "none", "VSD": "septal_gap_ventricular", "ASD": "septal_gap_atrial"}


def label_index(label):
    try:
        return LABELS.index(label)
    except ValueError:
        raise DataError(f"unknown label {label!r}; expected one of {LABELS}") from None


# -- manifest ------------------------------------------------------------------


@dataclass
class ClipRef:
    path: str  # directory of PNG frames, relative to the manifest
    num_frames: int
    fps: float
    key_frame_index: int | None = None
    donor: str | None = None  # subject the clip was borrowed from (virtual records)
    defect_box: list | None = None  # [top, left, height, width] in ROI pixels

    def to_json(self):
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class StudyRecord:
    subject_id: str
    label: str
    split: str
    clips: dict  # view name -> ClipRef
    virtual: bool = False
    source: str | None = None  # base subject of a virtual record

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"{self.subject_id}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise DataError(f"{self.subject_id}: unknown split {self.split!r}")
        if not self.clips:
            raise DataError(f"{self.subject_id}: a study needs at least one view")
        self.clips = {ViewKind.parse(k).name: v for k, v in self.clips.items()}

    @property
    def label_index(self):
        return label_index(self.label)

    @property
    def views(self):
        return sorted(ViewKind[v] for v in self.clips)

    def subjects(self):
        """Every real subject whose data this record carries."""
        out = {self.source or self.subject_id}
        out.update(c.donor for c in self.clips.values() if c.donor)
        return out

    def to_json(self):
        doc = {
            "subject_id": self.subject_id,
            "label": self.label,
            "split": self.split,
            "clips": {v: c.to_json() for v, c in sorted(self.clips.items(), key=lambda kv: ViewKind[kv[0]])},
        }
        if self.virtual:
            doc["virtual"] = True
            doc["source"] = self.source
        return doc

    @classmethod
    def from_json(cls, doc):
        try:
            clips = {v: ClipRef(**c) for v, c in doc["clips"].items()}
            return cls(doc["subject_id"], doc["label"], doc["split"], clips, doc.get("virtual", False), doc.get("source"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed study record: {exc}") from exc


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    provenance: list = field(default_factory=list)
    geometry: str = "geometry.json"
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [r.subject_id for r in self.records]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate subject ids: {dupes[:5]}")

    def class_counts(self, split=None):
        counts = {label: 0 for label in LABELS}
        for r in self.records:
            if split is None or r.split == split:
                counts[r.label] += 1
        return counts

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def to_json(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "geometry": self.geometry,
            "provenance": list(self.provenance),
            "class_counts": {s: self.class_counts(s) for s in SPLITS},
            "records": [r.to_json() for r in self.records],
        }

    @classmethod
    def from_json(cls, doc, root=None):
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported manifest schema version {doc.get('schema_version')!r}")
        records = [StudyRecord.from_json(r) for r in doc.get("records", [])]
        m = cls(records, list(doc.get("provenance", [])), doc.get("geometry", "geometry.json"), root)
        stored = doc.get("class_counts")
        if stored is not None and stored != {s: m.class_counts(s) for s in SPLITS}:
            raise DataError("manifest class counts do not match its records")
        return m

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=1))
        tmp.replace(path)
        self.root = path.parent

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_json(doc, root=path.parent)

    def load_geometry(self):
        if self.root is None:
            raise DataError("manifest has no root directory; load it from disk first")
        return Geometry.load(self.root / self.geometry)


def audit_leakage(manifest):
    """Return human-readable violations of patient independence (empty when clean)."""
    owners = {}
    problems = []
    for r in manifest.records:
        for subject in r.subjects():
            owners.setdefault(subject, set()).add(r.split)
    for subject, splits in sorted(owners.items()):
        if len(splits) > 1:
            problems.append(f"subject {subject} appears in splits {sorted(splits)}")
    for r in manifest.records:
        for view, clip in r.clips.items():
            if clip.donor:
                donor = next((d for d in manifest.records if d.subject_id == clip.donor), None)
                if donor is not None and donor.label != r.label:
                    problems.append(f"{r.subject_id}/{view} borrowed from {clip.donor} of class {donor.label}")
    return problems


# -- clips ---------------------------------------------------------------------


@dataclass
class ViewClip:
    frames: np.ndarray  # [K, H, W]
    view: ViewKind
    key_frame_index: int | None = None
    start: int = 0


def crop_clip(frames, fps, duration=0.8, seed=0, key_frame_index=None, view=ViewKind.A4C, contain_key=False):
    """Random contiguous window of ``round(duration * fps)`` frames.

    With ``contain_key`` the window is drawn among those holding the key frame.
    """
    frames = np.asarray(frames)
    n = len(frames)
    length = int(round(duration * fps))
    if length < 1:
        raise DataError(f"window of {duration}s at {fps} fps is empty")
    if n < length:
        raise DataError(f"clip has {n} frames, window needs {length}")
    lo, hi = 0, n - length
    if contain_key and key_frame_index is not None:
        lo, hi = max(0, key_frame_index - length + 1), min(hi, key_frame_index)
    start = int(np.random.default_rng(seed).integers(lo, hi + 1))
    key = None
    if key_frame_index is not None and start <= key_frame_index < start + length:
        key = key_frame_index - start
    return ViewClip(frames[start : start + length], ViewKind.parse(view), key, start)


# -- augmentation -----------------------------------------------------------------


def augment_virtual_patients(manifest, factor=4, seed=0):
    """Add ``factor`` virtual copies of every positive training record.

    Each copy keeps its base record's views and fills missing ones from random
    same-class training donors. Val and test records are untouched.
    """
    if factor < 0 or int(factor) != factor:
        raise DataError(f"factor must be a non-negative integer, got {factor}")
    rng = np.random.default_rng(seed)
    train = [r for r in manifest.records if r.split == "train" and not r.virtual]
    donors = {}
    for r in train:
        for view in r.clips:
            donors.setdefault((r.label, view), []).append(r)
    added = []
    for base in train:
        if base.label == "negative":
            continue
        for copy_idx in range(int(factor)):
            clips = {v: dataclasses.replace(c) for v, c in base.clips.items()}
            for view in ViewKind:
                if view.name in clips:
                    continue
                pool = [d for d in donors.get((base.label, view.name), []) if d.subject_id != base.subject_id]
                if not pool:
                    warnings.warn(f"no {base.label} donor with a {view.name} view; {base.subject_id} keeps it empty")
                    continue
                donor = pool[int(rng.integers(len(pool)))]
                clips[view.name] = dataclasses.replace(donor.clips[view.name], donor=donor.subject_id)
            added.append(
                StudyRecord(f"{base.subject_id}~v{copy_idx + 1}", base.label, "train", clips, True, base.subject_id)
            )
    note = f"augment_virtual_patients(factor={factor}, seed={seed}): +{len(added)} positive records"
    return Manifest(manifest.records + added, manifest.provenance + [note], manifest.geometry, manifest.root)


# -- phantom generator ---------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic echo-like studies with septal defect signatures.

    ``roi_size`` is the side of the square ROI in raw pixels; frames carry a
    ``margin`` of annotation band on every side. ``defect_size`` is in raw
    pixels (equal to model pixels when the model input size equals roi_size).
    """

    roi_size: int = 128
    margin: int = 8
    fps: float = 37.5
    cycle_seconds: float = 0.8
    cycles: int = 3
    defect_size: int = 8
    defect_jitter: int = 3
    visibility_floor: float = 0.35
    valve_contrast: float = 0.5
    noise: float = 0.06
    geometry_jitter: float = 0.04
    missing_view_prob: float = 0.0
    sector_half_angle: float = 45.0

    def __post_init__(self):
        if self.roi_size < 32:
            raise DataError("roi_size must be at least 32")
        if not 0.0 <= self.visibility_floor <= 1.0:
            raise DataError("visibility_floor must lie in [0, 1]")
        if not 0.0 <= self.valve_contrast <= 1.0:
            raise DataError("valve_contrast must lie in [0, 1]")
        if self.cycle_frames < 3 or self.cycles < 1:
            raise DataError("need at least one cycle of three frames")
        if not 0.0 <= self.missing_view_prob < 1.0:
            raise DataError("missing_view_prob must lie in [0, 1)")

    @property
    def cycle_frames(self):
        return int(round(self.cycle_seconds * self.fps))

    @property
    def num_frames(self):
        return self.cycle_frames * self.cycles

    @property
    def frame_shape(self):
        side = self.roi_size + 2 * self.margin
        return side, side

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise DataError(f"invalid phantom spec: unknown fields {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, DataError) as exc:
            raise DataError(f"invalid phantom spec: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read phantom spec {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataError("phantom spec must be a JSON object")
        return cls.from_json(doc)


def phantom_geometry(spec):
    h, w = spec.frame_shape
    m, r = spec.margin, spec.roi_size
    poly = sector_polygon(r, r, spec.sector_half_angle)
    # shift the fan into the ROI
    poly = [(x + m, y + m) for x, y in poly]
    return Geometry(h, w, poly, Roi(m, m, r, r))


# Chamber layout per view, in ROI-relative units (row, col, radius_row, radius_col).
_CHAMBERS = {
    ViewKind.PSLAX: [(0.58, 0.50, 0.10, 0.30), (0.32, 0.48, 0.07, 0.24), (0.44, 0.80, 0.07, 0.07)],
    ViewKind.PSSAX: [(0.55, 0.50, 0.17, 0.17), (0.42, 0.28, 0.10, 0.06)],
    ViewKind.A4C: [(0.38, 0.64, 0.16, 0.11), (0.38, 0.36, 0.16, 0.11), (0.73, 0.63, 0.12, 0.11), (0.73, 0.37, 0.12, 0.11)],
    ViewKind.SXLAX: [(0.42, 0.62, 0.13, 0.11), (0.64, 0.38, 0.13, 0.11)],
    ViewKind.SSLAX: [],
}
# Valve leaflet centre (row, col) per view, inside a dark chamber (or the SSLAX
# arch) and at least 0.2 from every defect site along one axis, so neither the
# defect box nor a ring of half a box around it ever reaches the leaflet.
_VALVES = {
    ViewKind.PSLAX: (0.62, 0.74),
    ViewKind.PSSAX: (0.55, 0.50),
    ViewKind.A4C: (0.38, 0.70),
    ViewKind.SXLAX: (0.33, 0.66),
    ViewKind.SSLAX: (0.50, 0.50),
}
# Defect centres (row, col) per (view, label); absent entries carry no sign.
_DEFECT_SITES = {
    (ViewKind.A4C, "VSD"): (0.40, 0.50),
    (ViewKind.PSLAX, "VSD"): (0.45, 0.50),
    (ViewKind.A4C, "ASD"): (0.74, 0.50),
    (ViewKind.SXLAX, "ASD"): (0.53, 0.50),
}


def _septum_mask(view, yy, xx, scale):
    """Bright septal band per view, in ROI-relative coordinates."""
    if view == ViewKind.A4C:
        return (np.abs(xx - 0.5) < 0.03 * scale) & (yy > 0.22) & (yy < 0.86)
    if view == ViewKind.PSLAX:
        return (np.abs(yy - 0.45) < 0.03 * scale) & (np.abs(xx - 0.48) < 0.3)
    if view == ViewKind.SXLAX:
        return (np.abs((yy - 0.53) + (xx - 0.5)) < 0.04 * scale) & (np.abs(yy - 0.53) < 0.2)
    if view == ViewKind.SSLAX:
        rad = np.hypot(yy - 0.66, xx - 0.5)
        return (rad > 0.18) & (rad < 0.3) & (yy < 0.66)
    return np.zeros_like(yy, dtype=bool)


def _phase_curve(spec, key_phase, amplitudes):
    """Per-frame defect visibility in [floor, 1] and valve closure in [0, 1].

    The valve closes around the key phase of every cycle, so the key frame is
    locatable in clips without a defect as well.
    """
    n, c = spec.num_frames, spec.cycle_frames
    t = np.arange(n)
    phase = (t % c) / c
    cycle = t // c
    dist = np.abs(phase - key_phase)
    dist = np.minimum(dist, 1.0 - dist)
    peak = np.exp(-0.5 * (dist * c / 0.8) ** 2)
    vis = spec.visibility_floor + (1.0 - spec.visibility_floor) * peak * np.asarray(amplitudes)[cycle]
    return vis, peak


def render_clip(spec, view, label, rng):
    """Frames ``[K, H, W]`` in [0, 1], the key frame index and the defect box (ROI pixels)."""
    view = ViewKind.parse(view)
    h, w = spec.frame_shape
    r, m = spec.roi_size, spec.margin
    k = spec.num_frames
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = (yy - m) / r, (xx - m) / r

    jitter = spec.geometry_jitter
    dy, dx = rng.uniform(-jitter, jitter, 2)
    scale = 1.0 + rng.uniform(-jitter, jitter)
    # the key phase sits on a frame so that the peak is a single frame
    key_phase = round(rng.uniform(0.25, 0.75) * spec.cycle_frames) / spec.cycle_frames
    key_cycle = int(rng.integers(spec.cycles))
    amplitudes = rng.uniform(0.45, 0.7, spec.cycles)
    amplitudes[key_cycle] = 1.0
    vis, closure = _phase_curve(spec, key_phase, amplitudes)
    key_index = key_cycle * spec.cycle_frames + int(round(key_phase * spec.cycle_frames)) % spec.cycle_frames

    # static tissue texture, smoothed speckle
    speckle = rng.random((h // 4 + 2, w // 4 + 2))
    speckle = np.kron(speckle, np.ones((4, 4)))[:h, :w]
    tissue = 0.28 + 0.18 * speckle

    sy, sx = yy - dy, xx - dx
    img = tissue.copy()
    for cy, cx, ry, rx in _CHAMBERS[view]:
        d = ((sy - cy) / (ry * scale)) ** 2 + ((sx - cx) / (rx * scale)) ** 2
        img = np.where(d < 1.35, np.maximum(img, 0.62), img)
        img = np.where(d < 1.0, 0.06, img)
    img = np.where(_septum_mask(view, sy, sx, scale), 0.55, img)
    frames = np.repeat(img[None], k, axis=0)

    # draw the defect jitter and texture for every label so that the noise
    # stream (and so everything outside the box) is label independent
    jy, jx = rng.integers(-spec.defect_jitter, spec.defect_jitter + 1, 2)
    patch = 0.9 + 0.1 * rng.random((spec.defect_size, spec.defect_size))
    box = None
    site = _DEFECT_SITES.get((view, label))
    if site is not None:
        half = spec.defect_size / 2.0
        top = int(round((site[0] + dy) * r + jy - half))
        left = int(round((site[1] + dx) * r + jx - half))
        top = min(max(top, 0), r - spec.defect_size)
        left = min(max(left, 0), r - spec.defect_size)
        box = [top, left, spec.defect_size, spec.defect_size]
        # textured bright patch whose contrast follows the visibility curve
        rows = slice(top + m, top + m + spec.defect_size)
        cols = slice(left + m, left + m + spec.defect_size)
        for t in range(k):
            base = frames[t, rows, cols]
            frames[t, rows, cols] = base + (patch - base) * vis[t]

    # valve leaflets inside a chamber, bright while closed around the key phase;
    # they sit away from the defect sites, so defect contrast is unaffected
    vy, vx = _VALVES[view]
    valve = (np.abs(sy - vy) < 0.025 * scale) & (np.abs(sx - vx) < 0.025 * scale)
    frames[:, valve] += spec.valve_contrast * closure[:, None]

    frames += rng.normal(0.0, spec.noise, frames.shape)
    # burned-in annotations outside the sector but inside the ROI corners and the margin
    frames[:, m : m + 5, m : m + 14] = 1.0
    frames[:, m : m + 4, m + r - 12 : m + r - 2] = 0.9
    frames[:, : max(m - 2, 1), :] = 0.8
    return np.clip(frames, 0.0, 1.0), key_index, box


def defect_visibility(frames, box, margin):
    """Mean patch contrast against a surrounding ring, per frame (oracle helper)."""
    top, left, size, _ = box
    t0, l0 = top + margin, left + margin
    inner = frames[:, t0 : t0 + size, l0 : l0 + size].mean(axis=(1, 2))
    ring = frames[:, max(t0 - 3, 0) : t0 + size + 3, max(l0 - 3, 0) : l0 + size + 3]
    ring_mean = (ring.sum(axis=(1, 2)) - inner * size * size) / (ring[0].size - size * size)
    return inner - ring_mean


def _assign_splits(n, split_counts):
    if split_counts is None:
        n_test = max(1, int(round(0.1 * n)))
        n_val = max(1, int(round(0.1 * n)))
        split_counts = (n - n_test - n_val, n_val, n_test)
    if sum(split_counts) != n:
        raise DataError(f"split counts {split_counts} do not add up to {n} studies")
    return np.repeat(np.arange(3), split_counts)


def generate_phantom_dataset(spec, n_per_class, seed, out_dir, split_counts=None, workers=1, labels=LABELS):
    """Render ``n_per_class`` studies per label and write PNG frames plus a manifest.

    With ``n_per_class=None`` the study count is ``sum(split_counts)``. Labels
    are interleaved so every split is (as near as possible) class balanced.
    Output is a pure function of ``(spec, n_per_class, seed, split_counts)``.
    """
    if n_per_class is None:
        if split_counts is None:
            raise DataError("need n_per_class or split_counts")
        n = int(sum(split_counts))
    else:
        n = n_per_class * len(labels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = _assign_splits(n, split_counts)
    study_labels = [labels[i % len(labels)] for i in range(n)]
    seeds = np.random.SeedSequence(seed).spawn(n)
    geometry = phantom_geometry(spec)
    geometry.save(out / "geometry.json")

    def build(i):
        rng = np.random.default_rng(seeds[i])
        sid = f"P{i:05d}"
        label = study_labels[i]
        present = rng.random(NUM_VIEWS) >= spec.missing_view_prob
        if not present.any():
            present[int(rng.integers(NUM_VIEWS))] = True
        clips = {}
        for view in ViewKind:
            view_rng = np.random.default_rng(seeds[i].spawn(NUM_VIEWS)[view])
            if not present[view]:
                continue
            frames, key, box = render_clip(spec, view, label, view_rng)
            rel = f"studies/{sid}/{view.name}"
            (out / rel).mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(frames):
                save_png(out / rel / f"frame_{t:03d}.png", frame)
            clips[view.name] = ClipRef(rel, len(frames), spec.fps, key, None, box)
        return StudyRecord(sid, label, SPLITS[split_of[i]], clips)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]
    note = f"phantom(seed={seed}, n_per_class={n_per_class}, spec={json.dumps(spec.to_json(), sort_keys=True)})"
    manifest = Manifest(records, [note])
    manifest.save(out / "manifest.json")
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    return manifest


# -- loaders --------------------------------------------------------------------------


def load_clip_frames(manifest, clip, frames=None):
    """Raw frames ``[K, H, W]`` (or only indices in ``frames``) of one ClipRef."""
    root = manifest.root or Path(".")
    idx = range(clip.num_frames) if frames is None else frames
    base = root / clip.path
    if not base.is_dir():
        raise DataError(f"clip directory {base} is missing")
    out = []
    for t in idx:
        arr = load_png(base / f"frame_{t:03d}.png")
        if arr.ndim == 3:
            arr = arr @ np.array([0.299, 0.587, 0.114])
        out.append(arr)
    return np.stack(out)


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class KeyframeSet:
    x: np.ndarray  # [N, S, S, 5]
    labels: np.ndarray  # 3-class indices
    present: np.ndarray  # [N, 5]
    subject_ids: list

    def binary_labels(self):
        return (self.labels > 0).astype(int)

    def targets(self, head):
        return self.binary_labels() if head == "binary" else self.labels


def load_keyframe_set(manifest, split, size, workers=1, dtype=np.float32):
    """Key frame of every present view, preprocessed and stacked in view order."""
    geometry = manifest.load_geometry()
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")

    def one(r):
        stack = np.zeros((size, size, NUM_VIEWS), dtype=dtype)
        present = np.zeros(NUM_VIEWS, dtype=bool)
        for view in r.views:
            clip = r.clips[view.name]
            key = clip.key_frame_index if clip.key_frame_index is not None else clip.num_frames // 2
            frame = load_clip_frames(manifest, clip, [key])[0]
            stack[:, :, view] = preprocess_frame(frame, geometry, size)
            present[view] = True
        return stack, present

    pairs = _map(one, records, workers)
    return KeyframeSet(
        np.stack([p[0] for p in pairs]),
        np.array([r.label_index for r in records]),
        np.stack([p[1] for p in pairs]),
        [r.subject_id for r in records],
    )


def preprocess_clip(frames, geometry, size):
    return np.stack([preprocess_frame(f, geometry, size) for f in frames])


def load_full_clips(manifest, split, size, workers=1, dtype=np.float32):
    """Whole preprocessed clips per study: ``[(record, {view: ViewClip})]``."""
    geometry = manifest.load_geometry()
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")

    def one(r):
        out = {}
        for view in r.views:
            ref = r.clips[view.name]
            frames = preprocess_clip(load_clip_frames(manifest, ref), geometry, size).astype(dtype)
            out[view] = ViewClip(frames, view, ref.key_frame_index, 0)
        return r, out

    return _map(one, records, workers)


def crop_studies(full, fps_of, duration=0.8, seed=0, contain_key=True):
    """Crop every clip of ``load_full_clips`` output; one seed stream per study."""
    seeds = np.random.SeedSequence(seed).spawn(len(full))
    out = []
    for (record, views), ss in zip(full, seeds):
        rng = np.random.default_rng(ss)
        cropped = {}
        for view, clip in views.items():
            fps = fps_of(record, view)
            cropped[view] = crop_clip(
                clip.frames, fps, duration, int(rng.integers(2**31)), clip.key_frame_index, view, contain_key
            )
        out.append((record, cropped))
    return out


def clip_fps(record, view):
    return record.clips[ViewKind.parse(view).name].fps


def load_view_clips(manifest, split, size, duration=0.8, seed=0, contain_key=True, workers=1, dtype=np.float32):
    """Cropped, preprocessed clips per study: ``[(record, {view: ViewClip})]``.

    Each crop is drawn from the raw clip before preprocessing, so only the
    window's frames are resized. The result equals ``crop_studies`` applied to
    ``load_full_clips`` with the same seed.
    """
    geometry = manifest.load_geometry()
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    seeds = np.random.SeedSequence(seed).spawn(len(records))

    def one(item):
        idx, r = item
        rng = np.random.default_rng(seeds[idx])
        out = {}
        for view in r.views:
            ref = r.clips[view.name]
            raw = load_clip_frames(manifest, ref)
            clip = crop_clip(raw, ref.fps, duration, int(rng.integers(2**31)), ref.key_frame_index, view, contain_key)
            clip.frames = preprocess_clip(clip.frames, geometry, size).astype(dtype)
            out[view] = clip
        return r, out

    return _map(one, list(enumerate(records)), workers)


def resample_clip(frames, src_fps, dst_fps, key_frame_index=None):
    """Nearest-frame temporal resampling; the key frame maps to its nearest sample."""
    frames = np.asarray(frames)
    if dst_fps <= 0 or src_fps <= 0:
        raise DataError("frame rates must be positive")
    n_out = max(1, int(math.floor(len(frames) * dst_fps / src_fps)))
    src_idx = np.minimum(np.round(np.arange(n_out) * src_fps / dst_fps).astype(int), len(frames) - 1)
    key = None
    if key_frame_index is not None:
        key = int(np.argmin(np.abs(src_idx - key_frame_index)))
    return frames[src_idx], key


def records_by_id(manifest):
    return {r.subject_id: r for r in manifest.records}
