"""Route unordered clips to view slots.

A single-slot video model with a five-way head predicts each clip's view.
Clips are then assigned greedily: the most confident clip picks first, and a
clip whose favourite slot is taken falls back to its next most probable free
slot.
"""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mvecho import aggregation as A
from mvecho.errors import DataError, DimensionError
from mvecho.preprocess import NUM_VIEWS, ViewKind


@dataclass(frozen=True)
class ViewPrediction:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (NUM_VIEWS,):
            raise DimensionError(f"view probabilities must have {NUM_VIEWS} entries, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DataError(f"view probabilities must lie on the simplex, got sum {p.sum():.12g}")
        object.__setattr__(self, "probs", p)

    @property
    def argmax(self):
        return ViewKind(int(np.argmax(self.probs)))

    @property
    def confidence(self):
        return float(np.max(self.probs))

    def preference(self):
        """Slots from most to least probable; equal probabilities keep view order."""
        return [ViewKind(int(i)) for i in np.argsort(-self.probs, kind="stable")]


@dataclass
class Assignment:
    slot: dict = field(default_factory=lambda: {v: None for v in ViewKind})
    unassigned: list = field(default_factory=list)

    def slot_of(self, clip_id):
        return next((v for v, c in self.slot.items() if c == clip_id), None)

    def filled(self):
        return {v: c for v, c in self.slot.items() if c is not None}


def view_model_config(cfg):
    """The view classifier shares the diagnosis backbone and aggregation scheme."""
    return dataclasses.replace(cfg, slots=1, head="view")


def build_view_model(cfg, seed=0, dtype=np.float32):
    return A.build_video_model(view_model_config(cfg), seed, dtype)


def _check_view_model(params):
    cfg = params.config
    if cfg.slots != 1 or cfg.head != "view":
        raise DataError(f"not a view model (slots={cfg.slots}, head={cfg.head!r})")


def classify_view(params, frames):
    """View probabilities for one clip ``[K, S, S]``."""
    return classify_views(params, [frames])[0]


def classify_views(params, clips, workers=1, batch_size=8):
    """Classify several clips; with ``workers > 1`` chunks run in parallel."""
    _check_view_model(params)
    studies = [A.StudyClips({0: np.asarray(c)}) for c in clips]
    chunks = [studies[i : i + batch_size] for i in range(0, len(studies), batch_size)]

    def run(chunk):
        return [ViewPrediction(p.probabilities) for p in A.video_predict(params, chunk, batch_size)]

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [p for part in parts for p in part]


def resolve_assignment(preds):
    """Greedy unique assignment of ``[(clip_id, ViewPrediction)]`` to view slots.

    Clips are visited by descending confidence, ties by clip id. Each takes
    the most probable slot still free. With more clips than slots the
    leftovers are reported as unassigned.
    """
    if not preds:
        raise DataError("no clips to route")
    ids = [cid for cid, _ in preds]
    if len(set(ids)) != len(ids):
        raise DataError("clip ids must be unique")
    out = Assignment()
    for cid, pred in sorted(preds, key=lambda item: (-item[1].confidence, str(item[0]))):
        slot = next((v for v in pred.preference() if out.slot[v] is None), None)
        if slot is None:
            out.unassigned.append(cid)
        else:
            out.slot[slot] = cid
    return out


def route_clips(params, clips, workers=1):
    """Classify ``{clip_id: frames}`` and assign them; returns (assignment, predictions)."""
    ids = list(clips)
    preds = classify_views(params, [clips[i] for i in ids], workers)
    pairs = list(zip(ids, preds))
    return resolve_assignment(pairs), dict(pairs)


def audit_rows(preds, assignment):
    rows = []
    for cid, pred in sorted(preds.items(), key=lambda kv: str(kv[0])):
        slot = assignment.slot_of(cid)
        rows.append((cid, pred.argmax.name, pred.confidence, slot.name if slot is not None else ""))
    return rows


def write_audit_csv(path, preds, assignment):
    """One row per clip: id, predicted view, confidence, final slot (blank if unassigned)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "predicted_view", "confidence", "slot"])
        for cid, view, conf, slot in audit_rows(preds, assignment):
            writer.writerow([cid, view, f"{conf:.8g}", slot])


def view_training_set(studies):
    """Turn diagnosis studies into single-clip view examples labelled by slot."""
    out = []
    for st in studies:
        for slot, frames in sorted(st.clips.items()):
            key = st.key_frames.get(slot)
            out.append(
                A.StudyClips({0: frames}, {0: key} if key is not None else {}, int(slot), f"{st.subject_id}/{slot}")
            )
    return out


def view_accuracy(params, examples):
    preds = classify_views(params, [ex.clips[0] for ex in examples])
    return float(np.mean([p.argmax == ex.label for p, ex in zip(preds, examples)]))
