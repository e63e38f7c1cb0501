"""Variable-length clip aggregation and the video-based multi-view classifier.

Four schemes turn ``K`` per-frame feature maps ``[K, H, W, D]`` of one view
into a single ``H*W*D`` vector:

``frameind``
    linear quality score per frame, softmax, ``(1/K) sum a_k f_k`` then an
    elementwise ``tanh(w * r + b)``.
``rnn``
    bi-directional LSTM over the flattened frames, linear readout to one score
    per step, softmax, weighted sum.
``nonlocal``
    dot-product non-local block over all ``K*H*W`` positions with a residual
    path, then the average of the K reconstructed maps.
``temporal``
    shared spatial conv to a per-frame vector, two kernel-3 temporal convs to
    one score per frame, softmax, weighted sum.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from mvecho import checkpoint
from mvecho import models as M
from mvecho.engine import Adam, Tensor, no_grad
from mvecho.engine import functional as F
from mvecho.engine.tensor import as_tensor, concat, matmul, relu, reshape, softmax, stack, tanh, transpose, tsum
from mvecho.errors import CheckpointError, ConfigError, DataError, DimensionError, NumericError
from mvecho.preprocess import NUM_VIEWS, ViewKind

log = logging.getLogger(__name__)

SCHEMES = ("frameind", "rnn", "nonlocal", "temporal")
SUPERVISABLE = ("frameind", "rnn", "temporal")
VIDEO_HEADS = {"binary": 1, "three_class": 3, "view": NUM_VIEWS}


@dataclass
class ClipFeatures:
    frames: np.ndarray  # [K, H, W, D]
    view: ViewKind = ViewKind.A4C
    key_frame_index: int | None = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise DimensionError(f"clip features must be [K>=1, H, W, D], got {self.frames.shape}")
        if self.key_frame_index is not None and not 0 <= self.key_frame_index < self.frames.shape[0]:
            raise DimensionError(f"key frame {self.key_frame_index} outside clip of {self.frames.shape[0]}")


@dataclass
class Aggregate:
    feature: Tensor  # flattened H*W*D vector
    weights: Tensor | None = None  # K-vector on the simplex
    scores: Tensor | None = None  # pre-softmax scores where they exist


def _frames(clip):
    if isinstance(clip, ClipFeatures):
        return Tensor(clip.frames)
    clip = as_tensor(clip)
    if clip.ndim != 4 or clip.shape[0] < 1:
        raise DimensionError(f"clip features must be [K>=1, H, W, D], got {clip.shape}")
    return clip


def _flat(frames):
    return reshape(frames, (frames.shape[0], -1))


# -- parameters ----------------------------------------------------------------


def init_aggregator(scheme, feature_shape, rng, dtype=np.float64, rnn_hidden=64, temporal_channels=(128, 64)):
    """Fresh parameters (prefix-free names) for one view's aggregator."""
    h, w, d = feature_shape
    size = h * w * d
    p = {}
    if scheme == "frameind":
        p["q"] = np.zeros(size, dtype)
        p["w"] = np.ones((), dtype)
        p["b"] = np.zeros((), dtype)
    elif scheme == "rnn":
        for direction in ("fwd", "bwd"):
            p[f"{direction}.wx"] = F.recurrent_uniform(rng, (size, 4 * rnn_hidden), rnn_hidden, dtype)
            p[f"{direction}.wh"] = F.recurrent_uniform(rng, (rnn_hidden, 4 * rnn_hidden), rnn_hidden, dtype)
            p[f"{direction}.b"] = np.zeros(4 * rnn_hidden, dtype)
        p["readout.w"] = F.he_uniform(rng, (2 * rnn_hidden,), 2 * rnn_hidden, dtype)
        p["readout.b"] = np.zeros((), dtype)
    elif scheme == "nonlocal":
        p["g.w"] = F.he_uniform(rng, (d, d), d, dtype)
        p["g.b"] = np.zeros(d, dtype)
        p["w"] = np.zeros(d, dtype)
    elif scheme == "temporal":
        c1, c2 = temporal_channels
        p["spatial.w"] = F.he_uniform(rng, (size, c1), size, dtype)
        p["spatial.b"] = np.zeros(c1, dtype)
        p["t1.w"] = F.he_uniform(rng, (3, 1, c1, c2), 3 * c1, dtype)
        p["t1.b"] = np.zeros(c2, dtype)
        p["t2.w"] = F.he_uniform(rng, (3, 1, c2, 1), 3 * c2, dtype)
        p["t2.b"] = np.zeros(1, dtype)
    else:
        raise ConfigError(f"unknown aggregation scheme {scheme!r}; choose from {SCHEMES}")
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def subparams(tensors, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


# -- the four schemes --------------------------------------------------------------


def aggregate_frame_independent(clip, params, nonlinear=True):
    """Quality-score attention; returns ``(feature, weights)``.

    Keeps the ``1/K`` factor of the two-block design, so the aggregate's
    scale shrinks with K even though the weights already sum to one.
    """
    frames = _flat(_frames(clip))
    k = frames.shape[0]
    scores = matmul(frames, params["q"])
    weights = softmax(scores, axis=0)
    r = matmul(weights, frames) * (1.0 / k)
    feature = tanh(params["w"] * r + params["b"]) if nonlinear else r
    return Aggregate(feature, weights, scores)


def aggregate_rnn(clip, params):
    frames = _flat(_frames(clip))
    hidden = F.bilstm_forward(frames, params)
    scores = matmul(hidden, params["readout.w"]) + params["readout.b"]
    weights = softmax(scores, axis=0)
    return Aggregate(matmul(weights, frames), weights, scores)


@lru_cache(maxsize=16)
def _self_mask(p, dtype):
    mask = np.zeros((p, p), dtype=dtype)
    np.fill_diagonal(mask, -np.inf)
    mask.flags.writeable = False
    return mask


def non_local_block(clip, params, include_self=False):
    """Reconstructed maps ``[K, H, W, D]`` and the position attention ``[P, P]``."""
    frames = _frames(clip)
    k, h, w, d = frames.shape
    pos = reshape(frames, (k * h * w, d))
    p = pos.shape[0]
    g = matmul(pos, params["g.w"]) + params["g.b"]
    if p == 1 and not include_self:
        # nothing to compare against: the attention term is empty
        attn = Tensor(np.zeros((1, 1), dtype=pos.dtype))
        out = pos
    else:
        sim = matmul(pos, transpose(pos))
        if not include_self:
            sim = sim + Tensor(_self_mask(p, np.dtype(pos.dtype)))
        attn = softmax(sim, axis=1)
        out = params["w"] * matmul(attn, g) + pos
    return reshape(out, (k, h, w, d)), attn


def aggregate_non_local(clip, params, include_self=False):
    """Average of the non-local reconstructions; ``weights`` is the attention
    mass each frame receives (mean over query positions), for inspection only."""
    recon, attn = non_local_block(clip, params, include_self)
    k = recon.shape[0]
    feature = reshape(recon.mean(axis=0), (-1,))
    if k == 1:
        weights = np.ones(1, dtype=attn.dtype)
    else:
        weights = attn.data.reshape(attn.shape[0], k, -1).sum(axis=2).mean(axis=0)
    return Aggregate(feature, Tensor(weights))


def temporal_scores(clip, params):
    """Pre-softmax per-frame scores of the temporal-conv scheme, ``[K]``."""
    frames = _flat(_frames(clip))
    k = frames.shape[0]
    # the 8x8x128 spatial kernel on an 8x8 map is a dense layer on the flattened frame
    z = relu(matmul(frames, params["spatial.w"]) + params["spatial.b"])
    z = reshape(z, (1, k, 1, z.shape[1]))
    z = relu(F.conv2d_forward(z, params["t1.w"]) + params["t1.b"])
    z = F.conv2d_forward(z, params["t2.w"]) + params["t2.b"]
    return reshape(z, (k,))


def aggregate_temporal_conv(clip, params):
    frames = _flat(_frames(clip))
    scores = temporal_scores(clip, params)
    weights = softmax(scores, axis=0)
    return Aggregate(matmul(weights, frames), weights, scores)


def aggregate(scheme, clip, params, include_self=False, nonlinear=True):
    if scheme == "frameind":
        return aggregate_frame_independent(clip, params, nonlinear)
    if scheme == "rnn":
        return aggregate_rnn(clip, params)
    if scheme == "nonlocal":
        return aggregate_non_local(clip, params, include_self)
    if scheme == "temporal":
        return aggregate_temporal_conv(clip, params)
    raise ConfigError(f"unknown aggregation scheme {scheme!r}; choose from {SCHEMES}")


def keyframe_supervision_loss(weights, key_index):
    """Squared distance between ``weights`` and the one-hot vector at ``key_index``."""
    weights = as_tensor(weights)
    k = weights.shape[0]
    if not 0 <= key_index < k:
        raise DimensionError(f"key frame {key_index} outside clip of {k} frames")
    target = np.zeros(k, dtype=weights.dtype)
    target[key_index] = 1.0
    return F.l2_loss(weights, target)


# -- video model -------------------------------------------------------------------


@dataclass(frozen=True)
class VideoConfig:
    scheme: str = "temporal"
    head: str = "binary"
    slots: int = NUM_VIEWS
    input_size: int = 128
    conv_layers: int = 5
    width_multiplier: float = 1.0
    fc1_units: int = 1024
    fc2_units: int = 128
    rnn_hidden: int = 64
    nonlocal_include_self: bool = False
    frameind_nonlinear: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown aggregation scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.head not in VIDEO_HEADS:
            raise ConfigError(f"head must be one of {tuple(VIDEO_HEADS)}, got {self.head!r}")
        if not 1 <= self.slots <= NUM_VIEWS:
            raise ConfigError(f"slots must be 1..{NUM_VIEWS}")
        self.encoder_config  # validates encoder fields

    @property
    def encoder_config(self):
        return M.ArchitectureConfig(
            topology="multi_branch",
            width_multiplier=self.width_multiplier,
            conv_layers=self.conv_layers,
            input_size=self.input_size,
        )

    @property
    def feature_shape(self):
        return self.encoder_config.feature_shape

    @property
    def feature_dim(self):
        return int(np.prod(self.feature_shape))

    @property
    def num_outputs(self):
        return VIDEO_HEADS[self.head]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StudyClips:
    """One subject's clips as preprocessed frames ``[K, S, S]`` keyed by slot."""

    clips: dict
    key_frames: dict = field(default_factory=dict)
    label: int | None = None
    subject_id: str = ""

    def present(self, slots=NUM_VIEWS):
        return np.array([s in self.clips for s in range(slots)])


def build_video_model(cfg, seed=0, dtype=np.float32):
    """View-specific encoders and aggregators (``branch{v}.`` / ``agg{v}.``) plus the FC classifier."""
    rng = np.random.default_rng(seed)
    tensors = {}
    enc_cfg = cfg.encoder_config
    for v in range(cfg.slots):
        for spec in M.encoder_specs(enc_cfg, in_channels=1, branches=1):
            M.init_layer(tensors, spec, rng, dtype, prefix=f"branch{v}.")
        for name, t in init_aggregator(cfg.scheme, cfg.feature_shape, rng, dtype, cfg.rnn_hidden).items():
            tensors[f"agg{v}.{name}"] = t
    fc_in = cfg.slots * cfg.feature_dim
    for name, cin, cout in (
        ("fc1", fc_in, cfg.fc1_units),
        ("fc2", cfg.fc1_units, cfg.fc2_units),
        ("head", cfg.fc2_units, cfg.num_outputs),
    ):
        M.init_layer(tensors, M.LayerSpec(name, "fully_connected", (1, 1), 1, cin, cout), rng, dtype)
    return M.ModelParams(cfg, tensors)


def encode_frames(params, frames, slot):
    """Run slot ``slot``'s encoder over ``[N, S, S]`` frames -> ``[N, H, W, D]``."""
    cfg = params.config
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=params.dtype))
    if x.ndim == 3:
        x = reshape(x, x.shape + (1,))
    s = cfg.input_size
    if x.shape[1:3] != (s, s):
        raise DimensionError(f"frames must be {s}x{s}, got {x.shape[1:3]}", expected=(s, s), got=x.shape[1:3])
    specs = M.encoder_specs(cfg.encoder_config, in_channels=1, branches=1)
    return M.encode(params.tensors, specs, x, prefix=f"branch{slot}.")


@dataclass
class VideoOutput:
    logits: Tensor  # [B, C]
    attention: list  # per study: {slot: Aggregate}


def video_logits(params, studies, frame_features=None):
    """Batched forward over a list of :class:`StudyClips`.

    Frames of all studies at one slot are encoded in a single call, then
    split back per clip for aggregation. Absent views give zero aggregates.
    ``frame_features`` may supply precomputed ``{(study_idx, slot): [K,H,W,D]}``.
    """
    cfg = params.config
    if not studies:
        raise DataError("no studies to evaluate")
    for st in studies:
        if not st.clips:
            raise DataError(f"study {st.subject_id!r} has no views")
        bad = [s for s in st.clips if not 0 <= s < cfg.slots]
        if bad:
            raise DimensionError(f"study {st.subject_id!r} uses slots {bad}; model has {cfg.slots}")
    zero = Tensor(np.zeros(cfg.feature_dim, dtype=params.dtype))
    per_slot = []
    attention = [dict() for _ in studies]
    for v in range(cfg.slots):
        agg_params = subparams(params.tensors, f"agg{v}.")
        owners = [i for i, st in enumerate(studies) if v in st.clips]
        feats = {}
        if owners and frame_features is None:
            clips = [np.asarray(studies[i].clips[v]) for i in owners]
            encoded = encode_frames(params, np.concatenate(clips, axis=0), v)
            lo = 0
            for i, clip in zip(owners, clips):
                feats[i] = encoded[lo : lo + len(clip)]
                lo += len(clip)
        elif owners:
            feats = {i: frame_features[(i, v)] for i in owners}
        column = []
        for i in range(len(studies)):
            if i not in feats:
                column.append(zero)
                continue
            agg = aggregate(cfg.scheme, feats[i], agg_params, cfg.nonlocal_include_self, cfg.frameind_nonlinear)
            attention[i][v] = agg
            column.append(agg.feature)
        per_slot.append(stack(column, axis=0))
    flat = concat(per_slot, axis=1) if len(per_slot) > 1 else per_slot[0]
    h = M.fc_stack(params.tensors, flat)
    return VideoOutput(M.head_logits(params.tensors, h), attention)


def video_probabilities(z, head):
    if head == "binary":
        return M.probabilities_from_logits(z, "binary")
    return softmax(Tensor(np.asarray(z, dtype=np.float64)), axis=1).data


@dataclass
class VideoPrediction:
    probabilities: np.ndarray
    logits: np.ndarray
    label: int
    present: np.ndarray
    attention: dict  # ViewKind name -> list of K weights

    def to_json(self):
        return {
            "label": int(self.label),
            "probabilities": [float(p) for p in self.probabilities],
            "logits": [float(z) for z in self.logits],
            "present": [bool(p) for p in self.present],
            "attention": self.attention,
        }


def attention_export(attention, slot_names=None):
    """``{slot: Aggregate}`` -> ``{view name: [weights]}`` for JSON export."""
    out = {}
    for slot, agg in sorted(attention.items()):
        name = slot_names[slot] if slot_names else ViewKind(slot).name
        out[name] = [float(w) for w in agg.weights.data] if agg.weights is not None else None
    return out


def video_forward(params, study, scheme=None):
    """Predict one study (a :class:`StudyClips`)."""
    if scheme is not None and scheme != params.config.scheme:
        raise ConfigError(f"model was built for {params.config.scheme!r}, not {scheme!r}")
    return video_predict(params, [study])[0]


def video_predict(params, studies, batch_size=8):
    cfg = params.config
    preds = []
    with no_grad():
        for lo in range(0, len(studies), batch_size):
            chunk = studies[lo : lo + batch_size]
            out = video_logits(params, chunk)
            z = out.logits.data
            probs = video_probabilities(z, cfg.head)
            labels = (probs[:, 1] >= 0.5).astype(int) if cfg.head == "binary" else np.argmax(probs, axis=1)
            names = None if cfg.slots == NUM_VIEWS else [f"slot{i}" for i in range(cfg.slots)]
            for j, st in enumerate(chunk):
                preds.append(
                    VideoPrediction(probs[j], z[j], int(labels[j]), st.present(cfg.slots),
                                    attention_export(out.attention[j], names))
                )
    return preds


def video_loss(params, studies, keyframe_weight=1.0):
    """Classification loss + ``keyframe_weight`` * mean per-study key-frame L2."""
    cfg = params.config
    out = video_logits(params, studies)
    labels = np.array([st.label for st in studies])
    if cfg.head == "binary":
        loss = F.binary_cross_entropy(reshape(out.logits, (-1,)), labels)
    else:
        loss = F.multiclass_cross_entropy(out.logits, labels)
    if keyframe_weight and cfg.scheme in SUPERVISABLE:
        terms = []
        for st, att in zip(studies, out.attention):
            for slot, agg in att.items():
                key = st.key_frames.get(slot)
                if key is not None:
                    terms.append(keyframe_supervision_loss(agg.weights, key))
        if terms:
            loss = loss + tsum(stack(terms)) * (keyframe_weight / len(studies))
    return loss, out


@dataclass
class VideoSchedule:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    patience: int = 20
    seed: int = 0
    keyframe_weight: float = 1.0
    checkpoint_dir: str | None = None
    target_val_accuracy: float | None = None


def video_accuracy(params, studies):
    if not studies:
        return None
    preds = video_predict(params, studies)
    return float(np.mean([p.label == st.label for p, st in zip(preds, studies)]))


def train_video(params, train, val=None, schedule=None, optimizer_state=None, start_epoch=0, resample=None):
    """Minibatch Adam over studies; keeps the best-validation copy.

    ``resample(epoch)``, when given, returns a fresh list of training studies
    for that epoch (per-epoch re-cropping); ``train`` is used before it runs.
    """
    schedule = schedule or VideoSchedule()
    if not train:
        raise DataError("training split is empty")
    n_out = max(params.config.num_outputs, 2)
    for st in list(train) + list(val or []):
        if st.label is None or not 0 <= st.label < n_out:
            raise DataError(f"label {st.label!r} of {st.subject_id!r} does not fit a {params.config.head} head")
    rng = np.random.default_rng(schedule.seed)
    opt = Adam(params.tensors, lr=schedule.learning_rate)
    if optimizer_state is not None:
        opt.state = optimizer_state
    report = M.TrainingReport(optimizer_state=opt.state)
    ckpt_dir = Path(schedule.checkpoint_dir) if schedule.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    stopper = M.EarlyStopping()
    for epoch in range(start_epoch, start_epoch + schedule.epochs):
        if resample is not None and epoch > start_epoch:
            train = resample(epoch)
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(train), schedule.batch_size):
            batch = [train[i] for i in order[lo : lo + schedule.batch_size]]
            opt.zero_grad()
            loss, _ = video_loss(params, batch, schedule.keyframe_weight)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            report.step_losses.append(value)
            total += value * len(batch)
        train_loss = total / len(train)
        val_acc = video_accuracy(params, val) if val else None
        report.rows.append((epoch, train_loss, val_acc))
        log.info("epoch %d loss %.5f val_acc %s", epoch, train_loss, val_acc)
        if stopper.update(val_acc, train_loss):
            report.best_epoch, report.best_params = epoch, params.copy()
            report.best_val_acc = val_acc if val_acc is not None else float("nan")
            if ckpt_dir:
                save_video_model(ckpt_dir / "best.ckpt", params, meta={"epoch": epoch, "val_acc": val_acc})
        if ckpt_dir:
            save_video_model(ckpt_dir / "last.ckpt", params, optimizer=opt.state, meta={"epoch": epoch})
        if schedule.target_val_accuracy is not None and val_acc is not None and val_acc >= schedule.target_val_accuracy:
            break
        if stopper.stale >= schedule.patience:
            break
    return report


def save_video_model(path, params, optimizer=None, meta=None):
    M.save_model(path, params, optimizer=optimizer, meta=meta, kind="video")


def load_video_model(path, expected=None):
    header, tensors = checkpoint.load_checkpoint(path)
    if header["kind"] != "video":
        raise CheckpointError(f"{path} holds a {header['kind']} model, not a video model")
    cfg = VideoConfig.from_dict(header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint does not match its config")
    if expected is not None and expected.fingerprint() != cfg.fingerprint():
        raise CheckpointError(f"{path}: architecture fingerprint {cfg.fingerprint()} != expected {expected.fingerprint()}")
    arrays, opt_state = M.split_optimizer(tensors, header["meta"])
    params = M.ModelParams(cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
    return params, opt_state, header["meta"]


def write_attention_csv(path, predictions, ids):
    """Long-format attention table: subject, view, frame, weight."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "view", "frame", "weight"])
        for sid, pred in zip(ids, predictions):
            for view, weights in pred.attention.items():
                for k, w in enumerate(weights or []):
                    writer.writerow([sid, view, k, f"{w:.8g}"])
