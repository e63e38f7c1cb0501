"""Key-frame classifiers: multi-channel and multi-branch separable-conv networks.

A model is a :class:`ModelParams` (config + named tensors) and a set of pure
functions over it. Layout is channels-last; a batch of key-frame stacks is
``[N, S, S, 5]``.

Default configurations reproduce the published layer tables exactly:

* multi-channel: one encoder over the 5-channel stack, FC 8192 -> 1024 -> 128
* multi-branch: five single-channel encoders, FC 40960 -> 5120 -> 128
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mvecho import checkpoint
from mvecho.engine import Adam, Tensor, no_grad
from mvecho.engine import functional as F
from mvecho.engine.tensor import concat, relu, sigmoid, softmax
from mvecho.errors import CheckpointError, ConfigError, DataError, DimensionError, NumericError
from mvecho.preprocess import NUM_VIEWS, MultiViewStack

log = logging.getLogger(__name__)

TOPOLOGIES = ("multi_channel", "multi_branch")
CONV_KINDS = ("dsc", "standard")
HEADS = {"binary": 1, "three_class": 3}
INPUT_SIZES = (16, 32, 64, 128, 256)

BASE_WIDTH = 32
# (output width, stride) of the separable stages after the first convolution
_STAGES = [(64, 1), (128, 2), (128, 2), (128, 2)]
_EXTRA_STAGE = (128, 1)


@dataclass(frozen=True)
class ArchitectureConfig:
    topology: str = "multi_channel"
    width_multiplier: float = 1.0
    conv_layers: int = 5
    input_size: int = 128
    conv_kind: str = "dsc"
    head: str = "binary"
    fc1_units: int | None = None
    fc2_units: int = 128
    batch_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {tuple(HEADS)}, got {self.head!r}")
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ConfigError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if not 2 <= self.conv_layers <= 8:
            raise ConfigError(f"conv_layers must be 2..8, got {self.conv_layers}")
        if self.input_size not in INPUT_SIZES:
            raise ConfigError(f"input_size must be one of {INPUT_SIZES}, got {self.input_size}")
        if self.input_size % self.total_stride:
            raise ConfigError(f"input_size {self.input_size} not divisible by total stride {self.total_stride}")
        if self.fc1_units is not None and self.fc1_units < 1:
            raise ConfigError("fc1_units must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    # -- derived quantities ------------------------------------------------

    @property
    def branches(self):
        return NUM_VIEWS if self.topology == "multi_branch" else 1

    @property
    def in_channels(self):
        return 1 if self.topology == "multi_branch" else NUM_VIEWS

    @property
    def stage_plan(self):
        """[(width, stride)] for every conv stage, first (standard) conv included."""
        extra = max(self.conv_layers - 1 - len(_STAGES), 0)
        plan = [(BASE_WIDTH, 2)] + (_STAGES + [_EXTRA_STAGE] * extra)[: self.conv_layers - 1]
        units = max(1, math.ceil(BASE_WIDTH * self.width_multiplier))
        return [(units * (w // BASE_WIDTH), s) for w, s in plan]

    @property
    def total_stride(self):
        return int(np.prod([s for _, s in self.stage_plan]))

    @property
    def feature_shape(self):
        side = self.input_size // self.total_stride
        return side, side, self.stage_plan[-1][0]

    @property
    def fc1_in(self):
        return self.branches * int(np.prod(self.feature_shape))

    @property
    def fc1_out(self):
        if self.fc1_units is not None:
            return self.fc1_units
        return 1024 * self.branches

    @property
    def num_outputs(self):
        return HEADS[self.head]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def preset(cls, name, **overrides):
        """CLI architecture names: mc-dsc, mb-dsc, mb-dsc-fifth, mc-standard."""
        presets = {
            "mc-dsc": {},
            "mb-dsc": {"topology": "multi_branch"},
            "mb-dsc-fifth": {"topology": "multi_branch", "width_multiplier": 0.2, "fc1_units": 1024},
            "mc-standard": {"conv_kind": "standard"},
        }
        if name not in presets:
            raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass(frozen=True)
class LayerSpec:
    """One weight layer. ``branches`` > 1 means that many independent copies."""

    name: str
    kind: str  # standard_conv | depthwise_conv | pointwise_conv | fully_connected
    kernel: tuple
    stride: int
    input_channels: int
    output_channels: int
    input_hw: tuple = (1, 1)
    branches: int = 1

    def __post_init__(self):
        if self.kind == "depthwise_conv" and self.output_channels != self.input_channels:
            raise ConfigError(f"{self.name}: depthwise layer must keep its channel count")
        if self.kind == "pointwise_conv" and tuple(self.kernel) != (1, 1):
            raise ConfigError(f"{self.name}: pointwise kernel must be 1x1")

    @property
    def output_hw(self):
        h, w = self.input_hw
        return -(-h // self.stride), -(-w // self.stride)

    @property
    def weight_count(self):
        k = int(np.prod(self.kernel))
        if self.kind == "depthwise_conv":
            return k * self.input_channels
        return k * self.input_channels * self.output_channels

    @property
    def bias_count(self):
        return self.output_channels

    @property
    def macs(self):
        ho, wo = self.output_hw
        if self.kind == "fully_connected":
            return self.input_channels * self.output_channels
        return ho * wo * self.weight_count

    @property
    def weight_shape(self):
        kh, kw = self.kernel
        if self.kind == "depthwise_conv":
            return (kh, kw, self.input_channels)
        if self.kind == "fully_connected":
            return (self.input_channels, self.output_channels)
        return (kh, kw, self.input_channels, self.output_channels)

    @property
    def fan_in(self):
        k = int(np.prod(self.kernel))
        return k if self.kind == "depthwise_conv" else k * self.input_channels


def encoder_specs(cfg, in_channels=None, branches=None):
    """Conv layer plan for one encoder (names are branch-relative)."""
    cin = cfg.in_channels if in_channels is None else in_channels
    branches = cfg.branches if branches is None else branches
    side = cfg.input_size
    specs = []
    for idx, (width, stride) in enumerate(cfg.stage_plan, start=1):
        hw = (side, side)
        if idx == 1 or cfg.conv_kind == "standard":
            specs.append(LayerSpec(f"stage{idx}.conv", "standard_conv", (3, 3), stride, cin, width, hw, branches))
        else:
            specs.append(LayerSpec(f"stage{idx}.dw", "depthwise_conv", (3, 3), stride, cin, cin, hw, branches))
            out_hw = specs[-1].output_hw
            specs.append(LayerSpec(f"stage{idx}.pw", "pointwise_conv", (1, 1), 1, cin, width, out_hw, branches))
        side = -(-side // stride)
        cin = width
    return specs


def head_specs(cfg, fc1_in=None):
    fc1_in = cfg.fc1_in if fc1_in is None else fc1_in
    return [
        LayerSpec("fc1", "fully_connected", (1, 1), 1, fc1_in, cfg.fc1_out),
        LayerSpec("fc2", "fully_connected", (1, 1), 1, cfg.fc1_out, cfg.fc2_units),
        LayerSpec("head", "fully_connected", (1, 1), 1, cfg.fc2_units, cfg.num_outputs),
    ]


def layer_specs(cfg):
    return encoder_specs(cfg) + head_specs(cfg)


def branch_prefixes(cfg):
    if cfg.topology == "multi_branch":
        return [f"branch{v}." for v in range(NUM_VIEWS)]
    return [""]


class ModelParams:
    """Ordered named tensors plus the architecture they belong to."""

    def __init__(self, config, tensors, buffers=()):
        self.config = config
        self.tensors = dict(tensors)
        self.buffers = set(buffers)

    @property
    def fingerprint(self):
        return self.config.fingerprint()

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def trainable(self):
        return {k: v for k, v in self.tensors.items() if k not in self.buffers}

    def copy(self):
        return type(self)(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            self.buffers,
        )

    def astype(self, dtype):
        return type(self)(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            self.buffers,
        )

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def state_arrays(self):
        return {k: v.data for k, v in self.tensors.items()}


def init_layer(tensors, spec, rng, dtype, prefix="", batch_norm=False):
    w = F.he_uniform(rng, spec.weight_shape, spec.fan_in, dtype)
    tensors[f"{prefix}{spec.name}.w"] = Tensor(w, requires_grad=True)
    tensors[f"{prefix}{spec.name}.b"] = Tensor(np.zeros(spec.output_channels, dtype), requires_grad=True)
    buffers = []
    if batch_norm and spec.kind != "fully_connected":
        c = spec.output_channels
        tensors[f"{prefix}{spec.name}.bn.gamma"] = Tensor(np.ones(c, dtype), requires_grad=True)
        tensors[f"{prefix}{spec.name}.bn.beta"] = Tensor(np.zeros(c, dtype), requires_grad=True)
        for buf, fill in (("mean", 0.0), ("var", 1.0)):
            name = f"{prefix}{spec.name}.bn.{buf}"
            tensors[name] = Tensor(np.full(c, fill, dtype))
            buffers.append(name)
    return buffers


def build_model(cfg, seed=0, dtype=np.float32):
    """Fresh parameters for ``cfg``: He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors, buffers = {}, []
    for prefix in branch_prefixes(cfg):
        for spec in encoder_specs(cfg):
            buffers += init_layer(tensors, spec, rng, dtype, prefix, cfg.batch_norm)
    for spec in head_specs(cfg):
        init_layer(tensors, spec, rng, dtype)
    return ModelParams(cfg, tensors, buffers)


# -- forward -----------------------------------------------------------------


def apply_conv(tensors, spec, x, prefix="", batch_norm=False, training=False):
    w = tensors[f"{prefix}{spec.name}.w"]
    b = tensors[f"{prefix}{spec.name}.b"]
    if spec.kind == "standard_conv":
        y = F.conv2d_forward(x, w, spec.stride)
    elif spec.kind == "depthwise_conv":
        y = F.depthwise_conv_forward(x, w, spec.stride)
    else:
        y = F.pointwise_conv_forward(x, w)
    y = y + b
    if batch_norm:
        p = f"{prefix}{spec.name}.bn."
        y = F.batch_norm(
            y, tensors[p + "gamma"], tensors[p + "beta"], tensors[p + "mean"], tensors[p + "var"], training
        )
    return relu(y)


def encode(tensors, specs, x, prefix="", batch_norm=False, training=False, trace=None):
    """Run the conv stack; ``x`` is ``[N, S, S, C]``."""
    for spec in specs:
        if trace is not None:
            trace.append((prefix + spec.name, spec, tuple(x.shape[1:])))
        x = apply_conv(tensors, spec, x, prefix, batch_norm, training)
    return x


def _as_batch(params, x):
    if isinstance(x, MultiViewStack):
        x = x.data[None]
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    s = params.config.input_size
    if x.shape[1:] != (s, s, NUM_VIEWS):
        raise DimensionError(f"expected stacks of {s}x{s}x{NUM_VIEWS}, got {x.shape[1:]}", expected=(s, s, NUM_VIEWS), got=x.shape[1:])
    return x


def features(params, x, training=False, rng=None, trace=None, branch_features=None):
    """Everything up to the FC2 activations; returns ``[N, fc2_units]``."""
    cfg = params.config
    x = _as_batch(params, x)
    specs = encoder_specs(cfg)
    if cfg.topology == "multi_branch":
        flats = []
        for v, prefix in enumerate(branch_prefixes(cfg)):
            fmap = encode(params.tensors, specs, x[:, :, :, v : v + 1], prefix, cfg.batch_norm, training,
                          trace if v == 0 else None)
            if branch_features is not None:
                branch_features.append(fmap)
            flats.append(F.flatten(fmap))
        flat = concat(flats, axis=1)
    else:
        fmap = encode(params.tensors, specs, x, "", cfg.batch_norm, training, trace)
        if branch_features is not None:
            branch_features.append(fmap)
        flat = F.flatten(fmap)
    return fc_stack(params.tensors, flat, cfg.dropout, training, rng, trace)


def fc_stack(tensors, flat, dropout=0.0, training=False, rng=None, trace=None):
    h = flat
    for name in ("fc1", "fc2"):
        if trace is not None:
            trace.append((name, None, tuple(h.shape[1:])))
        h = relu(F.fully_connected_forward(h, tensors[f"{name}.w"], tensors[f"{name}.b"]))
        if dropout and training:
            h = F.dropout(h, dropout, rng, training)
    return h


def head_logits(tensors, h, trace=None):
    if trace is not None:
        trace.append(("head", None, tuple(h.shape[1:])))
    return F.fully_connected_forward(h, tensors["head.w"], tensors["head.b"])


def logits(params, x, training=False, rng=None, trace=None):
    return head_logits(params.tensors, features(params, x, training, rng, trace), trace)


@dataclass
class Prediction:
    probabilities: np.ndarray
    logits: np.ndarray
    label: int

    @property
    def positive_confidence(self):
        """Probability of any disease class (binary p, or 1 - p(negative))."""
        return float(1.0 - self.probabilities[0])


def probabilities_from_logits(z, head):
    """``[N, 2]`` (binary: 1-p, p) or ``[N, 3]`` softmax probabilities."""
    z = np.asarray(z, dtype=np.float64)
    if head == "binary":
        p = sigmoid(Tensor(z[:, 0])).data
        return np.stack([1.0 - p, p], axis=1)
    return softmax(Tensor(z), axis=1).data


def labels_from_probabilities(probs, head):
    if head == "binary":
        return (probs[:, 1] >= 0.5).astype(int)
    return np.argmax(probs, axis=1)


def predict_proba(params, x, batch_size=64):
    x = np.asarray(x.data if isinstance(x, MultiViewStack) else x)
    if x.ndim == 3:
        x = x[None]
    out = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(logits(params, x[lo : lo + batch_size]).data)
    z = np.concatenate(out, axis=0) if out else np.zeros((0, params.config.num_outputs))
    return probabilities_from_logits(z, params.config.head), z


def forward(params, stack):
    """Predict one stack (or a batch, returning a list)."""
    batch = not isinstance(stack, MultiViewStack) and np.asarray(stack).ndim == 4
    probs, z = predict_proba(params, stack)
    labels = labels_from_probabilities(probs, params.config.head)
    preds = [Prediction(probs[i], z[i], int(labels[i])) for i in range(len(probs))]
    return preds if batch else preds[0]


# -- transfer learning ---------------------------------------------------------


def swap_head_binary_to_three(params, seed=0):
    """Copy every non-head tensor; re-initialise a 3-unit head."""
    if params.config.head != "binary":
        raise ConfigError("head swap needs a binary source model")
    cfg = dataclasses.replace(params.config, head="three_class")
    tensors = {
        k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
        for k, v in params.tensors.items()
        if not k.startswith("head.")
    }
    init_layer(tensors, head_specs(cfg)[-1], np.random.default_rng(seed), params.dtype)
    return ModelParams(cfg, tensors, params.buffers)


# -- accounting ----------------------------------------------------------------


@dataclass
class LayerCount:
    name: str
    kind: str
    stage: str
    weights: int
    biases: int
    branches: int = 1

    @property
    def total(self):
        return (self.weights + self.biases) * self.branches


@dataclass
class ParamCount:
    layers: list = field(default_factory=list)

    @property
    def total(self):
        return sum(layer.total for layer in self.layers)

    def by_name(self, name):
        return next(layer for layer in self.layers if layer.name == name)

    def stage_totals(self, weights_only=False):
        """Conv stages only, summed over branches: {"stage1": n, ...}."""
        out = {}
        for layer in self.layers:
            if not layer.stage.startswith("stage"):
                continue
            n = layer.weights * layer.branches if weights_only else layer.total
            out[layer.stage] = out.get(layer.stage, 0) + n
        return out


def _stage(name):
    return name.split(".")[0]


def count_params(params_or_cfg):
    """Exact per-layer counts (bias included) derived from the layer plan."""
    cfg = params_or_cfg.config if isinstance(params_or_cfg, ModelParams) else params_or_cfg
    out = ParamCount()
    for spec in layer_specs(cfg):
        bn = 2 * spec.output_channels if cfg.batch_norm and spec.kind != "fully_connected" else 0
        out.layers.append(
            LayerCount(spec.name, spec.kind, _stage(spec.name), spec.weight_count, spec.bias_count + bn, spec.branches)
        )
    return out


def count_flops(params_or_cfg, input_size=None):
    """Multiply-accumulate counts per layer: ``{name: macs}`` plus ``"total"``."""
    cfg = params_or_cfg.config if isinstance(params_or_cfg, ModelParams) else params_or_cfg
    if input_size is not None and input_size != cfg.input_size:
        cfg = dataclasses.replace(cfg, input_size=input_size)
    out = {}
    for spec in layer_specs(cfg):
        out[spec.name] = spec.macs * spec.branches
    out["total"] = sum(out.values())
    return out


def shape_ledger(params):
    """Per-layer rows recorded from a real forward pass of one zero stack.

    Each row is ``(input_extents, type, stride, kernel_count, kernel_shape, groups)``
    where ``groups`` is the number of parallel branches (5 for multi-branch).
    """
    cfg = params.config
    trace = []
    x = np.zeros((1, cfg.input_size, cfg.input_size, NUM_VIEWS), dtype=params.dtype)
    with no_grad():
        z = logits(params, x, trace=trace)
    kinds = {"standard_conv": "conv", "depthwise_conv": "dw", "pointwise_conv": "pw"}
    rows = []
    last = None
    for name, spec, in_shape in trace:
        if spec is not None:
            kshape = tuple(spec.kernel) if spec.kind == "depthwise_conv" else tuple(spec.kernel) + (spec.input_channels,)
            rows.append((in_shape, kinds[spec.kind], spec.stride, spec.output_channels, kshape, spec.branches))
            last = spec.output_hw + (spec.output_channels,)
            continue
        if name == "fc1":
            rows.append((last, "flatten", None, None, None, cfg.branches))
        units = params.tensors[f"{name}.w"].shape[1]
        rows.append((in_shape, name, None, units, None, 1))
    rows.append(((z.shape[1],), "output", None, None, None, 1))
    return rows


# -- training ------------------------------------------------------------------


@dataclass
class KeyframeDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None


@dataclass
class Schedule:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 20
    seed: int = 0
    head_only: bool = False
    checkpoint_dir: str | None = None
    target_train_accuracy: float | None = None


@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_acc)
    step_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    best_params: object = None
    train_accuracy: list = field(default_factory=list)
    optimizer_state: object = None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_acc"])
            for epoch, loss, acc in self.rows:
                writer.writerow([epoch, f"{loss:.8g}", "" if acc is None else f"{acc:.6f}"])


class EarlyStopping:
    """Best-copy selection and patience for a training loop.

    The best epoch has the highest validation accuracy, ties going to the lower
    training loss; without validation data it is the lowest training loss.
    Patience counts epochs without a strict gain in that primary score.
    """

    def __init__(self):
        self.key = None
        self.best = -np.inf
        self.stale = 0

    def update(self, val_acc, train_loss):
        """Record one epoch; True when it is the new best copy."""
        primary = val_acc if val_acc is not None else -train_loss
        key = (primary, -train_loss)
        if primary > self.best:
            self.best, self.stale = primary, 0
        else:
            self.stale += 1
        if self.key is None or key > self.key:
            self.key = key
            return True
        return False


def loss_for_head(z, y, head):
    if head == "binary":
        return F.binary_cross_entropy(z.reshape((-1,)), y)
    return F.multiclass_cross_entropy(z, y)


def check_labels(y, head):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= max(HEADS[head], 2)):
        raise DataError(f"labels {sorted(set(y.tolist()))} do not fit a {head} head")


def accuracy(params, x, y, batch_size=64):
    if x is None or len(x) == 0:
        return None
    probs, _ = predict_proba(params, x, batch_size)
    return float(np.mean(labels_from_probabilities(probs, params.config.head) == np.asarray(y)))


def train_keyframe(params, dataset, schedule=None, optimizer_state=None, start_epoch=0):
    """Adam + minibatches with early stopping on validation accuracy.

    Returns a :class:`TrainingReport`; ``params`` is updated in place and the
    best-validation copy is kept in ``report.best_params``.
    """
    schedule = schedule or Schedule()
    cfg = params.config
    if len(dataset.x_train) == 0:
        raise DataError("training split is empty")
    check_labels(dataset.y_train, cfg.head)
    if dataset.y_val is not None:
        check_labels(dataset.y_val, cfg.head)
    rng = np.random.default_rng(schedule.seed)
    trainable = params.trainable()
    if schedule.head_only:
        trainable = {k: v for k, v in trainable.items() if k.startswith("head.")}
    opt = Adam(params.tensors, lr=schedule.learning_rate, trainable=trainable)
    if optimizer_state is not None:
        opt.state = optimizer_state
    report = TrainingReport(optimizer_state=opt.state)
    ckpt_dir = Path(schedule.checkpoint_dir) if schedule.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    x_all, y_all = dataset.x_train, np.asarray(dataset.y_train)
    n = len(x_all)
    stopper = EarlyStopping()
    for epoch in range(start_epoch, start_epoch + schedule.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for lo in range(0, n, schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            xb = Tensor(np.asarray(x_all[idx], dtype=params.dtype))
            opt.zero_grad()
            z = logits(params, xb, training=True, rng=rng)
            loss = loss_for_head(z, y_all[idx], cfg.head)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            report.step_losses.append(value)
            total += value * len(idx)
            probs = probabilities_from_logits(z.data, cfg.head)
            correct += int(np.sum(labels_from_probabilities(probs, cfg.head) == y_all[idx]))
        train_loss = total / n
        val_acc = accuracy(params, dataset.x_val, dataset.y_val)
        report.rows.append((epoch, train_loss, val_acc))
        report.train_accuracy.append(correct / n)
        log.info("epoch %d loss %.5f val_acc %s", epoch, train_loss, val_acc)
        if stopper.update(val_acc, train_loss):
            report.best_epoch, report.best_params = epoch, params.copy()
            report.best_val_acc = val_acc if val_acc is not None else float("nan")
            if ckpt_dir:
                save_model(ckpt_dir / "best.ckpt", params, meta={"epoch": epoch, "val_acc": val_acc})
        if ckpt_dir:
            save_model(ckpt_dir / "last.ckpt", params, optimizer=opt.state, meta={"epoch": epoch})
        if schedule.target_train_accuracy is not None:
            # running accuracy lags the weights; confirm on the whole split
            if correct / n >= schedule.target_train_accuracy * 0.95:
                if accuracy(params, x_all, y_all) >= schedule.target_train_accuracy:
                    break
        if stopper.stale >= schedule.patience:
            break
    return report


# -- persistence ---------------------------------------------------------------


def save_model(path, params, optimizer=None, meta=None, kind="keyframe"):
    tensors = params.state_arrays()
    meta = dict(meta or {})
    meta["buffers"] = sorted(params.buffers)
    if optimizer is not None:
        meta["adam"] = {
            "step_count": optimizer.step_count,
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
        }
        for name, m in optimizer.first_moment.items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = optimizer.second_moment[name]
    checkpoint.save_checkpoint(path, kind, params.config.to_dict(), params.fingerprint, tensors, meta)


def split_optimizer(tensors, meta):
    from mvecho.engine import AdamState

    model = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    if "adam" not in meta:
        return model, None
    state = AdamState(**meta["adam"])
    for k, v in tensors.items():
        if k.startswith("adam.m."):
            state.first_moment[k[7:]] = v.copy()
        elif k.startswith("adam.v."):
            state.second_moment[k[7:]] = v.copy()
    return model, state


def load_model(path, expected=None, migrate_head=False):
    """Load a key-frame checkpoint.

    With ``expected`` (an :class:`ArchitectureConfig`) the stored fingerprint
    must match, unless ``migrate_head`` is set and the only difference is a
    binary head where a three-class one is expected.
    Returns ``(params, optimizer_state_or_None, meta)``.
    """
    header, tensors = checkpoint.load_checkpoint(path)
    if header["kind"] != "keyframe":
        raise CheckpointError(f"{path} holds a {header['kind']} model, not a key-frame model")
    cfg = ArchitectureConfig.from_dict(header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint does not match its config")
    arrays, opt_state = split_optimizer(tensors, header["meta"])
    params = ModelParams(
        cfg, {k: Tensor(v, requires_grad=k not in header["meta"].get("buffers", [])) for k, v in arrays.items()},
        header["meta"].get("buffers", []),
    )
    if expected is not None and expected.fingerprint() != cfg.fingerprint():
        swapped = dataclasses.replace(cfg, head="three_class")
        if migrate_head and cfg.head == "binary" and swapped.fingerprint() == expected.fingerprint():
            return swap_head_binary_to_three(params), None, header["meta"]
        raise CheckpointError(
            f"{path}: architecture fingerprint {cfg.fingerprint()} != expected {expected.fingerprint()}"
        )
    return params, opt_state, header["meta"]
