"""Network layers, activations and losses on top of :mod:`tensor`.

Image tensors are channels-last: ``[N, H, W, C]``. Convolution entry points
also take an unbatched ``[H, W, C]`` input and return an unbatched result.
Padding defaults to "same": output extent is ``ceil(H / stride)``.
"""

import math

import numpy as np

from mvecho.engine import backend
from mvecho.engine.tensor import (
    Tensor,
    _sigmoid,
    add,
    as_tensor,
    concat,
    log_softmax,
    make_node,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stack,
    tanh,
    tsum,
)
from mvecho.errors import DimensionError

__all__ = [
    "binary_cross_entropy",
    "batch_norm",
    "bilstm_forward",
    "conv2d_forward",
    "depthwise_conv_forward",
    "dropout",
    "flatten",
    "fully_connected_forward",
    "global_average_pool",
    "he_uniform",
    "l2_loss",
    "lstm_forward",
    "multiclass_cross_entropy",
    "pointwise_conv_forward",
    "recurrent_uniform",
    "relu",
    "same_padding",
    "sigmoid",
    "softmax",
    "tanh",
]


def same_padding(extent, k, stride):
    """Return (out_extent, pad_before, pad_after) for same padding."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return out, total // 2, total - total // 2


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [H,W,C] or [N,H,W,C], got shape {x.shape}")
    return x, False


def _geometry(shape, kh, kw, stride, padding):
    _, h, w, _ = shape
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _pad(arr, pads):
    if all(p == (0, 0) for p in pads):
        return np.ascontiguousarray(arr)
    return np.pad(arr, pads)


def _unpad(arr, pads):
    (_, _), (pt, pb), (pl, pr), _ = pads
    return arr[:, pt : arr.shape[1] - pb, pl : arr.shape[2] - pr, :]


def conv2d_forward(x, kernels, stride=1, padding="same"):
    """Standard convolution of ``[N,H,W,Cin]`` with ``[kh,kw,Cin,Cout]`` kernels."""
    x, squeeze = _batched(x)
    kernels = as_tensor(kernels)
    if kernels.ndim != 4:
        raise DimensionError(f"conv kernels must be [kh,kw,Cin,Cout], got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise DimensionError(
            f"input has {x.shape[3]} channels but kernels expect {cin}", expected=cin, got=x.shape[3]
        )
    n = x.shape[0]
    ho, wo, pads = _geometry(x.shape, kh, kw, stride, padding)
    xp = _pad(x.data, pads)
    k = backend.kernels
    cols = k.im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2 @ wmat.T)
            gx = _unpad(k.col2im(dcols, xp.shape, kh, kw, stride, ho, wo), pads)
        return gx, gw

    out = make_node(out, (x, kernels), backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def depthwise_conv_forward(x, kernels, stride=1, padding="same"):
    """One ``kh x kw`` filter per channel; channel c of the output sees only channel c."""
    x, squeeze = _batched(x)
    kernels = as_tensor(kernels)
    if kernels.ndim != 3:
        raise DimensionError(f"depthwise kernels must be [kh,kw,C], got {kernels.shape}")
    kh, kw, c = kernels.shape
    if x.shape[3] != c:
        raise DimensionError(
            f"depthwise kernel has {c} channels, input has {x.shape[3]}", expected=c, got=x.shape[3]
        )
    ho, wo, pads = _geometry(x.shape, kh, kw, stride, padding)
    xp = _pad(x.data, pads)
    wk = np.ascontiguousarray(kernels.data)
    k = backend.kernels
    out = k.dw_forward(xp, wk, stride, ho, wo)

    def backward(g):
        dxp, dw = k.dw_backward(xp, wk, np.ascontiguousarray(g), stride)
        return _unpad(dxp, pads), dw

    out = make_node(out, (x, kernels), backward)
    return reshape(out, out.shape[1:]) if squeeze else out


def pointwise_conv_forward(x, kernels):
    """Per-pixel linear map across channels with ``[1,1,Cin,Cout]`` (or ``[Cin,Cout]``) kernels."""
    x, squeeze = _batched(x)
    kernels = as_tensor(kernels)
    if kernels.ndim == 4:
        if kernels.shape[:2] != (1, 1):
            raise DimensionError(f"pointwise kernels must be 1x1, got {kernels.shape[:2]}")
        kernels = reshape(kernels, kernels.shape[2:])
    cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise DimensionError(
            f"input has {x.shape[3]} channels but kernels expect {cin}", expected=cin, got=x.shape[3]
        )
    n, h, w, _ = x.shape
    out = reshape(matmul(reshape(x, (n * h * w, cin)), kernels), (n, h, w, cout))
    return reshape(out, out.shape[1:]) if squeeze else out


def fully_connected_forward(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored ``[in, out]``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def add_bias(x, bias):
    return add(x, bias)


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def global_average_pool(x):
    """Element-wise average over spatial axes: ``[N,H,W,C] -> [N,C]``."""
    return mean(as_tensor(x), axis=(1, 2))


def dropout(x, rate, rng, training=True):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def batch_norm(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over all leading axes; running stats updated in place."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(square(centered), axis=axes, keepdims=True)
        count = int(np.prod([x.shape[a] for a in axes]))
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mu.data.reshape(-1)
        unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * unbiased
    else:
        centered = x - Tensor(running_mean.data)
        var = Tensor(running_var.data)
    inv = Tensor(np.asarray(1.0, dtype=x.dtype)) / _sqrt(var + eps)
    return centered * inv * gamma + beta


def _sqrt(a):
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


# -- recurrent -------------------------------------------------------------


def lstm_forward(x, wx, wh, b, reverse=False):
    """Single-direction LSTM over ``x: [T, Din]``; gates ordered (i, f, g, o).

    ``wx: [Din, 4H]``, ``wh: [H, 4H]``, ``b: [4H]``. Returns hidden states ``[T, H]``
    in input order.
    """
    x = as_tensor(x)
    hsize = wh.shape[0]
    steps = x.shape[0]
    proj = add(matmul(x, wx), b)
    h = Tensor(np.zeros(hsize, dtype=x.dtype))
    c = Tensor(np.zeros(hsize, dtype=x.dtype))
    outs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = proj[t] + matmul(h, wh)
        i = sigmoid(z[0:hsize])
        f = sigmoid(z[hsize : 2 * hsize])
        gcell = tanh(z[2 * hsize : 3 * hsize])
        o = sigmoid(z[3 * hsize :])
        c = f * c + i * gcell
        h = o * tanh(c)
        outs[t] = h
    return stack(outs, axis=0)


def bilstm_forward(x, params):
    """Bi-directional LSTM; ``params`` maps ``fwd.wx``, ``fwd.wh``, ``fwd.b`` and ``bwd.*``.

    Returns ``[T, 2H]``: forward and backward hidden states concatenated per step.
    """
    fwd = lstm_forward(x, params["fwd.wx"], params["fwd.wh"], params["fwd.b"])
    bwd = lstm_forward(x, params["bwd.wx"], params["bwd.wh"], params["bwd.b"], reverse=True)
    return concat([fwd, bwd], axis=1)


# -- losses ----------------------------------------------------------------


def binary_cross_entropy(logits, targets):
    """Mean sigmoid cross-entropy computed from logits; gradient is ``(sigma(z) - y) / N``."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    n = z.size
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    prob = _sigmoid(z)
    return make_node(np.asarray(loss.sum() / n, dtype=z.dtype), (logits,), lambda g: (g * (prob - y) / n,))


def multiclass_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``[N, C]`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"logits {logits.shape} do not match {labels.size} labels")
    n = labels.size
    picked = log_softmax(logits, axis=1)[np.arange(n), labels]
    return -tsum(picked) * (1.0 / n)


def l2_loss(pred, target):
    """Sum of squared differences."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l2_loss shapes differ: {pred.shape} vs {target.shape}")
    return tsum(square(pred - target))


def he_uniform(rng, shape, fan_in, dtype=np.float64):
    bound = math.sqrt(6.0 / max(fan_in, 1))
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        # draw in single precision: the multi-branch FC1 alone holds 2e8 weights
        out = rng.random(shape, dtype=np.float32)
        out *= 2.0 * bound
        out -= bound
        return out
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def recurrent_uniform(rng, shape, hidden, dtype=np.float64):
    bound = 1.0 / math.sqrt(max(hidden, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)

