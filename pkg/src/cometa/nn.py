"""Neural building blocks on top of the autodiff core.

Everything here is a pure function from (parameters, inputs) to tensors, so
the same architecture can be evaluated at the shared initialization or at
task-adapted parameters. Parameter creation lives in ``InitPolicy``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LAYER_KINDS = (
    "conv2d",
    "linear",
    "relu",
    "adaptive-avg-pool",
    "multi-head-attention",
    "layer-norm",
    "flatten",
)


@dataclass
class InitPolicy:
    """Deterministic weight initialization.

    conv weights use He fan-in scaling (suits the ReLU stacks), linear and
    attention projections use Xavier uniform, biases start at a constant.
    """

    seed: int = 0
    conv_gain: float = 1.0
    linear_gain: float = 1.0
    bias_value: float = 0.0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed))


def he_conv(rng, c_out, c_in, kh, kw, gain=1.0) -> Tensor:
    fan_in = c_in * kh * kw
    std = gain * np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, kh, kw)))


def xavier_linear(rng, d_in, d_out, gain=1.0) -> Tensor:
    limit = gain * np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)))


def bias(dim, value=0.0) -> Tensor:
    return Tensor(np.full((dim,), float(value)))


# -- layers -------------------------------------------------------------------


def conv2d(x, weight, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of N×C×H×W with C_out×C_in×kh×kw.

    Realized as pad → im2col → matmul, so forward, backward and
    double-backward all reduce to tape primitives.
    """
    x, weight = ad.astensor(x), ad.astensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {c_in}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = ad.pad2d(x, padding, padding)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = ad.im2col(xp, kh, kw, stride, stride)  # (N*oh*ow, C*kh*kw)
    wmat = ad.reshape(weight, (c_out, c_in * kh * kw))
    out = ad.matmul(cols, ad.transpose(wmat))  # (N*oh*ow, C_out)
    out = ad.transpose(ad.reshape(out, (n, oh, ow, c_out)), (0, 3, 1, 2))
    if b is not None:
        out = ad.add(out, ad.reshape(b, (1, c_out, 1, 1)))
    return out


def avg_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping (or strided) window mean over the spatial axes."""
    x = ad.astensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"avg_pool2d: kernel {kernel} exceeds input {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    cols = ad.im2col(x, kernel, kernel, stride, stride)  # (N*oh*ow, C*k*k)
    cols = ad.reshape(cols, (n * oh * ow, c, kernel * kernel))
    pooled = ad.tmean(cols, axis=2)
    return ad.transpose(ad.reshape(pooled, (n, oh, ow, c)), (0, 3, 1, 2))


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling: bin i spans floor(i·H/out) to ceil((i+1)·H/out).

    Pooling to the input's own size is the identity; pooling to 1×1 is the
    global spatial mean (taken on the fast path).
    """
    x = ad.astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"adaptive_avg_pool: output extent {out_h}x{out_w} must be positive")
    if out_h > h or out_w > w:
        raise ShapeError(
            f"adaptive_avg_pool: output {out_h}x{out_w} exceeds input {h}x{w}"
        )
    if out_h == 1 and out_w == 1:
        return ad.reshape(ad.tmean(x, axis=(2, 3)), (n, c, 1, 1))

    def bounds(i, size, out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)  # ceil
        return lo, hi

    rows = []
    for i in range(out_h):
        h0, h1 = bounds(i, h, out_h)
        cells = []
        for j in range(out_w):
            w0, w1 = bounds(j, w, out_w)
            window = x[:, :, h0:h1, w0:w1]
            cells.append(ad.tmean(window, axis=(2, 3), keepdims=True))
        rows.append(ad.concat(cells, axis=3))
    return ad.concat(rows, axis=2)


def linear(x, weight, b=None) -> Tensor:
    """x @ weight (+ b); weight is (d_in, d_out)."""
    x, weight = ad.astensor(x), ad.astensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} vs weight {weight.shape}")
    out = ad.matmul(x, weight)
    if b is not None:
        out = ad.add(out, b)
    return out


def relu(x) -> Tensor:
    return ad.relu(x)


def flatten(x) -> Tensor:
    x = ad.astensor(x)
    return ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    """Stable log-sum-exp; the shift is a detached max so gradients are exact."""
    x = ad.astensor(x)
    m = ad.tmax(x, axis=axis, keepdims=True).detach()
    out = ad.add(m, ad.log(ad.tsum(ad.exp(ad.sub(x, m)), axis=axis, keepdims=True)))
    if not keepdims:
        axes = ad._norm_axes(axis, x.ndim)
        shape = tuple(s for i, s in enumerate(out.shape) if i not in axes)
        out = ad.reshape(out, shape)
    return out


def softmax(x, axis=-1) -> Tensor:
    return ad.exp(ad.sub(x, logsumexp(x, axis=axis, keepdims=True)))


def log_softmax(x, axis=-1) -> Tensor:
    return ad.sub(x, logsumexp(x, axis=axis, keepdims=True))


def layer_norm(x, gain, b, eps: float = 1e-5) -> Tensor:
    """Normalization over the trailing axis with learned gain/bias."""
    x = ad.astensor(x)
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.mul(xc, xc), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(xc, ad.sqrt(ad.add(var, eps))), gain), b)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy against integer class labels.

    Computed as mean(logsumexp(logits) − logits[label]) so saturated logits
    stay finite; labels select via a constant one-hot mask.
    """
    logits = ad.astensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected N×M logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, m = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows vs {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(
            f"cross_entropy: label out of range [0, {m}): {labels.min()}..{labels.max()}"
        )
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    lse = logsumexp(logits, axis=1)
    picked = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=1)
    return ad.tmean(ad.sub(lse, picked))


def multi_head_attention(queries, keys, values, params, heads: int, prefix: str = ""):
    """Scaled dot-product attention with per-head projections.

    ``params`` supplies ``{prefix}wq/wk/wv/wo`` (width×width) and matching
    ``bq/bk/bv/bo`` biases. Returns (output, attention weights); weights are
    (N, heads, Tq, Tk) and each row sums to 1.
    """
    q, k, v = ad.astensor(queries), ad.astensor(keys), ad.astensor(values)
    n, tq, d = q.shape
    _, tk, dk = k.shape
    if d % heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    if dk != d or v.shape[-1] != d:
        raise ShapeError(
            f"attention: query width {d} vs key {dk} / value {v.shape[-1]}"
        )
    dh = d // heads

    def proj(x, name, t):
        out = linear(x, params[prefix + "w" + name], params[prefix + "b" + name])
        out = ad.reshape(out, (n, t, heads, dh))
        return ad.transpose(out, (0, 2, 1, 3))  # (N, heads, T, dh)

    qh = proj(q, "q", tq)
    kh = proj(k, "k", tk)
    vh = proj(v, "v", tk)
    scores = ad.div(ad.matmul(qh, ad.swap_last(kh)), float(np.sqrt(dh)))
    attn = softmax(scores, axis=-1)  # (N, heads, Tq, Tk)
    mixed = ad.matmul(attn, vh)  # (N, heads, Tq, dh)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, tq, d))
    out = linear(mixed, params[prefix + "wo"], params[prefix + "bo"])
    return out, attn


def attention_params(rng, width: int, prefix: str = "", gain: float = 1.0, identity: bool = False):
    """Fresh projection parameters for one attention block."""
    names = {}
    for name in ("q", "k", "v", "o"):
        if identity:
            names[prefix + "w" + name] = Tensor(np.eye(width))
        else:
            names[prefix + "w" + name] = xavier_linear(rng, width, width, gain)
        names[prefix + "b" + name] = bias(width)
    return names
