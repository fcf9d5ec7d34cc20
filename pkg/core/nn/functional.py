import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from core.errors import ShapeMismatchError
from core.nn.tensor import Tensor, as_tensor

BCE_EPS = 1e-7
MASK_PENALTY = -1e9
LEAKY_SLOPE = 0.01

_debug = False


def set_debug(enabled: bool) -> None:
    """In debug mode out-of-range sample points are logged before clamping."""
    global _debug
    _debug = bool(enabled)


# ------------------ ACTIVATIONS ------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.make(x.data * mask, (x,), lambda g: x._accumulate(g * mask), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor.make(x.data * scale, (x,), lambda g: x._accumulate(g * scale), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor.make(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.make(out, (x,), lambda g: x._accumulate(g * out), "exp")


# ------------------ STRUCTURE ------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from e
    return Tensor.make(data, tensors, backward, "concat")


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gathers rows (first axis) of `x`; repeated indices accumulate their gradients."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)
    return Tensor.make(x.data[index], (x,), backward, "take")


# ------------------ CONVOLUTION ------------------

def _check_conv(x: Tensor, w: Tensor, stride: int, transposed: bool) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"convolution input must be NHWC, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeMismatchError(f"convolution kernel must be (kh, kw, cin, cout), got shape {w.shape}")
    if x.shape[3] != w.shape[2]:
        kind = "transposed convolution" if transposed else "convolution"
        raise ShapeMismatchError(f"{kind} input has {x.shape[3]} channels but kernel expects {w.shape[2]}")
    if stride < 1:
        raise ShapeMismatchError(f"stride must be >= 1, got {stride}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    NHWC cross-correlation with zero padding, computed as one matmul per kernel offset.
    Kernel layout is (kh, kw, cin, cout); output size is (H + 2p - k) // s + 1.
    """
    _check_conv(x, w, stride, transposed=False)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"input {h}x{wd} is smaller than kernel {kh}x{kw} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            out += window @ w.data[i, j]
    if b is not None:
        out += b.data

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g @ w.data[i, j].T
            x._accumulate(gxp[:, padding:padding + h, padding:padding + wd, :])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            g2 = g.reshape(-1, cout)
            for i in range(kh):
                for j in range(kw):
                    window = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
                    gw[i, j] = window.reshape(-1, cin).T @ g2
            w._accumulate(gw)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.make(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Adjoint of `conv2d`: each input pixel scatters `x @ w[i, j]` to offset (s*h + i, s*w + j).
    Output size is (H - 1) * s + k - 2p.
    """
    _check_conv(x, w, stride, transposed=True)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeMismatchError(f"padding {padding} leaves no output for input {h}x{wd}")

    full = np.zeros((n, hf, wf, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + stride * h:stride, j:j + stride * wd:stride, :] += x.data @ w.data[i, j]
    out = full[:, padding:hf - padding, padding:wf - padding, :]
    if b is not None:
        out = out + b.data
    else:
        out = out.copy()

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, padding:hf - padding, padding:wf - padding, :] = g
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx += gfull[:, i:i + stride * h:stride, j:j + stride * wd:stride, :] @ w.data[i, j].T
            x._accumulate(gx)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            x2 = x.data.reshape(-1, cin)
            for i in range(kh):
                for j in range(kw):
                    window = gfull[:, i:i + stride * h:stride, j:j + stride * wd:stride, :]
                    gw[i, j] = x2.T @ window.reshape(-1, cout)
            w._accumulate(gw)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.make(out, parents, backward, "conv_transpose2d")


# ------------------ BILINEAR ------------------

def _interp_matrix(size_in: int, size_out: int, dtype) -> np.ndarray:
    """(size_out, size_in) align-corners interpolation weights."""
    m = np.zeros((size_out, size_in), dtype=dtype)
    if size_out == 1 or size_in == 1:
        src = np.zeros(size_out)
    else:
        src = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    i0 = np.clip(np.floor(src).astype(np.int64), 0, size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    rows = np.arange(size_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of an NHWC tensor: corner pixels map onto corners."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"bilinear_resize expects NHWC input, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"output size must be positive, got {out_h}x{out_w}")
    ry = _interp_matrix(x.shape[1], out_h, x.dtype)
    rx = _interp_matrix(x.shape[2], out_w, x.dtype)
    out = np.einsum("oh,nhwc->nowc", ry, x.data)
    out = np.einsum("pw,nowc->nopc", rx, out)

    def backward(g):
        gx = np.einsum("pw,nopc->nowc", rx, g)
        x._accumulate(np.einsum("oh,nowc->nhwc", ry, gx))
    return Tensor.make(out, (x,), backward, "bilinear_resize")


def bilinear_sample(x: Tensor, points: np.ndarray) -> Tensor:
    """
    Samples an (H, W, C) map at fractional (x, y) = (col, row) points, returning (n, C).
    Points outside [0, W-1] x [0, H-1] are clamped.
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"bilinear_sample expects an (H, W, C) map, got shape {x.shape}")
    h, w, c = x.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    px = np.clip(pts[:, 0], 0.0, w - 1)
    py = np.clip(pts[:, 1], 0.0, h - 1)
    if _debug:
        clamped = int(np.sum((px != pts[:, 0]) | (py != pts[:, 1])))
        if clamped:
            logging.debug(f"bilinear_sample clamped {clamped} of {len(pts)} points into the {h}x{w} map")
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(x.dtype)[:, None]
    fy = (py - y0).astype(x.dtype)[:, None]
    weights = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    out = sum(wt * x.data[r, cc] for wt, (r, cc) in zip(weights, corners))

    def backward(g):
        gx = np.zeros_like(x.data)
        for wt, (r, cc) in zip(weights, corners):
            np.add.at(gx, (r, cc), wt * g)
        x._accumulate(gx)
    return Tensor.make(np.asarray(out, dtype=x.dtype).reshape(len(pts), c), (x,), backward, "bilinear_sample")


# ------------------ ATTENTION PRIMITIVES ------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax along `axis`. `mask` entries equal to 1 receive an additive -1e9 logit,
    so each row stays normalized over its unmasked entries.
    """
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask)
        if np.any(np.all(mask != 0, axis=axis)):
            raise ValueError("attention mask leaves a row with no unmasked entry")
        logits = logits + mask.astype(x.dtype) * MASK_PENALTY
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return Tensor.make(out, (x,), backward, "softmax")


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of `scores` (P, ...) within groups sharing a segment id."""
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments)
    if np.any(counts == 0):
        raise ValueError("every attention row needs at least one allowed entry")
    trailing = scores.shape[1:]
    peak = np.full((n_segments,) + trailing, -np.inf, dtype=scores.dtype)
    np.maximum.at(peak, seg, scores.data)
    e = np.exp(scores.data - peak[seg])
    denom = np.zeros((n_segments,) + trailing, dtype=scores.dtype)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def backward(g):
        dot = np.zeros((n_segments,) + trailing, dtype=scores.dtype)
        np.add.at(dot, seg, g * out)
        scores._accumulate(out * (g - dot[seg]))
    return Tensor.make(out, (scores,), backward, "segment_softmax")


def segment_sum(values: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    seg = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, seg, values.data)
    return Tensor.make(out, (values,), lambda g: values._accumulate(g[seg]), "segment_sum")


def sinusoidal_encoding(coords: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """
    Fixed (n, dim) encoding of 2-D positions: the first half of the channels encodes x,
    the second half y, each as interleaved sin/cos at geometric frequencies.
    """
    if dim % 4 != 0:
        raise ShapeMismatchError(f"sinusoidal encoding width must be divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    quarter = dim // 4
    freqs = 1.0 / base ** (np.arange(quarter) / quarter)
    parts = []
    for axis in (0, 1):
        angles = coords[:, axis:axis + 1] * freqs[None, :]
        enc = np.empty((len(coords), 2 * quarter))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        parts.append(enc)
    return np.concatenate(parts, axis=1)


# ------------------ LOSSES ------------------

def bce_loss(pred: Tensor, target, reduction: str = "mean", denominator: Optional[float] = None) -> Tensor:
    """
    Binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].

    reduction "mean" averages over elements and "sum" adds them; an explicit `denominator`
    divides the sum instead. The gradient is taken at the clamped value so saturated
    predictions keep a learning signal.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeMismatchError(f"prediction shape {pred.shape} does not match target shape {t.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    elementwise = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    if denominator is not None:
        scale = 1.0 / float(denominator) if denominator else 0.0
    elif reduction == "mean":
        scale = 1.0 / max(1, elementwise.size)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    total = np.asarray(elementwise.sum() * scale, dtype=pred.dtype)

    def backward(g):
        pred._accumulate(g * scale * (p - t) / (p * (1.0 - p)))
    return Tensor.make(total, (pred,), backward, "bce")
