"""Small numpy tensor engine with hand-written backward passes.

Feature maps use the batched layout ``(B, H, W, C)``. Every op accepts an
unbatched ``(H, W, C)`` tensor as well and returns the matching rank. Each
layer comes as a ``*_forward`` returning ``(out, cache)`` and a ``*_backward``
taking ``(dout, cache)``; the plain names (``conv2d``, ``relu`` ...) are
forward-only conveniences.

Training runs in float32, gradient checks in float64. The active dtype is a
module-level setting read by parameter initialisers and data loaders; the ops
themselves compute in the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "get_dtype",
    "set_dtype",
    "precision",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "global_avg_pool",
    "global_avg_pool_forward",
    "global_avg_pool_backward",
    "dense",
    "dense_forward",
    "dense_backward",
    "relu",
    "relu_forward",
    "relu_backward",
    "softmax",
    "AdamState",
    "adam_init",
    "adam_step",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform to an op's contract."""


_DTYPE = np.dtype(np.float32)


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global dtype (``"float64"`` for gradient checks)."""
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return x[None], True
    raise ShapeError(f"expected a (H, W, C) or (B, H, W, C) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _pad_amounts(mode: str, k: int, dilation: int) -> tuple[int, int]:
    span = (k - 1) * dilation
    if mode == "valid":
        return 0, 0
    if mode == "same":
        return span // 2, span - span // 2
    raise ValueError(f"padding mode must be 'same' or 'valid', got {mode!r}")


def _check_conv(x, kernels, groups, dilation, padding):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be (kh, kw, C_in/groups, C_out), got {kernels.shape}")
    kh, kw, cig, cout = kernels.shape
    cin = x.shape[-1]
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide C_in={cin} and C_out={cout}")
    if cin // groups != cig:
        raise ShapeError(
            f"kernel expects {cig} input channels per group but input has "
            f"{cin} channels in {groups} group(s)"
        )
    if len(dilation) != 2 or min(dilation) < 1:
        raise ShapeError(f"dilation must be two positive ints, got {dilation}")
    if isinstance(padding, str):
        padding = (padding, padding)
    pads = [_pad_amounts(padding[0], kh, dilation[0]), _pad_amounts(padding[1], kw, dilation[1])]
    h_out = x.shape[-3] + sum(pads[0]) - (kh - 1) * dilation[0]
    w_out = x.shape[-2] + sum(pads[1]) - (kw - 1) * dilation[1]
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} with dilation {tuple(dilation)} does not fit input "
            f"{x.shape[-3]}x{x.shape[-2]} under padding {tuple(padding)}"
        )
    return pads, h_out, w_out


def _block_diagonal(kernels, groups):
    """Expand (kh, kw, C_in/g, C_out) grouped kernels to dense (kh*kw, C_in, C_out)."""
    kh, kw, cig, cout = kernels.shape
    if groups == 1:
        return kernels.reshape(kh * kw, cig, cout)
    cog = cout // groups
    full = np.zeros((kh * kw, cig * groups, cout), dtype=kernels.dtype)
    flat = kernels.reshape(kh * kw, cig, cout)
    for g in range(groups):
        full[:, g * cig : (g + 1) * cig, g * cog : (g + 1) * cog] = flat[:, :, g * cog : (g + 1) * cog]
    return full


def _overlap(offset: int, n_in: int, n_out: int):
    """Index ranges where output position o reads input position o + offset."""
    lo = max(0, -offset)
    hi = min(n_out, n_in - offset)
    return lo, hi


def conv2d_forward(x, kernels, groups=1, dilation=(1, 1), padding=("same", "same")):
    """Stride-1 grouped, dilated cross-correlation.

    ``kernels`` has shape ``(kh, kw, C_in // groups, C_out)``; output channel
    block ``g`` only sees input channel block ``g``.
    """
    pads, h_out, w_out = _check_conv(x, kernels, groups, dilation, padding)
    xb, squeeze = _batched(x)
    kh, kw, cig, cout = kernels.shape
    cog = cout // groups
    dh, dw = dilation
    b = xb.shape[0]
    n_taps = kh * kw
    rows = b * h_out * w_out

    xp = np.pad(xb, ((0, 0), pads[0], pads[1], (0, 0))) if any(sum(p) for p in pads) else xb
    xg = xp.reshape(*xp.shape[:3], groups, cig)
    # group-major patches: (rows, G, taps * C_in/g)
    cols = np.stack(
        [xg[:, i * dh : i * dh + h_out, j * dw : j * dw + w_out] for i in range(kh) for j in range(kw)],
        axis=4,
    ).reshape(rows, groups, n_taps * cig)
    k_groups = kernels.reshape(n_taps * cig, groups, cog)
    if groups == 1:
        out = cols[:, 0, :] @ k_groups[:, 0, :]
    else:
        out = np.empty((rows, groups, cog), dtype=np.result_type(xb, kernels))
        for g in range(groups):
            out[:, g, :] = cols[:, g, :] @ k_groups[:, g, :]
    out = out.reshape(b, h_out, w_out, cout)
    cache = (cols, kernels, xb.shape, groups, dilation, pads, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(dout, cache):
    cols, kernels, x_shape, groups, dilation, pads, squeeze = cache
    kh, kw, cig, cout = kernels.shape
    cog = cout // groups
    b, h, w, cin = x_shape
    dh, dw = dilation
    if squeeze:
        dout = dout[None]
    _, h_out, w_out, _ = dout.shape
    d2 = dout.reshape(-1, cout)

    dk = np.empty((kh * kw * cig, groups, cog), dtype=dout.dtype)
    for g in range(groups):
        dk[:, g, :] = cols[:, g, :].T @ d2[:, g * cog : (g + 1) * cog]

    # input gradient tap by tap, scattered with the tap's offset; positions
    # that fell in the zero padding are dropped
    k_full = _block_diagonal(kernels, groups)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for t in range(kh * kw):
        i, j = divmod(t, kw)
        oi, oj = i * dh - pads[0][0], j * dw - pads[1][0]
        hlo, hhi = _overlap(oi, h, h_out)
        wlo, whi = _overlap(oj, w, w_out)
        if hlo >= hhi or wlo >= whi:
            continue
        contrib = (d2 @ k_full[t].T).reshape(b, h_out, w_out, cin)
        dx[:, hlo + oi : hhi + oi, wlo + oj : whi + oj, :] += contrib[:, hlo:hhi, wlo:whi, :]
    return (dx[0] if squeeze else dx), dk.reshape(kernels.shape)


def conv2d(x, kernels, groups=1, dilation=(1, 1), padding=("same", "same")):
    return conv2d_forward(x, kernels, groups, dilation, padding)[0]


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------


def maxpool2d_forward(x, window=(1, 2)):
    """Non-overlapping max pooling over width with a (1, 2) window."""
    if tuple(window) != (1, 2):
        raise ShapeError(f"only the (1, 2) pooling window is supported, got {window}")
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    if w % 2:
        raise ShapeError(
            f"max pooling needs an even width, got {w}; choose a frame length divisible by 4"
        )
    pairs = xb.reshape(b, h, w // 2, 2, c)
    # argmax returns the first maximum, so ties route to the lower index
    idx = np.argmax(pairs, axis=3)
    out = np.take_along_axis(pairs, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    cache = (idx, xb.shape, squeeze)
    return (out[0] if squeeze else out), cache


def maxpool2d_backward(dout, cache):
    idx, x_shape, squeeze = cache
    if squeeze:
        dout = dout[None]
    b, h, w, c = x_shape
    dpairs = np.zeros((b, h, w // 2, 2, c), dtype=dout.dtype)
    np.put_along_axis(dpairs, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    dx = dpairs.reshape(x_shape)
    return dx[0] if squeeze else dx


def maxpool2d(x, window=(1, 2)):
    return maxpool2d_forward(x, window)[0]


# --------------------------------------------------------------------------
# global average pooling, dense, relu, softmax
# --------------------------------------------------------------------------


def global_avg_pool_forward(x):
    xb, squeeze = _batched(x)
    if xb.shape[1] < 1 or xb.shape[2] < 1:
        raise ShapeError(f"global average pooling needs H, W >= 1, got {x.shape}")
    out = xb.mean(axis=(1, 2))
    return (out[0] if squeeze else out), (xb.shape, squeeze)


def global_avg_pool_backward(dout, cache):
    x_shape, squeeze = cache
    if squeeze:
        dout = dout[None]
    b, h, w, c = x_shape
    dx = np.broadcast_to((dout / (h * w))[:, None, None, :], x_shape).copy()
    return dx[0] if squeeze else dx


def global_avg_pool(x):
    return global_avg_pool_forward(x)[0]


def dense_forward(x, weights, bias=None):
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"cannot apply a {weights.shape} weight matrix to input {x.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    out = x @ weights
    if bias is not None:
        out = out + bias
    return out, (x, weights, bias is not None)


def dense_backward(dout, cache):
    """Returns ``(dx, dweights, dbias)``; ``dbias`` is None for bias-free layers."""
    x, weights, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dout @ weights.T, dw, db


def dense(x, weights, bias=None):
    return dense_forward(x, weights, bias)[0]


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    # subgradient at 0 is 0
    return dout * (x > 0)


def relu(x):
    return np.maximum(x, 0)


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(0, zeros, {k: z.copy() for k, z in zeros.items()}, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("params, grads and optimizer state must cover the same blocks")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    step = state.step + 1
    corr1 = 1.0 - b1**step
    corr2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(step, new_m, new_v, b1, b2, eps)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def finite_diff_check(
    fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a dict of float64 arrays to ``(scalar, grads)`` where ``grads``
    has the same keys. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    _, analytic = fn(point)
    worst = 0.0
    for name, value in point.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise ShapeError(f"analytic gradient for {name!r} has shape {grad.shape}")
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(point)[0]
            flat[i] = orig - eps
            f_minus = fn(point)[0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return float(worst)
