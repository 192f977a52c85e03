"""Differentiable layer primitives: convolutions, normalization, attention, losses.

The heavy operators carry hand-written backward passes; everything else is
composed from the primitives in :mod:`.tensor`.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError, InputError
from .tensor import Tensor, ensure_tensor, make_result

NORM_EPS = 1e-5

IntPair = Union[int, Tuple[int, int]]


def _pair(v: IntPair) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


# -- convolution ---------------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, T]`` with ``weight[C_out, C_in, K]``."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    if x.ndim != 3:
        raise DimensionError(f"conv1d input must be [B, C, T], got {x.shape}")
    if weight.ndim != 3:
        raise DimensionError(f"conv1d kernel must be [C_out, C_in, K], got {weight.shape}")
    B, C, T = x.shape
    O, Cw, K = weight.shape
    if Cw != C:
        raise DimensionError(f"conv1d channel axis (1) mismatch: input has {C}, kernel expects {Cw}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    Tp = T + 2 * padding
    if K > Tp:
        raise DimensionError(f"conv1d time axis (2) too short: kernel {K} > padded length {Tp}")
    To = (Tp - K) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, K, axis=2)[:, :, : stride * (To - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * To, C * K)
    wmat = weight.data.reshape(O, C * K)
    out = (cols @ wmat.T).reshape(B, To, O).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * To, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(O, C, K)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.ascontiguousarray((g2 @ wmat).reshape(B, To, C, K).transpose(3, 0, 2, 1))
            gxp = np.zeros((B, C, Tp), dtype=g.dtype)
            for k in range(K):
                gxp[:, :, k : k + stride * (To - 1) + 1 : stride] += gcols[k]
            gx = gxp[:, :, padding : padding + T]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, ensure_tensor(bias))
    return make_result(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntPair = 1, padding: IntPair = 0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, H, W]`` with ``weight[C_out, C_in, KH, KW]``."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [B, C, H, W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [C_out, C_in, KH, KW], got {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, KH, KW = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel axis (1) mismatch: input has {C}, kernel expects {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigurationError("stride must be >= 1")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if KH > Hp:
        raise DimensionError(f"conv2d height axis (2) too short: kernel {KH} > padded {Hp}")
    if KW > Wp:
        raise DimensionError(f"conv2d width axis (3) too short: kernel {KW} > padded {Wp}")
    Ho, Wo = (Hp - KH) // sh + 1, (Wp - KW) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))
    win = win[:, :, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * KH * KW)
    wmat = weight.data.reshape(O, C * KH * KW)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(O, C, KH, KW)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # tap-major layout so every slice added below is contiguous
            gcols = np.ascontiguousarray((g2 @ wmat).reshape(B, Ho, Wo, C, KH, KW).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(KH):
                for j in range(KW):
                    gxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += gcols[i, j]
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, ensure_tensor(bias))
    return make_result(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(
            f"linear feature axis (-1) mismatch: input has {x.shape[-1]}, weight expects {weight.shape[-1]}"
        )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


# -- normalization ----------------------------------------------------------------


def normalize(x: Tensor, axes: Sequence[int], eps: float = NORM_EPS) -> Tensor:
    """Zero-mean, unit-(population)-variance over ``axes``; no affine part."""
    x = ensure_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = g - gm - xhat * (g * xhat).mean(axis=axes, keepdims=True)
        return (gx * inv_std,)

    return make_result(xhat.astype(x.dtype, copy=False), (x,), backward)


def _affine(y: Tensor, weight: Optional[Tensor], bias: Optional[Tensor], channel_axis: int = 1) -> Tensor:
    if weight is None and bias is None:
        return y
    shape = [1] * y.ndim
    shape[channel_axis] = -1
    if weight is not None:
        y = y * weight.reshape(shape)
    if bias is not None:
        y = y + bias.reshape(shape)
    return y


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardization over all trailing axes (gamma=1, beta=0)."""
    x = ensure_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"instance_norm expects [B, C, ...], got {x.shape}")
    return normalize(x, tuple(range(2, x.ndim)), eps)


def group_norm(x: Tensor, groups: int, weight=None, bias=None, eps: float = NORM_EPS) -> Tensor:
    x = ensure_tensor(x)
    B, C = x.shape[:2]
    if C % groups:
        raise ConfigurationError(f"channels {C} not divisible by groups {groups}")
    rest = x.shape[2:]
    y = normalize(x.reshape((B, groups, C // groups) + rest), tuple(range(2, x.ndim + 1)), eps)
    return _affine(y.reshape(x.shape), weight, bias)


def layer_norm(x: Tensor, weight=None, bias=None, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Normalize over a single feature axis (channels for conv maps, last axis for sequences)."""
    x = ensure_tensor(x)
    axis = axis % x.ndim
    return _affine(normalize(x, (axis,), eps), weight, bias, channel_axis=axis)


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    weight=None,
    bias=None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = NORM_EPS,
) -> Tensor:
    """Batch normalization over every axis except channels (axis 1).

    In training mode the running buffers are updated in place with the
    unbiased batch variance.
    """
    x = ensure_tensor(x)
    if x.shape[0] < 1:
        raise DimensionError("batch_norm needs at least one sample on axis 0")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = [1] * x.ndim
    shape[1] = -1
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        unbiased = batch_var * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        y = normalize(x, axes, eps)
    else:
        scale = (1.0 / np.sqrt(running_var + eps)).reshape(shape).astype(x.dtype)
        y = (x - running_mean.reshape(shape).astype(x.dtype)) * scale
    return _affine(y, weight, bias)


NORM_KINDS = ("group", "layer", "batch", "instance")


def norm_layer(x: Tensor, kind: str, **params) -> Tensor:
    """Dispatch to one of the four normalization kinds."""
    if kind == "instance":
        return instance_norm(x, params.get("eps", NORM_EPS))
    if kind == "group":
        return group_norm(x, params["groups"], params.get("weight"), params.get("bias"), params.get("eps", NORM_EPS))
    if kind == "layer":
        return layer_norm(x, params.get("weight"), params.get("bias"), params.get("axis", 1), params.get("eps", NORM_EPS))
    if kind == "batch":
        return batch_norm(
            x,
            params["running_mean"],
            params["running_var"],
            params.get("weight"),
            params.get("bias"),
            params.get("training", True),
            params.get("momentum", 0.1),
            params.get("eps", NORM_EPS),
        )
    raise ConfigurationError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


# -- softmax, losses, attention ------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = ensure_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = ensure_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = ensure_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, n_classes], got {logits.shape}")
    B, K = logits.shape
    if labels.shape[0] != B:
        raise DimensionError(f"batch axis (0) mismatch: {B} logits rows vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K}); got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """Return ``(softmax(q k^T / sqrt(d)) v, attention_weights)``."""
    d = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def positional_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal position table of shape ``[length, dim]``."""
    pos = np.arange(length)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis."""
    return x.mean(axis=tuple(range(2, x.ndim)))
