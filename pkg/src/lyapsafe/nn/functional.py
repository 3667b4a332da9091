"""Layer-level differentiable operations built on :mod:`lyapsafe.nn.tensor`.

Operations with awkward composite gradients (softmax, layer norm, convolution,
pooling, the loss heads) carry hand-written backward closures.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ParameterError
from .tensor import Tensor, _sigmoid, _unbroadcast, as_tensor, matmul

MODES = ("train", "eval", "mc")


def dense_forward(x, weights, bias=None) -> Tensor:
    """``W x + b`` for ``W`` of shape (m, n); ``x`` may carry leading batch axes."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"dense: input {x.shape} does not match weights {weights.shape}")
    out = matmul(x, weights.T)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[0],):
            raise DimensionError(f"dense: bias {bias.shape} does not match {weights.shape[0]} outputs")
        out = out + bias
    return out


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (v,), backward)


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (v,), backward)


def masked_softmax(scores, masks, axis: int = -1) -> Tensor:
    """``m_j exp(s_j) / sum_q m_q exp(s_q)`` along ``axis``.

    The maximum is taken over entries with a positive mask so that masked-out
    scores can never underflow the kept ones. With ``masks`` all ones the
    result is bit-identical to :func:`softmax`.
    """
    scores, masks = as_tensor(scores), as_tensor(masks)
    s, m = scores.data, masks.data
    live = np.broadcast_to(m > 0, np.broadcast_shapes(s.shape, m.shape))
    smax = np.where(live, s, -np.inf).max(axis=axis, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.exp(np.where(live, s - smax, -np.inf))
    w = m * e
    z = w.sum(axis=axis, keepdims=True)
    out = w / z

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        gs = out * (g - inner)
        gm = (e / z) * (g - inner)
        return _unbroadcast(gs, s.shape), _unbroadcast(gm, m.shape)

    return Tensor._result(out, (scores, masks), backward)


def layer_norm(v, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    v, scale, shift = as_tensor(v), as_tensor(scale), as_tensor(shift)
    n = v.shape[-1]
    if n < 2:
        raise DimensionError("layer_norm needs at least two features")
    if scale.shape != (n,) or shift.shape != (n,):
        raise DimensionError("layer_norm scale/shift must match the feature dimension")
    x = v.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def backward(g):
        gxhat = g * scale.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gscale = (g * xhat).reshape(-1, n).sum(axis=0)
        gshift = g.reshape(-1, n).sum(axis=0)
        return gx, gscale, gshift

    return Tensor._result(out, (v, scale, shift), backward)


def dropout(v, p: float, mode: str, rng=None) -> Tensor:
    """Inverted dropout: zero each unit with probability ``p`` and rescale survivors.

    ``eval`` mode is the identity. ``train`` and ``mc`` draw fresh masks from
    ``rng`` (a numpy Generator or an object exposing ``.generator``).
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in MODES:
        raise ParameterError(f"unknown dropout mode {mode!r}")
    v = as_tensor(v)
    if mode == "eval" or p == 0.0:
        return v
    gen = getattr(rng, "generator", rng)
    if gen is None:
        raise ParameterError("dropout in train/mc mode needs an rng")
    keep = (gen.random(v.shape) >= p) / (1.0 - p)
    return Tensor._result(v.data * keep, (v,), lambda g: (g * keep,))


def conv2d_forward(image, filters, bias=None, padding: int = 0) -> Tensor:
    """2D cross-correlation with optional zero padding (``padding=0`` is valid mode).

    ``image`` is (C, H, W) or (N, C, H, W); ``filters`` is (F, C, k, k).
    """
    image, filters = as_tensor(image), as_tensor(filters)
    x = image.data
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or filters.ndim != 4:
        raise DimensionError("conv2d expects (N,)C,H,W images and F,C,k,k filters")
    pad = int(padding)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    f, fc, kh, kw = filters.shape
    if fc != c:
        raise DimensionError(f"conv2d: {c} input channels but filters expect {fc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: filter {kh}x{kw} larger than image {h}x{w}")
    wf = filters.data
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, h', w', kh, kw
    out = np.tensordot(win, wf, axes=([1, 4, 5], [1, 2, 3]))  # n, h', w', f
    out = np.moveaxis(out, 3, 1)
    parents = [image, filters]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        if squeeze:
            g = g[None]
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # f, c, kh, kw
        gx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += np.tensordot(g, wf[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._result(out[0] if squeeze else out, parents, backward)


def max_pool2d(image, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes (trailing rows/cols dropped)."""
    image = as_tensor(image)
    x = image.data
    h, w = x.shape[-2], x.shape[-1]
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"max_pool2d: {h}x{w} input smaller than window {size}")
    lead = x.shape[:-2]
    crop = x[..., : ho * size, : wo * size]
    blocks = crop.reshape(*lead, ho, size, wo, size)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, ho, wo, size, size)
        gb = np.moveaxis(gb, -2, -3).reshape(*lead, ho * size, wo * size)
        gx = np.zeros_like(x)
        gx[..., : ho * size, : wo * size] = gb
        return (gx,)

    return Tensor._result(out, (image,), backward)


def bce_with_logits(logits, labels, weights=None) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    wt = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64).reshape(z.shape)
    per = np.logaddexp(0.0, z) - y * z
    n = z.size
    loss = float((wt * per).sum() / n)

    def backward(g):
        return (g * wt * (_sigmoid(z) - y) / n,)

    return Tensor._result(np.asarray(loss), (logits,), backward)


def js_divergence_loss(p, q) -> Tensor:
    """Mean Jensen-Shannon divergence between rows of ``p`` (differentiable) and fixed ``q``.

    Natural log, ``0 log 0 := 0``. The gradient with respect to ``p_i`` is
    ``0.5 * log(p_i / m_i)``.
    """
    p = as_tensor(p)
    pd = p.data
    qd = np.broadcast_to(np.asarray(q, dtype=np.float64), pd.shape)
    m = 0.5 * (pd + qd)
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(pd > 0, pd * np.log(pd / m), 0.0)
        tq = np.where(qd > 0, qd * np.log(qd / m), 0.0)
        gp = np.where(pd > 0, 0.5 * np.log(pd / m), 0.0)
    rows = pd.reshape(-1, pd.shape[-1]).shape[0]
    loss = float(0.5 * (tp + tq).sum() / rows)
    return Tensor._result(np.asarray(loss), (p,), lambda g: (g * gp / rows,))


def weighted_squared_error(pred, target, weights=None) -> Tensor:
    """``mean_j 0.5 * w_j * (target_j - pred_j)^2``."""
    pred = as_tensor(pred)
    diff = pred.data - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    w = np.ones_like(diff) if weights is None else np.asarray(weights, dtype=np.float64).reshape(pred.shape)
    n = diff.size
    loss = float(0.5 * (w * diff * diff).sum() / n)
    return Tensor._result(np.asarray(loss), (pred,), lambda g: (g * w * diff / n,))
