"""Differentiable primitives for 3D networks.

Activations are laid out (C, D, H, W) for one sample or (N, C, D, H, W) for a
batch; kernels are (C_out, C_in, k, k, k).  All spatial ops accept both forms
and return the same rank they were given.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Sequence

import numpy as np

from .tensor import Tensor, record

# im2col is faster for thin inputs but allocates C_in*k^3 rows; cap its size.
IM2COL_MAX_BYTES = 400 * 2**20

_kinks = threading.local()


class kink_recorder:
    """Collect the non-smooth branch decisions (ReLU gates, pooling argmax)
    taken during a forward pass, so finite-difference probes can tell when a
    perturbation crossed a kink."""

    def __enter__(self):
        self.signature: list[bytes] = []
        _kinks.active = self
        return self

    def __exit__(self, *exc):
        _kinks.active = None


def _note_kink(arr: np.ndarray) -> None:
    rec = getattr(_kinks, "active", None)
    if rec is not None:
        rec.signature.append(np.packbits(arr.reshape(-1)).tobytes() if arr.dtype == bool
                             else arr.tobytes())


def _as5d(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 5:
        return x, False
    if x.ndim == 4:
        return x[None], True
    raise ValueError(f"{what}: expected (C,D,H,W) or (N,C,D,H,W), got shape {x.shape}")


def _unbatch(a: np.ndarray, squeezed: bool) -> np.ndarray:
    return a[0] if squeezed else a


# --------------------------------------------------------------------------
# convolution


def _conv_geometry(x5: np.ndarray, k: int):
    n, c, d, h, w = x5.shape
    do, ho, wo = d - k + 1, h - k + 1, w - k + 1
    offsets = [dz * h * w + dy * w + dx for dz, dy, dx in itertools.product(range(k), repeat=3)]
    span = do * h * w  # flat positions covering every valid output row
    pad = (k - 1) * (w + 1)
    return (n, c, d, h, w), (do, ho, wo), offsets, span, pad


def _flat_padded(x5: np.ndarray, i: int, pad: int) -> np.ndarray:
    c = x5.shape[1]
    flat = x5[i].reshape(c, -1)
    if pad == 0:
        return flat
    out = np.zeros((c, flat.shape[1] + pad), dtype=x5.dtype)
    out[:, : flat.shape[1]] = flat
    return out


def _use_im2col(c: int, k: int, span: int, itemsize: int) -> bool:
    return c * k**3 * span * itemsize <= IM2COL_MAX_BYTES and c <= 8


def _conv_forward(x5: np.ndarray, w: np.ndarray) -> np.ndarray:
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    (n, c, d, h, wd), (do, ho, wo), offsets, span, pad = _conv_geometry(x5, k)
    out = np.empty((n, co, do, ho, wo), dtype=x5.dtype)
    wk = w.reshape(co, ci, k**3)
    im2col = _use_im2col(ci, k, span, x5.itemsize)
    if im2col:
        wmat = np.ascontiguousarray(wk.transpose(0, 2, 1)).reshape(co, k**3 * ci)
    else:
        wsl = [np.ascontiguousarray(wk[:, :, o]) for o in range(k**3)]
    for i in range(n):
        xf = _flat_padded(x5, i, pad)
        if im2col:
            cols = np.empty((k**3, ci, span), dtype=x5.dtype)
            for o, s in enumerate(offsets):
                cols[o] = xf[:, s : s + span]
            full = wmat @ cols.reshape(k**3 * ci, span)
        else:
            full = np.zeros((co, span), dtype=x5.dtype)
            for o, s in enumerate(offsets):
                full += wsl[o] @ xf[:, s : s + span]
        out[i] = full.reshape(co, do, h, wd)[:, :, :ho, :wo]
    return out


def _conv_backward(x5: np.ndarray, w: np.ndarray, g5: np.ndarray, need_x: bool, need_w: bool):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    (n, c, d, h, wd), (do, ho, wo), offsets, span, pad = _conv_geometry(x5, k)
    wk = w.reshape(co, ci, k**3)
    dx = np.empty_like(x5) if need_x else None
    dw = np.zeros((co, ci, k**3), dtype=x5.dtype) if need_w else None
    im2col = _use_im2col(ci, k, span, x5.itemsize)
    if need_x:
        wsl_t = [np.ascontiguousarray(wk[:, :, o].T) for o in range(k**3)]
    for i in range(n):
        gfull = np.zeros((co, do, h, wd), dtype=x5.dtype)
        gfull[:, :, :ho, :wo] = g5[i]
        gfull = gfull.reshape(co, span)
        if need_w:
            xf = _flat_padded(x5, i, pad)
            if im2col:
                cols = np.empty((k**3, ci, span), dtype=x5.dtype)
                for o, s in enumerate(offsets):
                    cols[o] = xf[:, s : s + span]
                dw += (gfull @ cols.reshape(k**3 * ci, span).T).reshape(co, k**3, ci).transpose(0, 2, 1)
            else:
                for o, s in enumerate(offsets):
                    dw[:, :, o] += gfull @ xf[:, s : s + span].T
        if need_x:
            dxf = np.zeros((ci, d * h * wd + pad), dtype=x5.dtype)
            for o, s in enumerate(offsets):
                dxf[:, s : s + span] += wsl_t[o] @ gfull
            dx[i] = dxf[:, : d * h * wd].reshape(ci, d, h, wd)
    if need_w:
        dw = dw.reshape(w.shape)
    return dx, dw


def conv3d_valid(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) 3D cross-correlation, stride 1."""
    w = kernel.data
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ValueError(f"conv3d_valid: kernel must be (C_out, C_in, k, k, k), got {w.shape}")
    x5, squeezed = _as5d(x.data, "conv3d_valid")
    if x5.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d_valid: channel axis mismatch, input has {x5.shape[1]} channels "
            f"but kernel expects {w.shape[1]}")
    k = w.shape[2]
    for axis, extent in zip(("depth", "height", "width"), x5.shape[2:]):
        if extent < k:
            raise ValueError(f"conv3d_valid: {axis} axis extent {extent} smaller than kernel {k}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"conv3d_valid: bias shape {bias.shape} != ({w.shape[0]},)")
    if w.dtype != x5.dtype:
        w = w.astype(x5.dtype)

    if k == 1:
        co = w.shape[0]
        wm = w.reshape(co, -1)
        out = np.matmul(wm, x5.reshape(x5.shape[0], x5.shape[1], -1)).reshape(
            (x5.shape[0], co) + x5.shape[2:])
    else:
        out = _conv_forward(x5, w)
    if bias is not None:
        out += bias.data.astype(out.dtype).reshape(1, -1, 1, 1, 1)

    def vjp(g):
        g5 = g[None] if squeezed else g
        if k == 1:
            gs = g5.reshape(g5.shape[0], g5.shape[1], -1)
            xs = x5.reshape(x5.shape[0], x5.shape[1], -1)
            dx = np.matmul(wm.T, gs).reshape(x5.shape) if x.requires_grad else None
            dw = np.matmul(gs, xs.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if kernel.requires_grad else None
        else:
            dx, dw = _conv_backward(x5, w, g5, x.requires_grad, kernel.requires_grad)
        db = g5.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        if dx is not None:
            dx = _unbatch(dx, squeezed)
        return dx, dw, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv3d_valid", inputs, _unbatch(out, squeezed), vjp)


# --------------------------------------------------------------------------
# resolution changes


def maxpool3d(x: Tensor, factor: int = 2) -> Tensor:
    """2x2x2 max pooling; gradient goes to the first maximum in scan order."""
    if factor != 2:
        raise ValueError("maxpool3d: only factor 2 is supported")
    x5, squeezed = _as5d(x.data, "maxpool3d")
    n, c, d, h, w = x5.shape
    for axis, extent in zip(("depth", "height", "width"), (d, h, w)):
        if extent % 2:
            raise ValueError(f"maxpool3d: {axis} axis extent {extent} is odd")
    blocks = (x5.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8))
    arg = blocks.argmax(axis=-1)
    _note_kink(arg.astype(np.uint8))
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        g5 = g[None] if squeezed else g
        gb = np.zeros((n, c, d // 2, h // 2, w // 2, 8), dtype=g5.dtype)
        np.put_along_axis(gb, arg[..., None], g5[..., None], axis=-1)
        dx = (gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, d, h, w))
        return (_unbatch(dx, squeezed),)

    return record("maxpool3d", (x,), _unbatch(out, squeezed), vjp)


def upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling: every voxel fills its factor^3 block."""
    x5, squeezed = _as5d(x.data, "upsample3d")
    f = factor
    out = x5.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    n, c, d, h, w = x5.shape

    def vjp(g):
        g5 = g[None] if squeezed else g
        dx = g5.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7))
        return (_unbatch(dx, squeezed),)

    return record("upsample3d", (x,), _unbatch(out, squeezed), vjp)


def crop_slices(in_shape: Sequence[int], ref_shape: Sequence[int]) -> tuple[slice, ...]:
    """Central window of extent ``ref_shape``; odd margins drop the extra
    voxel on the high-index side."""
    out = []
    for a, (i, r) in enumerate(zip(in_shape, ref_shape)):
        if r > i:
            raise ValueError(f"center_crop_to: reference extent {r} exceeds input extent {i} on spatial axis {a}")
        lo = (i - r) // 2
        out.append(slice(lo, lo + r))
    return tuple(out)


def center_crop_to(x: Tensor, reference_shape: Sequence[int]) -> Tensor:
    """Crop the spatial axes of ``x`` to ``reference_shape``.

    ``reference_shape`` may be a full tensor shape or just (D, H, W); only the
    last three entries are used.
    """
    ref = tuple(reference_shape)[-3:]
    spatial = x.shape[-3:]
    if ref == spatial:
        return x
    sl = crop_slices(spatial, ref)
    index = (Ellipsis,) + sl
    out = x.data[index].copy()

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return record("center_crop_to", (x,), out, vjp)


# --------------------------------------------------------------------------
# normalisation and nonlinearity


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalisation over every non-channel axis.

    Returns ``(output, new_running_mean, new_running_var)``; in eval mode the
    running statistics are returned unchanged.
    """
    x5, squeezed = _as5d(x.data, "batchnorm")
    c = x5.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: parameters must have length {c}")
    dt = x5.dtype
    shape = (1, c, 1, 1, 1)
    g_ = gamma.data.astype(dt).reshape(shape)
    b_ = beta.data.astype(dt).reshape(shape)
    axes = (0, 2, 3, 4)
    m = x5.size // c

    if train:
        mu = x5.mean(axis=axes, keepdims=True)
        xc = x5 - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        new_mean = (1 - momentum) * running_mean + momentum * mu.reshape(c)
        new_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var.astype(dt) + eps)).reshape(shape)
        xhat = (x5 - running_mean.astype(dt).reshape(shape)) * inv
        new_mean, new_var = running_mean, running_var
    out = xhat * g_ + b_

    def vjp(g):
        g5 = g[None] if squeezed else g
        dgamma = (g5 * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g5.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g5 * g_
            if train:
                dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                dx = dxhat * inv
            dx = _unbatch(dx, squeezed)
        return dx, dgamma, dbeta

    y = record("batchnorm", (x, gamma, beta), _unbatch(out, squeezed), vjp)
    return y, new_mean, new_var


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0.

    In guided mode the backward additionally drops negative incoming
    gradients, so only positive signal flows through active units.
    """
    gate = x.data > 0
    _note_kink(gate)
    out = np.where(gate | np.isnan(x.data), x.data, 0).astype(x.dtype)  # NaN propagates

    def vjp(g):
        return (g * gate,)

    def guided(g):
        return (g * (gate & (g > 0)),)

    return record("relu", (x,), out, vjp, guided_vjp=guided)


# --------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (C,D,H,W) -> (C,), (N,C,D,H,W) -> (N,C)."""
    if x.ndim not in (4, 5):
        raise ValueError(f"global_avg_pool: expected 4-D or 5-D input, got {x.shape}")
    axes = (-3, -2, -1)
    nvox = int(np.prod(x.shape[-3:]))
    out = x.data.mean(axis=axes)

    def vjp(g):
        return (np.broadcast_to(g[..., None, None, None] / nvox, x.shape).astype(x.dtype),)

    return record("global_avg_pool", (x,), out, vjp)


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_crossentropy(logits: Tensor, target) -> tuple[np.ndarray, Tensor]:
    """Stabilised softmax plus mean cross-entropy.

    The class axis is 0 for a single logit vector and 1 otherwise (batched
    vectors or dense per-voxel logits).  ``target`` holds integer class
    indices with the class axis removed.
    """
    axis = 0 if logits.ndim == 1 else 1
    ncls = logits.shape[axis]
    if ncls < 2:
        raise ValueError("softmax_crossentropy: need at least 2 classes")
    target = np.asarray(target)
    expected = logits.shape[:axis] + logits.shape[axis + 1 :]
    if target.shape != expected:
        raise ValueError(f"softmax_crossentropy: target shape {target.shape} != {expected}")
    if not np.issubdtype(target.dtype, np.integer) or target.min() < 0 or target.max() >= ncls:
        raise ValueError(f"softmax_crossentropy: class indices must be integers in [0, {ncls})")

    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(logp)
    onehot = np.moveaxis(np.eye(ncls, dtype=p.dtype)[target], -1, axis)
    picked = (logp * onehot).sum(axis=axis)
    count = picked.size
    loss = np.asarray(-picked.mean(), dtype=p.dtype)

    def vjp(g):
        return ((p - onehot) * (g / count),)

    return p, record("softmax_crossentropy", (logits,), loss.reshape(()), vjp)


def _check_p(p: float) -> None:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout over individual units."""
    _check_p(p)
    if not train or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep * scale
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def spatial_dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Drop whole feature maps (channels) at once."""
    _check_p(p)
    if not train or p == 0:
        return x
    x5, squeezed = _as5d(x.data, "spatial_dropout")
    keep = rng.random(x5.shape[:2]) >= p
    mask = (keep * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)).astype(x.dtype)[:, :, None, None, None]
    if squeezed:
        mask = mask[0]
    return record("spatial_dropout", (x,), x.data * mask, lambda g: (g * mask,))
