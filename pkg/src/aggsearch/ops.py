"""Differentiable neural operators over the tape engine.

Convolutions (rank 2 or 3, arbitrary kernel/stride/dilation), pooling,
transposed convolution, corner-aligned linear resampling, activations,
instance normalization and the segmentation losses. All forward passes are
vectorized numpy (im2col + GEMM for convolutions); every backward rule is
hand-derived and covered by finite-difference tests.

Conventions: tensors are ``[batch, channel, spatial...]``; "same" padding
is ``dilation * (kernel - 1) // 2`` per dim, which preserves extents at
stride 1 and halves even extents at stride 2 (all kernels used are odd or
the dedicated stride-2 kernel-2 case).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record

_IDX_CACHE: dict[tuple, tuple] = {}


def conv_out_extent(extent: int, kernel: int, stride: int, dilation: int, pad: int) -> int:
    return (extent + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: channels, kernel, stride, dilation, padding."""

    rank: int
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    dilation: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ShapeError(f"ConvSpec: rank must be 2 or 3, got {self.rank}")
        for name in ("kernel", "stride", "dilation", "padding"):
            v = getattr(self, name)
            if len(v) != self.rank:
                raise ShapeError(f"ConvSpec: {name} {v} does not match rank {self.rank}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("ConvSpec: channel counts must be positive")

    @classmethod
    def same(cls, rank: int, in_channels: int, out_channels: int,
             kernel: int | Sequence[int], stride: int | Sequence[int] = 1,
             dilation: int | Sequence[int] = 1) -> "ConvSpec":
        """Spec with derived 'same' padding per dim."""
        k = _per_dim(kernel, rank)
        s = _per_dim(stride, rank)
        d = _per_dim(dilation, rank)
        p = tuple(same_padding(ki, di) for ki, di in zip(k, d))
        return cls(rank, in_channels, out_channels, k, s, d, p)

    def out_spatial(self, spatial: Sequence[int]) -> tuple[int, ...]:
        out = tuple(conv_out_extent(e, k, s, d, p) for e, k, s, d, p in
                    zip(spatial, self.kernel, self.stride, self.dilation, self.padding))
        if any(e < 1 for e in out):
            raise ShapeError(f"conv: output extent {out} < 1 for input {tuple(spatial)} "
                             f"with kernel={self.kernel} stride={self.stride} "
                             f"dilation={self.dilation} padding={self.padding}")
        return out

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)


def _per_dim(v, rank: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * rank
    t = tuple(int(x) for x in v)
    if len(t) != rank:
        raise ShapeError(f"expected {rank} per-dim values, got {t}")
    return t


def _gather_index(spatial, kernel, stride, dilation, padding):
    """Flat gather index F[K, L] into the padded spatial buffer, cached."""
    key = (tuple(spatial), tuple(kernel), tuple(stride), tuple(dilation), tuple(padding))
    hit = _IDX_CACHE.get(key)
    if hit is not None:
        return hit
    padded = tuple(e + 2 * p for e, p in zip(spatial, padding))
    outs = tuple(conv_out_extent(e, k, s, d, p) for e, k, s, d, p in
                 zip(spatial, kernel, stride, dilation, padding))
    pstride = np.ones(len(padded), dtype=np.intp)
    for i in range(len(padded) - 2, -1, -1):
        pstride[i] = pstride[i + 1] * padded[i + 1]
    koffs = np.meshgrid(*(np.arange(k) * d for k, d in zip(kernel, dilation)), indexing="ij")
    ooffs = np.meshgrid(*(np.arange(o) * s for o, s in zip(outs, stride)), indexing="ij")
    F = np.zeros((int(np.prod(kernel)), int(np.prod(outs))), dtype=np.intp)
    for dim in range(len(spatial)):
        F += (koffs[dim].reshape(-1, 1) + ooffs[dim].reshape(1, -1)) * pstride[dim]
    result = (F, padded, outs)
    _IDX_CACHE[key] = result
    return result


def _scatter_rows(flat_idx: np.ndarray, vals: np.ndarray, length: int) -> np.ndarray:
    """Deterministic scatter-add of vals[r] at flat_idx into rows of length `length`."""
    out = np.empty((vals.shape[0], length), dtype=vals.dtype)
    for r in range(vals.shape[0]):
        out[r] = np.bincount(flat_idx, weights=vals[r], minlength=length)
    return out


def _check_spatial_rank(name: str, x: Tensor, rank: int) -> None:
    if len(x.shape) != rank + 2:
        raise ShapeError(f"{name}: expected [batch, channel, {rank} spatial dims], "
                         f"got shape {x.shape}")


def conv(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """N-d convolution (cross-correlation) with bias, recorded on the tape."""
    _check_spatial_rank("conv", x, spec.rank)
    B, C = x.shape[0], x.shape[1]
    if C != spec.in_channels:
        raise ShapeError(f"conv: input has {C} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv: weight shape {w.shape}, spec expects {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"conv: bias shape {b.shape}, expected ({spec.out_channels},)")
    spatial = x.shape[2:]
    outs = spec.out_spatial(spatial)
    F, padded, _ = _gather_index(spatial, spec.kernel, spec.stride,
                                 spec.dilation, spec.padding)
    Co, K, L = spec.out_channels, F.shape[0], F.shape[1]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in spec.padding])
    cols = np.take(xp.reshape(B, C, -1), F, axis=2).reshape(B, C * K, L)
    W2 = w.data.reshape(Co, C * K)
    out = np.matmul(W2, cols).reshape(B, Co, *outs)
    if b is not None:
        out += b.data.reshape(1, Co, *([1] * spec.rank))
    x_tr, w_tr = x.grad_id is not None, w.grad_id is not None
    b_tr = b is not None and b.grad_id is not None
    pflat = int(np.prod(padded))
    crop = tuple(slice(p, p + e) for p, e in zip(spec.padding, spatial))
    Fflat = F.reshape(-1)

    def backward(g):
        g2 = g.reshape(B, Co, L)
        db = g2.sum(axis=(0, 2)) if b_tr else None
        dW = (np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
              if w_tr else None)
        dx = None
        if x_tr:
            dcols = np.matmul(W2.T, g2)
            flat = _scatter_rows(Fflat, dcols.reshape(B * C, K * L), pflat)
            dx = flat.reshape(B, C, *padded)[(slice(None), slice(None), *crop)].copy()
        return (dx, dW, db)

    inputs = [x, w] if b is None else [x, w, b]
    return record("conv", inputs, out, backward)


def transpose_conv(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Adjoint of the strided convolution given by ``spec``; doubles extents.

    ``w`` has the convolution layout [out_c, in_c, kernel...]; this op maps
    out_c-channel input back to in_c channels, so that with shared weights
    <conv(x), y> == <x, transpose_conv(y)> holds exactly.
    """
    _check_spatial_rank("transpose_conv", x, spec.rank)
    if any(s != 2 for s in spec.stride):
        raise ShapeError(f"transpose_conv: only stride 2 supported, got {spec.stride}")
    B, C = x.shape[0], x.shape[1]
    if C != spec.out_channels:
        raise ShapeError(f"transpose_conv: input has {C} channels, "
                         f"spec output side expects {spec.out_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"transpose_conv: weight shape {w.shape}, "
                         f"spec expects {spec.weight_shape}")
    spatial_out = tuple(2 * e for e in x.shape[2:])
    if spec.out_spatial(spatial_out) != x.shape[2:]:
        raise ShapeError(f"transpose_conv: spec does not halve {spatial_out} "
                         f"to {x.shape[2:]}")
    F, padded, outs = _gather_index(spatial_out, spec.kernel, spec.stride,
                                    spec.dilation, spec.padding)
    Ci = spec.in_channels
    Co, K, L = spec.out_channels, F.shape[0], F.shape[1]
    W2 = w.data.reshape(Co, Ci * K)
    y2 = x.data.reshape(B, Co, L)
    dcols = np.matmul(W2.T, y2)
    pflat = int(np.prod(padded))
    crop = tuple(slice(p, p + e) for p, e in zip(spec.padding, spatial_out))
    Fflat = F.reshape(-1)
    flat = _scatter_rows(Fflat, dcols.reshape(B * Ci, K * L), pflat)
    out = flat.reshape(B, Ci, *padded)[(slice(None), slice(None), *crop)].copy()
    x_tr, w_tr = x.grad_id is not None, w.grad_id is not None

    def backward(g):
        gp = np.pad(g, [(0, 0), (0, 0)] + [(p, p) for p in spec.padding])
        gcols = np.take(gp.reshape(B, Ci, -1), F, axis=2).reshape(B, Ci * K, L)
        dx = np.matmul(W2, gcols).reshape(B, Co, *x.shape[2:]) if x_tr else None
        dW = (np.matmul(y2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
              if w_tr else None)
        return (dx, dW)

    return record("transpose_conv", [x, w], out, backward)


def pool(x: Tensor, kind: str, window: int | Sequence[int],
         stride: int | Sequence[int] | None = None) -> Tensor:
    """Max or average pooling. Max routes gradient to the first argmax."""
    rank = len(x.shape) - 2
    _check_spatial_rank("pool", x, rank)
    if kind not in ("max", "avg"):
        raise ShapeError(f"pool: kind must be 'max' or 'avg', got {kind!r}")
    win = _per_dim(window, rank)
    st = _per_dim(stride if stride is not None else window, rank)
    spatial = x.shape[2:]
    for e, wi in zip(spatial, win):
        if wi > e:
            raise ShapeError(f"pool: window {win} larger than input {spatial}")
    F, _, outs = _gather_index(spatial, win, st, (1,) * rank, (0,) * rank)
    B, C = x.shape[0], x.shape[1]
    K, L = F.shape
    cols = np.take(x.data.reshape(B, C, -1), F, axis=2)
    sflat = int(np.prod(spatial))
    x_tr = x.grad_id is not None

    if kind == "avg":
        out = cols.mean(axis=2)

        def backward(g):
            if not x_tr:
                return (None,)
            vals = np.repeat(g.reshape(B * C, 1, L) / K, K, axis=1)
            flat = _scatter_rows(F.reshape(-1), vals.reshape(B * C, K * L), sflat)
            return (flat.reshape(x.shape),)
    else:
        am = cols.argmax(axis=2)
        out = np.take_along_axis(cols, am[:, :, None, :], axis=2)[:, :, 0, :]
        sel = F[am, np.arange(L)[None, None, :]]

        def backward(g):
            if not x_tr:
                return (None,)
            gr = g.reshape(B * C, L)
            sl = sel.reshape(B * C, L)
            flat = np.empty((B * C, sflat), dtype=g.dtype)
            for r in range(B * C):
                flat[r] = np.bincount(sl[r], weights=gr[r], minlength=sflat)
            return (flat.reshape(x.shape),)

    return record(f"{kind}_pool", [x], out.reshape(B, C, *outs), backward)


def _resample_matrix(extent: int, scale: float, dtype) -> np.ndarray:
    """Dense 1-axis resampling operator: rows index output positions."""
    key = ("resample", extent, scale, np.dtype(dtype).str)
    hit = _IDX_CACHE.get(key)
    if hit is not None:
        return hit
    if scale == 2.0:
        out = 2 * extent
        M = np.zeros((out, extent), dtype=dtype)
        if extent == 1:
            M[:, 0] = 1.0
        else:
            c = np.arange(out) * (extent - 1) / (out - 1)
            lo = np.floor(c).astype(int)
            t = c - lo
            hi = np.minimum(lo + 1, extent - 1)
            M[np.arange(out), lo] += 1.0 - t
            M[np.arange(out), hi] += t
    elif scale == 0.5:
        if extent % 2:
            raise ShapeError(f"interpolate: cannot halve odd extent {extent}")
        out = extent // 2
        M = np.zeros((out, extent), dtype=dtype)
        M[np.arange(out), 2 * np.arange(out)] = 0.5
        M[np.arange(out), 2 * np.arange(out) + 1] = 0.5
    else:
        raise ShapeError(f"interpolate: unsupported scale {scale}")
    _IDX_CACHE[key] = M
    return M


def interpolate(x: Tensor, scale: float | Sequence[float]) -> Tensor:
    """Linear resampling, corner-aligned on upsample, 2-mean on downsample.

    Per-dim scales come from {1/2, 1, 2}; each axis is resampled
    independently through a dense linear operator, so the op is exactly
    linear and its backward is the transposed operator.
    """
    rank = len(x.shape) - 2
    _check_spatial_rank("interpolate", x, rank)
    if isinstance(scale, (int, float)):
        scales = (float(scale),) * rank
    else:
        scales = tuple(float(s) for s in scale)
        if len(scales) != rank:
            raise ShapeError(f"interpolate: {len(scales)} scales for rank {rank}")
    for s in scales:
        if s not in (0.5, 1.0, 2.0):
            raise ShapeError(f"interpolate: unsupported scale {s}")
    mats = []
    for axis, s in enumerate(scales):
        if s == 1.0:
            mats.append(None)
        else:
            mats.append(_resample_matrix(x.shape[2 + axis], s, x.data.dtype))
    out = x.data
    for axis, M in enumerate(mats):
        if M is not None:
            out = np.moveaxis(np.moveaxis(out, 2 + axis, -1) @ M.T, -1, 2 + axis)
    out = np.ascontiguousarray(out)
    x_tr = x.grad_id is not None

    def backward(g):
        if not x_tr:
            return (None,)
        d = g
        for axis, M in enumerate(mats):
            if M is not None:
                d = np.moveaxis(np.moveaxis(d, 2 + axis, -1) @ M, -1, 2 + axis)
        return (np.ascontiguousarray(d),)

    return record("interpolate", [x], out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", [x], np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", [x], s, lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax(v: Tensor) -> Tensor:
    """Softmax of a 1-d logit vector (candidate axis)."""
    if len(v.shape) != 1:
        raise ShapeError(f"softmax: expected 1-d tensor, got shape {v.shape}")
    e = np.exp(v.data - v.data.max())
    s = e / e.sum()
    return record("softmax", [v], s, lambda g: (s * (g - np.dot(g, s)),))


def instance_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each (sample, channel) slice over its spatial dims.

    No learnable affine; candidates follow normalization with convolutions
    that can rescale freely.
    """
    rank = len(x.shape) - 2
    _check_spatial_rank("instance_norm", x, rank)
    axes = tuple(range(2, 2 + rank))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    x_tr = x.grad_id is not None

    def backward(g):
        if not x_tr:
            return (None,)
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("instance_norm", [x], xhat, backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over batch and voxels.

    ``logits`` are [batch, classes, spatial...]; ``labels`` is an integer
    Tensor or array [batch, spatial...] of class indices.
    """
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    lab = lab.astype(np.int64)
    nc = logits.shape[1]
    want = (logits.shape[0], *logits.shape[2:])
    if lab.shape != want:
        raise ShapeError(f"cross_entropy: labels shape {lab.shape}, expected {want}")
    if lab.size and (lab.min() < 0 or lab.max() >= nc):
        raise ShapeError(f"cross_entropy: label {int(lab.max()) if lab.max() >= nc else int(lab.min())} "
                         f"out of range [0, {nc})")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    z = np.exp(ld - m)
    denom = z.sum(axis=1, keepdims=True)
    logp = ld - m - np.log(denom)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    count = picked.size
    loss = np.array([-picked.sum() / count])
    lg_tr = logits.grad_id is not None

    def backward(g):
        if not lg_tr:
            return (None,)
        p = z / denom
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)
        return ((p - onehot) * (g.reshape(()) / count),)

    return record("cross_entropy", [logits], loss, backward)


def l2_penalty(params: Sequence[Tensor]) -> Tensor:
    """Sum of squared entries over a collection of tensors."""
    if not params:
        raise ShapeError("l2_penalty: empty parameter list")
    val = np.array([sum(float(np.sum(p.data * p.data)) for p in params)])
    tracked = [p.grad_id is not None for p in params]
    datas = [p.data for p in params]

    def backward(g):
        gg = g.reshape(())
        return [2.0 * d * gg if tr else None for d, tr in zip(datas, tracked)]

    return record("l2_penalty", list(params), val, backward)
