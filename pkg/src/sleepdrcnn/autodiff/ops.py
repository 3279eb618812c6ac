"""Differentiable operators used by the DRCNN.

All sequence tensors are laid out channels x time. Convolutions use
cross-correlation with "same" zero padding of ``(k - 1) * dilation`` samples
split symmetrically, so the time axis is preserved everywhere except pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor, make_result

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
POSITIONWISE_EPS = 1e-5


def _rsum(x: np.ndarray, axis, dtype) -> np.ndarray:
    # reductions accumulate in float64, results go back to the storage dtype
    return np.sum(x, axis=axis, dtype=np.float64).astype(dtype, copy=False)


def _check_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ValidationError(f"{op} expects a channels x time tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """1-D cross-correlation, stride 1, same-length output.

    ``w`` has shape (C_out, C_in / groups, k). groups == C_in == C_out is a
    depthwise convolution; a kernel of 1 with groups 1 is a pointwise mix.
    """
    _check_2d(x, "conv1d")
    cin, t = x.shape
    cout, cpg, k = w.shape
    if groups < 1 or cin % groups or cout % groups or cpg != cin // groups:
        raise ValidationError(
            f"conv1d: weight {w.shape} incompatible with {cin} input channels, groups={groups}")
    if b is not None and b.shape != (cout,):
        raise ValidationError(f"conv1d: bias shape {b.shape} != ({cout},)")
    d = int(dilation)
    pad = (k - 1) * d
    pl = pad // 2
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (pl, pad - pl))) if pad else xd
    depthwise = groups == cin and cpg == 1 and cout == cin

    if groups == 1:
        out = wd[:, :, 0] @ xp[:, 0:t]
        for j in range(1, k):
            out += wd[:, :, j] @ xp[:, j * d:j * d + t]
    elif depthwise:
        out = wd[:, 0, 0][:, None] * xp[:, 0:t]
        for j in range(1, k):
            out += wd[:, 0, j][:, None] * xp[:, j * d:j * d + t]
    else:
        og = cout // groups
        xg = xp.reshape(groups, cpg, -1)
        wg = wd.reshape(groups, og, cpg, k)
        out = np.zeros((groups, og, t), dtype=np.result_type(xd, wd))
        for j in range(k):
            out += wg[..., j] @ xg[:, :, j * d:j * d + t]
        out = out.reshape(cout, t)
    if b is not None:
        out = out + b.data[:, None]

    def backward(g):
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(wd) if w.requires_grad else None
        if groups == 1:
            for j in range(k):
                sl = slice(j * d, j * d + t)
                if dw is not None:
                    dw[:, :, j] = g @ xp[:, sl].T
                if dxp is not None:
                    dxp[:, sl] += wd[:, :, j].T @ g
        elif depthwise:
            for j in range(k):
                sl = slice(j * d, j * d + t)
                if dw is not None:
                    dw[:, 0, j] = _rsum(g * xp[:, sl], 1, wd.dtype)
                if dxp is not None:
                    dxp[:, sl] += wd[:, 0, j][:, None] * g
        else:
            og = cout // groups
            gg = g.reshape(groups, og, t)
            xg = xp.reshape(groups, cpg, -1)
            wg = wd.reshape(groups, og, cpg, k)
            dwg = dw.reshape(groups, og, cpg, k) if dw is not None else None
            dxg = dxp.reshape(groups, cpg, -1) if dxp is not None else None
            for j in range(k):
                sl = slice(j * d, j * d + t)
                if dwg is not None:
                    dwg[..., j] = gg @ xg[:, :, sl].transpose(0, 2, 1)
                if dxg is not None:
                    dxg[:, :, sl] += wg[..., j].transpose(0, 2, 1) @ gg
        dx = dxp[:, pl:pl + t] if dxp is not None else None
        db = _rsum(g, 1, b.data.dtype) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "conv1d")


def maxpool1d(x: Tensor, width: int) -> Tensor:
    """Non-overlapping max pooling along time; ties route to the first maximum."""
    _check_2d(x, "maxpool1d")
    c, t = x.shape
    if width < 1 or t % width:
        raise ValidationError(f"maxpool1d: length {t} not divisible by width {width}")
    xr = x.data.reshape(c, t // width, width)
    idx = xr.argmax(axis=2)
    out = np.take_along_axis(xr, idx[..., None], axis=2)[..., 0]

    def backward(g):
        dx = np.zeros_like(xr)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=2)
        return (dx.reshape(c, t),)

    return make_result(out, (x,), backward, "maxpool1d")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def selu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    neg_part = SELU_ALPHA * np.expm1(np.minimum(xd, 0))
    out = SELU_LAMBDA * np.where(pos, xd, neg_part)

    def backward(g):
        return (g * SELU_LAMBDA * np.where(pos, 1.0, neg_part + SELU_ALPHA).astype(xd.dtype),)

    return make_result(out.astype(xd.dtype, copy=False), (x,), backward, "selu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1 - out * out),)

    return make_result(out, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return make_result(out, (x,), backward, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValidationError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g, g

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValidationError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g * b.data, g * a.data

    return make_result(a.data * b.data, (a, b), backward, "mul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), backward, "concat")


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout. The DRCNN does not use it; kept for completeness."""
    if not training or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, "dropout")


# --------------------------------------------------------------------------
# normalizations
# --------------------------------------------------------------------------

def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """w = g * v / ||v||, the norm taken per output channel (axis 0)."""
    if g.shape != (v.shape[0],):
        raise ValidationError(f"weight_norm: magnitude shape {g.shape} != ({v.shape[0]},)")
    vd = v.data
    axes = tuple(range(1, vd.ndim))
    bshape = (-1,) + (1,) * (vd.ndim - 1)
    norm = np.sqrt(np.sum(vd.astype(np.float64) ** 2, axis=axes)).astype(vd.dtype)
    if (norm == 0).any():
        raise ValidationError("weight_norm: zero direction vector")
    u = vd / norm.reshape(bshape)
    out = g.data.reshape(bshape) * u

    def backward(gw):
        dg = _rsum(gw * u, axes, vd.dtype)
        dv = (g.data / norm).reshape(bshape) * (gw - u * dg.reshape(bshape))
        return dv, dg

    return make_result(out, (v, g), backward, "weight_norm")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool = True, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over time with a channel-specific affine map.

    In training mode the statistics of the current record are used and the
    running averages move by ``state.momentum``; in eval mode the running
    averages are used.
    """
    _check_2d(x, "batch_norm")
    c, t = x.shape
    xd = x.data
    dt = xd.dtype
    if training:
        mean = np.mean(xd, axis=1, dtype=np.float64)
        var = np.mean((xd - mean[:, None].astype(dt)) ** 2, axis=1, dtype=np.float64)
        m = state.momentum
        unbiased = var * t / max(t - 1, 1)
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mean[:, None].astype(dt)) * invstd[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def backward(g):
        dgamma = _rsum(g * xhat, 1, dt) if gamma.requires_grad else None
        dbeta = _rsum(g, 1, dt) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[:, None]
            if training:
                s1 = _rsum(dxhat, 1, dt)[:, None]
                s2 = _rsum(dxhat * xhat, 1, dt)[:, None]
                dx = (invstd[:, None] / t) * (t * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * invstd[:, None]
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def positionwise_norm(x: Tensor, eps: float = POSITIONWISE_EPS) -> Tensor:
    """Normalize across channels independently at every time step."""
    _check_2d(x, "positionwise_norm")
    xd = x.data
    c = xd.shape[0]
    dt = xd.dtype
    mean = np.mean(xd, axis=0, dtype=np.float64).astype(dt)
    xc = xd - mean
    std = np.sqrt(np.mean(xc.astype(np.float64) ** 2, axis=0)).astype(dt)
    floored = std <= eps
    s = np.where(floored, dt.type(eps), std)
    y = xc / s

    def backward(g):
        gm = _rsum(g, 0, dt) / c
        gy = _rsum(g * y, 0, dt) / c
        gy = np.where(floored, 0, gy)
        return ((g - gm - y * gy) / s,)

    return make_result(y, (x,), backward, "positionwise_norm")


# --------------------------------------------------------------------------
# recurrent
# --------------------------------------------------------------------------

def _lstm_pass(x: np.ndarray, wih: np.ndarray, whh: np.ndarray, b: np.ndarray):
    hd = whh.shape[1]
    t_len = x.shape[1]
    z_in = wih @ x + b[:, None]
    acts = np.empty_like(z_in)
    cells = np.empty((hd, t_len), dtype=z_in.dtype)
    hidden = np.empty((hd, t_len), dtype=z_in.dtype)
    h = np.zeros(hd, dtype=z_in.dtype)
    c = np.zeros(hd, dtype=z_in.dtype)
    g_sl = slice(2 * hd, 3 * hd)
    for t in range(t_len):
        z = z_in[:, t] + whh @ h
        a = 0.5 * (np.tanh(0.5 * z) + 1.0)
        a[g_sl] = np.tanh(z[g_sl])
        c = a[hd:2 * hd] * c + a[:hd] * a[g_sl]
        h = a[3 * hd:] * np.tanh(c)
        acts[:, t] = a
        cells[:, t] = c
        hidden[:, t] = h
    return hidden, acts, cells


def _lstm_backward(dh_all: np.ndarray, x: np.ndarray, wih: np.ndarray, whh: np.ndarray,
                   hidden: np.ndarray, acts: np.ndarray, cells: np.ndarray):
    hd = whh.shape[1]
    t_len = x.shape[1]
    tanh_c = np.tanh(cells)
    # derivative of each gate activation w.r.t. its pre-activation
    dact = acts * (1 - acts)
    dact[2 * hd:3 * hd] = 1 - acts[2 * hd:3 * hd] ** 2
    dz_all = np.empty_like(acts)
    whh_t = whh.T.copy()
    dh_next = np.zeros(hd, dtype=acts.dtype)
    dc_next = np.zeros(hd, dtype=acts.dtype)
    buf = np.empty(4 * hd, dtype=acts.dtype)
    zero = np.zeros(hd, dtype=acts.dtype)
    for t in range(t_len - 1, -1, -1):
        a = acts[:, t]
        tc = tanh_c[:, t]
        o = a[3 * hd:]
        dh = dh_all[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tc * tc)
        c_prev = cells[:, t - 1] if t > 0 else zero
        buf[:hd] = dc * a[2 * hd:3 * hd]          # input gate
        buf[hd:2 * hd] = dc * c_prev              # forget gate
        buf[2 * hd:3 * hd] = dc * a[:hd]          # candidate
        buf[3 * hd:] = dh * tc                    # output gate
        dz = buf * dact[:, t]
        dz_all[:, t] = dz
        dh_next = whh_t @ dz
        dc_next = dc * a[hd:2 * hd]
    h_prev = np.zeros_like(hidden)
    h_prev[:, 1:] = hidden[:, :-1]
    dwih = dz_all @ x.T
    dwhh = dz_all @ h_prev.T
    db = _rsum(dz_all, 1, acts.dtype)
    dx = wih.T @ dz_all
    return dx, dwih, dwhh, db


def bilstm(x: Tensor, wih_f: Tensor, whh_f: Tensor, b_f: Tensor,
           wih_b: Tensor, whh_b: Tensor, b_b: Tensor) -> Tensor:
    """Bidirectional LSTM over time; returns [forward; backward] hidden states (2H x T).

    Gate order in the stacked weights is input, forget, candidate, output.
    """
    _check_2d(x, "bilstm")
    c_in = x.shape[0]
    hd = whh_f.shape[1]
    for wih, whh, b in ((wih_f, whh_f, b_f), (wih_b, whh_b, b_b)):
        if wih.shape != (4 * hd, c_in) or whh.shape != (4 * hd, hd) or b.shape != (4 * hd,):
            raise ValidationError("bilstm: inconsistent parameter shapes")
    xd = x.data
    xr = xd[:, ::-1]
    hf, af, cf = _lstm_pass(xd, wih_f.data, whh_f.data, b_f.data)
    hb, ab, cb = _lstm_pass(xr, wih_b.data, whh_b.data, b_b.data)
    out = np.concatenate((hf, hb[:, ::-1]), axis=0)

    def backward(g):
        dxf, dwih_f, dwhh_f, db_f = _lstm_backward(g[:hd], xd, wih_f.data, whh_f.data, hf, af, cf)
        dxb, dwih_b, dwhh_b, db_b = _lstm_backward(
            np.ascontiguousarray(g[hd:, ::-1]), xr, wih_b.data, whh_b.data, hb, ab, cb)
        dx = dxf + dxb[:, ::-1]
        return dx, dwih_f, dwhh_f, db_f, dwih_b, dwhh_b, db_b

    return make_result(out, (x, wih_f, whh_f, b_f, wih_b, whh_b, b_b), backward, "bilstm")
