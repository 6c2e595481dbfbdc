"""Fused primitives with hand-written backward passes.

Recurrent layers are recorded as one node per sequence rather than one per
timestep; the backward pass is explicit BPTT. All inputs are batch-major,
``(B, T, features)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _result, as_tensor, sigmoid_array


def _check_seq(op: str, x: Tensor, w_ih: Tensor, w_hh: Tensor, gates: int) -> int:
    if x.ndim != 3:
        raise ShapeError(f"{op}: expected (B, T, D) input, got {x.shape}")
    hidden = w_hh.shape[0]
    if w_ih.shape != (x.shape[2], gates * hidden) or w_hh.shape != (hidden, gates * hidden):
        raise ShapeError(f"{op}: weight shapes {w_ih.shape}, {w_hh.shape} do not fit input {x.shape}")
    return hidden


def _shift_states(hs: np.ndarray, reverse: bool) -> np.ndarray:
    """Previous hidden state for every step (zeros before the first step), time-major."""
    prev = np.zeros_like(hs)
    if reverse:
        prev[:-1] = hs[1:]
    else:
        prev[1:] = hs[:-1]
    return prev


def lstm_sequence(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """Run an LSTM over the time axis from zero state. Gate order: i, f, g, o."""
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    H = _check_seq("lstm_sequence", x, w_ih, w_hh, 4)
    B, T, D = x.shape
    # time-major buffers keep per-step slices contiguous
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))
    pre = xt @ w_ih.data + b.data
    wh = w_hh.data
    steps = range(T - 1, -1, -1) if reverse else range(T)

    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    gates = np.empty((T, B, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in steps:
        # written in place into the saved buffers; this loop dominates training time
        a = np.matmul(h, wh, out=gates[t])
        a += pre[t]
        cand = np.tanh(a[:, 2 * H:3 * H])
        a *= 0.5
        np.tanh(a, out=a)
        a *= 0.5
        a += 0.5
        a[:, 2 * H:3 * H] = cand
        c = np.multiply(a[:, H:2 * H], c, out=cs[t])
        c += a[:, :H] * cand
        h = np.tanh(c, out=hs[t])
        h *= a[:, 3 * H:]

    def backward(dH):
        dHt = dH.transpose(1, 0, 2)
        tcs = np.tanh(cs)
        c_prev = _shift_states(cs, reverse)
        dpre = np.empty_like(pre)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in (range(T) if reverse else range(T - 1, -1, -1)):
            g = gates[t]
            i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tc = tcs[t]
            dh = dHt[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da = dpre[t]
            da[:, :H] = dc * gg * i * (1.0 - i)
            da[:, H:2 * H] = dc * c_prev[t] * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            da[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = da @ wh.T
            dc_next = dc * f
        flat = dpre.reshape(-1, 4 * H)
        dw_hh = _shift_states(hs, reverse).reshape(-1, H).T @ flat
        dx = (dpre @ w_ih.data.T).transpose(1, 0, 2)
        dw_ih = xt.reshape(-1, D).T @ flat
        return dx, dw_ih, dw_hh, flat.sum(axis=0)

    return _result(np.ascontiguousarray(hs.transpose(1, 0, 2)), (x, w_ih, w_hh, b), backward,
                   "lstm_sequence")


def rnn_sequence(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """Vanilla tanh recurrence ``h_t = tanh(x_t W_ih + h_{t-1} W_hh + b)`` from zero state."""
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    H = _check_seq("rnn_sequence", x, w_ih, w_hh, 1)
    B, T, D = x.shape
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2))
    pre = xt @ w_ih.data + b.data
    wh = w_hh.data
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        h = np.tanh(pre[t] + h @ wh)
        hs[t] = h

    def backward(dH):
        dHt = dH.transpose(1, 0, 2)
        dpre = np.empty_like(pre)
        dh_next = np.zeros((B, H))
        for t in (range(T) if reverse else range(T - 1, -1, -1)):
            da = (dHt[t] + dh_next) * (1.0 - hs[t] ** 2)
            dpre[t] = da
            dh_next = da @ wh.T
        flat = dpre.reshape(-1, H)
        dw_hh = _shift_states(hs, reverse).reshape(-1, H).T @ flat
        dx = (dpre @ w_ih.data.T).transpose(1, 0, 2)
        dw_ih = xt.reshape(-1, D).T @ flat
        return dx, dw_ih, dw_hh, flat.sum(axis=0)

    return _result(np.ascontiguousarray(hs.transpose(1, 0, 2)), (x, w_ih, w_hh, b), backward,
                   "rnn_sequence")


def lstm_cell(x, h, c, w_ih, w_hh, b) -> tuple[Tensor, Tensor]:
    """Single LSTM step built from elementary ops (used for autoregressive sampling)."""
    a = x @ w_ih + h @ w_hh + b
    H = h.shape[-1]
    i = a[:, :H].sigmoid()
    f = a[:, H:2 * H].sigmoid()
    g = a[:, 2 * H:3 * H].tanh()
    o = a[:, 3 * H:].sigmoid()
    c_new = f * c + i * g
    return o * c_new.tanh(), c_new


def conv1d(x, w, b) -> Tensor:
    """Stride-1, same-padded cross-correlation along time.

    x: (B, T, C_in), w: (K, C_in, C_out), b: (C_out,) -> (B, T, C_out)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 3 or w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    B, T, C = x.shape
    K, _, O = w.shape
    left = (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (left, K - 1 - left), (0, 0)))
    # (B, T, C, K) -> (B, T, K, C) -> (B, T, K*C)
    cols = sliding_window_view(xp, K, axis=1).transpose(0, 1, 3, 2).reshape(B, T, K * C)
    w2 = w.data.reshape(K * C, O)
    out = cols @ w2 + b.data

    def backward(g):
        g2 = g.reshape(-1, O)
        dw = (cols.reshape(-1, K * C).T @ g2).reshape(K, C, O)
        dcols = (g @ w2.T).reshape(B, T, K, C)
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, k:k + T] += dcols[:, :, k]
        return dxp[:, left:left + T], dw, g2.sum(axis=0)

    return _result(out, (x, w, b), backward, "conv1d")


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each (instance, channel) over all spatial axes.

    Channels are the last axis; spatial axes are everything between batch and
    channel, e.g. time for (B, T, C) or time x frequency for (B, T, F, C).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 3 or gamma.shape != (x.shape[-1],):
        raise ShapeError(f"instance_norm: incompatible shapes {x.shape} and {gamma.shape}")
    axes = tuple(range(1, x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out, (x, gamma, beta), backward, "instance_norm")
