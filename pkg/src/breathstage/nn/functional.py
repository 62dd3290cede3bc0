"""Layer forward/backward pairs on float64 numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)`` and returns input and parameter gradients. Arrays are
batched: convolutions use ``(N, C, T)``, sequence layers ``(N, T, D)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeMismatch(ValueError):
    pass


class TargetNotDistribution(ValueError):
    pass


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeMismatch(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


def conv_out_len(t: int, k: int, stride: int, pad: int) -> int:
    return (t + 2 * pad - k) // stride + 1


# ------------------------------------------------------------------ conv1d


# im2col is built in time chunks of about this many elements so each
# column block stays cache-resident
_COL_BUDGET = 1 << 14
_MIN_CHUNK = 256


def _chunks(c_in: int, k: int, t_out: int):
    step = max(_MIN_CHUNK, _COL_BUDGET // (c_in * k))
    for t0 in range(0, t_out, step):
        yield t0, min(t_out, t0 + step)


def _cols(xp_n: np.ndarray, k: int, stride: int, t0: int, t1: int) -> np.ndarray:
    """(C*K, t1-t0) im2col block of one padded sample."""
    s0, s1 = xp_n.strides
    c_in = xp_n.shape[0]
    view = as_strided(xp_n[:, t0 * stride :], shape=(c_in, k, t1 - t0), strides=(s0, s1, s1 * stride))
    return view.reshape(c_in * k, t1 - t0)


def conv1d_forward(x, w, b, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (N, C_in, T) with ``w`` (C_out, C_in, K)."""
    x = np.asarray(x, dtype=np.float64)
    x, squeezed = _as_batch(x, 3)
    n, c_in, t = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ShapeMismatch(f"input has {c_in} channels, kernel expects {w_in}")
    if b.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({c_out},)")
    t_out = conv_out_len(t, k, stride, pad)
    if t_out < 1:
        raise ShapeMismatch(f"length {t} too short for kernel {k} with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    wm = w.reshape(c_out, c_in * k)
    out = np.empty((n, c_out, t_out))
    if k == 1:
        src = xp[:, :, : stride * (t_out - 1) + 1 : stride]
        np.matmul(wm, src, out=out)
    else:
        for i in range(n):
            for t0, t1 in _chunks(c_in, k, t_out):
                np.matmul(wm, _cols(xp[i], k, stride, t0, t1), out=out[i, :, t0:t1])
    out += b[None, :, None]
    cache = (xp, w, stride, pad, squeezed)
    return (out[0] if squeezed else out), cache


def conv1d_backward(dout, cache):
    xp, w, stride, pad, squeezed = cache
    if squeezed:
        dout = dout[None]
    n, c_in, tp = xp.shape
    c_out, _, k = w.shape
    t_out = dout.shape[2]
    wm = w.reshape(c_out, c_in * k)
    db = dout.sum(axis=(0, 2))
    dwm = np.zeros_like(wm)
    dxp = np.zeros(xp.shape)
    if k == 1:
        span = stride * (t_out - 1) + 1
        src = xp[:, :, :span:stride]
        for i in range(n):
            dwm += dout[i] @ src[i].T
        dxp[:, :, :span:stride] = np.matmul(wm.T, dout)
    else:
        for i in range(n):
            for t0, t1 in _chunks(c_in, k, t_out):
                d = dout[i, :, t0:t1]
                dwm += d @ _cols(xp[i], k, stride, t0, t1).T
                dcols = (wm.T @ d).reshape(c_in, k, t1 - t0)
                base = t0 * stride
                span = stride * (t1 - t0 - 1) + 1
                for j in range(k):
                    dxp[i, :, base + j : base + j + span : stride] += dcols[:, j, :]
    dx = dxp[:, :, pad : tp - pad] if pad else dxp
    return (dx[0] if squeezed else dx), dwm.reshape(w.shape), db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


# --------------------------------------------------------- residual block


def residual_forward(x, p: dict, stride: int = 1):
    """``relu(conv2(relu(conv1(x)))) + project(x)``.

    ``p`` holds ``conv1.w/b``, ``conv2.w/b`` and, when the block changes
    channel count or stride, a 1x1 ``proj.w/b``.
    """
    k = p["conv1.w"].shape[2]
    h1, c1 = conv1d_forward(x, p["conv1.w"], p["conv1.b"], stride, k // 2)
    a1, m1 = relu_forward(h1)
    h2, c2 = conv1d_forward(a1, p["conv2.w"], p["conv2.b"], 1, k // 2)
    a2, m2 = relu_forward(h2)
    if "proj.w" in p:
        skip, cp = conv1d_forward(x, p["proj.w"], p["proj.b"], stride, 0)
    else:
        if stride != 1 or p["conv1.w"].shape[0] != np.shape(x)[-2]:
            raise ShapeMismatch("identity skip needs stride 1 and equal channel counts")
        skip, cp = x, None
    return a2 + skip, (c1, m1, c2, m2, cp)


def residual_backward(dout, cache):
    c1, m1, c2, m2, cp = cache
    grads = {}
    da1, grads["conv2.w"], grads["conv2.b"] = conv1d_backward(relu_backward(dout, m2), c2)
    dx, grads["conv1.w"], grads["conv1.b"] = conv1d_backward(relu_backward(da1, m1), c1)
    if cp is None:
        dx = dx + dout
    else:
        dskip, grads["proj.w"], grads["proj.b"] = conv1d_backward(dout, cp)
        dx = dx + dskip
    return dx, grads


# -------------------------------------------------------------------- LSTM


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_forward(x, wx, wh, b):
    """Unidirectional LSTM, zero initial state, gate order (i, f, g, o).

    ``x`` (N, T, D); ``wx`` (4H, D); ``wh`` (4H, H); ``b`` (4H,). Returns (N, T, H).
    """
    x = np.asarray(x, dtype=np.float64)
    x, squeezed = _as_batch(x, 3)
    n, t_len, d = x.shape
    four_h = wx.shape[0]
    hid = four_h // 4
    if wx.shape != (four_h, d) or wh.shape != (four_h, hid) or b.shape != (four_h,):
        raise ShapeMismatch(f"LSTM weights {wx.shape}, {wh.shape}, {b.shape} do not fit input dim {d}")
    zx = x @ wx.T + b
    hs = np.zeros((n, t_len + 1, hid))
    cs = np.zeros((n, t_len + 1, hid))
    gates = np.empty((n, t_len, four_h))
    tanh_c = np.empty((n, t_len, hid))
    for t in range(t_len):
        z = zx[:, t] + hs[:, t] @ wh.T
        g = gates[:, t]
        g[:, : 2 * hid] = sigmoid(z[:, : 2 * hid])
        g[:, 2 * hid : 3 * hid] = np.tanh(z[:, 2 * hid : 3 * hid])
        g[:, 3 * hid :] = sigmoid(z[:, 3 * hid :])
        cs[:, t + 1] = g[:, hid : 2 * hid] * cs[:, t] + g[:, :hid] * g[:, 2 * hid : 3 * hid]
        tanh_c[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = g[:, 3 * hid :] * tanh_c[:, t]
    out = hs[:, 1:]
    cache = (x, wx, wh, hs, cs, gates, tanh_c, squeezed)
    return (out[0] if squeezed else out), cache


def lstm_backward(dout, cache):
    x, wx, wh, hs, cs, gates, tanh_c, squeezed = cache
    if squeezed:
        dout = dout[None]
    n, t_len, _ = x.shape
    hid = wh.shape[1]
    dz_all = np.empty_like(gates)
    dh_next = np.zeros((n, hid))
    dc_next = np.zeros((n, hid))
    for t in range(t_len - 1, -1, -1):
        g = gates[:, t]
        i, f, gg, o = g[:, :hid], g[:, hid : 2 * hid], g[:, 2 * hid : 3 * hid], g[:, 3 * hid :]
        dh = dout[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tanh_c[:, t] ** 2)
        dz = dz_all[:, t]
        dz[:, :hid] = dc * gg * i * (1.0 - i)
        dz[:, hid : 2 * hid] = dc * cs[:, t] * f * (1.0 - f)
        dz[:, 2 * hid : 3 * hid] = dc * i * (1.0 - gg**2)
        dz[:, 3 * hid :] = dh * tanh_c[:, t] * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ wh
    flat_dz = dz_all.reshape(-1, 4 * hid)
    dwx = flat_dz.T @ x.reshape(-1, x.shape[2])
    dwh = flat_dz.T @ hs[:, :-1].reshape(-1, hid)
    db = flat_dz.sum(axis=0)
    dx = dz_all @ wx
    return (dx[0] if squeezed else dx), dwx, dwh, db


# --------------------------------------------------------------- attention


def softmax(z, axis: int = -1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def attention_forward(x, wq, wk, wv):
    """Single-head, non-causal scaled dot-product self-attention over (N, T, D)."""
    x = np.asarray(x, dtype=np.float64)
    x, squeezed = _as_batch(x, 3)
    d = x.shape[2]
    for w in (wq, wk, wv):
        if w.shape != (d, d):
            raise ShapeMismatch(f"projection {w.shape} does not match feature dim {d}")
    q = x @ wq.T
    k = x @ wk.T
    v = x @ wv.T
    scale = 1.0 / np.sqrt(d)
    attn = softmax(np.matmul(q, k.transpose(0, 2, 1)) * scale, axis=-1)
    out = np.matmul(attn, v)
    cache = (x, wq, wk, wv, q, k, v, attn, scale, squeezed)
    return (out[0] if squeezed else out), cache


def attention_weights(cache) -> np.ndarray:
    return cache[7]


def attention_backward(dout, cache):
    x, wq, wk, wv, q, k, v, attn, scale, squeezed = cache
    if squeezed:
        dout = dout[None]
    dv = np.matmul(attn.transpose(0, 2, 1), dout)
    da = np.matmul(dout, v.transpose(0, 2, 1))
    ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True)) * scale
    dq = np.matmul(ds, k)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    d = x.shape[2]
    xf = x.reshape(-1, d)
    dwq = dq.reshape(-1, d).T @ xf
    dwk = dk.reshape(-1, d).T @ xf
    dwv = dv.reshape(-1, d).T @ xf
    dx = dq @ wq + dk @ wk + dv @ wv
    return (dx[0] if squeezed else dx), dwq, dwk, dwv


# ------------------------------------------------------------------ losses


def check_distribution(target, tol: float = 1e-6) -> None:
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > tol):
        raise TargetNotDistribution("target rows must be nonnegative and sum to 1")


def softmax_cross_entropy(logits, target):
    """Mean over rows of ``-sum(target * log_softmax(logits))``.

    Returns ``(loss, dlogits)``; rows are the leading axes, classes the last.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {target.shape}")
    check_distribution(target)
    rows = logits.size // logits.shape[-1]
    logp = log_softmax(logits)
    loss = -(target * logp).sum() / rows
    grad = (np.exp(logp) - target) / rows
    return float(loss), grad


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def l2_feature_loss(a, b):
    """Mean squared difference; returns ``(loss, da, db)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"feature shapes {a.shape} vs {b.shape}")
    diff = a - b
    loss = float(np.mean(diff**2))
    da = 2.0 * diff / diff.size
    return loss, da, -da


def sigmoid_bce(logits, targets, pos_weight: float = 1.0):
    """Mean binary cross-entropy on logits; returns ``(loss, dlogits)``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {y.shape}")
    # log(1 + exp(-|z|)) form is stable for both signs
    softplus_neg = np.log1p(np.exp(-np.abs(z)))
    log_p = -(np.maximum(-z, 0) + softplus_neg)
    log_1mp = -(np.maximum(z, 0) + softplus_neg)
    w = 1.0 + (pos_weight - 1.0) * y
    loss = -np.mean(w * (y * log_p + (1 - y) * log_1mp))
    p = sigmoid(z)
    grad = w * (p - y) / z.size
    return float(loss), grad
