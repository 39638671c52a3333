"""Pure numpy implementation of the hot kernels.

Same signatures and array layouts as the compiled ``_kernels`` module; it
is selected automatically when the extension is not built.

Layouts
-------
X      (N, T, B)      batch of pixel sequences
Wx     (B, 4U)        input weights, gate blocks ordered i, f, g, o
Wh     (U, 4U)        recurrent weights, same block order
b      (4U,)
wc     (3, U)         diagonal peephole weights for i, f, o
gates  (T, N, 4U)     post-activation gate values
C, H   (T+1, N, U)    cell / hidden states, index 0 holds the zero state
"""
import numpy as np
from scipy.special import expit

BACKEND = "python"


def lstm_forward(X, Wx, Wh, b, wc, peephole):
    N, T, _ = X.shape
    U = Wh.shape[0]
    dtype = X.dtype
    gates = np.empty((T, N, 4 * U), dtype=dtype)
    C = np.zeros((T + 1, N, U), dtype=dtype)
    H = np.zeros((T + 1, N, U), dtype=dtype)
    for t in range(T):
        c_prev = C[t]
        z = X[:, t, :] @ Wx + H[t] @ Wh + b
        zi, zf, zg, zo = z[:, :U], z[:, U:2 * U], z[:, 2 * U:3 * U], z[:, 3 * U:]
        if peephole:
            zi = zi + c_prev * wc[0]
            zf = zf + c_prev * wc[1]
        i = expit(zi)
        f = expit(zf)
        g = np.tanh(zg)
        c = f * c_prev + i * g
        if peephole:
            zo = zo + c * wc[2]
        o = expit(zo)
        C[t + 1] = c
        H[t + 1] = o * np.tanh(c)
        gates[t, :, :U] = i
        gates[t, :, U:2 * U] = f
        gates[t, :, 2 * U:3 * U] = g
        gates[t, :, 3 * U:] = o
    return gates, C, H


def lstm_backward(dY, X, Wx, Wh, wc, peephole, gates, C, H):
    """Backpropagation through time.

    ``dY`` is the loss gradient w.r.t. the output sequence, shape (N, T, U).
    Returns ``(dX, dWx, dWh, db, dwc)``.
    """
    N, T, B = X.shape
    U = Wh.shape[0]
    dtype = X.dtype
    dX = np.empty_like(X)
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * U, dtype=dtype)
    dwc = np.zeros((3, U), dtype=dtype)
    dh_next = np.zeros((N, U), dtype=dtype)
    dc_next = np.zeros((N, U), dtype=dtype)
    dz = np.empty((N, 4 * U), dtype=dtype)
    for t in range(T - 1, -1, -1):
        i = gates[t, :, :U]
        f = gates[t, :, U:2 * U]
        g = gates[t, :, 2 * U:3 * U]
        o = gates[t, :, 3 * U:]
        c_prev = C[t]
        c = C[t + 1]
        tc = np.tanh(c)
        dh = dY[:, t, :] + dh_next
        dzo = dh * tc * o * (1 - o)
        dc = dc_next + dh * o * (1 - tc * tc)
        if peephole:
            dc = dc + dzo * wc[2]
        dzi = dc * g * i * (1 - i)
        dzf = dc * c_prev * f * (1 - f)
        dzg = dc * i * (1 - g * g)
        dc_next = dc * f
        if peephole:
            dc_next = dc_next + dzi * wc[0] + dzf * wc[1]
            dwc[0] += (dzi * c_prev).sum(axis=0)
            dwc[1] += (dzf * c_prev).sum(axis=0)
            dwc[2] += (dzo * c).sum(axis=0)
        dz[:, :U] = dzi
        dz[:, U:2 * U] = dzf
        dz[:, 2 * U:3 * U] = dzg
        dz[:, 3 * U:] = dzo
        dWx += X[:, t, :].T @ dz
        dWh += H[t].T @ dz
        db += dz.sum(axis=0)
        dh_next = dz @ Wh.T
        dX[:, t, :] = dz @ Wx.T
    return dX, dWx, dWh, db, dwc


def _patches(x, f):
    N, Hin, Win, Cin = x.shape
    Ho, Wo = Hin - f + 1, Win - f + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (f, f), axis=(1, 2))
    # (N, Ho, Wo, C, f, f) -> (N*Ho*Wo, f*f*C) in (p, q, c) order
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, f * f * Cin)


def conv2d_forward(x, w, b):
    """Valid, stride-1 cross-correlation.  ``x`` (N,H,W,C), ``w`` (f,f,C,n)."""
    N, Hin, Win, _ = x.shape
    f, _, _, n = w.shape
    Ho, Wo = Hin - f + 1, Win - f + 1
    out = _patches(x, f) @ w.reshape(-1, n) + b
    return out.reshape(N, Ho, Wo, n)


def conv2d_backward(dout, x, w):
    """Gradients ``(dx, dw, db)`` of a valid conv given upstream ``dout``."""
    N, Hin, Win, Cin = x.shape
    f, _, _, n = w.shape
    Ho, Wo = Hin - f + 1, Win - f + 1
    d2 = dout.reshape(-1, n)
    db = d2.sum(axis=0)
    dw = (_patches(x, f).T @ d2).reshape(w.shape)
    dp = (d2 @ w.reshape(-1, n).T).reshape(N, Ho, Wo, f, f, Cin)
    dx = np.zeros_like(x)
    for p in range(f):
        for q in range(f):
            dx[:, p:p + Ho, q:q + Wo, :] += dp[:, :, :, p, q, :]
    return dx, dw, db
