"""Compiled loops for the memory-bound ops. Sequential, so results are deterministic."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _depthwise_forward_s1(xp, w, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    wt = w[ch, 0, ky, kx]
                    for oy in range(ho):
                        orow = out[b, ch, oy]
                        xrow = xp[b, ch, oy + ky]
                        for ox in range(wo):
                            orow[ox] += wt * xrow[ox + kx]
    return out


@njit(cache=True)
def _depthwise_backward_s1(xp, w, g):
    n, c, ho, wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    acc = np.zeros(wo, dtype=np.float64)
    for ch in range(c):
        for ky in range(kh):
            for kx in range(kw):
                wt = w[ch, 0, ky, kx]
                acc[:] = 0.0
                for b in range(n):
                    for oy in range(ho):
                        grow = g[b, ch, oy]
                        xrow = xp[b, ch, oy + ky]
                        gxrow = gxp[b, ch, oy + ky]
                        for ox in range(wo):
                            acc[ox] += grow[ox] * xrow[ox + kx]
                            gxrow[ox + kx] += grow[ox] * wt
                gw[ch, 0, ky, kx] = acc.sum()
    return gxp, gw


def depthwise_forward(xp, w, stride, ho, wo):
    if stride == 1:
        return _depthwise_forward_s1(xp, w, ho, wo)
    return _depthwise_forward_strided(xp, w, stride, ho, wo)


def depthwise_backward(xp, w, g, stride):
    if stride == 1:
        return _depthwise_backward_s1(xp, w, g)
    return _depthwise_backward_strided(xp, w, g, stride)


@njit(cache=True)
def _depthwise_forward_strided(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    wt = w[ch, 0, ky, kx]
                    for oy in range(ho):
                        iy = oy * stride + ky
                        for ox in range(wo):
                            out[b, ch, oy, ox] += wt * xp[b, ch, iy, ox * stride + kx]
    return out


@njit(cache=True)
def _depthwise_backward_strided(xp, w, g, stride):
    n, c, ho, wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for ch in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    wt = w[ch, 0, ky, kx]
                    acc = 0.0
                    for oy in range(ho):
                        iy = oy * stride + ky
                        for ox in range(wo):
                            ix = ox * stride + kx
                            gv = g[b, ch, oy, ox]
                            acc += gv * xp[b, ch, iy, ix]
                            gxp[b, ch, iy, ix] += gv * wt
                    gw[ch, 0, ky, kx] += acc
    return gxp, gw


@njit(cache=True)
def relu_forward(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = v if v > 0 else 0
    return out.reshape(x.shape)


@njit(cache=True)
def relu_backward(out, g):
    fo = out.ravel()
    fg = g.ravel()
    gx = np.empty_like(fg)
    for i in range(fg.size):
        gx[i] = fg[i] if fo[i] > 0 else 0
    return gx.reshape(g.shape)


@njit(cache=True)
def bn_stats(x):
    """Per-channel mean and biased variance of an (n, c, m) array, two-pass."""
    n, c, m = x.shape
    mean = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for i in range(m):
                s += x[b, ch, i]
        mu = s / (n * m)
        ss = 0.0
        for b in range(n):
            for i in range(m):
                d = x[b, ch, i] - mu
                ss += d * d
        mean[ch] = mu
        var[ch] = ss / (n * m)
    return mean, var


@njit(cache=True)
def bn_apply(x, mean, inv, gamma, beta):
    n, c, m = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            mu, iv, ga, be = mean[ch], inv[ch], gamma[ch], beta[ch]
            for i in range(m):
                xh = (x[b, ch, i] - mu) * iv
                xhat[b, ch, i] = xh
                out[b, ch, i] = xh * ga + be
    return out, xhat


@njit(cache=True)
def bn_backward(g, xhat, inv, gamma, train_mode):
    n, c, m = g.shape
    gx = np.empty_like(g)
    ggamma = np.zeros(c, dtype=np.float64)
    gbeta = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            for i in range(m):
                gv = g[b, ch, i]
                sg += gv
                sgx += gv * xhat[b, ch, i]
        ggamma[ch] = sgx
        gbeta[ch] = sg
        ga, iv = gamma[ch], inv[ch]
        cnt = n * m
        for b in range(n):
            for i in range(m):
                if train_mode:
                    gx[b, ch, i] = ga * iv * (g[b, ch, i] - sg / cnt - xhat[b, ch, i] * sgx / cnt)
                else:
                    gx[b, ch, i] = ga * iv * g[b, ch, i]
    return gx, ggamma, gbeta
