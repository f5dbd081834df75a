"""Fused row-wise layer-norm kernels (numba when available, numpy otherwise)."""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None


def _ln_forward_np(x2, eps):
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    return xc * rstd[:, None], rstd


def _ln_backward_np(gh, xhat, rstd):
    d = xhat.shape[1]
    return rstd[:, None] * (gh - gh.sum(axis=1, keepdims=True) / d
                            - xhat * (gh * xhat).sum(axis=1, keepdims=True) / d)


if njit is not None:
    @njit(cache=True)
    def _ln_forward_nb(x2, eps):
        n, d = x2.shape
        xhat = np.empty_like(x2)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x2[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x2[i, j] - mu
                var += t * t
            r = 1.0 / math.sqrt(var / d + eps)
            rstd[i] = r
            for j in range(d):
                xhat[i, j] = (x2[i, j] - mu) * r
        return xhat, rstd

    @njit(cache=True)
    def _ln_backward_nb(gh, xhat, rstd):
        n, d = xhat.shape
        gx = np.empty_like(xhat)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                s1 += gh[i, j]
                s2 += gh[i, j] * xhat[i, j]
            s1 /= d
            s2 /= d
            r = rstd[i]
            for j in range(d):
                gx[i, j] = r * (gh[i, j] - s1 - xhat[i, j] * s2)
        return gx

    def ln_forward(x2, eps):
        return _ln_forward_nb(np.ascontiguousarray(x2), float(eps))

    def ln_backward(gh, xhat, rstd):
        return _ln_backward_nb(np.ascontiguousarray(gh), xhat, rstd)
else:  # pragma: no cover
    ln_forward = _ln_forward_np
    ln_backward = _ln_backward_np
