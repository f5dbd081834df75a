"""Tempered Caputo derivative (L1 quadrature) and the tempered fractional LIF model.

The tempered derivative is the plain Caputo derivative of w(s) = exp(sigma s) v(s),
premultiplied by exp(-sigma t).  The L1 rule reconstructs w piecewise linearly.
With ``corrected=True`` the first interval instead uses w(s) ~ w0 + beta (s - a)^alpha,
which is exact for the t^alpha start-up layer of fractional relaxation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, gamma

from .forcing import SpikeForcing


class UnsupportedOrderError(ValueError):
    pass


class FractionalSolverError(FloatingPointError):
    pass


def _check_mesh(mesh: np.ndarray) -> np.ndarray:
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.ndim != 1 or mesh.size < 2:
        raise ValueError("mesh must be a 1-d array with at least two nodes")
    if np.any(np.diff(mesh) <= 0):
        raise ValueError("mesh must be strictly increasing")
    return mesh


def first_interval_weight(alpha: float, h1: float, elapsed: np.ndarray) -> np.ndarray:
    """Weight multiplying (w1 - w0) when w ~ w0 + (w1 - w0) ((s - a)/h1)^alpha on [a, a + h1].

    ``elapsed`` holds t_m - a for the target nodes (all >= h1).
    """
    z = np.minimum(h1 / elapsed, 1.0)
    # alpha * B(z; alpha, 1 - alpha), with B the unnormalized incomplete beta
    inc = alpha * betainc(alpha, 1.0 - alpha, z) * gamma(alpha) * gamma(1.0 - alpha)
    return inc / (h1 ** alpha * gamma(1.0 - alpha))


def l1_weights(mesh: np.ndarray, alpha: float, m: int, corrected: bool = False) -> np.ndarray:
    """Coefficients c_k with D^alpha w(t_m) ~ sum_k c_k (w_k - w_{k-1}), k = 1..m."""
    t = mesh
    tm = t[m]
    h = np.diff(t[:m + 1])
    c = ((tm - t[:m]) ** (1.0 - alpha) - (tm - t[1:m + 1]) ** (1.0 - alpha)) / (h * gamma(2.0 - alpha))
    if corrected:
        c[0] = first_interval_weight(alpha, t[1] - t[0], np.array([tm - t[0]]))[0]
    return c


def l1_matrix(mesh: np.ndarray, alpha: float, corrected: bool = False) -> np.ndarray:
    """Lower-triangular C with C[m-1, k-1] = c_k for target node m (rows m = 1..n-1)."""
    t = mesh
    tm = t[1:, None]
    left = np.maximum(tm - t[None, :-1], 0.0)
    right = np.maximum(tm - t[None, 1:], 0.0)
    h = np.diff(t)[None, :]
    c = (left ** (1.0 - alpha) - right ** (1.0 - alpha)) / (h * gamma(2.0 - alpha))
    c = np.tril(c)
    if corrected:
        c[:, 0] = first_interval_weight(alpha, t[1] - t[0], t[1:] - t[0])
    return c


_MATRIX_LIMIT = 2048


def tempered_caputo_l1(values, alpha: float, sigma: float, mesh, corrected: bool = False) -> np.ndarray:
    """Tempered Caputo derivative of sampled ``values`` at every mesh node.

    The value at the first node is returned as 0 (the integral is empty there).
    """
    if not 0.0 < alpha < 1.0:
        raise UnsupportedOrderError(f"L1 quadrature needs 0 < alpha < 1, got {alpha}")
    mesh = _check_mesh(mesh)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != mesh.shape:
        raise ValueError("values and mesh must have the same length")
    w = np.exp(sigma * mesh) * v if sigma else v
    dw = np.diff(w)
    out = np.zeros_like(mesh)
    if mesh.size <= _MATRIX_LIMIT:
        out[1:] = l1_matrix(mesh, alpha, corrected) @ dw
    else:
        for m in range(1, mesh.size):
            out[m] = l1_weights(mesh, alpha, m, corrected) @ dw[:m]
    if sigma:
        out *= np.exp(-sigma * mesh)
    return out


def graded_mesh(n: int, t_end: float = 1.0, grading: float = 2.0,
                windows: list[tuple[float, float]] | None = None,
                window_share: float = 0.35) -> np.ndarray:
    """Exactly ``n`` nodes on [0, t_end] clustered at 0, with optional refinement windows.

    Nodes are quantiles of a mixture density: the graded part has CDF (t/T)^(1/grading);
    each window contributes a uniform density on its interval.
    """
    if n < 2:
        raise ValueError("need at least two mesh nodes")
    windows = [(max(0.0, a), min(t_end, b)) for a, b in (windows or []) if b > a]
    share = window_share if windows else 0.0
    fine = np.linspace(0.0, 1.0, 20001) ** grading * t_end
    cdf = (1.0 - share) * (fine / t_end) ** (1.0 / grading)
    for a, b in windows:
        cdf = cdf + share / len(windows) * np.clip((fine - a) / (b - a), 0.0, 1.0)
    mesh = np.interp(np.linspace(0.0, 1.0, n), cdf, fine)
    mesh[0], mesh[-1] = 0.0, t_end
    if np.any(np.diff(mesh) <= 0):
        raise ValueError("mesh construction produced coincident nodes")
    return mesh


@dataclass(frozen=True)
class TemperedFracParams:
    alpha: float = 0.5
    sigma: float = 0.0
    R: float = 5.1
    C_m: float = 5e-3
    v_rest: float = 0.0
    n: int = 204
    t_end: float = 1.0
    grading: float = 2.0
    corrected: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise UnsupportedOrderError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def tau(self) -> float:
        return self.R * self.C_m


def lif_mesh(params: TemperedFracParams, forcing: SpikeForcing) -> np.ndarray:
    """Graded mesh plus uniform refinement covering each pulse."""
    w = forcing.width if np.isfinite(forcing.width) else 0.02
    windows = [(t - 0.25 * w, t + 1.25 * w) for t in forcing.onsets if np.isfinite(t)]
    return graded_mesh(params.n, params.t_end, params.grading, windows)


def solve_tempered_lif(params: TemperedFracParams, forcing: SpikeForcing,
                       mesh: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """March tau * D^{alpha,sigma} v = -(v - v_rest) + R I(t) with the implicit L1 rule.

    Returns ``(mesh, v)``.  ``alpha == 1`` degenerates to backward Euler on
    d/dt(exp(sigma t) v).
    """
    mesh = lif_mesh(params, forcing) if mesh is None else _check_mesh(mesh)
    alpha, sigma, tau = params.alpha, params.sigma, params.tau
    drive = params.v_rest + params.R * forcing(mesh)
    ew = np.exp(sigma * mesh)
    v = np.empty_like(mesh)
    w = np.empty_like(mesh)
    v[0] = params.v_rest
    w[0] = ew[0] * v[0]
    h = np.diff(mesh)
    table = None
    if alpha < 1.0 and mesh.size <= _MATRIX_LIMIT:
        table = l1_matrix(mesh, alpha, params.corrected)
    for m in range(1, mesh.size):
        if alpha == 1.0:
            c_last = 1.0 / h[m - 1]
            history = 0.0
        else:
            c = table[m - 1, :m] if table is not None else l1_weights(mesh, alpha, m, params.corrected)
            c_last = c[-1]
            history = c[:-1] @ (w[1:m] - w[:m - 1]) if m > 1 else 0.0
        scale = tau / ew[m]
        num = drive[m] + scale * (c_last * w[m - 1] - history)
        if not math.isfinite(num):
            raise FractionalSolverError(f"non-finite history sum at node {m} (t={mesh[m]:.6g})")
        v[m] = num / (1.0 + scale * c_last * ew[m])
        w[m] = ew[m] * v[m]
    return mesh, v
