"""Exact solution of the 1D Euler Riemann problem for an ideal gas."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad


class VacuumError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RiemannState:
    rho: float
    u: float
    p: float

    def __post_init__(self):
        if not (self.rho > 0 and self.p > 0):
            raise ValueError(f"density and pressure must be positive, got rho={self.rho}, p={self.p}")

    def sound_speed(self, gamma: float) -> float:
        return math.sqrt(gamma * self.p / self.rho)

    def conserved(self, gamma: float) -> np.ndarray:
        """(rho, rho u, rho E) with rho E = p/(gamma-1) + rho u^2 / 2."""
        return np.array([self.rho, self.rho * self.u,
                         self.p / (gamma - 1.0) + 0.5 * self.rho * self.u ** 2])

    def flux(self, gamma: float) -> np.ndarray:
        energy = self.p / (gamma - 1.0) + 0.5 * self.rho * self.u ** 2
        return np.array([self.rho * self.u, self.rho * self.u ** 2 + self.p,
                         self.u * (energy + self.p)])


@dataclass(frozen=True)
class RiemannSetup:
    left: RiemannState
    right: RiemannState
    x_s: float = 0.5
    x_min: float = -1.0
    x_max: float = 2.0
    t_f: float = 0.1
    gamma: float = 1.4
    n_x: int = 512

    @classmethod
    def ipr(cls, p_l: float, **kw) -> RiemannSetup:
        return cls(RiemannState(2.0, 0.0, p_l), RiemannState(0.125, 0.0, 0.1),
                   x_s=0.5, x_min=-1.0, x_max=2.0, t_f=0.1, **kw)

    @classmethod
    def hpr(cls, p_l: float, **kw) -> RiemannSetup:
        return cls(RiemannState(2.0, 0.0, p_l), RiemannState(0.001, 0.0, 1.0),
                   x_s=-10.0, x_min=-20.0, x_max=20.0, t_f=1e-4, **kw)

    @classmethod
    def sod(cls, **kw) -> RiemannSetup:
        return cls(RiemannState(1.0, 0.0, 1.0), RiemannState(0.125, 0.0, 0.1),
                   x_s=0.5, x_min=0.0, x_max=1.0, t_f=0.2, **kw)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    def at_time(self, t_f: float) -> RiemannSetup:
        return replace(self, t_f=t_f)


def _pressure_function(p: float, k: RiemannState, gamma: float) -> tuple[float, float]:
    """Velocity jump across the wave connecting state k to pressure p, and its p-derivative."""
    a = k.sound_speed(gamma)
    if p > k.p:
        A = 2.0 / ((gamma + 1.0) * k.rho)
        B = (gamma - 1.0) / (gamma + 1.0) * k.p
        root = math.sqrt(A / (p + B))
        return (p - k.p) * root, root * (1.0 - 0.5 * (p - k.p) / (p + B))
    ex = (gamma - 1.0) / (2.0 * gamma)
    ratio = p / k.p
    return (2.0 * a / (gamma - 1.0)) * (ratio ** ex - 1.0), ratio ** (-(gamma + 1.0) / (2.0 * gamma)) / (k.rho * a)


def star_state(left: RiemannState, right: RiemannState, gamma: float = 1.4,
               rtol: float = 1e-12, max_iter: int = 200) -> tuple[float, float]:
    """Star-region pressure and velocity.

    Safeguarded Newton iteration on s = log p with a maintained bisection
    bracket, so pressures spanning many decades converge alike.
    """
    if left == right:
        return left.p, left.u
    a_l, a_r = left.sound_speed(gamma), right.sound_speed(gamma)
    du = right.u - left.u
    if 2.0 / (gamma - 1.0) * (a_l + a_r) <= du:
        raise VacuumError("initial states generate vacuum")

    def g(s: float) -> tuple[float, float]:
        p = math.exp(s)
        fl, dl = _pressure_function(p, left, gamma)
        fr, dr = _pressure_function(p, right, gamma)
        return fl + fr + du, p * (dl + dr)

    # two-rarefaction estimate as the starting point
    ex = (gamma - 1.0) / (2.0 * gamma)
    p_tr = ((a_l + a_r - 0.5 * (gamma - 1.0) * du)
            / (a_l / left.p ** ex + a_r / right.p ** ex)) ** (1.0 / ex)
    s = math.log(max(p_tr, 1e-300))
    lo = math.log(min(left.p, right.p)) - 1.0
    hi = math.log(max(left.p, right.p)) + 1.0
    while g(lo)[0] > 0:
        lo -= 2.0
        if lo < -700:
            raise ConvergenceError("could not bracket the star pressure from below")
    while g(hi)[0] < 0:
        hi += 2.0
        if hi > 700:
            raise ConvergenceError("could not bracket the star pressure from above")
    if not lo < s < hi:
        s = 0.5 * (lo + hi)
    for _ in range(max_iter):
        val, der = g(s)
        if val > 0:
            hi = s
        else:
            lo = s
        step = val / der if der > 0 else math.inf
        s_new = s - step
        if not lo < s_new < hi:
            s_new = 0.5 * (lo + hi)
        if abs(s_new - s) <= rtol or hi - lo <= rtol:
            s = s_new
            p = math.exp(s)
            fl, _ = _pressure_function(p, left, gamma)
            fr, _ = _pressure_function(p, right, gamma)
            return p, 0.5 * (left.u + right.u) + 0.5 * (fr - fl)
        s = s_new
    raise ConvergenceError(f"star pressure did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class WaveStructure:
    p_star: float
    u_star: float
    rho_star_l: float
    rho_star_r: float
    left_shock: bool
    right_shock: bool
    # shocks: both speeds equal the shock speed; rarefactions: (head, tail)
    left_speeds: tuple[float, float]
    right_speeds: tuple[float, float]

    @property
    def extent(self) -> tuple[float, float]:
        """Slowest and fastest signal speeds."""
        return min(self.left_speeds), max(self.right_speeds)


def wave_structure(left: RiemannState, right: RiemannState, gamma: float = 1.4) -> WaveStructure:
    p_s, u_s = star_state(left, right, gamma)
    gm = (gamma - 1.0) / (gamma + 1.0)

    def side(k: RiemannState, sign: float):
        a = k.sound_speed(gamma)
        if p_s > k.p:
            ratio = p_s / k.p
            rho = k.rho * (ratio + gm) / (gm * ratio + 1.0)
            speed = k.u + sign * a * math.sqrt((gamma + 1.0) / (2.0 * gamma) * ratio
                                              + (gamma - 1.0) / (2.0 * gamma))
            return rho, True, (speed, speed)
        rho = k.rho * (p_s / k.p) ** (1.0 / gamma)
        a_star = a * (p_s / k.p) ** ((gamma - 1.0) / (2.0 * gamma))
        return rho, False, (k.u + sign * a, u_s + sign * a_star)

    rl, sl, spl = side(left, -1.0)
    rr, sr, spr = side(right, +1.0)
    return WaveStructure(p_s, u_s, rl, rr, sl, sr, spl, spr)


def sample(left: RiemannState, right: RiemannState, gamma: float, xi: np.ndarray):
    """Primitive variables of the self-similar solution at speeds xi = (x - x_s)/t."""
    xi = np.asarray(xi, dtype=np.float64)
    ws = wave_structure(left, right, gamma)
    rho = np.empty_like(xi)
    u = np.empty_like(xi)
    p = np.empty_like(xi)
    g1 = (gamma - 1.0) / (gamma + 1.0)
    g2 = 2.0 / (gamma + 1.0)

    def fill(mask, r, uu, pp):
        rho[mask], u[mask], p[mask] = r, uu, pp

    for k, sign, star_rho, shock, speeds, region in (
            (left, -1.0, ws.rho_star_l, ws.left_shock, ws.left_speeds, xi <= ws.u_star),
            (right, 1.0, ws.rho_star_r, ws.right_shock, ws.right_speeds, xi > ws.u_star)):
        a = k.sound_speed(gamma)
        # outside = beyond the outermost wave on this side (undisturbed state)
        outer = sign * (xi - speeds[0]) > 0 if shock else sign * (xi - speeds[0]) >= 0
        if shock:
            fill(region & outer, k.rho, k.u, k.p)
            fill(region & ~outer, star_rho, ws.u_star, ws.p_star)
            continue
        inner = sign * (xi - speeds[1]) <= 0
        fill(region & outer, k.rho, k.u, k.p)
        fill(region & inner & ~outer, star_rho, ws.u_star, ws.p_star)
        fan = region & ~outer & ~inner
        if fan.any():
            z = xi[fan]
            base = g2 - sign * g1 / a * (k.u - z)
            rho[fan] = k.rho * base ** (2.0 / (gamma - 1.0))
            u[fan] = g2 * (-sign * a + 0.5 * (gamma - 1.0) * k.u + z)
            p[fan] = k.p * base ** (2.0 * gamma / (gamma - 1.0))
    return rho, u, p


def riemann_exact(setup: RiemannSetup, x=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fields (rho, u, p) at time ``setup.t_f`` on ``x`` (default: the setup grid)."""
    x = setup.grid if x is None else np.asarray(x, dtype=np.float64)
    if setup.t_f < 0:
        raise ValueError("t_f must be non-negative")
    if setup.t_f == 0:
        left = x <= setup.x_s
        L, R = setup.left, setup.right
        return (np.where(left, L.rho, R.rho), np.where(left, L.u, R.u), np.where(left, L.p, R.p))
    return sample(setup.left, setup.right, setup.gamma, (x - setup.x_s) / setup.t_f)


def waves_inside(setup: RiemannSetup) -> bool:
    """True when no wave has reached either end of the domain by t_f."""
    lo, hi = wave_structure(setup.left, setup.right, setup.gamma).extent
    return (setup.x_s + lo * setup.t_f > setup.x_min) and (setup.x_s + hi * setup.t_f < setup.x_max)


def total_mass(setup: RiemannSetup) -> float:
    """Integral of rho over the domain at t_f, by adaptive quadrature split at every wave."""
    if setup.t_f == 0:
        return ((setup.x_s - setup.x_min) * setup.left.rho + (setup.x_max - setup.x_s) * setup.right.rho)
    ws = wave_structure(setup.left, setup.right, setup.gamma)
    speeds = sorted(set(ws.left_speeds + (ws.u_star,) + ws.right_speeds))
    cuts = [setup.x_s + s * setup.t_f for s in speeds]
    cuts = [c for c in cuts if setup.x_min < c < setup.x_max]
    edges = [setup.x_min] + cuts + [setup.x_max]

    def rho_at(xv):
        return riemann_exact(setup, np.array([xv]))[0][0]

    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = quad(rho_at, a, b, epsabs=0.0, epsrel=1e-13, limit=200)
        total += val
    return total
