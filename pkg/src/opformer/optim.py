"""Adam and Lion update rules with 1cycle / polynomial learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "OptimizerState",
    "NonFiniteGradientError",
    "adam_step",
    "lion_step",
    "Schedule",
    "schedule_lr",
    "Optimizer",
]


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN/Inf; the step was not applied."""


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def adam(cls, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> OptimizerState:
        return cls("adam", lr, betas[0], betas[1], eps, weight_decay)

    @classmethod
    def lion(cls, lr=1e-4, betas=(0.9, 0.99), weight_decay=0.0) -> OptimizerState:
        return cls("lion", lr, betas[0], betas[1], 0.0, weight_decay)

    def hyperparameters(self) -> dict:
        d = asdict(self)
        for k in ("m", "v", "t"):
            d.pop(k)
        return d


def _check(params, grads, state):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i} at step {state.t + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        if state.kind == "adam":
            state.v = [np.zeros_like(p) for p in params]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
              lr: float | None = None) -> tuple[list[np.ndarray], OptimizerState]:
    """Bias-corrected Adam.  Returns new parameter arrays; ``state`` is updated in place."""
    _check(params, grads, state)
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out, state


def lion_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
              lr: float | None = None) -> tuple[list[np.ndarray], OptimizerState]:
    """Lion: sign of an interpolated momentum, decoupled weight decay."""
    _check(params, grads, state)
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        c = b1 * state.m[i] + (1.0 - b1) * g
        update = np.sign(c)
        if state.weight_decay:
            update = update + state.weight_decay * p
        out.append(p - lr * update)
        state.m[i] = b2 * state.m[i] + (1.0 - b2) * g
    return out, state


@dataclass(frozen=True)
class Schedule:
    kind: str = "onecycle"
    max_lr: float = 1e-3
    total_steps: int = 1000
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("onecycle", "polynomial", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must lie in (0, 1)")
        if self.div_factor <= 0 or self.final_div <= 0:
            raise ValueError("divisors must be positive")

    def __call__(self, t: int) -> float:
        return schedule_lr(self, t)


def schedule_lr(s: Schedule, t: int) -> float:
    if not 0 <= t <= s.total_steps:
        raise IndexError(f"step {t} outside schedule range [0, {s.total_steps}]")
    if s.kind == "constant":
        return s.max_lr
    if s.kind == "polynomial":
        return s.max_lr * (1.0 - t / s.total_steps) ** s.power
    initial = s.max_lr / s.div_factor
    final = s.max_lr / s.final_div
    peak = s.pct_start * s.total_steps
    if t <= peak:
        frac = t / peak
        return initial + (s.max_lr - initial) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (t - peak) / (s.total_steps - peak)
    return final + (s.max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    """Drives ``adam_step``/``lion_step`` over a list of parameter tensors."""

    def __init__(self, params, state: OptimizerState, schedule: Schedule | None = None):
        self.params = list(params)
        self.state = state
        self.schedule = schedule

    @property
    def current_lr(self) -> float:
        if self.schedule is None:
            return self.state.lr
        return self.schedule(min(self.state.t, self.schedule.total_steps))

    def step(self) -> float:
        lr = self.current_lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        arrays = [p.data for p in self.params]
        step_fn = adam_step if self.state.kind == "adam" else lion_step
        new, _ = step_fn(arrays, grads, self.state, lr=lr)
        for p, a in zip(self.params, new):
            p.data = a
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
