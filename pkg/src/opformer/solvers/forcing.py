"""Piecewise-constant spike forcing shared by the neuron models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpikeForcing:
    """Sum of rectangular pulses ``A_k * 1[t_k <= t < t_k + width]``.

    ``width=inf`` turns every pulse into a step that stays on.
    """

    onsets: tuple[float, ...]
    amplitudes: tuple[float, ...]
    width: float = float("inf")

    def __post_init__(self):
        onsets = tuple(float(t) for t in np.atleast_1d(self.onsets))
        amps = tuple(float(a) for a in np.atleast_1d(self.amplitudes))
        if len(amps) == 1 and len(onsets) > 1:
            amps = amps * len(onsets)
        if len(onsets) != len(amps):
            raise ValueError("onsets and amplitudes must have equal length")
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise ValueError("pulse onsets must be sorted")
        if any(a < 0 for a in amps):
            raise ValueError("pulse amplitudes must be non-negative")
        if not self.width > 0:
            raise ValueError("pulse width must be positive")
        object.__setattr__(self, "onsets", onsets)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def step(cls, onset: float, amplitude: float) -> SpikeForcing:
        return cls((onset,), (amplitude,))

    @classmethod
    def constant(cls, amplitude: float) -> SpikeForcing:
        return cls((-np.inf,), (amplitude,))

    @classmethod
    def zero(cls) -> SpikeForcing:
        return cls((), ())

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        for onset, amp in zip(self.onsets, self.amplitudes):
            on = t >= onset
            if np.isfinite(self.width):
                on &= t < onset + self.width
            out = out + amp * on
        return out

    def edges(self) -> list[float]:
        """Times where I(t) jumps."""
        pts = [t for t in self.onsets if np.isfinite(t)]
        if np.isfinite(self.width):
            pts += [t + self.width for t in self.onsets if np.isfinite(t)]
        return sorted(pts)
