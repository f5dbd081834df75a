"""Shared finite-difference oracle for the gradient tests."""

import numpy as np

from opformer.tensor import Tensor, backward


def fd_check(fn, inputs, h=1e-5, rng=None):
    """Worst relative error between taped and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar by a fixed
    random projection so every output entry contributes.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar(values):
        nonlocal probe
        out = fn(*[Tensor(v) for v in values])
        if probe is None:
            probe = rng.normal(size=out.shape)
        return float((out.data * probe).sum())

    scalar(arrays)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward((out * Tensor(probe)).sum())
    worst = 0.0
    for i, a in enumerate(arrays):
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            fd[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        g = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        denom = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
        worst = max(worst, np.linalg.norm(fd - g) / denom)
    return worst
