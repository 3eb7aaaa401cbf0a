"""Finite-difference verification of tape gradients."""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .core import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    n_checked: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(abs {self.max_abs_error:.3e}) over {self.n_checked} coords"
        )


def grad_check(f, point, h=1e-4, tol=1e-3, max_coords=None, rng=None):
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)`` with an absolute floor: coordinates where
    both gradients are below ``tol * 1e-3`` count as exact. When ``max_coords``
    is set, a random subset of that many coordinates is checked.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ConfigError(f"finite-difference step h={h} outside [1e-6, 1e-3]")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = f(x)
    backward(tape, out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    coords = list(np.ndindex(x0.shape))
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    max_rel, max_abs, worst = 0.0, 0.0, ()
    floor = tol * 1e-3
    for idx in coords:
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        numeric = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
        a = analytic[idx]
        err = abs(a - numeric)
        scale = max(abs(a), abs(numeric))
        rel = 0.0 if scale < floor else err / max(scale, 1e-8)
        if rel > max_rel:
            max_rel, worst = rel, idx
        max_abs = max(max_abs, err)
    return GradCheckReport(max_rel <= tol, max_rel, max_abs, worst, len(coords))
