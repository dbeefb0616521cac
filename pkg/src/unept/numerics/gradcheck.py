"""Central finite-difference checks for recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .tensor import Tensor

# Derivatives smaller than this are compared in absolute terms.
MAGNITUDE_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = MAGNITUDE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Full central-difference gradient of ``fn`` w.r.t. the array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def directional_derivative(fn: Callable[[], float], x: np.ndarray, direction: np.ndarray,
                           h: float = 1e-5) -> float:
    orig = x.copy()
    x += h * direction
    fp = fn()
    x[...] = orig - h * direction
    fm = fn()
    x[...] = orig
    return (fp - fm) / (2 * h)


@dataclass
class GradReport:
    name: str
    size: int
    max_rel_err: float
    checks: int
    worst: tuple = field(default=(0.0, 0.0))

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def check_parameters(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-5,
                     n_directions: int = 2, n_coords: int = 3,
                     rng: Optional[np.random.Generator] = None) -> List[GradReport]:
    """Compare backprop against central differences for every named parameter.

    Each parameter is probed along ``n_directions`` random unit directions
    (a Jacobian-vector product covering every entry) and at ``n_coords``
    randomly chosen single entries.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    def value() -> float:
        return loss_fn().item()

    reports = []
    for name, p in params.items():
        worst_err, worst = 0.0, (0.0, 0.0)
        checks = 0
        for _ in range(n_directions):
            v = rng.standard_normal(p.shape)
            v /= np.linalg.norm(v) or 1.0
            a = float((analytic[name] * v).sum())
            n = directional_derivative(value, p.data, v, h)
            err = relative_error(a, n)
            checks += 1
            if err >= worst_err:
                worst_err, worst = err, (a, n)
        for idx in rng.choice(p.size, size=min(n_coords, p.size), replace=False):
            v = np.zeros(p.shape)
            v.reshape(-1)[idx] = 1.0
            a = float(analytic[name].reshape(-1)[idx])
            n = directional_derivative(value, p.data, v, h)
            err = relative_error(a, n)
            checks += 1
            if err >= worst_err:
                worst_err, worst = err, (a, n)
        reports.append(GradReport(name, p.size, worst_err, checks, worst))
    for p in params.values():
        p.zero_grad()
    return reports
