"""Loss assembly, AdamW, the step learning-rate schedule and segmentation
metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import numerics as nx
from .boundary import IGNORE, BoundaryTargets
from .numerics import NonFiniteError, Tensor

LOSS_TERMS = ("coarse_ce", "refined_ce", "boundary_bce", "direction_ce")


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite value in loss term {term!r}" + (f": {detail}" if detail else ""))


@dataclass
class LossWeights:
    coarse: float = 1.0
    refined: float = 1.5
    boundary: float = 3.0
    direction: float = 0.7

    def __post_init__(self):
        for name in ("coarse", "refined", "boundary", "direction"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.coarse, self.refined, self.boundary, self.direction


# -- losses -------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, mask: Optional[np.ndarray] = None,
                  ignore: int = IGNORE) -> Tensor:
    """Mean CE over pixels whose label is not ``ignore`` (and ``mask`` is set).

    ``logits`` is K x H x W; a term with no contributing pixel is zero.
    """
    k = logits.shape[0]
    labels = np.asarray(labels).reshape(-1)
    keep = labels != ignore
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).reshape(-1)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return Tensor(0.0)
    if labels[idx].max() >= k:
        raise ValueError(f"label {labels[idx].max()} out of range for {k} classes")
    logp = nx.log_softmax(logits.reshape(k, -1)[:, idx], axis=0)
    return -logp[labels[idx].astype(np.int64), np.arange(idx.size)].mean()


def boundary_bce(logits: Tensor, boundary: np.ndarray, labels: np.ndarray,
                 ignore: int = IGNORE) -> Tensor:
    flat = logits.reshape(-1)
    idx = np.flatnonzero(np.asarray(labels).reshape(-1) != ignore)
    if idx.size == 0:
        return Tensor(0.0)
    target = np.asarray(boundary, dtype=float).reshape(-1)[idx]
    return nx.bce_with_logits(flat[idx], target).mean()


def segmentation_loss(seg_logits: Tensor, refined_logits: Tensor, boundary_logits: Tensor,
                      direction_logits: Tensor, labels: np.ndarray, targets: BoundaryTargets,
                      w: LossWeights = LossWeights()) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of coarse CE, refined CE, boundary BCE and direction CE.

    The direction term only sees ground-truth boundary pixels. Returns the
    scalar loss and the unweighted value of each term.
    """
    builders = {
        "coarse_ce": lambda: cross_entropy(seg_logits, labels),
        "refined_ce": lambda: cross_entropy(refined_logits, labels),
        "boundary_bce": lambda: boundary_bce(boundary_logits, targets.boundary, labels),
        "direction_ce": lambda: cross_entropy(direction_logits, targets.direction,
                                              mask=targets.boundary == 1, ignore=-1),
    }
    total, values = None, {}
    for name, weight in zip(LOSS_TERMS, w.as_tuple()):
        try:
            term = builders[name]()
        except NonFiniteError as exc:
            raise NonFiniteLossError(name, str(exc)) from exc
        value = term.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(name)
        values[name] = value
        weighted = term * weight
        total = weighted if total is None else total + weighted
    return total, values


# -- optimizer ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    backbone_lr: Optional[float] = None     # defaults to lr / 10
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str, lr: float) -> float:
        if not name.startswith("backbone."):
            return lr
        if self.backbone_lr is None:
            return lr / 10.0
        return self.backbone_lr * (lr / self.lr) if self.lr else 0.0

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray], step: int) -> None:
        self.m = {k[len("optim.m."):]: np.array(a) for k, a in tensors.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: np.array(a) for k, a in tensors.items() if k.startswith("optim.v.")}
        self.step = int(step)


def adamw_step(params: Dict[str, Tensor], state: OptimizerState, lr: Optional[float] = None) -> None:
    """One AdamW update in place. ``lr`` overrides ``state.lr`` (for schedules);
    parameters named ``backbone.*`` run at a tenth of it unless
    ``state.backbone_lr`` says otherwise."""
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.m[name].shape != p.shape:
            raise ValueError(f"moment shape {state.m[name].shape} != parameter {name} {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = state.lr_for(name, lr)
        p.data -= step_lr * state.weight_decay * p.data
        p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Constant, then a tenth from step ceil(2 * total / 3) on."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr if step < math.ceil(2 * total_steps / 3) else base_lr * 0.1


# -- metrics ---------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int, ignore: int = IGNORE) -> np.ndarray:
    """Entry (i, j) counts pixels with ground truth i predicted as j."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    keep = gt != ignore
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.max() >= k or g.max() >= k or p.min() < 0 or g.min() < 0):
        raise ValueError(f"labels must lie in [0, {k})")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def metrics(cm: np.ndarray) -> Tuple[float, float]:
    """(mIoU over classes present in the ground truth, pixel accuracy)."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or (cm < 0).any():
        raise ValueError("confusion matrix must be square and non-negative")
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix: metrics are undefined")
    # integer counts -> exact rationals, rounded once
    tp = [int(t) for t in np.diag(cm)]
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    ious = [Fraction(t, int(r) + int(c) - t) for t, r, c in zip(tp, rows, cols) if r > 0]
    return float(sum(ious) / len(ious)), float(Fraction(sum(tp), int(total)))


def merge_confusion(mats: Iterable[np.ndarray]) -> np.ndarray:
    out = None
    for cm in mats:
        out = np.array(cm) if out is None else out + cm
    if out is None:
        raise ValueError("nothing to merge")
    return out
