"""Training loop, evaluation and single-image prediction driven by a
:class:`~unept.config.RunConfig`."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .boundary import IGNORE, boundary_band, make_boundary_targets, refine_labels, refine_logits
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Sample, augment, generate_split, load_split
from .model import UNEPT, ModelOutput
from .training import (
    LOSS_TERMS,
    OptimizerState,
    adamw_step,
    confusion_matrix,
    lr_schedule,
    metrics,
    segmentation_loss,
)

CSV_HEADER = ("step", "loss") + LOSS_TERMS + ("lr", "miou", "pixacc")


class IncompatibleCheckpoint(ValueError):
    pass


# -- data -----------------------------------------------------------------------

def with_targets(sample: Sample, gamma: float) -> Sample:
    if sample.targets is None:
        sample.targets = make_boundary_targets(sample.labels, gamma)
    return sample


def load_data(cfg: RunConfig) -> Tuple[List[Sample], List[Sample]]:
    """Train and validation samples: from ``cfg.dataset`` when set, otherwise
    scene indices [0, train) and [train, train + val) of the configured stream."""
    if cfg.dataset:
        train = load_split(cfg.dataset, "train")
        try:
            val = load_split(cfg.dataset, "val")
        except KeyError:
            val = []
    else:
        spec = cfg.scene_spec()
        train = generate_split(spec, 0, cfg.train_samples)
        val = generate_split(spec, cfg.train_samples, cfg.val_samples)
    return [with_targets(s, cfg.gamma) for s in train], [with_targets(s, cfg.gamma) for s in val]


# -- model state ---------------------------------------------------------------------

def build_model(cfg: RunConfig) -> UNEPT:
    return UNEPT(cfg.model_config(), seed=cfg.seed)


def checkpoint_tensors(model: UNEPT, state: Optional[OptimizerState] = None) -> Dict[str, np.ndarray]:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if state is not None:
        tensors.update(state.tensors())
    return tensors


def restore(model: UNEPT, tensors: Dict[str, np.ndarray], step: int,
            state: Optional[OptimizerState] = None) -> None:
    weights = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(weights)
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpoint(f"checkpoint does not fit this model: {exc}") from exc
    if state is not None:
        state.load_tensors(tensors, step)


def load_model(cfg: RunConfig, path) -> Tuple[UNEPT, int]:
    model = build_model(cfg)
    step, tensors = load_checkpoint(path)
    restore(model, tensors, step)
    return model.eval(), step


# -- prediction and evaluation ----------------------------------------------------------

@dataclass
class Prediction:
    coarse: np.ndarray
    refined: np.ndarray
    output: ModelOutput


def predict(model: UNEPT, image: np.ndarray, threshold: float = 0.5, trace: bool = False) -> Prediction:
    was_training = model.training
    model.eval()
    with nx.no_grad():
        out = model(image, trace=trace)
    model.train(was_training)
    coarse = np.argmax(out.seg_logits.data, axis=0).astype(np.uint8)
    prob = 1.0 / (1.0 + np.exp(-out.boundary_logits.data[0]))
    refined = refine_labels(coarse, prob, out.direction_logits.data, threshold)
    return Prediction(coarse, refined, out)


@dataclass
class EvalReport:
    miou: float
    pixacc: float
    band_miou: float
    band_pixacc: float
    refined: Optional[Dict[str, float]] = None

    def as_dict(self) -> Dict[str, float]:
        out = {"miou": self.miou, "pixacc": self.pixacc,
               "band_miou": self.band_miou, "band_pixacc": self.band_pixacc}
        if self.refined:
            out.update({f"refined_{k}": v for k, v in self.refined.items()})
        return out


def _scores(cm, cm_band) -> Dict[str, float]:
    miou, acc = metrics(cm)
    band_miou, band_acc = metrics(cm_band) if cm_band.sum() else (float("nan"), float("nan"))
    return {"miou": miou, "pixacc": acc, "band_miou": band_miou, "band_pixacc": band_acc}


def evaluate(model: UNEPT, samples: Sequence[Sample], k: int, refine: bool = True,
             threshold: float = 0.5, band_width: float = 2.0) -> EvalReport:
    """Raw argmax scores overall and in the boundary band; with ``refine``
    the refined pipeline is scored as well."""
    if not samples:
        raise ValueError("no samples to evaluate")
    cms = {name: np.zeros((k, k), dtype=np.int64) for name in ("raw", "raw_band", "ref", "ref_band")}
    for s in samples:
        pred = predict(model, s.image, threshold)
        band_gt = np.where(boundary_band(s.labels, band_width), s.labels, IGNORE)
        cms["raw"] += confusion_matrix(pred.coarse, s.labels, k)
        cms["raw_band"] += confusion_matrix(pred.coarse, band_gt, k)
        if refine:
            cms["ref"] += confusion_matrix(pred.refined, s.labels, k)
            cms["ref_band"] += confusion_matrix(pred.refined, band_gt, k)
    raw = _scores(cms["raw"], cms["raw_band"])
    report = EvalReport(**raw)
    if refine:
        report.refined = _scores(cms["ref"], cms["ref_band"])
    return report


def headline(report: EvalReport) -> Tuple[float, float]:
    """The score of the full pipeline: refined when available, else raw."""
    if report.refined:
        return report.refined["miou"], report.refined["pixacc"]
    return report.miou, report.pixacc


# -- training -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: UNEPT
    state: OptimizerState
    rows: List[Dict[str, object]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def sample_loss(model: UNEPT, sample: Sample, cfg: RunConfig, rng: np.random.Generator):
    out = model(sample.image, rng)
    prob = nx.sigmoid(out.boundary_logits).reshape(*sample.labels.shape)
    refined = refine_logits(out.seg_logits, prob, out.direction_logits)
    return segmentation_loss(out.seg_logits, refined, out.boundary_logits, out.direction_logits,
                             sample.labels, sample.targets, cfg.loss_weights())


def _format_row(row: Dict[str, object]) -> List[str]:
    out = []
    for key in CSV_HEADER:
        v = row.get(key, "")
        out.append(repr(v) if isinstance(v, float) else str(v))
    return out


def rows_to_csv(rows: Sequence[Dict[str, object]], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(_format_row(row))
    return buf.getvalue()


def train(cfg: RunConfig, out_dir=None, resume=None, stop_at: Optional[int] = None,
          data: Optional[Tuple[List[Sample], List[Sample]]] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Run (or continue) the training loop.

    Step ``s`` draws its batch, augmentation and dropout masks from a
    generator seeded by ``(seed, s)``, so a run resumed from the checkpoint
    written after ``s`` updates replays the uninterrupted run bit for bit.
    ``stop_at`` ends early after that many updates without changing the
    schedule, which is what an interrupted run looks like.
    """
    train_set, val_set = data if data is not None else load_data(cfg)
    model = build_model(cfg)
    state = cfg.optimizer()
    start = 0
    if resume is not None:
        start, tensors = load_checkpoint(resume)
        restore(model, tensors, start, state)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    if start > end:
        raise ValueError(f"checkpoint step {start} is past the requested end {end}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv" if out is not None else None
    if csv_path is not None and resume is None:
        csv_path.write_text(rows_to_csv([]))
    result = TrainResult(model, state)
    params = model.parameters()
    k = cfg.num_classes

    def checkpoint(step: int) -> None:
        if out is None:
            return
        path = out / f"ckpt_{step:06d}.ept"
        tensors = checkpoint_tensors(model, state)
        save_checkpoint(path, tensors, step)
        save_checkpoint(out / "latest.ept", tensors, step)
        result.checkpoints.append(path)

    if start == 0 and resume is None:
        checkpoint(0)
    for step in range(start, end):
        rng = np.random.default_rng([cfg.seed, step])
        lr = lr_schedule(step, cfg.steps, cfg.lr)
        batch = rng.choice(len(train_set), size=min(cfg.batch_size, len(train_set)), replace=False)
        model.train()
        model.zero_grad()
        totals = dict.fromkeys(("loss",) + LOSS_TERMS, 0.0)
        for index in batch:
            sample = train_set[int(index)]
            if cfg.augment:
                sample = with_targets(augment(sample, rng), cfg.gamma)
            loss, terms = sample_loss(model, sample, cfg, rng)
            (loss * (1.0 / len(batch))).backward()
            totals["loss"] += loss.item() / len(batch)
            for name, v in terms.items():
                totals[name] += v / len(batch)
        adamw_step(params, state, lr)
        row: Dict[str, object] = {"step": step, **totals, "lr": lr}
        done = step + 1
        if val_set and (done % cfg.eval_every == 0 or done == cfg.steps):
            report = evaluate(model, val_set, k, cfg.refine, cfg.refine_threshold)
            row["miou"], row["pixacc"] = headline(report)
        result.rows.append(row)
        if csv_path is not None:
            with csv_path.open("a") as fh:
                fh.write(rows_to_csv([row], header=False))
        if log is not None:
            extra = f" miou {row['miou']:.4f}" if "miou" in row else ""
            log(f"step {step} loss {totals['loss']:.4f} lr {lr:.2e}{extra}")
        if done % cfg.checkpoint_every == 0 or done == end:
            checkpoint(done)
    model.eval()
    return result


def final_val_miou(result: TrainResult) -> float:
    for row in reversed(result.rows):
        if "miou" in row:
            return float(row["miou"])
    return math.nan
