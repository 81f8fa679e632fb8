"""Toy-scale training loop: Adam, seeded batching, loss logging, checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .head import assign_targets, compute_loss, decode_arrays, nms_arrays
from .layers import save_checkpoint
from .metrics import MetricsReport, cluster_recall, evaluate_matches, match_dataset
from .model import Detector, ModelConfig, build_model
from .synth import Sample
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "total", "iou_loss", "obj_loss", "cls_loss")


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 10.0
    checkpoint_every: int = 0  # epochs between intermediate checkpoints, 0 = final only
    # ablation toggles; None keeps the model config's value
    cem: bool | None = None
    nam: bool | None = None
    neck: str | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("Adam betas must lie in [0, 1)")

    def apply_toggles(self, cfg: ModelConfig) -> ModelConfig:
        over = {k: getattr(self, k) for k in ("cem", "nam", "neck") if getattr(self, k) is not None}
        return replace(cfg, **over) if over else cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``. ``None`` grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer state disagree in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads:
            if g is not None:
                g *= scale
    return total


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])[:, None].astype(T.DTYPE)


def batch_loss(model: Detector, samples: Sequence[Sample]):
    output = model(Tensor(stack_images(samples)))
    shapes = {s: output[s][1].shape[2:] for s in output}
    targets = assign_targets([s.annotation.box_array() for s in samples], shapes)
    return compute_loss(output, targets)


@dataclass
class TrainResult:
    model: Detector
    model_cfg: ModelConfig
    losses: list[dict]
    checkpoint: Path | None
    seconds: float


def write_loss_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOSS_COLUMNS[1:]])


def read_loss_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Sequence[Sample],
          out_dir: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from a fresh seeded initialization. Writes loss.csv and checkpoints into ``out_dir``."""
    if not dataset:
        raise ValueError("training dataset is empty")
    cfg = train_cfg.apply_toggles(model_cfg)
    model = build_model(cfg, seed=train_cfg.seed)
    model.train()
    params = model.parameters()
    state = AdamState()
    rng = np.random.default_rng(train_cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"model": cfg.to_dict(), "train": train_cfg.to_dict()}
    rows = []
    start = time.perf_counter()
    n = len(dataset)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for b, lo in enumerate(range(0, n, train_cfg.batch_size)):
            batch = [dataset[i] for i in order[lo:lo + train_cfg.batch_size]]
            model.zero_grad()
            total, iou_l, obj_l, cls_l = batch_loss(model, batch)
            value = total.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            total.backward()
            grads = [p.grad for p in params]
            clip_grad_norm(grads, train_cfg.clip_norm)
            adam_step([p.data for p in params], grads, state, train_cfg.lr, train_cfg.betas, train_cfg.eps)
            sums += (value, iou_l.item(), obj_l.item(), cls_l.item())
            batches += 1
        mean = sums / max(1, batches)
        row = dict(zip(LOSS_COLUMNS, [epoch, *mean.tolist()]))
        rows.append(row)
        log.info("epoch %d  total %.4f  iou %.4f  obj %.4f  cls %.4f", epoch, *mean)
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            write_loss_csv(out / "loss.csv", rows)
            if train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0 and epoch < train_cfg.epochs:
                save_checkpoint(out / f"epoch_{epoch:04d}.ckpt", model, {**meta, "epoch": epoch})
    model.eval()
    ckpt = None
    if out is not None:
        write_loss_csv(out / "loss.csv", rows)
        ckpt = out / "model.ckpt"
        save_checkpoint(ckpt, model, {**meta, "epoch": train_cfg.epochs})
    return TrainResult(model, cfg, rows, ckpt, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------
@dataclass
class InferenceConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.65
    max_det: int = 100
    batch_size: int = 8


def predict(model: Detector, images: np.ndarray, cfg: InferenceConfig | None = None):
    """Post-NMS (boxes, scores) per image for an (N, S, S) or (N, 1, S, S) stack."""
    cfg = cfg or InferenceConfig()
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim == 3:
        images = images[:, None]
    size = images.shape[-1]
    was_training = model.training
    model.eval()
    results = []
    with T.no_grad():
        for lo in range(0, images.shape[0], cfg.batch_size):
            output = model(Tensor(images[lo:lo + cfg.batch_size]))
            for boxes, scores in decode_arrays(output, size, cfg.score_thresh):
                keep = nms_arrays(boxes, scores, cfg.nms_iou)[:cfg.max_det]
                results.append((boxes[keep], scores[keep]))
    model.train(was_training)
    return results


@dataclass
class Evaluation:
    report: MetricsReport
    cluster_recall: float
    cluster_gts: int
    matches: list


def evaluate_model(model: Detector, samples: Sequence[Sample], cfg: InferenceConfig | None = None) -> Evaluation:
    dets = predict(model, stack_images(samples), cfg)
    anns = [s.annotation for s in samples]
    matches = match_dataset(dets, anns)
    report = evaluate_matches(matches)
    rec, count = cluster_recall(matches, anns, report.operating_threshold)
    return Evaluation(report, rec, count, matches)
