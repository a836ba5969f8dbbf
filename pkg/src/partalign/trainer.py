"""SGD with momentum and weight decay on PK mini-batches."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import checkpoint
from . import partnet as pn
from . import tripletloss as tl
from .synthdata import Dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "active_triplets", "mean_loss")


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_divisor: float = 5.0
    lr_period: int = 800
    momentum: float = 0.9
    weight_decay: float = 0.0002
    margin: float = 0.2
    iterations: int = 2000
    P: int = 8
    K_img: int = 4
    seed: int = 0
    flip_prob: float = 0.5
    eval_period: int = 0
    checkpoint_period: int = 0
    grad_mode: str = "batched"
    threads: int = 1
    deterministic: bool = True
    # per-parameter lr multipliers keyed by name prefix; the part detectors
    # start near-uniform and barely move at the base rate
    lr_mult: Dict[str, float] = field(default_factory=lambda: {"detector": 10.0})

    def __post_init__(self):
        if self.lr <= 0 or self.lr_divisor <= 0 or self.weight_decay < 0 or self.margin < 0:
            raise ValueError("learning rate and divisor must be positive, decay and margin non-negative")
        if self.lr_period < 1 or self.iterations < 0 or self.P < 1 or self.K_img < 1:
            raise ValueError("period, P and K_img must be >= 1 and iterations >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum {self.momentum} outside [0, 1)")


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr / cfg.lr_divisor ** (iteration // cfg.lr_period)


def _mult(table: Dict[str, float], name: str) -> float:
    for prefix, m in table.items():
        if name.startswith(prefix):
            return float(m)
    return 1.0


def sgd_step(params, grads: Dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> float:
    """v <- mu*v - lr*(g + wd*theta); theta <- theta + v. Returns the lr used."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at iteration {state.iteration}")
    lr = lr_at(cfg, state.iteration)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        scale = lr * _mult(cfg.lr_mult, name)
        v = cfg.momentum * v - scale * (g + cfg.weight_decay * p.data)
        state.velocity[name] = v
        p.data = p.data + v
    state.iteration += 1
    return lr


def augment(images: np.ndarray, masks: Optional[np.ndarray], rng: np.random.Generator,
            prob: float):
    flips = rng.random(len(images)) < prob
    if not flips.any():
        return images, masks, flips
    images = images.copy()
    images[flips] = images[flips, :, ::-1]
    if masks is not None:
        masks = masks.copy()
        masks[flips] = masks[flips, :, ::-1]
    return images, masks, flips


@dataclass
class TrainResult:
    model: pn.Model
    log: List[dict]
    state: OptimizerState
    evals: List[dict] = field(default_factory=list)


def write_log(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([r["iteration"], repr(r["lr"]), r["active_triplets"], repr(r["mean_loss"])])


def train(data: Dataset, cfg: TrainConfig, model: pn.Model, out_dir=None,
          eval_fn: Optional[Callable[[pn.Model, int], dict]] = None) -> TrainResult:
    """Train ``model`` in place on ``data`` (training identities only).

    The fixed-mask head draws its masks from ``data.masks``.
    """
    ids = np.unique(data.labels)
    if len(ids) < 2:
        raise ValueError(f"training needs >= 2 identities, got {len(ids)}")
    if model.head.head == "fixed-mask" and data.masks is None:
        raise ValueError("fixed-mask head needs a dataset with ground-truth masks")
    P = min(cfg.P, len(ids))
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    rows: List[dict] = []
    evals: List[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    use_masks = model.head.head == "fixed-mask"

    for it in range(cfg.iterations):
        idx = tl.pk_sample(data.labels, P, cfg.K_img, rng)
        masks = data.masks[idx] if use_masks else None
        images, masks, flips = augment(data.images[idx], masks, rng, cfg.flip_prob)
        batch = tl.LabeledBatch(images, data.labels[idx], flips, idx, masks)
        res = tl.loss_and_grad(batch, model, cfg.margin, mode=cfg.grad_mode,
                               threads=cfg.threads, deterministic=cfg.deterministic)
        if not np.isfinite(res.loss):
            raise NumericError(f"non-finite loss at iteration {it}")
        lr = sgd_step(model.params, res.grads, state, cfg)
        rows.append({"iteration": it, "lr": lr, "active_triplets": res.stats.active,
                     "mean_loss": res.loss})
        if cfg.eval_period and eval_fn is not None and (it + 1) % cfg.eval_period == 0:
            evals.append({"iteration": it + 1, **eval_fn(model, it + 1)})
        if out is not None and cfg.checkpoint_period and (it + 1) % cfg.checkpoint_period == 0:
            checkpoint.save(out / f"model_{it + 1:06d}.ckpt", model)
        if it % 200 == 0:
            log.info("iter %d lr %.2g active %d loss %.4f", it, lr, res.stats.active, res.loss)

    if out is not None:
        checkpoint.save(out / "model.ckpt", model, {"train": asdict(cfg)})
        write_log(rows, out / "metrics.csv")
    return TrainResult(model, rows, state, evals)
