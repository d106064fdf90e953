"""Pretraining followed by the four-step reciprocal adversarial loop."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .autodiff.gradcheck import NonFiniteLossError
from .autodiff.optim import Adam
from .data import AugmentConfig, Batch, Dataset, LabelSpaces, make_batches
from .fileio import atomic_write_text
from .losses import LossWeights, loss_adv1, loss_adv2, loss_e1, loss_e2, loss_id, loss_un_id
from .model import DrdlModel, ModelConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "phase", "L_id", "L_un_id", "L_e1", "L_e2", "L_adv1", "L_adv2", "rank1", "rank5", "rank10", "mAP"]
LOSS_COLUMNS = METRIC_COLUMNS[2:8]


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 60
    iter_pre: int = 25
    batch_size: int = 16
    lr_e1: float = 3e-4
    weight_decay_e1: float = 5e-4
    lr_e2: float = 3.5e-4
    lr_w1: float = 3e-4
    lr_w2: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_epochs: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        """Full-length schedule: 160 epochs, 70 of pretraining, 10 of warm-up."""
        base = dict(total_epochs=160, iter_pre=70, warmup_epochs=10)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.iter_pre < 1:
            raise TrainConfigError("iter_pre must be >= 1: classifiers are pretrained before the adversarial phase")
        if self.iter_pre > self.total_epochs:
            raise TrainConfigError(f"iter_pre ({self.iter_pre}) exceeds total_epochs ({self.total_epochs})")
        for k in ("lr_e1", "lr_e2", "lr_w1", "lr_w2"):
            if getattr(self, k) <= 0:
                raise TrainConfigError(f"{k} must be positive")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.warmup_epochs < 1:
            raise TrainConfigError("warmup_epochs must be >= 1")
        self.augment.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augment"]["erase_area"] = list(self.augment.erase_area)
        d["augment"]["erase_aspect"] = list(self.augment.erase_aspect)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        d["weights"] = LossWeights(**d["weights"])
        aug = dict(d["augment"])
        aug["erase_area"] = tuple(aug["erase_area"])
        aug["erase_aspect"] = tuple(aug["erase_aspect"])
        d["augment"] = AugmentConfig(**aug)
        return cls(**d)


def lr_schedule(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear warm-up from base/100 at epoch 1 to base at ``warmup_epochs``, flat afterwards."""
    if warmup_epochs <= 1 or epoch >= warmup_epochs:
        return base_lr
    frac = (max(epoch, 1) - 1) / (warmup_epochs - 1)
    return base_lr * (0.01 + 0.99 * frac)


@dataclass
class Optimizers:
    e1: Adam
    e2: Adam
    w1: Adam
    w2: Adam

    @classmethod
    def build(cls, model: DrdlModel, cfg: TrainConfig) -> "Optimizers":
        return cls(
            Adam(model.e1, cfg.lr_e1, cfg.betas, weight_decay=cfg.weight_decay_e1),
            Adam(model.e2, cfg.lr_e2, cfg.betas),
            Adam(model.w1, cfg.lr_w1, cfg.betas),
            Adam(model.w2, cfg.lr_w2, cfg.betas),
        )

    def items(self):
        return (("e1", self.e1), ("e2", self.e2), ("w1", self.w1), ("w2", self.w2))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, opt in self.items():
            out.update({f"opt.{name}/{k}": v for k, v in opt.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, opt in self.items():
            prefix = f"opt.{name}/"
            opt.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


def _check(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{what} became non-finite ({value}); aborting")
    return value


def _update(
    model: DrdlModel,
    groups: tuple[str, ...],
    loss_fn: Callable,
    batch: Batch,
    opts: dict[str, Adam],
    lrs: dict[str, float],
    scale: float = 1.0,
    trace: list | None = None,
) -> float:
    """One optimiser step on ``groups`` minimising ``scale * loss_fn``; returns the unscaled loss."""
    model.set_phase(groups)
    model.zero_grad()
    loss = loss_fn(model, batch)
    value = _check(float(loss.data), loss_fn.__name__)
    (loss * scale if scale != 1.0 else loss).backward()
    for g in groups:
        opts[g].step(lrs[g])
    if trace is not None:
        trace.append(groups if len(groups) > 1 else groups[0])
    return value


def _lrs(opts: Optimizers, lr_e1: float | None) -> dict[str, float]:
    lrs = {name: opt.lr for name, opt in opts.items()}
    if lr_e1 is not None:
        lrs["e1"] = lr_e1
    return lrs


def pretrain_step(
    model: DrdlModel,
    batch: Batch,
    opts: Optimizers,
    lrs: dict[str, float] | None = None,
    trace: list | None = None,
) -> dict[str, float]:
    """(E1, W1) on the identity loss, then (E2, W2) on the camera loss."""
    lrs = lrs or _lrs(opts, None)
    od = dict(opts.items())
    out = {"L_id": _update(model, ("e1", "w1"), loss_id, batch, od, lrs, trace=trace)}
    out["L_un_id"] = _update(model, ("e2", "w2"), loss_un_id, batch, od, lrs, trace=trace)
    return out


def adversarial_step(
    model: DrdlModel,
    batch: Batch,
    opts: Optimizers,
    weights: LossWeights,
    lrs: dict[str, float] | None = None,
    trace: list | None = None,
) -> dict[str, float]:
    """W2 on beta*L_adv1, E1 on alpha*L_e1, W1 on tau*L_adv2, E2 on lambda*L_e2, in that order.

    A sub-step whose weight is zero is skipped outright: with a zero loss the
    weight decay and Adam momentum would still move the parameters.
    """
    lrs = lrs or _lrs(opts, None)
    od = dict(opts.items())
    plan = [
        ("L_adv1", ("w2",), loss_adv1, weights.beta),
        ("L_e1", ("e1",), loss_e1, weights.alpha),
        ("L_adv2", ("w1",), loss_adv2, weights.tau),
        ("L_e2", ("e2",), loss_e2, weights.lam),
    ]
    out = {}
    for name, groups, fn, w in plan:
        if w == 0:
            continue
        out[name] = _update(model, groups, fn, batch, od, lrs, scale=w, trace=trace)
    return out


# ------------------------------------------------------------------ metrics


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, str):
        return v
    return f"{float(v):.8f}"


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRIC_COLUMNS)
    for r in rows:
        wr.writerow([str(r["epoch"]), r["phase"]] + [_fmt(r.get(c)) for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


# ------------------------------------------------------------------- driver


@dataclass
class TrainState:
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class TrainResult:
    model: DrdlModel
    history: list[dict]
    state: TrainState
    optimizers: Optimizers


def save_training_checkpoint(
    path: str | os.PathLike, model: DrdlModel, opts: Optimizers, state: TrainState, cfg: TrainConfig
) -> None:
    arrays = {**model.state_dict(), **opts.state_dict()}
    meta = {
        "kind": "drdl-train",
        "epoch": state.epoch,
        "history": state.history,
        "train_config": cfg.to_dict(),
        "model_config": model.config.to_dict(),
        "label_spaces": asdict(model.label_spaces),
        "dtype": model.dtype.str,
    }
    save_checkpoint(path, arrays, meta)


def load_model(path: str | os.PathLike) -> tuple[DrdlModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model (and return checkpoint meta and raw arrays) from a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    if "model_config" not in meta or "label_spaces" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    model = DrdlModel(LabelSpaces(**meta["label_spaces"]), ModelConfig.from_dict(meta["model_config"]), dtype=np.dtype(meta["dtype"]))
    model.load_state_dict({k: v for k, v in arrays.items() if k.startswith(("param:", "buffer:"))})
    return model, meta, arrays


def train(
    model: DrdlModel,
    source: Dataset,
    target: Dataset,
    cfg: TrainConfig,
    evaluator: Callable[[DrdlModel], dict[str, float]] | None = None,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    stop_after: int | None = None,
    trace: list | None = None,
) -> TrainResult:
    """Algorithm loop over epochs 1..total_epochs.

    Epochs up to ``iter_pre`` run :func:`pretrain_step` on every batch; later
    epochs run :func:`adversarial_step`.  Batch order and augmentation are
    derived from ``(seed, epoch)``, so a run resumed from a checkpoint at epoch
    e replays epochs e+1.. exactly.  ``evaluator`` (called on epochs that are
    multiples of ``eval_every`` and the last one) fills the ranking columns.
    ``stop_after`` ends the run early after that epoch (used to produce
    resumable partial runs).
    """
    cfg.validate()
    opts = Optimizers.build(model, cfg)
    state = TrainState()
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.load_state_dict({k: v for k, v in arrays.items() if k.startswith(("param:", "buffer:"))})
        opts.load_state_dict(arrays)
        state = TrainState(int(meta["epoch"]), list(meta["history"]))
    out = Path(out_dir) if out_dir is not None else None

    for epoch in range(state.epoch + 1, cfg.total_epochs + 1):
        phase = "pretrain" if epoch <= cfg.iter_pre else "adversarial"
        rng = np.random.default_rng([cfg.seed, epoch])
        augment_cfg = cfg.augment if _augments(cfg.augment) else None
        sums: dict[str, float] = {}
        count = 0
        lrs = _lrs(opts, lr_schedule(epoch, cfg.lr_e1, cfg.warmup_epochs))
        for batch in make_batches(source, target, cfg.batch_size, rng, augment_cfg, cfg.seed, epoch):
            if len(batch.ys) < 2 or len(batch.ct) < 1:
                # train-mode 1-D batch norm needs two source rows
                continue
            if phase == "pretrain":
                comps = pretrain_step(model, batch, opts, lrs, trace=trace)
            else:
                comps = adversarial_step(model, batch, opts, cfg.weights, lrs, trace=trace)
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        row: dict = {"epoch": epoch, "phase": phase}
        row.update({k: v / count for k, v in sums.items()} if count else {})
        last = epoch == cfg.total_epochs
        if evaluator is not None and ((cfg.eval_every and epoch % cfg.eval_every == 0) or last):
            row.update(evaluator(model))
        state.history.append(row)
        state.epoch = epoch
        log.info("epoch %d %s %s", epoch, phase, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if out is not None:
            atomic_write_text(out / "metrics.csv", metrics_csv(state.history))
            if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or last:
                save_training_checkpoint(out / f"checkpoint_e{epoch:03d}.ckpt", model, opts, state, cfg)
            if last:
                save_training_checkpoint(out / "final.ckpt", model, opts, state, cfg)
        if stop_after is not None and epoch >= stop_after:
            if out is not None:
                save_training_checkpoint(out / f"checkpoint_e{epoch:03d}.ckpt", model, opts, state, cfg)
            break
    model.eval()
    return TrainResult(model, state.history, state, opts)


def _augments(a: AugmentConfig) -> bool:
    return a.crop_padding > 0 or a.flip_prob > 0 or a.erase_prob > 0
