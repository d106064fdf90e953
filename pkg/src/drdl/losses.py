"""The DRDL objective, one function per term.

Every loss takes the model and a :class:`~drdl.data.Batch` and returns a
scalar :class:`Tensor`.  Which parameter groups receive gradients is decided
by the model's current phase (see :meth:`DrdlModel.set_phase`); the
classifier-update losses additionally detach encoder outputs so no encoder
graph is ever built for them.

Source and target images go through each network as one concatenated batch,
so batch-norm statistics are shared across domains within a step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor
from .data import Batch
from .model import DrdlModel


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 1.0
    lam: float = 0.01
    tau: float = 0.01

    def __post_init__(self):
        for k in ("alpha", "beta", "lam", "tau"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0)


def _logits(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def ce(logits, target) -> Tensor:
    """Cross-entropy; a 1-D logit vector with an int target, or a batch (mean reduction)."""
    z = _logits(logits)
    if z.data.ndim == 1:
        z = ops.reshape(z, (1, -1))
        target = [int(target)]
    return ops.softmax_cross_entropy(z, np.atleast_1d(target))


def ce_uniform(logits, num_classes: int | None = None) -> Tensor:
    """Cross-entropy against the uniform distribution over the logit width."""
    z = _logits(logits)
    if z.data.ndim == 1:
        z = ops.reshape(z, (1, -1))
    if num_classes is not None and z.shape[1] != num_classes:
        raise ShapeError(f"uniform cross entropy: logits width {z.shape[1]} != {num_classes}")
    return ops.uniform_cross_entropy(z)


def _split(t: Tensor, n: int) -> tuple[Tensor, Tensor]:
    return ops.slice_rows(t, 0, n), ops.slice_rows(t, n, t.shape[0])


def _both(batch: Batch) -> np.ndarray:
    return np.concatenate([batch.xs, batch.xt])


def loss_id(model: DrdlModel, batch: Batch) -> Tensor:
    """CE of W1 on the source GAP, GMP and fused content features."""
    cf = model.forward_content(batch.xs)
    y = batch.ys
    return ops.add_all(
        [
            ce(model.classify_id(cf.gap), y),
            ce(model.classify_id(cf.gmp), y),
            ce(model.classify_id(cf.fused), y),
        ]
    )


def loss_un_id(model: DrdlModel, batch: Batch) -> Tensor:
    """Camera CE of W2 on style features of both domains (global camera indices)."""
    ns = len(batch.ys)
    logits_s, logits_t = _split(model.classify_cam(model.forward_style(_both(batch))), ns)
    return ops.add(ce(logits_s, batch.cs), ce(logits_t, batch.ct))


def loss_e1(model: DrdlModel, batch: Batch) -> Tensor:
    """Push fused content features of both domains to the extra camera class, keep source ids."""
    ns = len(batch.ys)
    extra = model.label_spaces.extra_camera_class
    fused = model.forward_content(_both(batch)).fused
    cam_s, cam_t = _split(model.classify_cam(fused), ns)
    fused_s = ops.slice_rows(fused, 0, ns)
    return ops.add_all(
        [
            ce(cam_s, np.full(ns, extra)),
            ce(cam_t, np.full(len(batch.ct), extra)),
            ce(model.classify_id(fused_s), batch.ys),
        ]
    )


def loss_e2(model: DrdlModel, batch: Batch) -> Tensor:
    """Style features keep their cameras and make W1 uniform on source identities."""
    ns = len(batch.ys)
    style = model.forward_style(_both(batch))
    cam_s, cam_t = _split(model.classify_cam(style), ns)
    style_s = ops.slice_rows(style, 0, ns)
    return ops.add_all(
        [
            ce(cam_s, batch.cs),
            ce(cam_t, batch.ct),
            ce_uniform(model.classify_id(style_s), model.label_spaces.num_source_ids),
        ]
    )


def loss_adv1(model: DrdlModel, batch: Batch) -> Tensor:
    """W2 learns to recover true cameras from both style and (detached) content features."""
    ns = len(batch.ys)
    x = _both(batch)
    style = model.forward_style(x).detach()
    fused = model.forward_content(x).fused.detach()
    st_s, st_t = _split(model.classify_cam(style), ns)
    co_s, co_t = _split(model.classify_cam(fused), ns)
    return ops.add_all([ce(st_s, batch.cs), ce(st_t, batch.ct), ce(co_s, batch.cs), ce(co_t, batch.ct)])


def loss_adv2(model: DrdlModel, batch: Batch) -> Tensor:
    """W1 learns to recover source identities from fused content and (detached) style features."""
    fused = model.forward_content(batch.xs).fused.detach()
    style = model.forward_style(batch.xs).detach()
    return ops.add(ce(model.classify_id(fused), batch.ys), ce(model.classify_id(style), batch.ys))


LOSSES = {
    "L_id": loss_id,
    "L_un_id": loss_un_id,
    "L_e1": loss_e1,
    "L_e2": loss_e2,
    "L_adv1": loss_adv1,
    "L_adv2": loss_adv2,
}

# groups each loss trains
LOSS_GROUPS = {
    "L_id": ("e1", "w1"),
    "L_un_id": ("e2", "w2"),
    "L_e1": ("e1",),
    "L_e2": ("e2",),
    "L_adv1": ("w2",),
    "L_adv2": ("w1",),
}


def weighted_total(components: dict[str, float], weights: LossWeights) -> float:
    return (
        components["L_id"]
        + components["L_un_id"]
        + weights.alpha * components["L_e1"]
        + weights.beta * components["L_adv1"]
        + weights.lam * components["L_e2"]
        + weights.tau * components["L_adv2"]
    )


def total_objective(model: DrdlModel, batch: Batch, weights: LossWeights) -> tuple[float, dict[str, float]]:
    """Weighted sum of all six terms, for reporting only.

    Each term is evaluated with its own parameter groups in train mode, as the
    trainer would; running statistics are restored afterwards so the call has
    no side effects.
    """
    saved = {k: v.copy() for k, v in model.state_dict().items() if k.startswith("buffer:")}
    comps = {}
    for name, fn in LOSSES.items():
        with model.phase(()):
            # graph-free evaluation but with the step's BN mode
            for g in LOSS_GROUPS[name]:
                model.groups()[g].train(True)
            comps[name] = float(fn(model, batch).data)
    model.load_state_dict({**model.state_dict(), **saved})
    return weighted_total(comps, weights), comps
