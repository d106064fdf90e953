"""Finite-difference checks of the six loss terms on the desk-scale model."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .autodiff.gradcheck import GradCheckReport, grad_check
from .data import Batch, LabelSpaces
from .losses import LOSS_GROUPS, LOSSES
from .model import DrdlModel, ModelConfig

# tolerances the checks are held to
DOUBLE_TOL = 1e-6
SINGLE_TOL = 1e-4


def random_batch(
    label_spaces: LabelSpaces,
    shape=(3, 32, 16),
    n_source: int = 4,
    n_target: int = 4,
    seed: int = 0,
) -> Batch:
    rng = np.random.default_rng(seed)
    ls = label_spaces
    return Batch(
        xs=rng.uniform(0, 1, size=(n_source, *shape)),
        ys=rng.integers(0, ls.num_source_ids, n_source),
        cs=rng.integers(0, ls.num_source_cams, n_source),
        xt=rng.uniform(0, 1, size=(n_target, *shape)),
        ct=ls.num_source_cams + rng.integers(0, ls.num_target_cams, n_target),
        source_index=np.arange(n_source),
        target_index=np.arange(n_target),
    )


@dataclass
class LossCheck:
    loss: str
    precision: str
    report: GradCheckReport
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.loss:8s} {self.precision}: {self.report.summary()} (tol {self.tolerance:g}, {self.seconds:.1f}s)"


def _buffer_restorer(model: DrdlModel):
    """Return a callable that puts every running statistic back, in place."""
    bufs = [b for mod in model.groups().values() for _, b in mod.named_buffers()]
    saved = [b.copy() for b in bufs]

    def restore():
        for b, s in zip(bufs, saved):
            b[...] = s

    return restore


def check_loss(
    name: str,
    double: bool = True,
    label_spaces: LabelSpaces | None = None,
    config: ModelConfig | None = None,
    batch: Batch | None = None,
    seed: int = 0,
    epsilon: float = 1e-6,
    floor: float = 1e-2,
    kink_tol: float = 1e-3,
    per_tensor: int = 8,
) -> LossCheck:
    """Check one loss with respect to the parameter groups it trains.

    In single precision the analytic gradient comes from a float32 model and
    is compared with central differences taken on a float64 copy, since
    float32 differences are dominated by round-off.  Running statistics are
    restored before every evaluation.
    """
    ls = label_spaces or LabelSpaces(32, 3, 3)
    cfg = config or ModelConfig(seed=seed)
    batch = batch or random_batch(ls, cfg.image_shape, seed=seed)
    fn = LOSSES[name]
    groups = LOSS_GROUPS[name]
    t0 = time.perf_counter()

    ref = DrdlModel(ls, cfg, dtype=np.float64)

    analytic = None
    if not double:
        # both models evaluate the same function at the same float32-representable point
        f32 = {k: v.astype(np.float32) for k, v in ref.state_dict().items()}
        ref.load_state_dict({k: v.astype(np.float64) for k, v in f32.items()})
        batch = dataclasses.replace(
            batch,
            xs=batch.xs.astype(np.float32).astype(np.float64),
            xt=batch.xt.astype(np.float32).astype(np.float64),
        )
        m32 = DrdlModel(ls, cfg, dtype=np.float32)
        m32.load_state_dict(f32)
        m32.set_phase(groups)
        m32.zero_grad()
        loss = fn(m32, batch)
        loss.backward()
        analytic = {n: p.grad.astype(np.float64) for n, p in m32.named_parameters() if n.split(".")[0] in groups}

    ref.set_phase(groups)
    restore = _buffer_restorer(ref)

    params = [(n, p) for n, p in ref.named_parameters() if n.split(".")[0] in groups]
    report = grad_check(
        params,
        lambda: fn(ref, batch),
        epsilon=epsilon,
        rng=np.random.default_rng(seed),
        per_tensor=per_tensor,
        kink_tol=kink_tol,
        floor=floor,
        analytic=analytic,
        restore=restore,
    )
    return LossCheck(
        name,
        "double" if double else "single",
        report,
        DOUBLE_TOL if double else SINGLE_TOL,
        time.perf_counter() - t0,
    )


def check_all(double: bool = True, seed: int = 0, **kw) -> list[LossCheck]:
    return [check_loss(name, double=double, seed=seed, **kw) for name in LOSSES]
