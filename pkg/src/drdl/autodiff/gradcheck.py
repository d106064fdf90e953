from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    num_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    num_nonsmooth: int = 0
    max_nonsmooth_fraction: float = 0.1

    def passed(self, tol: float) -> bool:
        if self.num_checked and self.num_nonsmooth / self.num_checked > self.max_nonsmooth_fraction:
            return False
        return self.max_rel_error < tol

    def summary(self) -> str:
        return (
            f"max rel err {self.max_rel_error:.3e} over {self.num_checked} coords"
            f" ({self.num_nonsmooth} at kinks); "
            f"worst {self.worst_param}{list(self.worst_index)} "
            f"analytic={self.analytic:.6e} numeric={self.numeric:.6e}"
        )


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    params: Sequence[tuple[str, Tensor]],
    loss_fn: Callable[[], Tensor],
    epsilon: float = 1e-6,
    rng: np.random.Generator | None = None,
    full_sweep_limit: int = 5000,
    sample_fraction: float = 0.01,
    floor: float = 1e-2,
    analytic: dict[str, np.ndarray] | None = None,
    restore: Callable[[], None] | None = None,
    per_tensor: int | None = None,
    kink_tol: float | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` is called with no arguments and must rebuild the forward pass
    from the current parameter values.  ``restore`` (if given) is invoked
    before every evaluation so side effects such as running-statistics
    updates cannot leak between perturbations.  When ``analytic`` is not
    supplied it is computed here by one backward pass.  Parameters with
    ``requires_grad`` off are expected to have an identically zero analytic
    gradient and are checked against the finite difference too.

    Coordinates are swept exhaustively when the total count is below
    ``full_sweep_limit``; otherwise ``sample_fraction`` of them are drawn.
    ``per_tensor`` instead draws up to that many coordinates from every
    parameter tensor, so small tensors are never skipped.

    Errors are relative to ``max(|analytic|, |numeric|, floor)``: gradients
    below ``floor`` are judged on absolute error, since round-off in the loss
    puts a noise floor of roughly 1e-10 under any central difference.

    With ``kink_tol`` set, a coordinate whose forward and backward one-sided
    differences disagree by more than ``kink_tol`` (relative) is taken to sit
    on a non-smooth point of ReLU or max pooling within one step; it is
    counted in ``num_nonsmooth`` instead of scored.  On a smooth stretch the
    two differ by about curvature times step, far below any sensible
    ``kink_tol``.
    """
    rng = rng or np.random.default_rng(0)
    restore = restore or (lambda: None)

    def evaluate() -> float:
        restore()
        val = float(loss_fn().data)
        if not np.isfinite(val):
            raise NonFiniteLossError(f"loss is not finite: {val}")
        return val

    if analytic is None:
        for _, p in params:
            if p.grad is not None:
                p.grad[...] = 0.0
        restore()
        loss = loss_fn()
        if not np.isfinite(float(loss.data)):
            raise NonFiniteLossError(f"loss is not finite: {float(loss.data)}")
        loss.backward()
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params
        }

    total = sum(p.data.size for _, p in params)
    coords: list[tuple[str, Tensor, int]] = []
    if per_tensor is not None:
        for name, p in params:
            k = min(per_tensor, p.data.size)
            coords.extend((name, p, int(i)) for i in np.sort(rng.choice(p.data.size, size=k, replace=False)))
    elif total < full_sweep_limit:
        for name, p in params:
            coords.extend((name, p, i) for i in range(p.data.size))
    else:
        k = max(1, int(round(total * sample_fraction)))
        flat = np.sort(rng.choice(total, size=k, replace=False))
        offsets = np.cumsum([0] + [p.data.size for _, p in params])
        for gidx in flat:
            j = int(np.searchsorted(offsets, gidx, side="right") - 1)
            name, p = params[j]
            coords.append((name, p, int(gidx - offsets[j])))

    f0 = evaluate() if kink_tol is not None else 0.0
    nonsmooth = 0
    worst = (0.0, "", (), 0.0, 0.0)
    per_err: dict[str, float] = {}
    for name, p, i in coords:
        view = p.data.reshape(-1)
        orig = view[i]
        view[i] = orig + epsilon
        fp = evaluate()
        view[i] = orig - epsilon
        fm = evaluate()
        view[i] = orig
        num = (fp - fm) / (2 * epsilon)
        ana = float(analytic[name].reshape(-1)[i])
        if kink_tol is not None:
            fwd, bwd = (fp - f0) / epsilon, (f0 - fm) / epsilon
            if relative_error(fwd, bwd, floor) > kink_tol:
                nonsmooth += 1
                continue
        err = relative_error(ana, num, floor)
        per_err[name] = max(per_err.get(name, 0.0), err)
        if err >= worst[0]:
            worst = (err, name, np.unravel_index(i, p.data.shape), ana, num)
    restore()
    return GradCheckReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=tuple(int(v) for v in worst[2]),
        analytic=worst[3],
        numeric=worst[4],
        num_checked=len(coords),
        per_param=per_err,
        num_nonsmooth=nonsmooth,
    )
