from __future__ import annotations

import numpy as np

from .nn import ParamModule


class ConfigError(ValueError):
    pass


class Adam:
    """Adam with bias correction and L2 weight decay folded into the gradient.

    Moment state is kept per named parameter.  Parameters whose
    ``requires_grad`` is off are skipped entirely (their moments do not
    advance), which is how a frozen group stays bit-identical.
    """

    def __init__(
        self,
        module: ParamModule,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.module = module
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def zero_grad(self) -> None:
        self.module.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        b1, b2 = self.betas
        for name, p in self.module.named_parameters():
            if not p.requires_grad:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            st = self.state.get(name)
            if st is None:
                st = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                self.state[name] = st
            st["step"] += 1
            t = st["step"]
            m, v = st["m"], st["v"]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"adam:{name}:m"] = st["m"].copy()
            out[f"adam:{name}:v"] = st["v"].copy()
            out[f"adam:{name}:step"] = np.array([st["step"]], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.state = {}
        for key, value in state.items():
            if not key.startswith("adam:"):
                continue
            name = key[len("adam:") : key.rindex(":")]
            field = key[key.rindex(":") + 1 :]
            st = self.state.setdefault(name, {})
            if field == "step":
                st["step"] = int(value[0])
            else:
                st[field] = np.array(value)
