"""The four-network bundle: content encoder, style encoder, identity and camera classifiers."""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from .autodiff import ops
from .autodiff.nn import BatchNorm, ConvBlock, Linear, ParamModule
from .autodiff.tensor import ShapeError, Tensor
from .data import LabelSpaces

GROUPS = ("e1", "e2", "w1", "w2")


@dataclass
class ModelConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    cam_hidden: int = 32
    image_shape: tuple[int, int, int] = (3, 32, 16)
    retrieval_feature: str = "fused"
    seed: int = 0
    # standardise each image to zero mean, unit std before the encoders
    normalize_input: bool = False

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


def normalize_images(images: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-image mean/std standardisation over (C, H, W)."""
    flat = images.reshape(len(images), -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    out = (flat - mean[:, None]) / (std[:, None] + eps)
    return out.reshape(images.shape).astype(images.dtype, copy=False)


class Backbone(ParamModule):
    """Stack of stride-2 conv-BN-ReLU blocks returning the final feature map."""

    def __init__(self, in_channels: int, channels: Iterable[int], rng: np.random.Generator):
        super().__init__()
        prev = in_channels
        self.blocks = []
        for i, ch in enumerate(channels):
            self.blocks.append(self.add_module(f"block{i}", ConvBlock(prev, ch, rng, stride=2)))
            prev = ch

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class IdClassifier(ParamModule):
    """BN -> linear, feature dim -> number of source identities."""

    def __init__(self, dim: int, num_ids: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.bn = self.add_module("bn", BatchNorm(dim))
        self.fc = self.add_module("fc", Linear(dim, num_ids, rng, zero_init=zero_init))

    def forward(self, f: Tensor) -> Tensor:
        return self.fc(self.bn(f))


class CamClassifier(ParamModule):
    """Channel reduction -> BN -> ReLU -> linear over all cameras plus the extra class."""

    def __init__(self, dim: int, hidden: int, num_out: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        # bias would be cancelled by the following BN
        self.reduce = self.add_module("reduce", Linear(dim, hidden, rng, bias=False))
        self.bn = self.add_module("bn", BatchNorm(hidden))
        self.fc = self.add_module("fc", Linear(hidden, num_out, rng, zero_init=zero_init))

    def forward(self, f: Tensor) -> Tensor:
        return self.fc(ops.relu(self.bn(self.reduce(f))))


@dataclass
class ContentFeatures:
    gap: Tensor
    gmp: Tensor
    fused: Tensor


class DrdlModel:
    def __init__(
        self,
        label_spaces: LabelSpaces,
        config: ModelConfig | None = None,
        zero_init_heads: bool = False,
        dtype=np.float32,
    ):
        self.config = config or ModelConfig()
        self.label_spaces = label_spaces
        rng = np.random.default_rng(self.config.seed)
        cfg = self.config
        d = cfg.feature_dim
        self.e1 = Backbone(cfg.in_channels, cfg.channels, rng)
        self.e2 = Backbone(cfg.in_channels, cfg.channels, rng)
        self.w1 = IdClassifier(d, label_spaces.num_source_ids, rng, zero_init=zero_init_heads)
        self.w2 = CamClassifier(d, cfg.cam_hidden, label_spaces.camera_logits, rng, zero_init=zero_init_heads)
        if self.w1.fc.weight.shape[0] != label_spaces.num_source_ids:
            raise ShapeError("identity classifier width must equal the number of source ids")
        if self.w2.fc.weight.shape[0] != label_spaces.total_cameras + 1:
            raise ShapeError("camera classifier width must equal source cameras + target cameras + 1")
        self.astype(dtype)

    # -------------------------------------------------------------- plumbing

    def groups(self) -> dict[str, ParamModule]:
        return {"e1": self.e1, "e2": self.e2, "w1": self.w1, "w2": self.w2}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for g, mod in self.groups().items():
            yield from mod.named_parameters(f"{g}.")

    def astype(self, dtype) -> "DrdlModel":
        for mod in self.groups().values():
            mod.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def set_phase(self, active: Iterable[str] = GROUPS) -> None:
        """Make ``active`` groups trainable and in train mode; freeze the rest in eval mode.

        Frozen groups run on their running statistics and record no graph, so a
        sub-step never touches their parameters or buffers.
        """
        active = set(active)
        unknown = active - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        for name, mod in self.groups().items():
            on = name in active
            mod.trainable = on
            mod.train(on)

    @contextlib.contextmanager
    def phase(self, active: Iterable[str]):
        prev = {n: (m.trainable, m.training) for n, m in self.groups().items()}
        self.set_phase(active)
        try:
            yield self
        finally:
            for n, (tr, mode) in prev.items():
                self.groups()[n].trainable = tr
                self.groups()[n].train(mode)

    def eval(self) -> None:
        self.set_phase(())

    def zero_grad(self) -> None:
        for mod in self.groups().values():
            mod.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for g, mod in self.groups().items():
            for k, v in mod.state_dict().items():
                kind, name = k.split(":", 1)
                out[f"{kind}:{g}.{name}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for g, mod in self.groups().items():
            sub = {}
            for k, v in state.items():
                kind, name = k.split(":", 1)
                if name.startswith(g + "."):
                    sub[f"{kind}:{name[len(g) + 1:]}"] = v
            mod.load_state_dict(sub)
        self.dtype = next(iter(self.e1.parameters())).data.dtype

    # --------------------------------------------------------------- forward

    def _as_input(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        expected = tuple(self.config.image_shape)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        if self.config.normalize_input:
            x = Tensor(normalize_images(x.data))
        return x

    def content_from_map(self, fmap: Tensor) -> ContentFeatures:
        gap = ops.global_avg_pool(fmap)
        gmp = ops.global_max_pool(fmap)
        return ContentFeatures(gap, gmp, ops.add(gap, gmp))

    def forward_content(self, images) -> ContentFeatures:
        return self.content_from_map(self.e1(self._as_input(images)))

    def forward_style(self, images) -> Tensor:
        return ops.global_avg_pool(self.e2(self._as_input(images)))

    def classify_id(self, feature: Tensor) -> Tensor:
        return self.w1(feature)

    def classify_cam(self, feature: Tensor) -> Tensor:
        return self.w2(feature)

    # ------------------------------------------------------------- inference

    def extract(self, images: np.ndarray, source: str = "fused", batch_size: int = 128) -> np.ndarray:
        """Eval-mode features for retrieval: ``fused``, ``gap``, ``gmp`` (content) or ``style``."""
        if source not in ("fused", "gap", "gmp", "style"):
            raise ValueError(f"unknown feature source {source!r}")
        with self.phase(()):
            parts = []
            for i in range(0, len(images), batch_size):
                chunk = images[i : i + batch_size]
                if source == "style":
                    parts.append(self.forward_style(chunk).data)
                else:
                    parts.append(getattr(self.forward_content(chunk), source).data)
        if not parts:
            return np.zeros((0, self.config.feature_dim), dtype=self.dtype)
        return np.concatenate(parts)


def parameter_groups_disjoint(model: DrdlModel) -> bool:
    seen: set[int] = set()
    for mod in model.groups().values():
        for p in mod.parameters():
            if id(p) in seen:
                return False
            seen.add(id(p))
    return True
