"""Factorised synthetic re-id data.

Identity content is two coloured rectangles on a dark canvas; camera style is
a per-channel affine map (gain, plus bias and background tint) and pixel noise.  The two factors are sampled independently, so
their ground truth is known exactly.
"""
from __future__ import annotations

import colorsys
import csv
import hashlib
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Domain, LabelSpaces, save_split, write_meta

# Per-domain style ranges, each a union of intervals.  ``tied`` styles scale
# all channels alike.  The ranges of the two domains are disjoint: source
# cameras barely change brightness, target cameras brighten or darken by a
# margin the source never shows, and the background hues differ per domain.
STYLE_RANGES = {
    Domain.SOURCE: {
        "gain": ((0.95, 1.05),), "bias": ((-0.03, 0.03),), "hue": ((0.0, 0.5),), "tied": True,
    },
    Domain.TARGET: {
        "gain": ((0.7, 0.85), (1.15, 1.3)), "bias": ((-0.12, -0.05), (0.05, 0.12)), "hue": ((0.5, 1.0),),
        "tied": True,
    },
}
BACKGROUND_LEVEL = 0.25


@dataclass(frozen=True)
class IdentitySpec:
    """``content_params`` rows: (top, left, height, width, hue, saturation, value) per rectangle, as fractions."""

    id: int
    content_params: np.ndarray

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.content_params, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class CameraStyle:
    camera_id: int
    gain: np.ndarray
    bias: np.ndarray
    background_hue: float
    noise_sigma: float
    background_level: float = BACKGROUND_LEVEL

    @classmethod
    def identity(cls, camera_id: int = 0, channels: int = 3) -> "CameraStyle":
        return cls(camera_id, np.ones(channels), np.zeros(channels), 0.0, 0.0, 0.0)

    def background(self) -> np.ndarray:
        return self.background_level * np.array(colorsys.hsv_to_rgb(self.background_hue % 1.0, 0.8, 1.0))

    def as_row(self) -> list[str]:
        vals = list(self.gain) + list(self.bias) + [self.background_hue, self.noise_sigma]
        return [f"{v:.6f}" for v in vals]


@dataclass
class SynthConfig:
    num_ids: int = 32
    num_cams: int = 3
    per_camera: int = 4
    num_test_ids: int | None = None
    membership: str = "all"
    shape: tuple[int, int, int] = (3, 32, 16)
    noise_sigma: float = 0.02
    seed: int = 0
    name: str = "synth"

    def validate(self) -> None:
        if self.num_ids < 1 or self.num_cams < 1 or self.per_camera < 1:
            raise ValueError("num_ids, num_cams and per_camera must be >= 1")
        if self.shape[0] != 3:
            raise ValueError("synthetic images are RGB (3 channels)")
        if self.shape[1] < 8 or self.shape[2] < 4:
            raise ValueError(f"canvas {self.shape[1:]} too small")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        parse_membership(self.membership, self.num_cams)

    @property
    def test_ids(self) -> int:
        return self.num_ids if self.num_test_ids is None else self.num_test_ids


def parse_membership(rule: str, num_cams: int) -> int:
    """Number of cameras each identity appears in under ``rule``."""
    if rule == "all":
        return num_cams
    if rule == "one":
        return 1
    if rule.startswith("k:"):
        k = int(rule[2:])
        if not 1 <= k <= num_cams:
            raise ValueError(f"membership {rule!r} needs 1 <= k <= {num_cams}")
        return k
    raise ValueError(f"unknown membership rule {rule!r} (all | one | k:<n>)")


def sample_identity(rng: np.random.Generator, pid: int) -> IdentitySpec:
    upper = [
        rng.uniform(0.05, 0.25),  # top
        rng.uniform(0.0, 0.4),  # left
        rng.uniform(0.2, 0.4),  # height
        rng.uniform(0.45, 0.9),  # width
        rng.uniform(0.0, 1.0),  # hue
        rng.uniform(0.6, 1.0),  # saturation
        rng.uniform(0.55, 0.8),  # value
    ]
    lower = [
        rng.uniform(0.5, 0.65),
        rng.uniform(0.0, 0.4),
        rng.uniform(0.2, 0.35),
        rng.uniform(0.45, 0.9),
        rng.uniform(0.0, 1.0),
        rng.uniform(0.6, 1.0),
        rng.uniform(0.55, 0.8),
    ]
    return IdentitySpec(pid, np.array([upper, lower]))


def rect_boxes(identity: IdentitySpec, h: int, w: int) -> list[tuple[int, int, int, int]]:
    """Pixel boxes (top, left, bottom, right), exclusive ends, clipped to the canvas."""
    boxes = []
    for top, left, rh, rw, *_ in identity.content_params:
        t = int(round(top * h))
        l = int(round(left * w))
        b = min(h, t + max(1, int(round(rh * h))))
        r = min(w, l + max(1, int(round(rw * w))))
        boxes.append((t, l, b, r))
    return boxes


def base_render(identity: IdentitySpec, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    img = np.zeros(shape)
    for (t, l, b, r), params in zip(rect_boxes(identity, h, w), identity.content_params):
        rgb = colorsys.hsv_to_rgb(params[4] % 1.0, params[5], params[6])
        img[:, t:b, l:r] = np.asarray(rgb)[:, None, None]
    return img


def _uniform_union(rng: np.random.Generator, intervals, size=None):
    lengths = np.array([hi - lo for lo, hi in intervals])
    n = 1 if size is None else size
    pick = rng.choice(len(intervals), size=n, p=lengths / lengths.sum())
    lo = np.array([intervals[i][0] for i in pick])
    out = lo + rng.uniform(0.0, 1.0, size=n) * lengths[pick]
    return float(out[0]) if size is None else out


def sample_style(
    rng: np.random.Generator, camera_id: int, domain: Domain, noise_sigma: float, ranges: dict | None = None
) -> CameraStyle:
    rg = (ranges or STYLE_RANGES)[domain]
    # tied styles scale all channels alike (brightness); untied ones cast colour
    k = 1 if rg.get("tied", False) else 3
    gain = np.broadcast_to(_uniform_union(rng, rg["gain"], k), (3,)).copy()
    bias = np.broadcast_to(_uniform_union(rng, rg["bias"], k), (3,)).copy()
    return CameraStyle(
        camera_id,
        gain,
        bias,
        _uniform_union(rng, rg["hue"]),
        noise_sigma,
        rg.get("level", BACKGROUND_LEVEL),
    )


def render_sample(
    identity: IdentitySpec,
    style: CameraStyle,
    rng: np.random.Generator,
    shape: tuple[int, int, int] = (3, 32, 16),
) -> np.ndarray:
    """clip(gain * base + bias + background + noise) as float64 in [0, 1]."""
    base = base_render(identity, shape)
    img = style.gain[:, None, None] * base + (style.bias + style.background())[:, None, None]
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, size=shape)
    return np.clip(img, 0.0, 1.0)


def camera_membership(rng: np.random.Generator, num_ids: int, num_cams: int, rule: str) -> list[list[int]]:
    k = parse_membership(rule, num_cams)
    if k == num_cams:
        return [list(range(num_cams)) for _ in range(num_ids)]
    return [sorted(rng.choice(num_cams, size=k, replace=False).tolist()) for _ in range(num_ids)]


@dataclass
class SynthDomain:
    """Everything generated for one domain, before it is written to disk."""

    splits: dict[str, Dataset]
    identities: dict[int, IdentitySpec]
    styles: list[CameraStyle]
    factor_rows: list[list[str]]


def _domain_stream(seed: int, domain: Domain, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, 0 if domain is Domain.SOURCE else 1, sum(map(ord, tag)) * 131 + len(tag)])


def build_domain(config: SynthConfig, domain: Domain, label_spaces: LabelSpaces) -> SynthDomain:
    config.validate()
    style_rng = _domain_stream(config.seed, domain, "style")
    styles = [sample_style(style_rng, cam, domain, config.noise_sigma) for cam in range(config.num_cams)]
    offset = 0 if domain is Domain.SOURCE else label_spaces.num_source_cams
    id_rng = _domain_stream(config.seed, domain, "ids")
    mem_rng = _domain_stream(config.seed, domain, "membership")
    noise_rng = _domain_stream(config.seed, domain, "noise")

    def render_group(pids: list[int]) -> tuple[dict[int, IdentitySpec], list[tuple[int, int, np.ndarray]]]:
        specs = {pid: sample_identity(id_rng, pid) for pid in pids}
        members = camera_membership(mem_rng, len(pids), config.num_cams, config.membership)
        rows = []
        for pid, cams in zip(pids, members):
            for cam in cams:
                for _ in range(config.per_camera):
                    rows.append((pid, cam, render_sample(specs[pid], styles[cam], noise_rng, config.shape)))
        return specs, rows

    train_pids = list(range(config.num_ids))
    identities, train_rows = render_group(train_pids)
    groups = {"train": train_rows}
    if domain is Domain.TARGET and config.test_ids > 0:
        test_pids = list(range(config.num_ids, config.num_ids + config.test_ids))
        test_specs, test_rows = render_group(test_pids)
        identities.update(test_specs)
        query, gallery = [], []
        seen: set[tuple[int, int]] = set()
        for row in test_rows:
            key = row[:2]
            (gallery if key in seen else query).append(row)
            seen.add(key)
        groups["query"] = query
        groups["gallery"] = gallery

    splits: dict[str, Dataset] = {}
    factor_rows: list[list[str]] = []
    for split, rows in groups.items():
        counters: dict[tuple[int, int], int] = {}
        names, images, pids, cams = [], [], [], []
        for pid, cam, img in rows:
            seq = counters.get((pid, cam), 0)
            counters[(pid, cam)] = seq + 1
            fname = f"{pid:04d}_c{cam + 1}_{seq:04d}.png"
            names.append(fname)
            images.append(img)
            pids.append(pid)
            cams.append(offset + cam)
            factor_rows.append([split, fname, identities[pid].digest(), *styles[cam].as_row()])
        order = np.argsort(names, kind="stable")
        stack = np.stack(images).astype(np.float32) if images else np.zeros((0, *config.shape), np.float32)
        splits[split] = Dataset(
            stack[order],
            np.asarray(pids)[order],
            np.asarray(cams)[order],
            domain,
            label_spaces,
            [names[i] for i in order],
            f"{config.name}-{domain.value}",
        )
    return SynthDomain(splits, identities, styles, factor_rows)


def write_domain(root: str | os.PathLike, config: SynthConfig, domain: SynthDomain) -> None:
    """Write one domain atomically: build in a temp dir then rename into place."""
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=root.parent, prefix=f".{root.name}."))
    try:
        for split, ds in domain.splits.items():
            if len(ds):  # one image per (id, camera) leaves the gallery empty
                save_split(ds, tmp / split)
        c, h, w = config.shape
        write_meta(
            tmp,
            {
                "name": next(iter(domain.splits.values())).name,
                "C": c,
                "H": h,
                "W": w,
                "num_ids": config.num_ids,
                "num_cams": config.num_cams,
            },
        )
        with open(tmp / "factors.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(
                ["split", "filename", "identity_hash", "gain_r", "gain_g", "gain_b",
                 "bias_r", "bias_g", "bias_b", "background_hue", "noise_sigma"]
            )
            wr.writerows(domain.factor_rows)
        if root.exists():
            shutil.rmtree(root)
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def generate(
    config: SynthConfig,
    out_dir: str | os.PathLike | None = None,
    target_config: SynthConfig | None = None,
) -> tuple[SynthDomain, SynthDomain]:
    """Build source and target domains; write ``<out>/source`` and ``<out>/target`` if ``out_dir`` is set.

    ``target_config`` defaults to ``config``.  Person ids are numbered per
    domain; the two identity populations come from independent streams.
    """
    tcfg = target_config or config
    spaces = LabelSpaces(config.num_ids, config.num_cams, tcfg.num_cams)
    src = build_domain(config, Domain.SOURCE, spaces)
    tgt = build_domain(tcfg, Domain.TARGET, spaces)
    if out_dir is not None:
        out = Path(out_dir)
        write_domain(out / "source", config, src)
        write_domain(out / "target", tcfg, tgt)
    return src, tgt
