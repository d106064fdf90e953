"""Datasets, the on-disk directory format, label spaces, batching and augmentation.

On disk a dataset is ``<root>/<split>/<pid>_c<cam>_<seq>.png`` with a
``<root>/meta.txt`` of ``key=value`` lines.  Camera numbers in filenames are
1-based and local to the domain; in memory they are zero-based global indices
(source cameras first, then target cameras, then the extra "no camera" class).
"""
from __future__ import annotations

import enum
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

FILENAME_RE = re.compile(r"^(-1|\d+)_c(\d+)_(\d+)\.png$")


class DatasetFormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class AugmentConfigError(ValueError):
    pass


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class LabelSpaces:
    num_source_ids: int
    num_source_cams: int
    num_target_cams: int

    @property
    def total_cameras(self) -> int:
        return self.num_source_cams + self.num_target_cams

    @property
    def extra_camera_class(self) -> int:
        return self.num_source_cams + self.num_target_cams

    @property
    def camera_logits(self) -> int:
        return self.total_cameras + 1

    def global_camera(self, local_cam: int, domain: Domain) -> int:
        """Map a 1-based per-domain camera number to the global zero-based index."""
        limit = self.num_source_cams if domain is Domain.SOURCE else self.num_target_cams
        if not 1 <= local_cam <= limit:
            raise DatasetFormatError(f"camera c{local_cam} outside 1..{limit} for {domain.value} domain")
        offset = 0 if domain is Domain.SOURCE else self.num_source_cams
        return offset + local_cam - 1

    def local_camera(self, global_cam: int, domain: Domain) -> int:
        offset = 0 if domain is Domain.SOURCE else self.num_source_cams
        return global_cam - offset + 1

    def camera_range(self, domain: Domain) -> range:
        if domain is Domain.SOURCE:
            return range(0, self.num_source_cams)
        return range(self.num_source_cams, self.total_cameras)


@dataclass
class Sample:
    image: np.ndarray
    person_id: int | None
    camera_id: int
    domain: Domain


@dataclass
class DatasetMeta:
    name: str
    count: int
    shape: tuple[int, int, int]
    label_spaces: LabelSpaces


@dataclass
class Dataset:
    """Images stacked as (N, C, H, W) float32 in [0, 1] with parallel label arrays.

    ``pids`` holds -1 where no identity is known.  For target-domain training
    data the identities are evaluation-only; the trainer never reads them.
    """

    images: np.ndarray
    pids: np.ndarray
    cams: np.ndarray
    domain: Domain
    label_spaces: LabelSpaces
    filenames: list[str] = field(default_factory=list)
    name: str = ""

    def __post_init__(self) -> None:
        self.pids = np.asarray(self.pids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        n = len(self.pids)
        if self.images.shape[0] != n or self.cams.shape[0] != n:
            raise ValueError("images, pids and cams must have equal length")
        if not self.filenames:
            self.filenames = [
                f"{pid:04d}_c{self.label_spaces.local_camera(int(cam), self.domain)}_{i:04d}.png"
                if pid >= 0
                else f"-1_c{self.label_spaces.local_camera(int(cam), self.domain)}_{i:04d}.png"
                for i, (pid, cam) in enumerate(zip(self.pids, self.cams))
            ]

    def __len__(self) -> int:
        return len(self.pids)

    def __getitem__(self, i: int) -> Sample:
        pid = int(self.pids[i])
        return Sample(self.images[i], pid if pid >= 0 else None, int(self.cams[i]), self.domain)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def meta(self) -> DatasetMeta:
        return DatasetMeta(self.name, len(self), self.shape, self.label_spaces)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.pids[idx],
            self.cams[idx],
            self.domain,
            self.label_spaces,
            [self.filenames[i] for i in idx],
            self.name,
        )

    def identities(self) -> dict[int, np.ndarray]:
        """Row indices grouped by identity, pid order ascending."""
        return {int(p): np.flatnonzero(self.pids == p) for p in np.unique(self.pids)}


def concat_datasets(parts: list[Dataset], name: str = "") -> Dataset:
    """Stack datasets of one domain in order."""
    first = parts[0]
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.pids for p in parts]),
        np.concatenate([p.cams for p in parts]),
        first.domain,
        first.label_spaces,
        [f for p in parts for f in p.filenames],
        name or first.name,
    )


def parse_filename(name: str) -> tuple[int, int, int]:
    m = FILENAME_RE.match(name)
    if m is None:
        raise DatasetFormatError(f"malformed dataset filename: {name!r} (expected <pid>_c<cam>_<seq>.png)")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def read_meta(root: str | os.PathLike) -> dict[str, str]:
    path = Path(root) / "meta.txt"
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_meta(root: str | os.PathLike, entries: dict[str, object]) -> None:
    path = Path(root) / "meta.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def load_split(split_dir: str | os.PathLike, domain: Domain, label_spaces: LabelSpaces, name: str = "") -> Dataset:
    """Load every PNG in ``split_dir`` in lexicographic filename order."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise EmptyDatasetError(f"no such dataset directory: {split_dir}")
    files = sorted(p.name for p in split_dir.iterdir() if p.is_file() and not p.name.startswith("."))
    files = [f for f in files if f != "meta.txt"]
    if not files:
        raise EmptyDatasetError(f"dataset directory is empty: {split_dir}")
    pids, cams, images = [], [], []
    for fname in files:
        pid, cam, _ = parse_filename(fname)
        pids.append(pid)
        cams.append(label_spaces.global_camera(cam, domain))
        with Image.open(split_dir / fname) as im:
            arr = np.asarray(im, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        images.append(arr.transpose(2, 0, 1))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{split_dir}: images have differing shapes {sorted(shapes)}")
    stack = np.stack(images).astype(np.float32) / np.float32(255.0)
    return Dataset(stack, pids, cams, domain, label_spaces, files, name)


def load_dataset(
    root: str | os.PathLike,
    domain: Domain | str,
    split: str = "train",
    label_spaces: LabelSpaces | None = None,
) -> Dataset:
    """Load ``<root>/<split>``.

    Without explicit ``label_spaces`` the domain's own ``meta.txt`` supplies
    camera counts; a lone target dataset then has no source offset.  Pass the
    joint :class:`LabelSpaces` (see :func:`joint_label_spaces`) to get global
    camera indices.
    """
    domain = Domain(domain) if isinstance(domain, str) else domain
    meta = read_meta(root)
    if label_spaces is None:
        n_cams = int(meta["num_cams"])
        n_ids = int(meta["num_ids"])
        if domain is Domain.SOURCE:
            label_spaces = LabelSpaces(n_ids, n_cams, 0)
        else:
            label_spaces = LabelSpaces(0, 0, n_cams)
    ds = load_split(Path(root) / split, domain, label_spaces, meta.get("name", Path(root).name))
    shape = tuple(int(meta[k]) for k in ("C", "H", "W") if k in meta)
    if len(shape) == 3 and ds.shape != shape:
        raise DatasetFormatError(f"{root}: images are {ds.shape}, meta.txt declares {shape}")
    return ds


def joint_label_spaces(source_root: str | os.PathLike, target_root: str | os.PathLike) -> LabelSpaces:
    sm, tm = read_meta(source_root), read_meta(target_root)
    return LabelSpaces(int(sm["num_ids"]), int(sm["num_cams"]), int(tm["num_cams"]))


def save_split(ds: Dataset, split_dir: str | os.PathLike) -> None:
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    for fname, img in zip(ds.filenames, ds.images):
        arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        # fixed PNG encoder settings keep the bytes reproducible
        Image.fromarray(arr).save(split_dir / fname, format="PNG", compress_level=6)


def quantize(images: np.ndarray) -> np.ndarray:
    """Round-trip images through 8-bit storage precision."""
    return (np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).astype(np.float32)) / np.float32(255.0)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_padding: int = 0
    flip_prob: float = 0.0
    erase_prob: float = 0.0
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    erase_value: float = 0.0

    def validate(self) -> None:
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentConfigError(f"erase area range must satisfy 0 < lo <= hi <= 1, got {self.erase_area}")
        if self.crop_padding < 0:
            raise AugmentConfigError("crop padding must be non-negative")
        for p in (self.flip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise AugmentConfigError(f"probability out of range: {p}")
        a, b = self.erase_aspect
        if not 0 < a <= b:
            raise AugmentConfigError(f"bad erase aspect range {self.erase_aspect}")


def sample_erase_box(rng: np.random.Generator, h: int, w: int, cfg: AugmentConfig, attempts: int = 100):
    """Draw (top, left, eh, ew) for random erasing, or None if no box fits."""
    area = h * w
    for _ in range(attempts):
        target = rng.uniform(*cfg.erase_area) * area
        aspect = np.exp(rng.uniform(np.log(cfg.erase_aspect[0]), np.log(cfg.erase_aspect[1])))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def augment_image(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Random crop (pad then crop back), horizontal flip, random erasing, in that order."""
    out = image
    c, h, w = image.shape
    if cfg.crop_padding > 0:
        p = cfg.crop_padding
        padded = np.pad(image, ((0, 0), (p, p), (p, p)), mode="edge")
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        out = padded[:, top : top + h, left : left + w]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        box = sample_erase_box(rng, h, w, cfg)
        if box is not None:
            top, left, eh, ew = box
            out = out.copy()
            out[:, top : top + eh, left : left + ew] = cfg.erase_value
    return np.ascontiguousarray(out)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    cfg.validate()
    return Sample(augment_image(sample.image, rng, cfg), sample.person_id, sample.camera_id, sample.domain)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator so augmentation depends only on (seed, epoch, sample index)."""
    return np.random.default_rng([seed, epoch, index])


# -------------------------------------------------------------------- batching


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    cs: np.ndarray
    xt: np.ndarray
    ct: np.ndarray
    source_index: np.ndarray
    target_index: np.ndarray

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.ys), len(self.ct)


def make_batches(
    source: Dataset,
    target: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    augment_cfg: AugmentConfig | None = None,
    augment_seed: int = 0,
    epoch: int = 0,
) -> Iterator[Batch]:
    """One epoch of paired batches.

    The longer dataset sets the epoch length and ends with a partial batch;
    the shorter one is re-permuted each time it runs out.  Source and target
    permutations are drawn independently from ``rng``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(source) == 0 or len(target) == 0:
        raise EmptyDatasetError("both source and target datasets must be non-empty")
    n = max(len(source), len(target))
    num_batches = -(-n // batch_size)
    s_idx = _stream(rng, len(source), n, num_batches, batch_size)
    t_idx = _stream(rng, len(target), n, num_batches, batch_size)
    for b in range(num_batches):
        si, ti = s_idx[b], t_idx[b]
        xs, xt = source.images[si], target.images[ti]
        if augment_cfg is not None:
            xs = np.stack([augment_image(source.images[i], augment_rng(augment_seed, epoch, int(i)), augment_cfg) for i in si])
            xt = np.stack(
                [augment_image(target.images[i], augment_rng(augment_seed, epoch, 1_000_003 + int(i)), augment_cfg) for i in ti]
            )
        yield Batch(xs, source.pids[si], source.cams[si], xt, target.cams[ti], si, ti)


def _stream(rng: np.random.Generator, size: int, n: int, num_batches: int, batch_size: int) -> list[np.ndarray]:
    """Batch index lists for one stream.

    The longest stream is cut into consecutive batches with a partial final
    batch.  A shorter stream is recycled through fresh permutations and always
    fills whole batches.
    """
    sizes = [min(batch_size, n - b * batch_size) for b in range(num_batches)]
    if size < n:
        sizes = [batch_size] * num_batches
    need = sum(sizes)
    chunks = []
    while need > 0:
        chunks.append(rng.permutation(size))
        need -= size
    flat = np.concatenate(chunks)
    bounds = np.cumsum([0] + sizes)
    return [flat[bounds[b] : bounds[b + 1]] for b in range(num_batches)]
