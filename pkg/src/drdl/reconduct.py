"""Dataset re-conduction through a camera adjacency graph.

Each identity keeps the images of its home camera (the camera holding most of
its images, ties to the lowest index).  Every graph edge touching the home
camera fires independently with the movement probability; a fired edge keeps
the identity's images from that neighbour.  Everything else is dropped, so
many identities end up seen by a single camera.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .data import Dataset, DatasetFormatError, concat_datasets


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CameraGraph:
    """Undirected graph over zero-based, per-domain camera indices."""

    num_cameras: int
    edges: frozenset[tuple[int, int]]

    def __init__(self, num_cameras: int, edges: Iterable[tuple[int, int]]):
        if num_cameras < 1:
            raise GraphError("a camera graph needs at least one camera")
        norm = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise GraphError(f"self-loop on camera {a}")
            if not (0 <= a < num_cameras and 0 <= b < num_cameras):
                raise GraphError(f"edge ({a}, {b}) outside 0..{num_cameras - 1}")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "num_cameras", int(num_cameras))
        object.__setattr__(self, "edges", frozenset(norm))

    def neighbors(self, cam: int) -> list[int]:
        return sorted({b if a == cam else a for a, b in self.edges if cam in (a, b)})

    @classmethod
    def line(cls, n: int) -> "CameraGraph":
        return cls(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def ring(cls, n: int) -> "CameraGraph":
        edges = [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(i, i + 1) for i in range(n - 1)]
        return cls(n, edges)

    @classmethod
    def complete(cls, n: int) -> "CameraGraph":
        return cls(n, [(i, j) for i in range(n) for j in range(i + 1, n)])

    @classmethod
    def grid(cls, rows: int, cols: int) -> "CameraGraph":
        """Cameras laid out row-major on a road grid, linked to 4-neighbours."""
        edges = []
        for r in range(rows):
            for c in range(cols):
                i = r * cols + c
                if c + 1 < cols:
                    edges.append((i, i + 1))
                if r + 1 < rows:
                    edges.append((i, i + cols))
        return cls(rows * cols, edges)

    @classmethod
    def parse(cls, text: str, num_cameras: int) -> "CameraGraph":
        """``line``, ``ring``, ``complete``, ``grid:RxC`` or explicit ``0-1,1-2`` edges."""
        text = text.strip()
        if text in ("line", "ring", "complete"):
            return getattr(cls, text)(num_cameras)
        if text.startswith("grid:"):
            r, c = (int(v) for v in text[5:].lower().split("x"))
            g = cls.grid(r, c)
            if g.num_cameras != num_cameras:
                raise GraphError(f"grid {r}x{c} has {g.num_cameras} cameras, dataset has {num_cameras}")
            return g
        edges = []
        for tok in filter(None, (t.strip() for t in text.split(","))):
            try:
                a, b = tok.split("-")
                edges.append((int(a), int(b)))
            except ValueError:
                raise GraphError(f"bad edge {tok!r}; expected A-B") from None
        return cls(num_cameras, edges)


@dataclass(frozen=True)
class ReconductConfig:
    graph: CameraGraph
    move_probability: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.move_probability <= 1.0:
            raise ValueError(f"move probability must lie in [0, 1], got {self.move_probability}")


@dataclass
class ReconductStats:
    identities: int
    images: int
    cameras: int
    single_camera_fraction: float
    # per undirected edge: (draws, retentions), counted over every incident edge of each home camera
    edge_draws: dict[tuple[int, int], int] = field(default_factory=dict)
    edge_retained: dict[tuple[int, int], int] = field(default_factory=dict)

    def retention_frequency(self, edge: tuple[int, int]) -> float:
        edge = (min(edge), max(edge))
        n = self.edge_draws.get(edge, 0)
        return self.edge_retained.get(edge, 0) / n if n else float("nan")


def home_camera(local_cams: np.ndarray) -> int:
    counts = np.bincount(local_cams)
    return int(np.argmax(counts))  # argmax returns the first maximum


def dataset_stats(ds: Dataset) -> tuple[int, int, int, float]:
    """(identities, images, cameras, single-camera fraction), ignoring pid -1."""
    known = ds.pids >= 0
    pids, cams = ds.pids[known], ds.cams[known]
    ids = np.unique(pids)
    single = sum(len(np.unique(cams[pids == p])) == 1 for p in ids)
    return len(ids), len(ds), len(np.unique(ds.cams)), (single / len(ids) if len(ids) else 0.0)


def reconduct(ds: Dataset, config: ReconductConfig) -> tuple[Dataset, ReconductStats]:
    """Resample ``ds`` by home camera plus Bernoulli edge retention.

    Images without an identity (pid -1) have nothing to move and pass through.
    Each identity draws from its own generator seeded by (seed, pid), so the
    result doesn't depend on iteration order.
    """
    graph = config.graph
    offset = min(ds.label_spaces.camera_range(ds.domain), default=0)
    local = ds.cams - offset
    if len(local) and (local.min() < 0 or local.max() >= graph.num_cameras):
        raise DatasetFormatError(
            f"camera labels span {local.min()}..{local.max()}, graph has {graph.num_cameras} cameras"
        )
    keep = ds.pids < 0
    draws = {e: 0 for e in sorted(graph.edges)}
    kept = {e: 0 for e in sorted(graph.edges)}
    for pid in np.unique(ds.pids[ds.pids >= 0]):
        rows = ds.pids == pid
        home = home_camera(local[rows])
        rng = np.random.default_rng([config.seed, int(pid)])
        allowed = {home}
        for nb in graph.neighbors(home):
            edge = (min(home, nb), max(home, nb))
            draws[edge] += 1
            if rng.random() < config.move_probability:
                kept[edge] += 1
                allowed.add(nb)
        keep |= rows & np.isin(local, sorted(allowed))
    out = ds.subset(np.flatnonzero(keep))
    n_ids, n_img, n_cam, single = dataset_stats(out)
    return out, ReconductStats(n_ids, n_img, n_cam, single, draws, kept)


def first_per_camera_split(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Query = first image of every (identity, camera) pair in file order; gallery = the rest."""
    seen = set()
    q = []
    for i, (p, c) in enumerate(zip(ds.pids, ds.cams)):
        if (p, c) not in seen:
            seen.add((p, c))
            q.append(i)
    qset = set(q)
    g = [i for i in range(len(ds)) if i not in qset]
    return ds.subset(np.array(q, dtype=np.int64)), ds.subset(np.array(g, dtype=np.int64))


def swap_splits(splits: Mapping[str, Dataset]) -> dict[str, Dataset]:
    """Use the test images (query + gallery) for training and the old training set for testing.

    The old training set is re-split into query and gallery by first image per
    (identity, camera).  File names are unique across splits, so no renaming
    is needed.
    """
    train = concat_datasets([splits["query"], splits["gallery"]])
    order = np.argsort(np.array(train.filenames), kind="stable")
    train = train.subset(order)
    query, gallery = first_per_camera_split(splits["train"])
    return {"train": train, "query": query, "gallery": gallery}


STATS_COLUMNS = [
    "dataset", "ids", "train_ids", "train_images", "probe_ids", "probe_images",
    "gallery_ids", "gallery_images", "cameras", "single_camera_fraction",
]


def stats_row(name: str, splits: Mapping[str, Dataset | None]) -> dict[str, str]:
    """One row in the layout of the dataset comparison table; missing splits count as empty."""
    def ids(ds):
        return set() if ds is None else set(int(p) for p in ds.pids if p >= 0)

    tr, q, g = (splits.get(k) for k in ("train", "query", "gallery"))
    n = lambda ds: 0 if ds is None else len(ds)  # noqa: E731
    cams = set()
    for ds in (tr, q, g):
        if ds is not None:
            cams |= set(int(c) for c in ds.cams)
    single = dataset_stats(tr)[3] if tr is not None and len(tr) else 0.0
    return {
        "dataset": name,
        "ids": str(len(ids(tr) | ids(q) | ids(g))),
        "train_ids": str(len(ids(tr))),
        "train_images": str(n(tr)),
        "probe_ids": str(len(ids(q))),
        "probe_images": str(n(q)),
        "gallery_ids": str(len(ids(g))),
        "gallery_images": str(n(g)),
        "cameras": str(len(cams)),
        "single_camera_fraction": f"{single:.4f}",
    }


def stats_table(rows: list[dict[str, str]]) -> tuple[str, str]:
    """Render stats rows as (CSV text, aligned plain text)."""
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=STATS_COLUMNS, lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    widths = [max(len(c), *(len(r[c]) for r in rows)) if rows else len(c) for c in STATS_COLUMNS]
    lines = ["  ".join(c.rjust(w) for c, w in zip(STATS_COLUMNS, widths))]
    for r in rows:
        lines.append("  ".join(r[c].rjust(w) for c, w in zip(STATS_COLUMNS, widths)))
    return buf.getvalue(), "\n".join(lines) + "\n"
