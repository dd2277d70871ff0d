"""Object-level coherence correspondence.

Box proposals are filtered and clustered, pooled into embeddings from the
key features, paired across two distant frames by a maximum-weight
bipartite matching, and contrasted against objects from other videos.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DegenerateInputError, DimensionError, StateError
from .matching import FeatureGrid

ANNOTATED = "annotated"
DISCOVERED = "discovered"

ASPECT_RANGE = (1.0 / 3.0, 3.0)
AREA_RANGE = (0.3 ** 2, 0.8 ** 2)
CLUSTER_CELL = 32
_REL = 1e-12


@dataclass(frozen=True)
class Proposal:
    """Axis-aligned box given by its centre and extent, in pixels."""

    x: float
    y: float
    w: float
    h: float
    source: str = DISCOVERED
    object_id: int = -1

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1, source=DISCOVERED, object_id=-1) -> "Proposal":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, source, object_id)


@dataclass
class ProposalSet:
    frame: int
    proposals: list = field(default_factory=list)
    cluster_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.proposals)

    def subset(self, sources) -> "ProposalSet":
        keep = [i for i, p in enumerate(self.proposals) if p.source in sources]
        return ProposalSet(self.frame, [self.proposals[i] for i in keep], [self.cluster_ids[i] for i in keep])


def cluster_id(p: Proposal, width: int, cell: int = CLUSTER_CELL) -> int:
    ncols = -(-width // cell)
    col = min(max(int(p.x // cell), 0), ncols - 1)
    row = max(int(p.y // cell), 0)
    return row * ncols + col


def _inside_image(p: Proposal, width: int, height: int) -> bool:
    x0, y0, x1, y1 = p.corners
    return min(x1, width) > max(x0, 0) and min(y1, height) > max(y0, 0)


def keeps(p: Proposal, width: int, height: int) -> bool:
    """Aspect and scale rule, closed intervals."""
    if p.w <= 0 or p.h <= 0 or not _inside_image(p, width, height):
        return False
    if p.source == ANNOTATED:
        return True
    lo, hi = ASPECT_RANGE
    if p.w * (1 + _REL) < lo * p.h or p.w > hi * p.h * (1 + _REL):
        return False
    frac = (p.w * p.h) / float(width * height)
    return AREA_RANGE[0] * (1 - _REL) <= frac <= AREA_RANGE[1] * (1 + _REL)


def filter_proposals(raw, width: int, height: int, frame: int = 0, cell: int = CLUSTER_CELL) -> ProposalSet:
    kept = [p for p in raw if keeps(p, width, height)]
    return ProposalSet(frame, kept, [cluster_id(p, width, cell) for p in kept])


def cluster_and_sample_Q(pset: ProposalSet, q_size: int = 3, rng_seed=0) -> list[int]:
    """Indices of at most one proposal per occupied grid cell, ``min(q_size, #cells)`` in total."""
    if len(pset) == 0:
        return []
    cells: dict[int, list[int]] = {}
    for i, cid in enumerate(pset.cluster_ids):
        cells.setdefault(cid, []).append(i)
    order = sorted(cells)
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(order), size=min(q_size, len(order)), replace=False)
    return [int(cells[order[c]][rng.integers(len(cells[order[c]]))]) for c in sorted(chosen)]


# ---------------------------------------------------------------- RoI pooling


def roi_weights(p: Proposal, height: int, width: int, stride: int = 4, pool=(3, 3)) -> np.ndarray:
    """Lattice weights whose dot product with a feature map is the pooled RoI feature.

    The box is mapped to lattice units (cell ``c`` is centred on pixel
    ``stride*c + stride/2``), an ``r×r`` grid of bin-centre points is
    bilinearly sampled and the samples are averaged.
    """
    x0, y0, x1, y1 = p.corners
    u0, u1 = x0 / stride - 0.5, x1 / stride - 0.5
    v0, v1 = y0 / stride - 0.5, y1 / stride - 0.5
    if u1 <= -0.5 or v1 <= -0.5 or u0 >= width - 0.5 or v0 >= height - 0.5 or u1 <= u0 or v1 <= v0:
        raise DegenerateInputError(f"box {p.corners} lies outside the {height}x{width} feature lattice")
    ry, rx = pool
    v = np.clip(v0 + (np.arange(ry) + 0.5) * (v1 - v0) / ry, 0.0, height - 1.0)
    u = np.clip(u0 + (np.arange(rx) + 0.5) * (u1 - u0) / rx, 0.0, width - 1.0)
    r0 = np.floor(v).astype(np.int64)
    c0 = np.floor(u).astype(np.int64)
    r1 = np.minimum(r0 + 1, height - 1)
    c1 = np.minimum(c0 + 1, width - 1)
    fv = (v - r0)[:, None]
    fu = (u - c0)[None, :]
    share = 1.0 / (ry * rx)
    wts = np.zeros(height * width)
    for rows, wr in ((r0, 1 - fv), (r1, fv)):
        for cols, wc in ((c0, 1 - fu), (c1, fu)):
            np.add.at(wts, (rows[:, None] * width + cols[None, :]).ravel(), (share * wr * wc).ravel())
    return wts


@functools.lru_cache(maxsize=1 << 16)
def _cached_weights(box: tuple, height: int, width: int, stride: int, pool: tuple) -> np.ndarray:
    w = roi_weights(Proposal(*box), height, width, stride, pool)
    w.flags.writeable = False
    return w


def roi_embed_many(features: FeatureGrid, proposals, stride: int = 4, pool=(3, 3)) -> Tensor:
    """Pooled embeddings of several boxes as the columns of a ``C×n`` tensor."""
    if not proposals:
        raise StateError("roi_embed_many with no proposals")
    pool = (int(pool[0]), int(pool[1]))
    wm = np.stack([_cached_weights((p.x, p.y, p.w, p.h), features.height, features.width, stride, pool)
                   for p in proposals], axis=1)
    return dc.matmul(features.values, Tensor(wm))


def roi_embed(features: FeatureGrid, p: Proposal, stride: int = 4, pool=(3, 3)) -> Tensor:
    return dc.reshape(roi_embed_many(features, [p], stride, pool), (features.channels,))


# ---------------------------------------------------------------- matching


@dataclass
class AssignmentMatrix:
    table: np.ndarray
    total: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.table))]


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method for ``n <= m``; returns column per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # row (1-based) assigned to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of[owner[j] - 1] = j - 1
    return col_of


def hungarian_match(sim) -> AssignmentMatrix:
    """Maximum-weight matching with at most one partner per row and per column.

    Negative-weight pairs are never worth taking, so they are clipped to
    zero for the solve and dropped from the result; rows whose only
    options are negative stay unmatched.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise StateError("hungarian_match on an empty table")
    flipped = sim.shape[0] > sim.shape[1]
    w = sim.T if flipped else sim
    col_of = _min_cost_assignment(-np.maximum(w, 0.0))
    table = np.zeros(w.shape, dtype=np.int64)
    for i, j in enumerate(col_of):
        if j >= 0 and w[i, j] >= 0:
            table[i, j] = 1
    if flipped:
        table = table.T
    total = float(sum(sim[i, j] for i, j in zip(*np.nonzero(table))))
    return AssignmentMatrix(table, total)


def positive_indices(assign: AssignmentMatrix) -> dict[int, int]:
    out = {}
    for i, row in enumerate(assign.table):
        if row.any():
            out[i] = int(np.argmax(row))
    return out


def ocl_loss(q_embeds: Tensor, pprime_embeds: Tensor, positives: dict, negatives: Tensor | None = None,
             measure: str = "cosine", temperature: float = 1.0, form: str = "mean") -> Tensor:
    """Contrast each matched pair ``(q_i, p'_j*)`` against the cross-video objects.

    Embeddings are columns; the default cosine measure normalises them.
    With no positives the loss is a constant zero.
    """
    if not positives:
        return Tensor(0.0)
    if q_embeds.shape[0] != pprime_embeds.shape[0]:
        raise DimensionError("query and candidate embeddings differ in dimension")
    rows = np.array(sorted(positives), dtype=np.int64)
    cols = np.array([positives[i] for i in rows], dtype=np.int64)
    n = len(rows)
    q = dc.take(q_embeds, rows, axis=1)
    pos = dc.pick(dc.pairwise_similarity(q, pprime_embeds, measure), np.arange(n), cols)
    pos = dc.reshape(pos, (n, 1))
    if negatives is not None and negatives.shape[1] > 0:
        logits = dc.concat([pos, dc.pairwise_similarity(q, negatives, measure)], axis=1)
    else:
        logits = pos
    if temperature != 1.0:
        logits = dc.scale(logits, 1.0 / temperature)
    target = np.zeros(n, dtype=np.int64)
    if form == "mean":
        return dc.cross_entropy(logits, target)
    logp = dc.pick(dc.log_softmax(logits, axis=1), np.arange(n), target)
    return dc.scale(dc.logsumexp(logp), -1.0)


# ---------------------------------------------------------------- proposal files

_SOURCE_FLAGS = {"annotated": ANNOTATED, "a": ANNOTATED, "discovered": DISCOVERED, "d": DISCOVERED}


def write_proposals(path, per_frame) -> None:
    """One box per line: ``frame x_center y_center width height source [object_id]``."""
    lines = []
    for frame, props in sorted(per_frame.items()):
        items = props.proposals if isinstance(props, ProposalSet) else props
        for p in items:
            line = f"{frame} {p.x:.17g} {p.y:.17g} {p.w:.17g} {p.h:.17g} {p.source}"
            if p.object_id >= 0:
                line += f" {p.object_id}"
            lines.append(line)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_proposals(path) -> dict[int, list[Proposal]]:
    out: dict[int, list[Proposal]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (6, 7) or parts[5].lower() not in _SOURCE_FLAGS:
            raise ValueError(f"{path}:{lineno}: malformed proposal line")
        frame = int(parts[0])
        x, y, w, h = (float(v) for v in parts[1:5])
        oid = int(parts[6]) if len(parts) == 7 else -1
        out.setdefault(frame, []).append(Proposal(x, y, w, h, _SOURCE_FLAGS[parts[5].lower()], oid))
    return out
