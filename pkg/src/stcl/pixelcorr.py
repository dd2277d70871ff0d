"""Pixel-level consistency correspondence: anchors, pseudo-labels and the PCL loss.

Features of frame ``t`` are matched against a sparse set of anchor
features from a third frame; the argmax match of every position becomes
the contrastive target for the same position in frame ``t+1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, LabelError, StateError
from .matching import OVER_COLS, AffinityMatrix, FeatureGrid

LOSS_FORMS = ("mean", "verbatim")
NEGATIVE_MODES = ("both", "inter", "intra")


@dataclass
class AnchorSet:
    source_frame: object
    positions: np.ndarray
    features: Tensor
    grid: tuple[int, int]

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class PseudoLabels:
    j_star: np.ndarray
    affinity: AffinityMatrix | None = None


def _cell_edges(extent: int, parts: int) -> np.ndarray:
    return (np.arange(parts + 1) * extent) // parts


def sample_anchor_grid(anchor: FeatureGrid, grid=(8, 8), rng_seed=0, source_frame=None,
                       grid_mode: str = "count") -> AnchorSet:
    """Draw one uniformly random lattice position from every cell of a grid.

    ``grid_mode="count"`` splits the lattice into ``rows×cols`` cells;
    ``grid_mode="stride"`` instead uses cells of ``rows×cols`` positions.
    """
    h, w = anchor.height, anchor.width
    rows, cols = int(grid[0]), int(grid[1])
    if grid_mode == "stride":
        if rows < 1 or cols < 1:
            raise DimensionError("anchor cell size must be positive")
        ys = np.append(np.arange(0, h, rows), h)
        xs = np.append(np.arange(0, w, cols), w)
    elif grid_mode == "count":
        if rows < 1 or cols < 1 or rows > h or cols > w:
            raise DimensionError(f"anchor grid {rows}x{cols} does not fit a {h}x{w} lattice")
        ys, xs = _cell_edges(h, rows), _cell_edges(w, cols)
    else:
        raise DimensionError(f"unknown anchor grid mode {grid_mode!r}")
    rng = np.random.default_rng(rng_seed)
    nr, nc = len(ys) - 1, len(xs) - 1
    y = rng.integers(np.repeat(ys[:-1], nc), np.repeat(ys[1:], nc))
    x = rng.integers(np.tile(xs[:-1], nr), np.tile(xs[1:], nr))
    positions = (y * w + x).astype(np.int64)
    feats = dc.take(anchor.values, positions, axis=1)
    return AnchorSet(source_frame, positions, feats, (len(ys) - 1, len(xs) - 1))


@dataclass(frozen=True)
class ViewMap:
    """Pixel coordinate map between an augmented view and its source frame."""

    x0: int
    y0: int
    width: int
    height: int
    flip: bool

    def to_source(self, x, y):
        x = np.asarray(x)
        xs = self.x0 + (self.width - 1 - x if self.flip else x)
        return xs, self.y0 + np.asarray(y)

    def from_source(self, x, y):
        x = np.asarray(x) - self.x0
        return (self.width - 1 - x if self.flip else x), np.asarray(y) - self.y0


@dataclass
class CrossView:
    image: np.ndarray
    view: ViewMap
    scale: float


def crop_side(extent: int, scale: float, multiple: int = 4) -> int:
    """Side length of a crop covering ``scale`` of the area, rounded half-up to ``multiple``."""
    side = multiple * math.floor(math.sqrt(scale) * extent / multiple + 0.5)
    return int(min(max(side, multiple), extent))


def cross_view_anchor(image: np.ndarray, rng_seed=0, scale_range=(0.6, 1.0), flip_prob: float = 0.5,
                      multiple: int = 4) -> CrossView:
    """Random area-scale crop plus optional horizontal flip of a ``[3,H,W]`` frame.

    The crop keeps the frame's aspect ratio and is not resampled, so its
    extents are multiples of ``multiple`` and stay encoder-compatible.
    """
    rng = np.random.default_rng(rng_seed)
    _, h, w = image.shape
    lo, hi = scale_range
    s = float(lo if hi <= lo else rng.uniform(lo, hi))
    cw, ch = crop_side(w, s, multiple), crop_side(h, s, multiple)
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    flip = bool(rng.random() < flip_prob)
    out = image[:, y0:y0 + ch, x0:x0 + cw]
    if flip:
        out = out[:, :, ::-1]
    return CrossView(np.ascontiguousarray(out), ViewMap(x0, y0, cw, ch, flip), s)


def anchor_affinity(kt: FeatureGrid, anchors: AnchorSet, measure: str = "neg_l2",
                    temperature: float = 1.0) -> AffinityMatrix:
    if len(anchors) == 0:
        raise StateError("anchor_affinity with an empty anchor set")
    sim = dc.pairwise_similarity(kt.values, anchors.features, measure)
    if temperature != 1.0:
        sim = dc.scale(sim, 1.0 / temperature)
    return AffinityMatrix(dc.softmax(sim, axis=1), OVER_COLS,
                          row_positions=np.arange(kt.n_positions), col_positions=anchors.positions)


def pseudo_labels(aff: AffinityMatrix) -> PseudoLabels:
    if aff.norm_axis != OVER_COLS:
        raise DimensionError("pseudo_labels needs an affinity normalised over anchors")
    # np.argmax returns the first maximum, i.e. ties go to the lowest anchor index
    return PseudoLabels(np.argmax(aff.table.data, axis=1).astype(np.int64), aff)


def pcl_loss(kt1: FeatureGrid, anchors: AnchorSet, labels: PseudoLabels, negatives: Tensor | None = None,
             sample_ratio: float = 1.0 / 5e4, measure: str = "neg_l2", temperature: float = 1.0,
             form: str = "mean", negative_mode: str = "both", positions=None) -> Tensor:
    """Contrastive loss pulling ``kt1(i)`` towards its pseudo-labelled anchor.

    ``negative_mode`` picks the denominator: ``intra`` keeps only the
    anchors, ``inter`` keeps the positive anchor plus the cross-video
    ``negatives``, ``both`` keeps all of them.  ``form="verbatim"`` sums the
    per-position probabilities inside a single log instead of averaging
    per-position log terms.
    """
    if form not in LOSS_FORMS:
        raise DimensionError(f"unknown loss form {form!r}")
    if negative_mode not in NEGATIVE_MODES:
        raise DimensionError(f"unknown negative mode {negative_mode!r}")
    j_star = np.asarray(labels.j_star, dtype=np.int64)
    if j_star.shape[0] != kt1.n_positions:
        raise DimensionError(f"{j_star.shape[0]} pseudo-labels for {kt1.n_positions} positions")
    if j_star.size and (j_star.min() < 0 or j_star.max() >= len(anchors)):
        raise LabelError("pseudo-label outside the anchor set")
    if positions is None:
        queries, targets = kt1.values, j_star
    else:
        positions = np.asarray(positions, dtype=np.int64)
        queries, targets = dc.take(kt1.values, positions, axis=1), j_star[positions]
    n = queries.shape[1]

    def logits_against(bank: Tensor) -> Tensor:
        s = dc.pairwise_similarity(queries, bank, measure)
        return dc.scale(s, 1.0 / temperature) if temperature != 1.0 else s

    if negatives is not None and negatives.shape[1] > 0:
        cap = max(1, int(round(1.0 / sample_ratio)))
        if negatives.shape[1] > cap:
            negatives = dc.take(negatives, np.arange(cap), axis=1)
    else:
        negatives = None

    if negative_mode == "intra" or negatives is None:
        logits, target = logits_against(anchors.features), targets
    elif negative_mode == "both":
        logits, target = logits_against(dc.concat([anchors.features, negatives], axis=1)), targets
    else:
        pos = dc.reshape(dc.pick(logits_against(anchors.features), np.arange(n), targets), (n, 1))
        logits, target = dc.concat([pos, logits_against(negatives)], axis=1), np.zeros(n, np.int64)

    if form == "mean":
        return dc.cross_entropy(logits, target)
    logp = dc.pick(dc.log_softmax(logits, axis=1), np.arange(n), target)
    return dc.scale(dc.logsumexp(logp), -1.0)
