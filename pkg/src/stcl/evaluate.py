"""Region similarity J, contour accuracy F and correspondence accuracy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .segnet import STRIDE, NetConfig, encode_keys, grid_at, infer_sequence
from .synthvid import VideoClip, ground_truth_correspondence


def region_J(pred, truth, object_id: int) -> float:
    """Intersection over union of one object's masks; 1.0 when both are empty."""
    p = np.asarray(pred) == object_id
    t = np.asarray(truth) == object_id
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Object pixels with at least one 4-neighbour outside the object (image border counts as outside)."""
    m = np.pad(np.asarray(mask, bool), 1)
    inner = m[1:-1, 1:-1]
    interior = inner & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def _disk_offsets(radius: int):
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _dilate(b: np.ndarray, radius: int) -> np.ndarray:
    h, w = b.shape
    out = np.zeros_like(b)
    for dy, dx in _disk_offsets(radius):
        ys, yd = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
        xs, xd = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
        out[yd, xd] |= b[ys, xs]
    return out


def default_tol_radius(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape)))


def contour_F(pred, truth, object_id: int, tol_radius: int | None = None) -> float:
    """Boundary F-measure with matches accepted within a closed disk of ``tol_radius`` pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    r = default_tol_radius(truth.shape) if tol_radius is None else tol_radius
    bp = boundary(pred == object_id)
    bt = boundary(truth == object_id)
    np_, nt = bp.sum(), bt.sum()
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    precision = (bp & _dilate(bt, r)).sum() / np_
    recall = (bt & _dilate(bp, r)).sum() / nt
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def correspondence_accuracy(params, clip: VideoClip, t: int, t2: int, tol: int = 1,
                            measure: str = "neg_l2") -> float:
    """Fraction of object lattice cells whose argmax match in ``t2`` lies within ``tol`` cells of the truth.

    Each lattice cell is represented by the pixel at its centre
    (``STRIDE*r + STRIDE//2``); cells whose centre pixel has no ground-truth
    correspondence are skipped.
    """
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    keys, _ = encode_keys(frozen, clip.frames[[t, t2]])
    src, dst = grid_at(keys, 0), grid_at(keys, 1)
    corr = ground_truth_correspondence(clip, t, t2).as_dict()
    off = STRIDE // 2
    rows, targets = [], []
    for r in range(src.height):
        for c in range(src.width):
            hit = corr.get((STRIDE * r + off, STRIDE * c + off))
            if hit is not None:
                rows.append(r * src.width + c)
                targets.append((hit[0] // STRIDE, hit[1] // STRIDE))
    if not rows:
        return float("nan")
    q = Tensor(src.values.data[:, rows])
    sim = dc.pairwise_similarity(q, dst.values, measure).data
    best = np.argmax(sim, axis=1)
    by, bx = np.divmod(best, dst.width)
    ty, tx = np.array(targets).T
    ok = np.maximum(np.abs(by - ty), np.abs(bx - tx)) <= tol
    return float(ok.mean())


@dataclass
class EvalReport:
    per_object_J: dict = field(default_factory=dict)
    per_object_F: dict = field(default_factory=dict)
    J_mean: float = float("nan")
    F_mean: float = float("nan")
    JF_mean: float = float("nan")
    corr_acc: float = float("nan")
    clip_ids: list = field(default_factory=list)
    config_hash: str = ""

    def row(self) -> dict:
        return {"J": self.J_mean, "F": self.F_mean, "JF_mean": self.JF_mean, "corr_acc": self.corr_acc}


def evaluate_clips(params, clips, net: NetConfig, capacity: int = 8, insertion_stride: int = 1,
                   corr_tol: int = 1, config_hash: str = "", with_corr: bool = True) -> EvalReport:
    """Run inference on every clip and average J/F per object over the predicted frames."""
    rep = EvalReport(config_hash=config_hash)
    accs = []
    for ci, clip in enumerate(clips):
        cid = clip.clip_seed
        rep.clip_ids.append(cid)
        preds = infer_sequence(params, clip.frames, clip.masks[0], net, capacity, insertion_stride)
        for oid in clip.object_ids:
            js = [region_J(p, clip.masks[t + 1], oid) for t, p in enumerate(preds)]
            fs = [contour_F(p, clip.masks[t + 1], oid) for t, p in enumerate(preds)]
            rep.per_object_J[f"{cid}:{oid}"] = float(np.mean(js)) if js else 1.0
            rep.per_object_F[f"{cid}:{oid}"] = float(np.mean(fs)) if fs else 1.0
        if with_corr:
            for t in range(clip.T - 1):
                a = correspondence_accuracy(params, clip, t, t + 1, corr_tol, net.measure)
                if not math.isnan(a):
                    accs.append(a)
    if rep.per_object_J:
        rep.J_mean = float(np.mean(list(rep.per_object_J.values())))
        rep.F_mean = float(np.mean(list(rep.per_object_F.values())))
        rep.JF_mean = (rep.J_mean + rep.F_mean) / 2
    if accs:
        rep.corr_acc = float(np.mean(accs))
    return rep
