"""Registered finite-difference checks for every loss the trainer optimises.

Network losses are checked along a few random directions through the
whole parameter vector (``p = p0 + D x`` with ``x`` the checked tensor),
which exercises every parameter while keeping each check small.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, finite_diff_check
from .matching import FeatureGrid
from .objectcorr import ANNOTATED, DISCOVERED, Proposal, ocl_loss, roi_embed_many
from .pixelcorr import anchor_affinity, pcl_loss, pseudo_labels, sample_anchor_grid
from .segnet import NetConfig, decode_masks, encode_keys, encode_values, grid_at, init_params, segmentation_loss

TINY_NET = NetConfig(key_dim=4, value_dim=4, hidden1=3, hidden2=4, dec_hidden=4, max_objects=2)
TINY_SIDE = 16
N_DIRECTIONS = 6


def _flat_params(params):
    names = list(params)
    sizes = [params[k].size for k in names]
    flat = np.concatenate([params[k].data.ravel() for k in names])
    return names, sizes, flat


def _perturbed(params, directions, x: Tensor) -> dict:
    names, sizes, flat = _flat_params(params)
    p = dc.add(Tensor(flat), dc.reshape(dc.matmul(Tensor(directions), dc.reshape(x, (-1, 1))), (-1,)))
    out, start = {}, 0
    for k, n in zip(names, sizes):
        out[k] = dc.reshape(dc.take(p, np.arange(start, start + n)), params[k].shape)
        start += n
    return out


def _toy_sequence(rng, n_frames=3):
    frames = rng.uniform(0.0, 1.0, size=(n_frames, 3, TINY_SIDE, TINY_SIDE))
    masks = np.zeros((n_frames, TINY_SIDE, TINY_SIDE), np.int64)
    for t in range(n_frames):
        y, x = rng.integers(0, TINY_SIDE // 2, size=2)
        masks[t, y:y + 8, x:x + 8] = 1
        y, x = rng.integers(0, TINY_SIDE // 2, size=2)
        masks[t, y:y + 6, x:x + 6] = 2
    return frames, masks


def seg_rollout(params, frames, masks, cfg: NetConfig = TINY_NET) -> Tensor:
    """Mini-sequence segmentation loss: frame 0 with its mask in memory, later frames predicted."""
    keys, skips = encode_keys(params, frames)
    n = frames.shape[0]
    mem_k = [grid_at(keys, 0).values]
    v0 = encode_values(params, frames[:1], masks[:1], cfg)
    mem_v = [dc.reshape(dc.take(v0, 0, axis=0), (v0.shape[1], -1))]
    losses = []
    for t in range(1, n):
        q = grid_at(keys, t)
        aff = dc.softmax(dc.pairwise_similarity(dc.concat(mem_k, axis=1), q.values, cfg.measure), axis=0)
        vq = dc.matmul(dc.concat(mem_v, axis=1), aff)
        vq = dc.reshape(vq, (1, vq.shape[0], q.height, q.width))
        logits = decode_masks(params, vq, dc.take(skips, np.array([t]), axis=0))
        losses.append(segmentation_loss(logits, masks[t:t + 1], cfg.n_classes))
        pred = np.argmax(logits.data, axis=1)
        v = encode_values(params, frames[t:t + 1], pred, cfg)
        mem_k.append(q.values)
        mem_v.append(dc.reshape(dc.take(v, 0, axis=0), (v.shape[1], -1)))
    return dc.scale(dc.sum_all(dc.stack(losses)), 1.0 / len(losses))


def _random_grid(rng, c, h, w, scale=1.0):
    return rng.normal(0.0, scale, size=(c, h * w))


def _pcl_case(rng, x: Tensor, c, h, w, n_neg, mode="both", form="mean"):
    n = h * w
    kt1 = FeatureGrid(dc.reshape(dc.take(x, np.arange(c * n)), (c, n)), h, w)
    anchor_src = FeatureGrid(dc.reshape(dc.take(x, np.arange(c * n, 2 * c * n)), (c, n)), h, w)
    negs = dc.reshape(dc.take(x, np.arange(2 * c * n, 2 * c * n + c * n_neg)), (c, n_neg))
    anchors = sample_anchor_grid(anchor_src, (2, 2), rng_seed=int(rng.integers(2 ** 31)))
    kt = FeatureGrid(Tensor(x.data[:c * n].reshape(c, n) + 0.1), h, w)
    frozen = type(anchors)(anchors.source_frame, anchors.positions, Tensor(anchors.features.data), anchors.grid)
    labels = pseudo_labels(anchor_affinity(kt, frozen))
    return pcl_loss(kt1, anchors, labels, negs, sample_ratio=1.0 / 5e4, form=form, negative_mode=mode)


def check_pcl(seed: int, mode="both", form="mean"):
    rng = np.random.default_rng(seed)
    c, h, w, n_neg = 3, 4, 4, 8
    x0 = rng.normal(0.0, 0.5, size=2 * c * h * w + c * n_neg)
    case_rng_seed = int(rng.integers(2 ** 31))
    return finite_diff_check(lambda x: _pcl_case(np.random.default_rng(case_rng_seed), x, c, h, w, n_neg, mode, form),
                             Tensor(x0))


def _ocl_case(x: Tensor, c, h, w, boxes_a, boxes_b, positives, n_neg, form="mean"):
    n = h * w
    fa = FeatureGrid(dc.reshape(dc.take(x, np.arange(c * n)), (c, n)), h, w)
    fb = FeatureGrid(dc.reshape(dc.take(x, np.arange(c * n, 2 * c * n)), (c, n)), h, w)
    negs = dc.reshape(dc.take(x, np.arange(2 * c * n, 2 * c * n + c * n_neg)), (c, n_neg))
    qa = roi_embed_many(fa, boxes_a)
    pb = roi_embed_many(fb, boxes_b)
    return ocl_loss(qa, pb, positives, negs, "cosine", 1.0, form)


def _random_boxes(rng, k, side):
    out = []
    for _ in range(k):
        w, h = rng.uniform(4, side * 0.7, size=2)
        x, y = rng.uniform(w / 2, side - w / 2), rng.uniform(h / 2, side - h / 2)
        out.append(Proposal(float(x), float(y), float(w), float(h), DISCOVERED))
    return out


def check_ocl(seed: int, form="mean"):
    rng = np.random.default_rng(seed)
    c, h, w, n_neg = 3, 4, 4, 4
    side = 4 * h
    boxes_a, boxes_b = _random_boxes(rng, 3, side), _random_boxes(rng, 3, side)
    x0 = rng.normal(0.0, 1.0, size=2 * c * h * w + c * n_neg)
    positives = {0: 1, 2: 0}
    return finite_diff_check(lambda x: _ocl_case(x, c, h, w, boxes_a, boxes_b, positives, n_neg, form), Tensor(x0))


def _net_directions(params, rng, k=N_DIRECTIONS):
    _, _, flat = _flat_params(params)
    d = rng.normal(0.0, 1.0, size=(flat.size, k))
    return d / np.linalg.norm(d, axis=0) * 0.1


def check_seg(seed: int):
    rng = np.random.default_rng(seed)
    params = init_params(TINY_NET, seed)
    frames, masks = _toy_sequence(rng)
    d = _net_directions(params, rng)
    return finite_diff_check(lambda x: seg_rollout(_perturbed(params, d, x), frames, masks), Tensor(np.zeros(d.shape[1])))


def composed_loss(params, frames, masks, alpha, beta, rng_seed, cfg: NetConfig = TINY_NET) -> Tensor:
    """Segmentation + alpha * (pixel + beta * object) on one toy sequence, all through the key encoder."""
    rng = np.random.default_rng(rng_seed)
    l_seg = seg_rollout(params, frames, masks, cfg)
    keys, _ = encode_keys(params, frames)
    kt, kt1, ktau = grid_at(keys, 0), grid_at(keys, 1), grid_at(keys, 2)
    anchors = sample_anchor_grid(ktau, (2, 2), rng_seed=int(rng.integers(2 ** 31)))
    frozen_kt = FeatureGrid(Tensor(kt.values.data), kt.height, kt.width)
    frozen = type(anchors)(anchors.source_frame, anchors.positions, Tensor(anchors.features.data), anchors.grid)
    labels = pseudo_labels(anchor_affinity(frozen_kt, frozen, cfg.measure))
    negs = dc.take(kt.values, np.arange(0, kt.n_positions, 3), axis=1)
    l_pcl = pcl_loss(kt1, anchors, labels, negs, measure=cfg.measure)
    boxes = [Proposal(5.0, 6.0, 8.0, 9.0, ANNOTATED, 1), Proposal(10.0, 9.0, 9.0, 10.0, DISCOVERED),
             Proposal(8.0, 8.0, 12.0, 12.0, DISCOVERED)]
    qa = roi_embed_many(kt, boxes)
    pb = roi_embed_many(ktau, boxes[::-1])
    l_ocl = ocl_loss(qa, pb, {0: 2, 1: 1}, roi_embed_many(kt1, boxes[1:]))
    return dc.add(l_seg, dc.scale(dc.add(l_pcl, dc.scale(l_ocl, beta)), alpha))


def check_total(seed: int, alpha: float = 0.2, beta: float = 0.5):
    rng = np.random.default_rng(seed)
    params = init_params(TINY_NET, seed)
    frames, masks = _toy_sequence(rng)
    d = _net_directions(params, rng)
    case_seed = int(rng.integers(2 ** 31))
    return finite_diff_check(lambda x: composed_loss(_perturbed(params, d, x), frames, masks, alpha, beta, case_seed),
                             Tensor(np.zeros(d.shape[1])))


SUITE = {"seg": check_seg, "pcl": check_pcl, "ocl": check_ocl, "total": check_total}


@dataclass
class SuiteResult:
    name: str
    seeds: int
    max_rel_err: float
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def run_suite(names=None, seeds: int = 100, tol: float = 1e-4, first_seed: int = 0) -> list[SuiteResult]:
    out = []
    for name in names or SUITE:
        t0 = time.perf_counter()
        worst, failures = 0.0, []
        for s in range(first_seed, first_seed + seeds):
            rep = SUITE[name](s)
            worst = max(worst, rep.max_rel_err)
            if rep.max_rel_err >= tol:
                failures.append(s)
        out.append(SuiteResult(name, seeds, worst, failures, time.perf_counter() - t0))
    return out
