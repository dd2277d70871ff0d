"""Combined objective, warm-up schedule, batch sampling and the training loop."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor
from .errors import CheckpointError, ConfigError, NumericError
from .evaluate import evaluate_clips
from .matching import FeatureGrid
from .objectcorr import (ANNOTATED, DISCOVERED, cluster_and_sample_Q, hungarian_match, ocl_loss,
                         positive_indices, roi_embed_many)
from .pixelcorr import anchor_affinity, cross_view_anchor, pcl_loss, pseudo_labels, sample_anchor_grid
from .segnet import (NetConfig, decode_masks, encode_keys, encode_values, grid_at, init_params,
                     load_checkpoint, save_checkpoint, segmentation_loss)
from .synthvid import ClipSpec, generate_clip, generate_proposals

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "alpha", "l_seg", "l_pcl", "l_ocl", "l_total", "J", "F", "JF_mean", "corr_acc"]


@dataclass
class TrainConfig:
    # data
    train_clips: int = 64
    eval_clips: int = 16
    train_seed_base: int = 1000
    eval_seed_base: int = 900000
    clip_T: int = 6
    clip_W: int = 64
    clip_H: int = 64
    n_objects: int = 3
    motion_range: int = 3
    texture_mode: str = "flat"
    occlusion: bool = True
    distractors_per_frame: int = 8
    proposal_jitter: int = 2
    # model
    key_dim: int = 16
    value_dim: int = 32
    hidden1: int = 16
    hidden2: int = 32
    dec_hidden: int = 32
    max_objects: int = 8
    measure: str = "neg_l2"
    key_context: int = 0
    memory_capacity: int = 8
    memory_stride: int = 1
    # objective
    alpha_max: float = 0.2
    warmup_steps: int = -1
    beta: float = 0.5
    use_pcl: bool = True
    use_ocl: bool = True
    loss_form: str = "mean"
    temperature: float = 1.0
    ocl_temperature: float = 1.0
    pcl_negative_mode: str = "both"
    anchor_grid_rows: int = 8
    anchor_grid_cols: int = 8
    anchor_grid_mode: str = "count"
    pcl_negatives: int = 256
    pcl_positions: int = 0
    sample_ratio: float = 2e-5
    p_view: float = 0.5
    view_scale_min: float = 0.6
    view_scale_max: float = 1.0
    ocl_sources: str = "both"
    q_size: int = 3
    ocl_negatives: int = 32
    roi_pool: int = 3
    cluster_cell: int = 32
    # optimisation
    batch_clips: int = 4
    frames_per_clip: int = 3
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 0.0
    total_steps: int = 300
    seed: int = 0
    init_seed: int = 0
    # bookkeeping
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_corr_tol: int = 1
    eval_with_corr: bool = True
    out_dir: str = "runs/default"

    def resolved_warmup(self) -> int:
        return max(0, int(round(0.1 * self.total_steps))) if self.warmup_steps < 0 else self.warmup_steps

    def net(self) -> NetConfig:
        return NetConfig(self.key_dim, self.value_dim, self.hidden1, self.hidden2, self.dec_hidden,
                         self.max_objects, self.measure, self.key_context)

    def clip_spec(self) -> ClipSpec:
        return ClipSpec(T=self.clip_T, W=self.clip_W, H=self.clip_H, n_objects=self.n_objects,
                        motion_range=self.motion_range, texture_mode=self.texture_mode,
                        occlusion=self.occlusion, max_objects=self.max_objects)

    def digest(self) -> str:
        text = ";".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self) if f.name != "out_dir")
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def validate(self) -> "TrainConfig":
        if self.alpha_max < 0:
            raise ConfigError("alpha_max must be >= 0")
        if self.alpha_max > 0.2:
            log.warning("alpha_max=%s lies outside the usual [0, 0.2] range", self.alpha_max)
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.use_pcl and (self.clip_T < 3 or self.frames_per_clip < 3):
            raise ConfigError("pixel-level correspondence needs clips and mini-sequences of >= 3 frames")
        if self.frames_per_clip < 2 or self.frames_per_clip > self.clip_T:
            raise ConfigError("frames_per_clip must lie in [2, clip_T]")
        if self.batch_clips < 1 or (self.train_clips > 0 and self.batch_clips > self.train_clips):
            raise ConfigError("batch_clips must lie in [1, train_clips]")
        if self.pcl_negative_mode not in ("both", "inter", "intra"):
            raise ConfigError(f"unknown pcl_negative_mode {self.pcl_negative_mode!r}")
        if self.ocl_sources not in ("both", "annotated", "discovered"):
            raise ConfigError(f"unknown ocl_sources {self.ocl_sources!r}")
        if self.loss_form not in ("mean", "verbatim"):
            raise ConfigError(f"unknown loss_form {self.loss_form!r}")
        if self.measure not in dc.MEASURES:
            raise ConfigError(f"unknown measure {self.measure!r}")
        if not 0.0 <= self.p_view <= 1.0:
            raise ConfigError("p_view must be a probability")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        return self


def _coerce(name: str, typ, raw: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def apply_overrides(cfg: TrainConfig, pairs: dict) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _coerce(key, types[key], raw) if isinstance(raw, str) else raw
    return replace(cfg, **kw)


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = apply_overrides(cfg, parse_config_text(text, str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


# ---------------------------------------------------------------- objective


def alpha_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up of the correspondence weight, capped at ``alpha_max``."""
    warm = cfg.resolved_warmup()
    if warm == 0 or step >= warm:
        return float(cfg.alpha_max)
    return float(Fraction(cfg.alpha_max) * Fraction(max(step, 0), warm))


def total_loss(l_seg, l_pcl, l_ocl, step: int, cfg: TrainConfig) -> Tensor:
    parts = [t if isinstance(t, Tensor) else Tensor(0.0 if t is None else t) for t in (l_seg, l_pcl, l_ocl)]
    for name, t in zip(("l_seg", "l_pcl", "l_ocl"), parts):
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{name} is not finite at step {step}")
    seg, pcl, ocl = parts
    a = alpha_schedule(step, cfg)
    corr = dc.add(pcl, dc.scale(ocl, cfg.beta))
    return dc.add(seg, dc.scale(corr, a))


# ---------------------------------------------------------------- data


def make_dataset(cfg: TrainConfig, split: str = "train") -> list:
    n, base = (cfg.train_clips, cfg.train_seed_base) if split == "train" else (cfg.eval_clips, cfg.eval_seed_base)
    spec = cfg.clip_spec()
    clips = []
    for i in range(n):
        clip = generate_clip(spec, base + i)
        generate_proposals(clip, cfg.distractors_per_frame, cfg.proposal_jitter, seed=base + i,
                           cell=cfg.cluster_cell)
        clips.append(clip)
    return clips


@dataclass
class ClipSample:
    clip: int
    frames: tuple  # sorted mini-sequence, frames[0] carries the ground-truth mask
    t: int
    tau: int
    view: object = None  # CrossView or None
    anchor_seed: int = 0
    distant: tuple = (0, 0)
    q_seed: int = 0


@dataclass
class Batch:
    step: int
    samples: list
    pcl_neg_seed: int = 0
    ocl_neg_seed: int = 0


def _streams(cfg: TrainConfig, step: int):
    seqs = np.random.SeedSequence([cfg.seed, step]).spawn(3)
    return [np.random.default_rng(s) for s in seqs]


def build_batch(dataset, cfg: TrainConfig, step: int) -> Batch:
    """Sample clips, mini-sequences, anchors and distant pairs for one step.

    The segmentation draw uses its own random stream, so enabling or
    disabling the correspondence losses never changes which frames the
    segmentation loss sees.
    """
    if not dataset:
        raise ConfigError("empty dataset")
    seg_rng, pcl_rng, ocl_rng = _streams(cfg, step)
    T = dataset[0].T
    if cfg.use_pcl and T < 3:
        raise ConfigError("pixel-level correspondence needs clips of >= 3 frames")
    picks = seg_rng.choice(len(dataset), size=min(cfg.batch_clips, len(dataset)), replace=False)
    samples = []
    for ci in picks:
        t = int(seg_rng.integers(0, T - 1))
        rest = [f for f in range(T) if f not in (t, t + 1)]
        # an anchor far enough from t or t+1 also gives the object loss its distant pair
        far = [f for f in rest if max(abs(f - t), abs(f - t - 1)) >= T / 2]
        rest = far or rest
        tau = int(seg_rng.choice(rest)) if rest else t
        chosen = {t, t + 1} | ({tau} if rest else set())
        extra = [f for f in range(T) if f not in chosen]
        need = max(cfg.frames_per_clip - len(chosen), 0)
        if need:
            chosen |= set(int(f) for f in seg_rng.choice(extra, size=min(need, len(extra)), replace=False))
        samples.append(ClipSample(int(ci), tuple(sorted(chosen)), t, tau))
    # one crop scale per batch keeps every view the same shape, so they encode in one call
    lo, hi = cfg.view_scale_min, cfg.view_scale_max
    view_scale = float(lo if hi <= lo else pcl_rng.uniform(lo, hi))
    for s in samples:
        use_view = pcl_rng.random() < cfg.p_view
        view_seed = int(pcl_rng.integers(2 ** 31))
        s.anchor_seed = int(pcl_rng.integers(2 ** 31))
        if use_view and cfg.use_pcl:
            s.view = cross_view_anchor(dataset[s.clip].frames[s.t], view_seed, (view_scale, view_scale))
    for s in samples:
        # prefer a distant pair inside the mini-sequence, whose keys are already encoded
        gap = T / 2
        pairs = [(a, b) for a in s.frames for b in s.frames if b - a >= gap]
        if not pairs:
            pairs = [(a, b) for a in range(T) for b in range(T) if b - a >= gap]
        a, b = pairs[int(ocl_rng.integers(len(pairs)))]
        s.distant = (a, b) if ocl_rng.random() < 0.5 else (b, a)
        s.q_seed = int(ocl_rng.integers(2 ** 31))
    if len(samples) == 1 and (cfg.use_pcl or cfg.use_ocl):
        log.warning("batch of one clip: negative pools fall back to intra-clip samples")
    return Batch(step, samples, int(pcl_rng.integers(2 ** 31)), int(ocl_rng.integers(2 ** 31)))


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    params: dict
    velocity: dict
    step: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        params = init_params(cfg.net(), cfg.init_seed)
        return cls(params, {k: np.zeros_like(v.data) for k, v in params.items()}, 0, cfg.seed)

    def named_arrays(self) -> dict:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"velocity/{k}": v for k, v in self.velocity.items()})
        out["state/step"] = np.array(float(self.step))
        out["state/seed"] = np.array(float(self.seed))
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.named_arrays())

    @classmethod
    def load(cls, path) -> "TrainState":
        named = load_checkpoint(path)
        params, vel = {}, {}
        for k, v in named.items():
            if k.startswith("param/"):
                params[k[6:]] = Tensor(v, requires_grad=True, name=k[6:])
            elif k.startswith("velocity/"):
                vel[k[9:]] = v.copy()
        if "state/step" not in named or not params:
            raise CheckpointError(f"{path}: missing training state entries")
        return cls(params, vel, int(named["state/step"]), int(named["state/seed"]))


# ---------------------------------------------------------------- one step


def _seg_forward(state, batch, dataset, cfg, net):
    """Mini-sequence rollout: frame 0 with its true mask in memory, later frames predicted."""
    params = state.params
    samples = batch.samples
    L = len(samples[0].frames)
    imgs = np.stack([dataset[s.clip].frames[f] for s in samples for f in s.frames])
    keys, skips = encode_keys(params, imgs)
    grids = {}
    for b, s in enumerate(samples):
        for k, f in enumerate(s.frames):
            grids[(b, f)] = grid_at(keys, b * L + k)
    first = [s.frames[0] for s in samples]
    mem_vals = [[v] for v in _split_values(encode_values(
        params, np.stack([dataset[s.clip].frames[f] for s, f in zip(samples, first)]),
        np.stack([dataset[s.clip].masks[f] for s, f in zip(samples, first)]), net))]
    mem_keys = [[grids[(b, s.frames[0])].values] for b, s in enumerate(samples)]
    losses = []
    for k in range(1, L):
        vqs = []
        for b, s in enumerate(samples):
            q = grids[(b, s.frames[k])]
            mk = mem_keys[b][0] if len(mem_keys[b]) == 1 else dc.concat(mem_keys[b], axis=1)
            mv = mem_vals[b][0] if len(mem_vals[b]) == 1 else dc.concat(mem_vals[b], axis=1)
            aff = dc.softmax(dc.pairwise_similarity(mk, q.values, net.measure), axis=0)
            vq = dc.matmul(mv, aff)
            vqs.append(dc.reshape(vq, (vq.shape[0], q.height, q.width)))
        idx = [b * L + k for b in range(len(samples))]
        logits = decode_masks(params, dc.stack(vqs), dc.take(skips, np.array(idx), axis=0))
        truth = np.stack([dataset[s.clip].masks[s.frames[k]] for s in samples])
        losses.append(segmentation_loss(logits, truth, net.n_classes))
        if k < L - 1:
            pred = np.argmax(logits.data, axis=1)
            new_vals = _split_values(encode_values(
                params, np.stack([dataset[s.clip].frames[s.frames[k]] for s in samples]), pred, net))
            for b, s in enumerate(samples):
                mem_keys[b].append(grids[(b, s.frames[k])].values)
                mem_vals[b].append(new_vals[b])
    l_seg = losses[0] if len(losses) == 1 else dc.scale(dc.sum_all(dc.stack(losses)), 1.0 / len(losses))
    return l_seg, grids


def _split_values(v: Tensor) -> list:
    n, d, h, w = v.shape
    return [dc.reshape(dc.take(v, i, axis=0), (d, h * w)) for i in range(n)]


def _key_grid(state, dataset, grids, b, sample, frame):
    g = grids.get((b, frame))
    if g is None:
        keys, _ = encode_keys(state.params, dataset[sample.clip].frames[frame])
        g = grids[(b, frame)] = grid_at(keys, 0)
    return g


def _pcl_forward(state, batch, dataset, cfg, grids):
    samples = batch.samples
    rng = np.random.default_rng(batch.pcl_neg_seed)
    with_view = [b for b, s in enumerate(samples) if s.view is not None]
    view_grids = {}
    if with_view:
        keys, _ = encode_keys(state.params, np.stack([samples[b].view.image for b in with_view]))
        view_grids = {b: grid_at(keys, i) for i, b in enumerate(with_view)}
    pool = owner = None
    if cfg.pcl_negative_mode != "intra" and cfg.pcl_negatives > 0 and len(samples) > 1:
        items = list(grids.items())
        pool = dc.concat([g.values for _, g in items], axis=1)
        owner = np.concatenate([np.full(g.n_positions, bb) for (bb, _f), g in items])
    losses = []
    for b, s in enumerate(samples):
        kt = _key_grid(state, dataset, grids, b, s, s.t)
        kt1 = _key_grid(state, dataset, grids, b, s, s.t + 1)
        ktau = view_grids[b] if b in view_grids else _key_grid(state, dataset, grids, b, s, s.tau)
        anchors = sample_anchor_grid(ktau, (cfg.anchor_grid_rows, cfg.anchor_grid_cols), s.anchor_seed,
                                     source_frame=s.tau, grid_mode=cfg.anchor_grid_mode)
        frozen_kt = FeatureGrid(Tensor(kt.values.data), kt.height, kt.width)
        frozen_anchors = replace(anchors, features=Tensor(anchors.features.data))
        labels = pseudo_labels(anchor_affinity(frozen_kt, frozen_anchors, cfg.measure, cfg.temperature))
        negatives = None
        if pool is not None:
            cand = np.flatnonzero(owner != b)
            k = min(cfg.pcl_negatives, cand.size)
            negatives = dc.take(pool, np.sort(rng.choice(cand, size=k, replace=False)), axis=1)
        positions = None
        if 0 < cfg.pcl_positions < kt1.n_positions:
            positions = np.sort(rng.choice(kt1.n_positions, size=cfg.pcl_positions, replace=False))
        losses.append(pcl_loss(kt1, anchors, labels, negatives, cfg.sample_ratio, cfg.measure, cfg.temperature,
                               cfg.loss_form, cfg.pcl_negative_mode, positions))
    return dc.scale(dc.sum_all(dc.stack(losses)), 1.0 / len(losses))


_SOURCES = {"both": (ANNOTATED, DISCOVERED), "annotated": (ANNOTATED,), "discovered": (DISCOVERED,)}


def _ocl_forward(state, batch, dataset, cfg, grids):
    """Object-level loss; returns ``(loss, n_positive_pairs)``."""
    samples = batch.samples
    sources = _SOURCES[cfg.ocl_sources]
    pool = (cfg.roi_pool, cfg.roi_pool)
    missing = sorted({(b, f) for b, s in enumerate(samples) for f in s.distant} - set(grids))
    if missing:
        keys, _ = encode_keys(state.params, np.stack([dataset[samples[b].clip].frames[f] for b, f in missing]))
        grids.update({bf: grid_at(keys, i) for i, bf in enumerate(missing)})
    per_clip = []
    for b, s in enumerate(samples):
        clip = dataset[s.clip]
        ta, tb = s.distant
        P = clip.proposals[ta].subset(sources)
        Pp = clip.proposals[tb].subset(sources)
        if len(P) == 0 or len(Pp) == 0:
            per_clip.append(None)
            continue
        ka = _key_grid(state, dataset, grids, b, s, ta)
        kb = _key_grid(state, dataset, grids, b, s, tb)
        emb_p = roi_embed_many(ka, P.proposals, pool=pool)
        emb_pp = roi_embed_many(kb, Pp.proposals, pool=pool)
        q_idx = cluster_and_sample_Q(P, cfg.q_size, s.q_seed)
        positives = {}
        disc_q = [i for i in q_idx if P.proposals[i].source == DISCOVERED]
        disc_c = [j for j, p in enumerate(Pp.proposals) if p.source == DISCOVERED]
        for i in q_idx:
            p = P.proposals[i]
            if p.source == ANNOTATED:
                for j, pp in enumerate(Pp.proposals):
                    if pp.source == ANNOTATED and pp.object_id == p.object_id:
                        positives[i] = j
                        break
        if disc_q and disc_c:
            a = emb_p.data[:, disc_q]
            c = emb_pp.data[:, disc_c]
            sim = (a / np.linalg.norm(a, axis=0)).T @ (c / np.linalg.norm(c, axis=0))
            for qi, cj in positive_indices(hungarian_match(sim)).items():
                positives[disc_q[qi]] = disc_c[cj]
        per_clip.append((emb_p, emb_pp, positives))
    rng = np.random.default_rng(batch.ocl_neg_seed)
    losses, n_pos = [], 0
    for b, item in enumerate(per_clip):
        if item is None or not item[2]:
            continue
        emb_p, emb_pp, positives = item
        others = [it[0] for bb, it in enumerate(per_clip) if bb != b and it is not None]
        if others:
            bank = dc.concat(others, axis=1)
        else:
            # single-clip batch: the counterparts of the other positive pairs act as negatives
            own = [positives[i] for i in positives]
            bank = dc.take(emb_pp, np.array(own), axis=1) if len(own) > 1 else None
        if bank is not None and bank.shape[1] > cfg.ocl_negatives:
            bank = dc.take(bank, np.sort(rng.choice(bank.shape[1], cfg.ocl_negatives, replace=False)), axis=1)
        if bank is not None and not others:
            losses.extend(_ocl_single_clip(emb_p, emb_pp, positives, cfg))
        else:
            losses.append(ocl_loss(emb_p, emb_pp, positives, bank, "cosine", cfg.ocl_temperature, cfg.loss_form))
        n_pos += len(positives)
    if not losses:
        return Tensor(0.0), 0
    return dc.scale(dc.sum_all(dc.stack(losses)), 1.0 / len(losses)), n_pos


def _ocl_single_clip(emb_p, emb_pp, positives, cfg):
    out = []
    for i, j in positives.items():
        others = [jj for ii, jj in positives.items() if ii != i and jj != j]
        neg = dc.take(emb_pp, np.array(others), axis=1) if others else None
        out.append(ocl_loss(emb_p, emb_pp, {i: j}, neg, "cosine", cfg.ocl_temperature, cfg.loss_form))
    return out


def train_step(state: TrainState, batch: Batch, dataset, cfg: TrainConfig) -> tuple[TrainState, dict]:
    """One forward/backward/momentum-SGD update; mutates and returns ``state``."""
    net = cfg.net()
    step = state.step
    alpha = alpha_schedule(step, cfg)
    with Tape() as tape:
        l_seg, grids = _seg_forward(state, batch, dataset, cfg, net)
        l_pcl = l_ocl = Tensor(0.0)
        n_pos = 0
        if alpha > 0 and cfg.use_pcl:
            l_pcl = _pcl_forward(state, batch, dataset, cfg, grids)
        if alpha > 0 and cfg.use_ocl:
            l_ocl, n_pos = _ocl_forward(state, batch, dataset, cfg, grids)
        loss = total_loss(l_seg, l_pcl, l_ocl, step, cfg)
        tape.backward(loss)
    grads = {k: p.grad for k, p in state.params.items()}
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            for g in grads.values():
                g *= cfg.grad_clip / norm
    for k, p in state.params.items():
        v = state.velocity[k]
        v *= cfg.momentum
        v += grads[k]
        p.data -= cfg.lr * v
        p.zero_grad()
    if not all(np.all(np.isfinite(p.data)) for p in state.params.values()):
        raise NumericError(f"parameters became non-finite at step {step}")
    state.step = step + 1
    report = {"step": step, "alpha": alpha, "l_seg": l_seg.item(), "l_pcl": l_pcl.item(),
              "l_ocl": l_ocl.item(), "l_total": loss.item(), "ocl_pairs": n_pos}
    state.history.append(report)
    return state, report


# ---------------------------------------------------------------- loop


@dataclass
class RunResult:
    state: TrainState
    rows: list
    checkpoint: Path | None
    metrics_path: Path | None
    final_eval: object = None
    seconds: float = 0.0


def run_training(cfg: TrainConfig, out_dir=None, dataset=None, eval_set=None, resume=None,
                 write_files: bool = True) -> RunResult:
    """Train for ``cfg.total_steps`` steps, writing checkpoints and a per-step metrics CSV."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    if write_files:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CheckpointError(f"cannot create output directory {out}: {exc}") from None
    dataset = make_dataset(cfg, "train") if dataset is None else dataset
    state = TrainState.load(resume) if resume else TrainState.fresh(cfg)
    net = cfg.net()
    rows = []
    metrics_path = out / "metrics.csv" if write_files else None
    fh = writer = None
    if write_files:
        try:
            fh = open(metrics_path, "a" if resume else "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise CheckpointError(f"cannot write {metrics_path}: {exc}") from None
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        if not resume:
            writer.writeheader()
    ckpt = None
    t0 = time.perf_counter()

    def do_eval():
        nonlocal eval_set
        if eval_set is None:
            eval_set = make_dataset(cfg, "eval")
        return evaluate_clips(state.params, eval_set, net, cfg.memory_capacity, cfg.memory_stride,
                              cfg.eval_corr_tol, cfg.digest(), cfg.eval_with_corr)

    final_eval = None
    try:
        if cfg.total_steps == 0 or state.step >= cfg.total_steps:
            if write_files:
                ckpt = out / f"ckpt_{state.step:06d}.stcl"
                state.save(ckpt)
        while state.step < cfg.total_steps:
            batch = build_batch(dataset, cfg, state.step)
            state, rep = train_step(state, batch, dataset, cfg)
            row = dict(rep)
            done = state.step
            last = done == cfg.total_steps
            if (cfg.eval_every and done % cfg.eval_every == 0) or (last and cfg.eval_clips > 0):
                ev = do_eval()
                row.update(ev.row())
                if last:
                    final_eval = ev
            rows.append(row)
            if writer:
                writer.writerow({k: _fmt(row.get(k)) for k in METRIC_COLUMNS})
            if write_files and ((cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or last):
                ckpt = out / f"ckpt_{done:06d}.stcl"
                state.save(ckpt)
    finally:
        if fh:
            fh.close()
    return RunResult(state, rows, ckpt, metrics_path, final_eval, time.perf_counter() - t0)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v
