"""Synthetic moving-shape videos with exact masks, motion and box proposals."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .objectcorr import ANNOTATED, DISCOVERED, Proposal, ProposalSet, filter_proposals, read_proposals, write_proposals

TEXTURE_MODES = ("flat", "textured", "plain")
SHAPES = ("rectangle", "ellipse", "triangle")


@dataclass
class ClipSpec:
    T: int = 6
    W: int = 64
    H: int = 64
    n_objects: int = 3
    motion_range: int = 3
    texture_mode: str = "flat"
    occlusion: bool = True
    size_min: int = 20
    size_max: int = 30
    max_objects: int = 8


@dataclass
class ObjectTrack:
    object_id: int
    shape: str
    template: np.ndarray  # bool [h, w], tight
    appearance: np.ndarray  # [3, h, w]
    positions: list  # (y, x) of the template's top-left corner per frame

    def box(self, t: int) -> Proposal:
        y, x = self.positions[t]
        h, w = self.template.shape
        return Proposal.from_corners(x, y, x + w, y + h, ANNOTATED, self.object_id)


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, 3, H, W] in [0, 1], multiples of 1/255
    masks: np.ndarray  # [T, H, W] class ids
    flow: list  # flow[t][object_id] = (dy, dx) from frame t to t+1
    tracks: list
    occluded: np.ndarray  # [T, n_objects] bool
    spec: ClipSpec
    clip_seed: int
    proposals: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def object_ids(self) -> list[int]:
        return [tr.object_id for tr in self.tracks]


def _smooth_field(rng, h, w, cells=5, lo=0.15, hi=0.85):
    coarse = rng.uniform(lo, hi, size=(3, cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.minimum(ys.astype(int), cells - 2)
    x0 = np.minimum(xs.astype(int), cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    top = c[:, y0][:, :, x0] * (1 - fx) + c[:, y0][:, :, x0 + 1] * fx
    bot = c[:, y0 + 1][:, :, x0] * (1 - fx) + c[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _template(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if shape == "rectangle":
        t = np.ones((h, w), bool)
    elif shape == "ellipse":
        cy, cx = (h - 1) / 2, (w - 1) / 2
        t = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    else:
        half = (yy + 1) / h * (w / 2)
        t = np.abs(xx - (w - 1) / 2) <= half
    rows, cols = np.nonzero(t)
    return t[rows.min():rows.max() + 1, cols.min():cols.max() + 1]


def _distinct_colors(rng, n, background_mean, min_gap=0.3, tries=500):
    colors = []
    for _ in range(tries):
        c = rng.uniform(0.0, 1.0, size=3)
        others = colors + [background_mean]
        if all(np.abs(c - o).max() >= min_gap for o in others):
            colors.append(c)
            if len(colors) == n:
                return colors
    raise GenerationError("could not draw distinguishable object colours")


def _boxes_overlap(a, b, gap=1):
    (ay, ax, ah, aw), (by, bx, bh, bw) = a, b
    return not (ay + ah + gap <= by or by + bh + gap <= ay or ax + aw + gap <= bx or bx + bw + gap <= ax)


def _render(spec: ClipSpec, background, tracks, t):
    img = background.copy()
    mask = np.zeros((spec.H, spec.W), np.int64)
    for tr in sorted(tracks, key=lambda tr: tr.object_id):
        y, x = tr.positions[t]
        h, w = tr.template.shape
        sel = tr.template
        img[:, y:y + h, x:x + w][:, sel] = tr.appearance[:, sel]
        mask[y:y + h, x:x + w][sel] = tr.object_id
    return img, mask


def generate_clip(spec: ClipSpec, seed: int) -> VideoClip:
    """Render ``spec.T`` frames of rigid shapes translating over a static background.

    Objects are placed disjointly in the first frame and move with a
    constant integer velocity (reflected at the image border, so no
    object is ever clipped); higher ids are drawn on top.
    """
    if spec.W % 4 or spec.H % 4:
        raise GenerationError("frame extents must be divisible by 4")
    if spec.n_objects > spec.max_objects:
        raise GenerationError(f"{spec.n_objects} objects exceed the class budget {spec.max_objects}")
    if spec.texture_mode not in TEXTURE_MODES:
        raise GenerationError(f"unknown texture mode {spec.texture_mode!r}")
    if spec.size_max > min(spec.W, spec.H) or spec.size_min < 2:
        raise GenerationError("object size range does not fit the frame")
    rng = np.random.default_rng(seed)
    if spec.texture_mode == "plain":
        background = np.full((3, spec.H, spec.W), 0.5)
    else:
        background = _smooth_field(rng, spec.H, spec.W)
    colors = _distinct_colors(rng, spec.n_objects, background.mean(axis=(1, 2)))

    shapes = []
    for k in range(spec.n_objects):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        h = int(rng.integers(spec.size_min, spec.size_max + 1))
        w = int(rng.integers(spec.size_min, spec.size_max + 1))
        tmpl = _template(kind, h, w)
        app = np.broadcast_to(colors[k][:, None, None], (3,) + tmpl.shape).copy()
        if spec.texture_mode == "textured":
            blocks = rng.uniform(-0.15, 0.15, size=(3, -(-tmpl.shape[0] // 4), -(-tmpl.shape[1] // 4)))
            app += np.repeat(np.repeat(blocks, 4, axis=1), 4, axis=2)[:, :tmpl.shape[0], :tmpl.shape[1]]
        shapes.append((kind, tmpl, np.clip(app, 0.0, 1.0)))

    for _attempt in range(200):
        placed = []
        for kind, tmpl, _ in shapes:
            h, w = tmpl.shape
            for _ in range(200):
                y = int(rng.integers(0, spec.H - h + 1))
                x = int(rng.integers(0, spec.W - w + 1))
                if not any(_boxes_overlap((y, x, h, w), p) for p in placed):
                    placed.append((y, x, h, w))
                    break
            else:
                break
        if len(placed) != len(shapes):
            continue
        tracks = []
        for k, ((kind, tmpl, app), (y, x, h, w)) in enumerate(zip(shapes, placed)):
            vy, vx = (int(v) for v in rng.integers(-spec.motion_range, spec.motion_range + 1, size=2))
            pos = [(y, x)]
            for _t in range(1, spec.T):
                ny, nx = y + vy, x + vx
                if ny < 0 or ny + h > spec.H:
                    vy = -vy
                    ny = y + vy
                if nx < 0 or nx + w > spec.W:
                    vx = -vx
                    nx = x + vx
                y, x = min(max(ny, 0), spec.H - h), min(max(nx, 0), spec.W - w)
                pos.append((y, x))
            tracks.append(ObjectTrack(k + 1, kind, tmpl, app, pos))
        if not spec.occlusion and any(
                _boxes_overlap(a.positions[t] + a.template.shape, b.positions[t] + b.template.shape, gap=0)
                for t in range(spec.T) for i, a in enumerate(tracks) for b in tracks[i + 1:]):
            continue
        break
    else:
        raise GenerationError("objects cannot be placed disjointly in the first frame")

    frames = np.empty((spec.T, 3, spec.H, spec.W))
    masks = np.empty((spec.T, spec.H, spec.W), np.int64)
    occluded = np.zeros((spec.T, spec.n_objects), bool)
    for t in range(spec.T):
        img, mask = _render(spec, background, tracks, t)
        frames[t] = np.round(img * 255.0) / 255.0
        masks[t] = mask
        for k, tr in enumerate(tracks):
            occluded[t, k] = int((mask == tr.object_id).sum()) < int(tr.template.sum())
    flow = [{tr.object_id: (tr.positions[t + 1][0] - tr.positions[t][0], tr.positions[t + 1][1] - tr.positions[t][1])
             for tr in tracks} for t in range(spec.T - 1)]
    return VideoClip(frames, masks, flow, tracks, occluded, spec, int(seed))


def generate_proposals(clip: VideoClip, distractors_per_frame: int = 8, jitter: int = 2, seed: int = 0,
                       cell: int = 32) -> list[ProposalSet]:
    """Annotated boxes, jittered copies flagged discovered, and random distractors, filtered."""
    rng = np.random.default_rng(seed)
    spec = clip.spec
    out = []
    for t in range(clip.T):
        raw = []
        for tr in clip.tracks:
            if not (clip.masks[t] == tr.object_id).any():
                continue
            ann = tr.box(t)
            raw.append(ann)
            x0, y0, x1, y1 = ann.corners
            d = rng.integers(-jitter, jitter + 1, size=4) if jitter > 0 else np.zeros(4, int)
            jx0, jy0, jx1, jy1 = x0 + d[0], y0 + d[1], x1 + d[2], y1 + d[3]
            if jx1 > jx0 and jy1 > jy0:
                raw.append(Proposal.from_corners(float(jx0), float(jy0), float(jx1), float(jy1), DISCOVERED,
                                                 tr.object_id))
        for _ in range(distractors_per_frame):
            w = float(rng.integers(8, spec.W + 1))
            h = float(rng.integers(8, spec.H + 1))
            x = float(rng.uniform(w / 2, spec.W - w / 2))
            y = float(rng.uniform(h / 2, spec.H - h / 2))
            raw.append(Proposal(x, y, w, h, DISCOVERED, -1))
        out.append(filter_proposals(raw, spec.W, spec.H, frame=t, cell=cell))
    clip.proposals = out
    return out


@dataclass
class Correspondence:
    src: np.ndarray  # [N, 2] (y, x) in frame t
    dst: np.ndarray  # [N, 2] (y, x) in frame t'

    def __len__(self) -> int:
        return len(self.src)

    def as_dict(self) -> dict:
        return {tuple(s): tuple(d) for s, d in zip(self.src.tolist(), self.dst.tolist())}


def displacement(clip: VideoClip, object_id: int, t: int, t2: int) -> tuple[int, int]:
    """Composed flow of one object from frame ``t`` to ``t2`` (either direction)."""
    dy = dx = 0
    lo, hi = min(t, t2), max(t, t2)
    for k in range(lo, hi):
        fy, fx = clip.flow[k][object_id]
        dy, dx = dy + fy, dx + fx
    return (dy, dx) if t2 >= t else (-dy, -dx)


def ground_truth_correspondence(clip: VideoClip, t: int, t2: int) -> Correspondence:
    """Map every visible object pixel of frame ``t`` to its position in ``t2``.

    Pixels whose target leaves the frame or is hidden by another object in
    ``t2`` are left unmapped, as is the background.
    """
    h, w = clip.masks.shape[1:]
    srcs, dsts = [], []
    for oid in clip.object_ids:
        ys, xs = np.nonzero(clip.masks[t] == oid)
        dy, dx = displacement(clip, oid, t, t2)
        ty, tx = ys + dy, xs + dx
        ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        ys, xs, ty, tx = ys[ok], xs[ok], ty[ok], tx[ok]
        vis = clip.masks[t2][ty, tx] == oid
        srcs.append(np.stack([ys[vis], xs[vis]], axis=1))
        dsts.append(np.stack([ty[vis], tx[vis]], axis=1))
    if not srcs:
        empty = np.zeros((0, 2), np.int64)
        return Correspondence(empty, empty.copy())
    return Correspondence(np.concatenate(srcs).astype(np.int64), np.concatenate(dsts).astype(np.int64))


# ---------------------------------------------------------------- netpbm + manifests


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a ``[3,H,W]`` float image in [0,1]."""
    arr = np.clip(np.round(np.moveaxis(image, 0, -1) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("mask values do not fit a PGM gray level")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.astype(np.uint8).tobytes())


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return raw[pos + 1:], w, h


def read_ppm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, b"P6")
    arr = np.frombuffer(body[:w * h * 3], np.uint8).reshape(h, w, 3)
    return np.moveaxis(arr.astype(np.float64) / 255.0, -1, 0)


def read_pgm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, b"P5")
    return np.frombuffer(body[:w * h], np.uint8).reshape(h, w).astype(np.int64)


def write_clip(clip: VideoClip, directory, proposal_seed: int | None = None) -> Path:
    """Dump frames (P6), masks (P5), proposals and a text manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# stcl clip manifest", f"seed = {clip.clip_seed}"]
    if proposal_seed is not None:
        lines.append(f"proposal_seed = {proposal_seed}")
    for f in fields(ClipSpec):
        lines.append(f"{f.name} = {getattr(clip.spec, f.name)}")
    for t in range(clip.T):
        fname, mname = f"frame_{t:03d}.ppm", f"mask_{t:03d}.pgm"
        write_ppm(d / fname, clip.frames[t])
        write_pgm(d / mname, clip.masks[t])
        lines.append(f"frame {t} {fname} {mname}")
    for tr in clip.tracks:
        y, x = tr.positions[0]
        lines.append(f"object {tr.object_id} {tr.shape} {y} {x} {tr.template.shape[0]} {tr.template.shape[1]}")
    for t, recs in enumerate(clip.flow):
        for oid, (dy, dx) in sorted(recs.items()):
            lines.append(f"flow {t} {oid} {dy} {dx}")
    if clip.proposals:
        write_proposals(d / "proposals.txt", {ps.frame: ps for ps in clip.proposals})
        lines.append("proposals proposals.txt")
    path = d / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_clip(directory) -> VideoClip:
    """Load a clip written by :func:`write_clip`.

    Object templates are recovered from the first-frame mask, so objects
    occluded in that frame come back with their visible part only.
    """
    d = Path(directory)
    spec_kw, frames, masks, objects, flow, seed, prop_file = {}, {}, {}, [], {}, 0, None
    types = {f.name: f.type for f in fields(ClipSpec)}
    for line in (d / "manifest.txt").read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            if k == "seed":
                seed = int(v)
            elif k in types:
                spec_kw[k] = (v == "True") if types[k] in (bool, "bool") else (
                    int(v) if types[k] in (int, "int") else v)
            continue
        parts = line.split()
        if parts[0] == "frame":
            frames[int(parts[1])] = read_ppm(d / parts[2])
            masks[int(parts[1])] = read_pgm(d / parts[3])
        elif parts[0] == "object":
            objects.append((int(parts[1]), parts[2], int(parts[3]), int(parts[4]), int(parts[5]), int(parts[6])))
        elif parts[0] == "flow":
            flow.setdefault(int(parts[1]), {})[int(parts[2])] = (int(parts[3]), int(parts[4]))
        elif parts[0] == "proposals":
            prop_file = d / parts[1]
    spec = ClipSpec(**spec_kw)
    T = len(frames)
    fr = np.stack([frames[t] for t in range(T)])
    mk = np.stack([masks[t] for t in range(T)])
    flows = [flow.get(t, {}) for t in range(T - 1)]
    tracks = []
    for oid, kind, y, x, h, w in objects:
        tmpl = mk[0, y:y + h, x:x + w] == oid
        app = fr[0][:, y:y + h, x:x + w].copy()
        pos = [(y, x)]
        for t in range(T - 1):
            dy, dx = flows[t][oid]
            pos.append((pos[-1][0] + dy, pos[-1][1] + dx))
        tracks.append(ObjectTrack(oid, kind, tmpl, app, pos))
    occluded = np.zeros((T, len(tracks)), bool)
    clip = VideoClip(fr, mk, flows, tracks, occluded, spec, seed)
    if prop_file is not None:
        per = read_proposals(prop_file)
        clip.proposals = [filter_proposals(per.get(t, []), spec.W, spec.H, frame=t) for t in range(T)]
    return clip


def spec_dict(spec: ClipSpec) -> dict:
    return asdict(spec)
