"""Tiny key/value encoders, mask decoder and memory-based sequence inference.

All feature maps live on a stride-4 lattice.  Parameters are a flat,
ordered ``{name: Tensor}`` dict so they serialise directly into the
checkpoint format.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import CheckpointError, DimensionError, LabelError
from .matching import FeatureGrid, MemoryBank, memory_affinity, memory_insert, readout

STRIDE = 4
CKPT_MAGIC = b"STCL"
CKPT_VERSION = 1


@dataclass
class NetConfig:
    key_dim: int = 16
    value_dim: int = 32
    hidden1: int = 16
    hidden2: int = 32
    dec_hidden: int = 32
    max_objects: int = 8
    measure: str = "neg_l2"
    key_context: int = 0  # extra residual 3×3 convs on the lattice before the key projection

    @property
    def n_classes(self) -> int:
        return self.max_objects + 1


def _conv_param(rng, cout, cin, k):
    w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))
    return w, np.zeros(cout)


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    layout = [
        ("key.conv1", cfg.hidden1, 3, 3),
        ("key.conv2", cfg.hidden2, cfg.hidden1, 3),
        *[(f"key.ctx{i}", cfg.hidden2, cfg.hidden2, 3) for i in range(cfg.key_context)],
        ("key.proj", cfg.key_dim, cfg.hidden2, 3),
        ("value.conv1", cfg.hidden1, 3, 3),
        ("value.conv2", cfg.hidden2, cfg.hidden1, 3),
        ("value.proj", cfg.value_dim, cfg.hidden2 + cfg.n_classes, 3),
        ("dec.conv", cfg.dec_hidden, cfg.value_dim + cfg.hidden2, 3),
        ("dec.out", cfg.n_classes, cfg.dec_hidden, 1),
    ]
    params = {}
    for name, cout, cin, k in layout:
        w, b = _conv_param(rng, cout, cin, k)
        params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")
    return params


def param_count(params) -> int:
    return int(sum(p.size for p in params.values()))


def _images(images) -> Tensor:
    arr = images if isinstance(images, Tensor) else Tensor(images)
    if arr.data.ndim == 3:
        arr = dc.reshape(arr, (1,) + arr.shape)
    if arr.data.ndim != 4 or arr.shape[1] != 3:
        raise DimensionError(f"expected images of shape N×3×H×W, got {arr.shape}")
    if arr.shape[2] % STRIDE or arr.shape[3] % STRIDE:
        raise DimensionError(f"image extents {arr.shape[2:]} are not divisible by {STRIDE}")
    return arr


def _stem(params, prefix, x: Tensor) -> Tensor:
    h = dc.silu(dc.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], stride=2))
    return dc.silu(dc.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], stride=2))


def encode_keys(params, images) -> tuple[Tensor, Tensor]:
    """Batched key encoder: returns ``(keys[N,C,h,w], skip[N,hidden2,h,w])``."""
    x = _images(images)
    skip = h = _stem(params, "key", x)
    i = 0
    while f"key.ctx{i}.w" in params:
        h = dc.add(h, dc.silu(dc.conv2d(h, params[f"key.ctx{i}.w"], params[f"key.ctx{i}.b"])))
        i += 1
    keys = dc.conv2d(h, params["key.proj.w"], params["key.proj.b"])
    return keys, skip


def grid_at(maps: Tensor, n: int) -> FeatureGrid:
    """The ``n``-th map of a batched ``[N,C,h,w]`` tensor as a FeatureGrid."""
    _, c, h, w = maps.shape
    return FeatureGrid(dc.reshape(dc.take(maps, n, axis=0), (c, h * w)), h, w)


def encode_key(params, image) -> FeatureGrid:
    keys, _ = encode_keys(params, image)
    return grid_at(keys, 0)


def downsample_mask(mask: np.ndarray, n_classes: int) -> np.ndarray:
    """Area-majority class per stride×stride block; ties go to the lower class id."""
    mask = np.asarray(mask)
    n, hh, ww = mask.shape
    h, w = hh // STRIDE, ww // STRIDE
    blocks = mask.reshape(n, h, STRIDE, w, STRIDE).transpose(0, 1, 3, 2, 4).reshape(n, h, w, STRIDE * STRIDE)
    counts = np.stack([(blocks == k).sum(axis=-1) for k in range(n_classes)], axis=-1)
    return np.argmax(counts, axis=-1)


def mask_planes(mask: np.ndarray, n_classes: int) -> np.ndarray:
    small = downsample_mask(mask, n_classes)
    return (small[:, None, :, :] == np.arange(n_classes)[None, :, None, None]).astype(np.float64)


def _check_mask(mask: np.ndarray, n_classes: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.size and (mask.min() < 0 or mask.max() >= n_classes):
        raise LabelError(f"mask class ids must lie in [0, {n_classes})")
    return mask


def encode_values(params, images, masks, cfg: NetConfig) -> Tensor:
    """Batched value encoder on frames plus one-hot mask planes: ``[N,D,h,w]``."""
    x = _images(images)
    masks = _check_mask(masks, cfg.n_classes)
    if masks.shape[0] != x.shape[0] or masks.shape[1:] != x.shape[2:]:
        raise DimensionError(f"masks {masks.shape} do not match images {x.shape}")
    feats = _stem(params, "value", x)
    planes = Tensor(mask_planes(masks, cfg.n_classes))
    return dc.conv2d(dc.concat([feats, planes], axis=1), params["value.proj.w"], params["value.proj.b"])


def encode_value(params, image, mask, cfg: NetConfig) -> Tensor:
    v = encode_values(params, image, mask, cfg)
    _, d, h, w = v.shape
    return dc.reshape(dc.take(v, 0, axis=0), (d, h * w))


def decode_masks(params, vq: Tensor, skip: Tensor) -> Tensor:
    """Batched decoder: ``vq[N,D,h,w]`` and skip features to logits ``[N,M+1,4h,4w]``.

    The 1×1 class projection is applied before the bilinear upsampling;
    both are linear and the upsampling weights sum to one, so the order
    does not change the result.
    """
    if vq.data.ndim != 4 or skip.data.ndim != 4 or vq.shape[0] != skip.shape[0] or vq.shape[2:] != skip.shape[2:]:
        raise DimensionError(f"decoder inputs {vq.shape} and {skip.shape} are inconsistent")
    h = dc.silu(dc.conv2d(dc.concat([vq, skip], axis=1), params["dec.conv.w"], params["dec.conv.b"]))
    logits = dc.conv2d(h, params["dec.out.w"], params["dec.out.b"])
    return dc.upsample_bilinear(logits, STRIDE)


def decode_mask(params, vq: Tensor, skip: FeatureGrid | Tensor) -> Tensor:
    """Single-frame decoder; ``vq`` is ``[D, h*w]`` and the result ``[M+1, H, W]``."""
    if isinstance(skip, FeatureGrid):
        h, w = skip.height, skip.width
        sk = dc.reshape(skip.values, (1, skip.channels, h, w))
    else:
        sk = skip if skip.data.ndim == 4 else dc.reshape(skip, (1,) + skip.shape)
        h, w = sk.shape[2:]
    if vq.data.ndim != 2 or vq.shape[1] != h * w:
        raise DimensionError(f"readout {vq.shape} does not cover a {h}x{w} lattice")
    out = decode_masks(params, dc.reshape(vq, (1, vq.shape[0], h, w)), sk)
    return dc.take(out, 0, axis=0)


def segmentation_loss(logits: Tensor, truth, n_classes: int | None = None) -> Tensor:
    """Mean per-pixel cross-entropy of ``[N,K,H,W]`` (or ``[K,H,W]``) logits."""
    if logits.data.ndim == 3:
        logits = dc.reshape(logits, (1,) + logits.shape)
    n, k, h, w = logits.shape
    truth = _check_mask(truth, n_classes or k)
    if truth.shape != (n, h, w):
        raise DimensionError(f"truth {truth.shape} does not match logits {logits.shape}")
    flat = dc.reshape(dc.permute(logits, (0, 2, 3, 1)), (n * h * w, k))
    return dc.cross_entropy(flat, truth.reshape(-1))


def predict_labels(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=-3)


def infer_sequence(params, frames, first_mask, cfg: NetConfig, capacity: int = 8,
                   insertion_stride: int = 1) -> list[np.ndarray]:
    """Propagate ``first_mask`` through ``frames[T,3,H,W]``; returns masks for frames 1..T-1."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] <= 1:
        return []
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    keys, skips = encode_keys(frozen, frames)
    bank = MemoryBank(capacity=capacity, insertion_stride=insertion_stride)
    bank = memory_insert(bank, grid_at(keys, 0), encode_value(frozen, frames[0], first_mask, cfg), frame_id=0)
    preds = []
    for t in range(1, frames.shape[0]):
        query = grid_at(keys, t)
        vq = readout(bank, memory_affinity(bank, query, cfg.measure))
        logits = decode_mask(frozen, vq, dc.take(skips, t, axis=0))
        pred = predict_labels(logits)
        preds.append(pred)
        if bank.wants(t):
            bank = memory_insert(bank, query, encode_value(frozen, frames[t], pred, cfg), frame_id=t)
    return preds


# ---------------------------------------------------------------- checkpoints


def checksum(value_bytes: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(value_bytes, digest_size=8).digest(), "little")


def save_checkpoint(path, named: dict) -> None:
    """``STCL``, version, then per entry: u16 name length, name, u8 rank, u32 extents, f64 LE values; u64 checksum."""
    out = bytearray(CKPT_MAGIC)
    out.append(CKPT_VERSION)
    payload = bytearray()
    for name, arr in named.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        raw = arr.tobytes(order="C")
        out += raw
        payload += raw
    out += struct.pack("<Q", checksum(bytes(payload)))
    try:
        Path(path).write_bytes(bytes(out))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from None


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an STCL checkpoint")
    if raw[4] != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw[4]}")
    pos, end = 5, len(raw) - 8
    named, payload = {}, bytearray()
    try:
        while pos < end:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rank = raw[pos]
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            chunk = raw[pos:pos + nbytes]
            if len(chunk) != nbytes or pos + nbytes > end:
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            named[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
            payload += chunk
            pos += nbytes
    except (struct.error, UnicodeDecodeError, IndexError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    (stored,) = struct.unpack_from("<Q", raw, end)
    if stored != checksum(bytes(payload)):
        raise CheckpointError(f"{path}: checksum mismatch")
    return named
