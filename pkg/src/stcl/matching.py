"""Memory-query affinity, value readout and the FIFO reference memory."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, StateError

OVER_ROWS = "over_rows"  # each column sums to 1
OVER_COLS = "over_cols"  # each row sums to 1


@dataclass
class FeatureGrid:
    """C-channel features on an H×W lattice, position index ``row * W + col``."""

    values: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DimensionError("FeatureGrid needs H, W >= 1")
        if self.values.data.ndim != 2 or self.values.shape[1] != self.height * self.width:
            raise DimensionError(
                f"FeatureGrid values {self.values.shape} do not cover a {self.height}x{self.width} lattice")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_positions(self) -> int:
        return self.height * self.width

    @classmethod
    def from_array(cls, arr, requires_grad: bool = False) -> "FeatureGrid":
        arr = np.asarray(arr, dtype=np.float64)
        c, h, w = arr.shape
        return cls(Tensor(arr.reshape(c, h * w), requires_grad=requires_grad), h, w)

    def position(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.width)


@dataclass
class AffinityMatrix:
    table: Tensor
    norm_axis: str
    row_positions: np.ndarray | None = None
    col_positions: np.ndarray | None = None

    @property
    def shape(self):
        return self.table.shape


@dataclass
class MemoryBank:
    """Reference keys/values of the frames held in memory.

    Frame 0 of the bank is pinned; beyond ``capacity`` the oldest unpinned
    frame is evicted.  Banks are treated as values: :func:`memory_insert`
    returns a new bank.
    """

    capacity: int = 8
    insertion_stride: int = 1
    frame_keys: list = field(default_factory=list)
    frame_values: list = field(default_factory=list)
    frame_ids: list = field(default_factory=list)
    height: int = 0
    width: int = 0

    @property
    def frame_count(self) -> int:
        return len(self.frame_keys)

    @property
    def keys(self) -> Tensor:
        if not self.frame_keys:
            raise StateError("memory is empty")
        if len(self.frame_keys) == 1:
            return self.frame_keys[0]
        return dc.concat(self.frame_keys, axis=1)

    @property
    def values(self) -> Tensor:
        if not self.frame_values:
            raise StateError("memory is empty")
        if len(self.frame_values) == 1:
            return self.frame_values[0]
        return dc.concat(self.frame_values, axis=1)

    def wants(self, frame_index: int) -> bool:
        """Whether the insertion stride admits ``frame_index``."""
        return frame_index % max(self.insertion_stride, 1) == 0


def memory_insert(memory: MemoryBank, key: FeatureGrid, value: Tensor, frame_id=None) -> MemoryBank:
    if value.data.ndim != 2 or value.shape[1] != key.n_positions:
        raise DimensionError(f"value {value.shape} does not match key lattice {key.height}x{key.width}")
    if memory.frame_keys:
        k0, v0 = memory.frame_keys[0], memory.frame_values[0]
        if (key.height, key.width) != (memory.height, memory.width) or key.channels != k0.shape[0]:
            raise DimensionError("key extents differ from the frames already in memory")
        if value.shape[0] != v0.shape[0]:
            raise DimensionError("value channels differ from the frames already in memory")
    if memory.capacity < 1:
        raise StateError("memory capacity must be >= 1")
    keys = memory.frame_keys + [key.values]
    values = memory.frame_values + [value]
    ids = memory.frame_ids + [len(memory.frame_ids) if frame_id is None else frame_id]
    while len(keys) > memory.capacity:
        # slot 0 is pinned, slot 1 is the oldest evictable frame
        del keys[1], values[1], ids[1]
    return MemoryBank(memory.capacity, memory.insertion_stride, keys, values, ids, key.height, key.width)


def memory_affinity(memory: MemoryBank, query: FeatureGrid, measure: str = "neg_l2") -> AffinityMatrix:
    """Softmax over reference positions of the key similarity, one column per query position."""
    if memory.frame_count == 0:
        raise StateError("memory_affinity on an empty memory")
    keys = memory.keys
    if keys.shape[0] != query.channels:
        raise DimensionError(f"memory keys have {keys.shape[0]} channels, query has {query.channels}")
    sim = dc.pairwise_similarity(keys, query.values, measure)
    return AffinityMatrix(dc.softmax(sim, axis=0), OVER_ROWS)


def readout(memory: MemoryBank, affinity: AffinityMatrix) -> Tensor:
    """Aggregate memory values with an over-rows affinity: ``V_q = V_r @ A``."""
    if affinity.norm_axis != OVER_ROWS:
        raise DimensionError("readout needs an affinity normalised over memory positions")
    values = memory.values
    if affinity.table.shape[0] != values.shape[1]:
        raise DimensionError(
            f"affinity has {affinity.table.shape[0]} rows, memory holds {values.shape[1]} positions")
    return dc.matmul(values, affinity.table)
