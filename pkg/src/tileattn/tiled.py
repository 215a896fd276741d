"""Blockwise online-softmax attention forward pass.

Each work item owns one query tile of one flattened head (``bh``) and streams
key/value tiles through a small ring of packed buffers.  Per query row it keeps a
running max ``m``, a running normalizer ``l`` and an output accumulator ``o``;
the output row is ``o / l`` once every admitted tile has been consumed.  No
buffer proportional to ``S x S`` is ever allocated.
"""

from __future__ import annotations

import enum
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedScheduleError
from .tensors import AttnInput, ElemType, MaskKind, MaskSpec, as_scale, effective_scale

SUPPORTED_T_M = (16, 32, 64, 128)
SUPPORTED_T_N = (16, 32, 64, 128, 256)
MAX_STAGES = 4
MAX_HEAD_DIM = 256

THREADS_ENV = "TILEATTN_THREADS"


class Layout(enum.Enum):
    ROW = "row"  # K tile stored [t_n][D]
    COL = "col"  # K tile stored transposed [D][t_n]

    @classmethod
    def parse(cls, name) -> "Layout":
        if isinstance(name, Layout):
            return name
        key = str(name).strip().lower()
        for alias, layout in (("row", cls.ROW), ("rowpacked", cls.ROW),
                              ("col", cls.COL), ("colpacked", cls.COL)):
            if key == alias:
                return layout
        raise ValueError(f"unknown layout {name!r}")


@dataclass(frozen=True)
class TileSchedule:
    t_m: int = 128
    t_n: int = 256
    stages: int = 2
    layout: Layout = Layout.ROW

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout.parse(self.layout))
        for name in ("t_m", "t_n", "stages"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")

    def validate(self) -> None:
        if self.t_m not in SUPPORTED_T_M:
            raise UnsupportedScheduleError(f"t_m={self.t_m} not in {SUPPORTED_T_M}")
        if self.t_n not in SUPPORTED_T_N:
            raise UnsupportedScheduleError(f"t_n={self.t_n} not in {SUPPORTED_T_N}")
        if not 1 <= self.stages <= MAX_STAGES:
            raise UnsupportedScheduleError(f"stages={self.stages} outside [1, {MAX_STAGES}]")

    @property
    def label(self) -> str:
        return f"{self.t_m}x{self.t_n}/s{self.stages}/{self.layout.value}"

    def scratch_bound(self, D: int) -> int:
        """Element budget per worker: ``2 * (t_m*t_n + stages*t_n*D + t_m*D)``."""
        return 2 * (self.t_m * self.t_n + self.stages * self.t_n * D + self.t_m * D)


@dataclass(frozen=True)
class PlanKey:
    t_m: int
    t_n: int
    D: int
    dtype: ElemType
    causal: bool


@dataclass(frozen=True, eq=False)
class Plan:
    """Loop bounds and masking descriptors for one (t_m, t_n, D, dtype, causal) key."""

    key: PlanKey
    # additive template: entry [r, x] is -inf iff x > r + t_n
    causal_template: np.ndarray | None = None

    def n_query_tiles(self, S: int) -> int:
        return -(-S // self.key.t_m)

    def query_rows(self, qi: int, S: int) -> tuple[int, int]:
        a = qi * self.key.t_m
        return a, min(a + self.key.t_m, S)

    def n_kv_tiles(self, row_end: int, S: int) -> int:
        """K/V tiles streamed for a query tile ending (exclusive) at ``row_end``.

        Under a causal mask tiles starting beyond the tile's last row are skipped.
        """
        limit = row_end if self.key.causal else S
        return -(-limit // self.key.t_n)

    def diagonal_mask(self, a: int, j0: int, rows: int, cols: int) -> np.ndarray:
        """Additive mask for query rows ``[a, a+rows)`` against keys ``[j0, j0+cols)``."""
        off = self.key.t_n - (a - j0)
        return self.causal_template[:rows, off:off + cols]


class PlanCache:
    """Thread-safe memo of plans, keyed by :class:`PlanKey`."""

    def __init__(self):
        self._plans: dict[PlanKey, Plan] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.constructions = 0

    def __len__(self) -> int:
        return len(self._plans)

    def clear(self) -> None:
        with self._lock:
            self._plans.clear()
            self.hits = 0
            self.constructions = 0

    def lookup(self, key: PlanKey) -> Plan:
        with self._lock:
            plan = self._plans.get(key)
            if plan is not None:
                self.hits += 1
                return plan
        plan = _build_plan(key)
        with self._lock:
            self.constructions += 1
            return self._plans.setdefault(key, plan)


DEFAULT_CACHE = PlanCache()


def _build_plan(key: PlanKey) -> Plan:
    TileSchedule(key.t_m, key.t_n).validate()
    if not 1 <= key.D <= MAX_HEAD_DIM:
        raise UnsupportedScheduleError(f"head dimension D={key.D} outside [1, {MAX_HEAD_DIM}]")
    template = None
    if key.causal:
        width = 2 * key.t_n + key.t_m
        r = np.arange(key.t_m)[:, None]
        x = np.arange(width)[None, :]
        template = np.where(x > r + key.t_n, np.float32(-np.inf), np.float32(0.0))
        template.setflags(write=False)
    return Plan(key, template)


def get_plan(key: PlanKey, cache: PlanCache | None = None) -> Plan:
    return (cache if cache is not None else DEFAULT_CACHE).lookup(key)


@dataclass
class SoftmaxState:
    m: np.ndarray  # running max per row
    l: np.ndarray  # running normalizer per row
    o: np.ndarray  # running accumulator, [rows, D]

    @classmethod
    def init(cls, rows: int, D: int, dtype=np.float64) -> "SoftmaxState":
        return cls(np.full(rows, -np.inf, dtype=dtype), np.zeros(rows, dtype=dtype),
                   np.zeros((rows, D), dtype=dtype))

    def copy(self) -> "SoftmaxState":
        return SoftmaxState(self.m.copy(), self.l.copy(), self.o.copy())


def score_tile(q_tile: np.ndarray, k_tile: np.ndarray, scale: float, out: np.ndarray | None = None):
    """``scale * q_tile @ k_tile`` with ``k_tile`` laid out ``[D, cols]``."""
    out = np.matmul(q_tile, k_tile, out=out)
    if scale != 1.0:
        out *= out.dtype.type(scale)
    return out


def _update(m, l, o, scores, v_tile, m_new, alpha, rowsum, pv, guard=True):
    # All arguments are preallocated buffers; ``scores`` is overwritten with
    # exp(scores - m_new).  ``guard=False`` is only safe when every row has
    # admitted at least one key by the end of this tile.
    np.max(scores, axis=1, out=m_new)
    np.maximum(m, m_new, out=m_new)
    # rows that have seen only -inf keep a zero pivot so -inf - -inf never occurs
    dead = np.isneginf(m_new) if guard else None
    if dead is not None and dead.any():
        m_new[dead] = 0.0
    np.subtract(m, m_new, out=alpha)
    np.exp(alpha, out=alpha)
    scores -= m_new[:, None]
    np.exp(scores, out=scores)
    np.sum(scores, axis=1, out=rowsum)
    l *= alpha
    l += rowsum
    o *= alpha[:, None]
    np.matmul(scores, v_tile, out=pv)
    o += pv
    if dead is not None and dead.any():
        m_new[dead] = -np.inf
    m[:] = m_new


def online_update(state: SoftmaxState, scores, v_tile) -> SoftmaxState:
    """Fold one (already masked) score tile and its value rows into ``state``.

    Returns a new state; ``state`` and ``scores`` are left untouched.
    """
    new = state.copy()
    dt = new.o.dtype
    s = np.array(scores, dtype=dt, ndmin=2, copy=True)
    v = np.asarray(v_tile, dtype=dt)
    rows = s.shape[0]
    m_new, alpha, rowsum = (np.empty(rows, dtype=dt) for _ in range(3))
    pv = np.empty_like(new.o)
    _update(new.m, new.l, new.o, s, v, m_new, alpha, rowsum, pv)
    return new


def finalize(state: SoftmaxState, out: np.ndarray | None = None) -> np.ndarray:
    """``o / l`` per row; rows that never admitted a key come out as zeros."""
    if out is None:
        out = np.zeros_like(state.o)
    else:
        out[...] = 0
    np.divide(state.o, state.l[:, None], out=out, where=state.l[:, None] > 0)
    return out


@dataclass
class KernelStats:
    """Optional instrumentation filled in by :func:`sdpa_tiled`."""

    tile_visits: int = 0
    visits_per_item: dict = field(default_factory=dict)
    peak_scratch: int = 0
    items: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, item, visits: int, scratch: int) -> None:
        with self._lock:
            self.tile_visits += visits
            self.visits_per_item[item] = visits
            self.peak_scratch = max(self.peak_scratch, scratch)
            self.items += 1


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
        try:
            workers = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if workers < 0:
        raise ValueError("worker count must be >= 0")
    return workers or (os.cpu_count() or 1)


class _Pass:
    """Everything a work item needs; shared read-only across workers."""

    def __init__(self, inp, mask, scale, schedule, plan, acc_dtype, out, stats):
        self.q, self.k, self.v = inp.flat()
        self.S, self.D = inp.shape.S, inp.shape.D
        self.H = inp.shape.H
        self.mask = mask
        self.scale = acc_dtype.type(scale)
        self.schedule = schedule
        self.plan = plan
        self.acc = acc_dtype
        self.out = out
        self.stats = stats

    def pack(self, kbuf, vbuf, bh, j0, cols):
        # the softmax scale is applied while packing K, so scores come out scaled
        k_src = self.k[bh, j0:j0 + cols]
        dst = kbuf[:cols] if self.schedule.layout is Layout.ROW else kbuf[:, :cols].T
        np.multiply(k_src, self.scale, out=dst)
        vbuf[:cols] = self.v[bh, j0:j0 + cols]

    def run(self, item):
        bh, qi = item
        sched, S, D, acc = self.schedule, self.S, self.D, self.acc
        t_m, t_n, stages = sched.t_m, sched.t_n, sched.stages
        a, b = self.plan.query_rows(qi, S)
        rows = b - a
        n_kv = self.plan.n_kv_tiles(b, S)
        stages_used = max(1, min(stages, n_kv))

        scratch = 0
        if self.q.dtype == acc:
            q_tile = self.q[bh, a:b]
        else:
            q_tile = self.q[bh, a:b].astype(acc)
            scratch += q_tile.size
        kshape = (t_n, D) if sched.layout is Layout.ROW else (D, t_n)
        ring = [(np.empty(kshape, acc), np.empty((t_n, D), acc)) for _ in range(stages_used)]
        sbuf = np.empty((t_m, t_n), acc)
        o = np.zeros((rows, D), acc)
        pv = np.empty((rows, D), acc)
        m = np.full(rows, -np.inf, acc)
        l = np.zeros(rows, acc)
        m_new, alpha, rowsum = (np.empty(rows, acc) for _ in range(3))
        scratch += sbuf.size + o.size + pv.size + 6 * rows
        scratch += sum(kb.size + vb.size for kb, vb in ring)

        def tile_cols(t):
            j0 = t * t_n
            return j0, min(t_n, S - j0)

        for t in range(stages_used):
            j0, cols = tile_cols(t)
            self.pack(*ring[t], bh, j0, cols)

        causal = self.mask.kind is MaskKind.CAUSAL
        padded = self.mask.kind is MaskKind.PADDING
        valid = self.mask.valid_len[bh // self.H] if padded else S
        for t in range(n_kv):
            kbuf, vbuf = ring[t % stages_used]
            j0, cols = tile_cols(t)
            k_view = kbuf[:cols].T if sched.layout is Layout.ROW else kbuf[:, :cols]
            s = score_tile(q_tile, k_view, 1.0, out=sbuf[:rows, :cols])
            if causal and j0 + cols - 1 > a:
                # straddles the diagonal: mask keys j > i element-wise
                s += self.plan.diagonal_mask(a, j0, rows, cols)
            if valid < j0 + cols:
                s[:, max(valid - j0, 0):] = -np.inf
            # without padding every row admits key 0 in the first tile
            _update(m, l, o, s, vbuf[:cols], m_new, alpha, rowsum, pv, guard=padded)
            nxt = t + stages_used
            if nxt < n_kv:
                self.pack(kbuf, vbuf, bh, *tile_cols(nxt))

        finalize(SoftmaxState(m, l, o), out=self.out[bh, a:b])
        if self.stats is not None:
            self.stats.record(item, n_kv, scratch)


def sdpa_tiled(inp: AttnInput, mask: MaskSpec | None = None, scale=None,
               schedule: TileSchedule | None = None, cache: PlanCache | None = None,
               *, accumulate: str = "f32", workers: int | None = None,
               stats: KernelStats | None = None, plan: Plan | None = None) -> np.ndarray:
    """Tiled attention forward; returns ``[B,H,S,D]``.

    ``accumulate="f32"`` keeps scores, softmax statistics and the output
    accumulator in float32 and rounds the result to the input's element grid.
    ``accumulate="f64"`` is a verification mode that accumulates in float64 and
    returns float64 without rounding.

    ``workers`` defaults to ``$TILEATTN_THREADS`` (0 means one per CPU); work
    items are independent (bh, query-tile) pairs.

    A caller holding a resolved ``plan`` may pass it to bypass the cache lookup.
    """
    mask = mask or MaskSpec.none()
    schedule = schedule or TileSchedule()
    schedule.validate()
    shape = inp.shape
    mask.check(shape)
    if accumulate not in ("f32", "f64"):
        raise ValueError("accumulate must be 'f32' or 'f64'")
    acc = np.dtype(np.float32 if accumulate == "f32" else np.float64)
    key = PlanKey(schedule.t_m, schedule.t_n, shape.D, inp.dtype, mask.is_causal)
    if plan is None:
        plan = get_plan(key, cache)
    elif plan.key != key:
        raise ValueError(f"plan {plan.key} does not match {key}")
    s = effective_scale(as_scale(scale), shape.D)

    out = np.zeros((shape.BH, shape.S, shape.D), acc)
    job = _Pass(inp, mask, s, schedule, plan, acc, out, stats)
    items = [(bh, qi) for bh in range(shape.BH) for qi in range(plan.n_query_tiles(shape.S))]
    n_workers = min(worker_count(workers), len(items))
    if n_workers <= 1:
        for item in items:
            job.run(item)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            for _ in pool.map(job.run, items):
                pass

    out = out.reshape(shape.as_tuple())
    if accumulate == "f64":
        return out
    return inp.dtype.round(out)


def sdpa(q, k, v, causal: bool = False, scale: float | None = None,
         schedule: TileSchedule | None = None, dtype=ElemType.F32) -> np.ndarray:
    """Functional entry point: ``sdpa(q, k, v, causal, scale) -> o`` on [B,H,S,D] arrays."""
    inp = AttnInput(np.asarray(q), np.asarray(k), np.asarray(v), ElemType.parse(dtype))
    return sdpa_tiled(inp, MaskSpec.causal() if causal else MaskSpec.none(), scale, schedule)

