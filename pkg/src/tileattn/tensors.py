"""Shapes, element types, masks and scale semantics shared by every kernel.

Tensors are numpy arrays of logical shape ``[B, H, S, D]`` (row-major, ``D``
innermost).  Reduced precisions are emulated: values are snapped to the 16-bit
grid but held in float32.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

NEG_INF = float("-inf")


@dataclass(frozen=True)
class Shape:
    B: int
    H: int
    S: int
    D: int

    def __post_init__(self):
        for name in ("B", "H", "S", "D"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def BH(self) -> int:
        return self.B * self.H

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.B, self.H, self.S, self.D)


def _round_bf16(x: np.ndarray) -> np.ndarray:
    # round-to-nearest-even on the upper 16 bits of the float32 pattern
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    bits = x32.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) & 0xFFFF0000).astype(np.uint32)
    out = rounded.view(np.float32).reshape(x32.shape)
    # keep NaN/inf patterns untouched
    special = ~np.isfinite(x32)
    if special.any():
        out = np.where(special, x32, out)
    return out


class ElemType(enum.Enum):
    F32 = "f32"
    F16EMU = "f16emu"
    BF16EMU = "bf16emu"

    @property
    def bytes_per_elem(self) -> int:
        return 4 if self is ElemType.F32 else 2

    def round(self, x) -> np.ndarray:
        """Snap ``x`` to this type's value grid; returns float32 storage."""
        x = np.asarray(x, dtype=np.float32)
        if self is ElemType.F32:
            return x.copy()
        if self is ElemType.F16EMU:
            return x.astype(np.float16).astype(np.float32)
        return _round_bf16(x)

    @classmethod
    def parse(cls, name) -> "ElemType":
        if isinstance(name, ElemType):
            return name
        key = str(name).strip().lower()
        aliases = {
            "f32": cls.F32, "fp32": cls.F32, "float32": cls.F32,
            "f16": cls.F16EMU, "fp16": cls.F16EMU, "float16": cls.F16EMU, "f16emu": cls.F16EMU,
            "bf16": cls.BF16EMU, "bfloat16": cls.BF16EMU, "bf16emu": cls.BF16EMU,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown dtype {name!r}") from None


class MaskKind(enum.Enum):
    NONE = "none"
    CAUSAL = "causal"
    PADDING = "padding"


@dataclass(frozen=True)
class MaskSpec:
    kind: MaskKind = MaskKind.NONE
    valid_len: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind is MaskKind.PADDING:
            if self.valid_len is None or len(self.valid_len) == 0:
                raise ValueError("padding mask needs a per-batch valid_len")
            object.__setattr__(self, "valid_len", tuple(int(n) for n in self.valid_len))
            if any(n < 0 for n in self.valid_len):
                raise ValueError("valid_len entries must be >= 0")
        elif self.valid_len is not None:
            raise ValueError("valid_len is only meaningful for padding masks")

    @classmethod
    def none(cls) -> "MaskSpec":
        return cls(MaskKind.NONE)

    @classmethod
    def causal(cls) -> "MaskSpec":
        return cls(MaskKind.CAUSAL)

    @classmethod
    def padding(cls, valid_len) -> "MaskSpec":
        return cls(MaskKind.PADDING, tuple(valid_len))

    @property
    def is_causal(self) -> bool:
        return self.kind is MaskKind.CAUSAL

    def check(self, shape: Shape) -> None:
        if self.kind is MaskKind.PADDING:
            if len(self.valid_len) != shape.B:
                raise ValueError(f"valid_len has {len(self.valid_len)} entries for B={shape.B}")
            if any(n > shape.S for n in self.valid_len):
                raise ValueError(f"valid_len entries must lie in [0, {shape.S}]")


@dataclass(frozen=True)
class ScaleSpec:
    value: float | None = None

    def __post_init__(self):
        if self.value is not None and not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"scale must be a positive finite number, got {self.value!r}")


def as_scale(scale) -> ScaleSpec:
    if isinstance(scale, ScaleSpec):
        return scale
    return ScaleSpec(None if scale is None else float(scale))


def effective_scale(scale, D: int) -> float:
    """Explicit scale if given, otherwise ``1/sqrt(D)``."""
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    scale = as_scale(scale)
    if scale.value is not None:
        return scale.value
    return 1.0 / math.sqrt(D)


def mask_additive(mask: MaskSpec, b: int, i: int, j: int, S: int) -> float:
    """Additive mask term for query ``i`` / key ``j`` in batch ``b``: 0 or -inf."""
    if not (0 <= i < S and 0 <= j < S):
        raise ValueError(f"indices ({i}, {j}) out of range for S={S}")
    if mask.kind is MaskKind.CAUSAL:
        return 0.0 if j <= i else NEG_INF
    if mask.kind is MaskKind.PADDING:
        if not 0 <= b < len(mask.valid_len):
            raise ValueError(f"batch index {b} out of range")
        return 0.0 if j < mask.valid_len[b] else NEG_INF
    return 0.0


def mask_matrix(mask: MaskSpec, shape: Shape, dtype=np.float64) -> np.ndarray:
    """Dense additive mask broadcastable to ``[B, H, S, S]``."""
    S = shape.S
    if mask.kind is MaskKind.CAUSAL:
        idx = np.arange(S)
        m = np.where(idx[None, :] > idx[:, None], dtype(NEG_INF), dtype(0.0))
        return m[None, None]
    if mask.kind is MaskKind.PADDING:
        m = np.zeros((shape.B, 1, 1, S), dtype=dtype)
        for b, n in enumerate(mask.valid_len):
            m[b, :, :, n:] = NEG_INF
        return m
    return np.zeros((1, 1, 1, 1), dtype=dtype)


@dataclass(frozen=True, eq=False)
class AttnInput:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    dtype: ElemType = ElemType.F32
    shape: Shape = field(init=False)

    def __post_init__(self):
        arrays = []
        for name in ("q", "k", "v"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if a.ndim != 4:
                raise ValueError(f"{name} must be 4-D [B,H,S,D], got shape {a.shape}")
            arrays.append(a)
        if not (arrays[0].shape == arrays[1].shape == arrays[2].shape):
            raise ValueError(f"q, k, v shapes differ: {[a.shape for a in arrays]}")
        for name, a in zip(("q", "k", "v"), arrays):
            if not np.isfinite(a).all():
                raise ValueError(f"{name} contains non-finite values")
            if self.dtype is not ElemType.F32 and not np.array_equal(self.dtype.round(a), a):
                a = self.dtype.round(a)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "shape", Shape(*arrays[0].shape))

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``q, k, v`` reshaped to ``[BH, S, D]`` (views, no copy)."""
        bh = self.shape.BH
        S, D = self.shape.S, self.shape.D
        return (self.q.reshape(bh, S, D), self.k.reshape(bh, S, D), self.v.reshape(bh, S, D))

    def replace(self, **arrays) -> "AttnInput":
        parts = {"q": self.q, "k": self.k, "v": self.v}
        parts.update(arrays)
        return AttnInput(parts["q"], parts["k"], parts["v"], self.dtype)


def make_input(shape: Shape, dtype=ElemType.F32, seed: int = 0) -> AttnInput:
    """Deterministic standard-normal q/k/v snapped to ``dtype``'s grid."""
    dtype = ElemType.parse(dtype)
    rng = np.random.default_rng(seed)
    dims = shape.as_tuple()
    q, k, v = (dtype.round(rng.standard_normal(dims)) for _ in range(3))
    return AttnInput(q, k, v, dtype)
