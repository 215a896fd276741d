"""Dense attention: a float64 oracle and an unfused float32 eager baseline.

Both materialize the full ``S x S`` score matrix.  Rows that admit no key at
all produce an all-zero output row.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ResourceError
from .tensors import AttnInput, MaskSpec, as_scale, effective_scale, mask_matrix


@dataclass(frozen=True, eq=False)
class RefOutput:
    o: np.ndarray  # [B,H,S,D] float64
    row_sums: np.ndarray  # [B,H,S] normalizer relative to the row max


def _softmax_rows(scores: np.ndarray):
    """In-place row softmax over the last axis; returns the pre-division sums."""
    m = scores.max(axis=-1, keepdims=True)
    # fully masked rows: keep exp(-inf - 0) = 0 instead of -inf - -inf
    m[np.isneginf(m)] = 0.0
    scores -= m
    np.exp(scores, out=scores)
    l = scores.sum(axis=-1, keepdims=True)
    np.divide(scores, l, out=scores, where=l > 0)
    return l[..., 0]


def reference_weights(inp: AttnInput, mask: MaskSpec, scale=None) -> np.ndarray:
    """Float64 softmax weights ``[B,H,S,S]`` (zero rows where nothing is admitted)."""
    shape = inp.shape
    mask.check(shape)
    s = effective_scale(as_scale(scale), shape.D)
    q = inp.q.astype(np.float64)
    k = inp.k.astype(np.float64)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * s
    scores += mask_matrix(mask, shape, np.float64)
    _softmax_rows(scores)
    return scores


def sdpa_reference(inp: AttnInput, mask: MaskSpec | None = None, scale=None) -> RefOutput:
    """High-precision oracle: dense scores, max-subtracted softmax, all in float64."""
    mask = mask or MaskSpec.none()
    shape = inp.shape
    mask.check(shape)
    s = effective_scale(as_scale(scale), shape.D)
    q = inp.q.astype(np.float64)
    k = inp.k.astype(np.float64)
    v = inp.v.astype(np.float64)
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * s
    scores += mask_matrix(mask, shape, np.float64)
    row_sums = _softmax_rows(scores)
    return RefOutput(np.matmul(scores, v), row_sums)


def _available_bytes() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def eager_scratch_bytes(inp: AttnInput) -> int:
    B, H, S, _ = inp.shape.as_tuple()
    # score tensor plus the additive bias of the same shape
    return 2 * B * H * S * S * 4


def sdpa_eager_baseline(inp: AttnInput, mask: MaskSpec | None = None, scale=None,
                        memory_limit: int | None = None) -> np.ndarray:
    """Unfused float32 attention in the style of a framework's reference math path.

    Builds an additive bias tensor, materializes ``[B,H,S,S]`` scores, runs a
    separate softmax and a second matmul.  Raises :class:`ResourceError` when the
    score tensors would not fit in ``memory_limit`` bytes (default: currently
    available physical memory).
    """
    mask = mask or MaskSpec.none()
    shape = inp.shape
    mask.check(shape)
    need = eager_scratch_bytes(inp)
    limit = memory_limit if memory_limit is not None else _available_bytes()
    if limit is not None and need > limit:
        raise ResourceError(f"eager attention needs {need} bytes of score storage, {limit} available")
    s = np.float32(effective_scale(as_scale(scale), shape.D))
    try:
        bias = np.zeros((shape.B, shape.H, shape.S, shape.S), dtype=np.float32)
        bias += mask_matrix(mask, shape, np.float32)
        scores = np.matmul(inp.q, np.swapaxes(inp.k, -1, -2))
        scores *= s
        scores += bias
        del bias
        _softmax_rows(scores)
        out = np.matmul(scores, inp.v)
    except MemoryError as exc:
        raise ResourceError(f"eager attention allocation failed: {exc}") from exc
    return inp.dtype.round(out)
