"""Tiled online-softmax attention with a reproducible benchmark workflow."""

__version__ = "0.1.0"

from .tensors import (AttnInput, ElemType, MaskKind, MaskSpec, ScaleSpec, Shape,
                      effective_scale, make_input, mask_additive)
from .reference import RefOutput, sdpa_eager_baseline, sdpa_reference
from .tiled import (DEFAULT_CACHE, KernelStats, Layout, Plan, PlanCache, PlanKey,
                    SoftmaxState, TileSchedule, finalize, get_plan, online_update,
                    score_tile, sdpa, sdpa_tiled)
