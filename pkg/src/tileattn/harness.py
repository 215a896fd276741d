"""Measurement harness: warmup, timing, correctness gating, grid sweeps, CSV records."""

from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .analysis import bandwidth_proxy, tokens_per_second
from .config import GridConfig
from .errors import RecordFormatError, ResourceError, TileAttnError, UnsupportedScheduleError
from .reference import sdpa_eager_baseline, sdpa_reference
from .tensors import AttnInput, ElemType, MaskSpec, ScaleSpec, Shape, make_input
from .tiled import DEFAULT_CACHE, Layout, PlanCache, PlanKey, TileSchedule, get_plan, sdpa_tiled

log = logging.getLogger(__name__)

TOLERANCE = {ElemType.F32: 1e-4, ElemType.F16EMU: 5e-3, ElemType.BF16EMU: 2e-2}
CHECK_MAX_S = 256

CSV_HEADER = ["method", "B", "H", "S", "D", "dtype", "causal", "t_m", "t_n", "stages", "layout",
              "median_ms", "p95_ms", "tokens_per_s", "bw_proxy", "status", "status_detail"]
METRIC_FIELDS = ("median_ms", "p95_ms", "tokens_per_s", "bw_proxy")
STATUSES = ("ok", "unsupported", "oom", "check_failed")

NAN = float("nan")


@dataclass(frozen=True)
class Workload:
    inp: AttnInput
    mask: MaskSpec = field(default_factory=MaskSpec.none)
    scale: ScaleSpec = field(default_factory=ScaleSpec)


@dataclass(frozen=True)
class TimingStats:
    n_warmup: int
    n_timed: int
    samples_ms: tuple[float, ...]
    median_ms: float
    p95_ms: float


@dataclass(frozen=True)
class CheckResult:
    max_abs_err: float
    max_rel_err: float
    tol_used: float
    passed: bool


@dataclass(frozen=True)
class BenchRecord:
    method: str
    B: int
    H: int
    S: int
    D: int
    dtype: str
    causal: bool
    t_m: int | None = None
    t_n: int | None = None
    stages: int | None = None
    layout: str | None = None
    median_ms: float = NAN
    p95_ms: float = NAN
    tokens_per_s: float = NAN
    bw_proxy: float = NAN
    status: str = "ok"
    status_detail: str = ""

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        metrics = [getattr(self, f) for f in METRIC_FIELDS]
        if self.status == "ok":
            if not all(math.isfinite(x) and x > 0 for x in metrics):
                raise ValueError(f"ok record needs finite positive metrics, got {metrics}")
        else:
            if not all(math.isnan(x) for x in metrics):
                raise ValueError("non-ok record must carry NaN metrics")
            if not self.status_detail:
                raise ValueError("non-ok record needs a status_detail")

    @property
    def schedule(self) -> TileSchedule | None:
        if self.t_m is None:
            return None
        return TileSchedule(self.t_m, self.t_n, self.stages, self.layout)

    @property
    def shape_key(self) -> tuple:
        return (self.B, self.H, self.S, self.D, self.dtype, self.causal)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def quantiles(samples) -> tuple[float, float]:
    """Median (mean of the middle pair for even n) and nearest-rank p95."""
    xs = sorted(float(x) for x in samples)
    n = len(xs)
    if n == 0:
        raise ValueError("quantiles() needs at least one sample")
    mid = n // 2
    median = xs[mid] if n % 2 else (xs[mid - 1] + xs[mid]) / 2.0
    rank = (95 * n + 99) // 100  # ceil(0.95 n) without float rounding
    return median, xs[rank - 1]


def time_method(method: Callable, workload: Workload, n_warmup: int = 10, n_timed: int = 50,
                clock=time.perf_counter) -> TimingStats:
    """Warm ``method`` up, then time ``n_timed`` individual calls with a monotonic clock."""
    if n_warmup < 1:
        raise ValueError("n_warmup must be >= 1")
    if n_timed < 3:
        raise ValueError("n_timed must be >= 3")
    args = (workload.inp, workload.mask, workload.scale)
    try:
        for _ in range(n_warmup):
            method(*args)
        samples = []
        for _ in range(n_timed):
            t0 = clock()
            method(*args)
            samples.append((clock() - t0) * 1e3)
    except MemoryError as exc:
        raise ResourceError(f"out of memory: {exc}") from exc
    median, p95 = quantiles(samples)
    return TimingStats(n_warmup, n_timed, tuple(samples), median, p95)


def check_correctness(method: Callable, workload: Workload, dtype=None) -> CheckResult:
    """Compare ``method`` against the float64 reference on a small shape.

    ``max_rel_err`` is the max abs error divided by the largest reference magnitude.
    """
    inp = workload.inp
    if inp.shape.S > CHECK_MAX_S:
        raise ValueError(f"correctness checks need S <= {CHECK_MAX_S}, got {inp.shape.S}")
    dtype = ElemType.parse(dtype) if dtype is not None else inp.dtype
    tol = TOLERANCE[dtype]
    ref = sdpa_reference(inp, workload.mask, workload.scale).o
    out = np.asarray(method(inp, workload.mask, workload.scale), dtype=np.float64)
    if out.shape != ref.shape:
        return CheckResult(NAN, NAN, tol, False)
    err = np.abs(out - ref)
    max_abs = float(err.max()) if not np.isnan(err).any() else NAN
    scale = float(np.abs(ref).max()) or 1.0
    max_rel = max_abs / scale
    return CheckResult(max_abs, max_rel, tol, bool(max_abs <= tol))


# --- method registry -------------------------------------------------------

@dataclass(frozen=True)
class Method:
    """A benchmarkable kernel.  ``factory(schedule, cache)`` returns ``fn(inp, mask, scale)``."""

    name: str
    factory: Callable | None
    uses_schedule: bool = False
    available: bool = True
    detail: str = ""


def _tiled_factory(schedule, cache, workers=None):
    schedule = schedule or TileSchedule()
    plans = {}  # plans resolved by this closure; steady-state calls skip the cache

    def run(inp, mask, scale):
        mask = mask or MaskSpec.none()
        key = PlanKey(schedule.t_m, schedule.t_n, inp.shape.D, inp.dtype, mask.is_causal)
        plan = plans.get(key)
        if plan is None:
            schedule.validate()
            plan = plans[key] = get_plan(key, cache)
        return sdpa_tiled(inp, mask, scale, schedule, cache, workers=workers, plan=plan)
    return run


def _eager_factory(schedule, cache, workers=None):
    return sdpa_eager_baseline


def _unavailable(name):
    return Method(name, None, available=False,
                  detail=f"{name} backend probe is not available on this host (no fused GPU kernels)")


METHODS: dict[str, Method] = {
    "tiled": Method("tiled", _tiled_factory, uses_schedule=True),
    "eager": Method("eager", _eager_factory),
    "flash_attention2": _unavailable("flash_attention2"),
    "efficient_attention": _unavailable("efficient_attention"),
    "cudnn_attention": _unavailable("cudnn_attention"),
}


def register_method(method: Method) -> None:
    METHODS[method.name] = method


# --- grid sweep --------------------------------------------------------------

@dataclass
class GridResult:
    records: list[BenchRecord]
    manifest: dict

    def __len__(self) -> int:
        return len(self.records) + 1


def _mask_for(mode: str) -> MaskSpec:
    return MaskSpec.causal() if mode == "causal" else MaskSpec.none()


def _failed(base: dict, status: str, detail: str) -> BenchRecord:
    return BenchRecord(**base, status=status, status_detail=detail or status)


def hardware_description() -> str:
    uname = platform.uname()
    cpu = platform.processor() or uname.machine
    return f"{uname.system} {uname.release} {uname.machine}; cpu={cpu}; logical_cpus={os.cpu_count()}"


def _blas_description() -> str:
    try:
        info = np.show_config(mode="dicts")
        blas = info["Build Dependencies"]["blas"]
        return f"{blas.get('name')} {blas.get('version')}"
    except Exception:  # noqa: BLE001 - numpy build info layout varies across versions
        return "unknown"


def make_manifest(config: GridConfig, n_records: int) -> dict:
    clock = time.get_clock_info("perf_counter")
    return {
        "hardware": hardware_description(),
        "artifact_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "blas": _blas_description(),
        "clock_source": f"time.perf_counter ({clock.implementation}, monotonic={clock.monotonic}, "
                        f"resolution={clock.resolution})",
        "timing_method": "wall clock around each synchronous forward call; median + p95 over N_r runs",
        "n_warmup": config.n_warmup,
        "n_timed": config.n_timed,
        "seed": config.seed,
        "config": config.to_dict(),
        "n_records": n_records,
        "date": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def grid_points(config: GridConfig, sweep_schedules: bool = False):
    """Yield ``(method, S, D, dtype, mask_mode, schedule)`` in a fixed order."""
    for name, S, D, dtype, mode in itertools.product(
            config.methods, config.S, config.D, config.dtypes, config.masks):
        method = METHODS.get(name)
        if method is not None and method.uses_schedule:
            scheds = config.schedules if sweep_schedules else config.schedules[:1]
            for sched in scheds:
                yield name, S, D, dtype, mode, sched
        else:
            yield name, S, D, dtype, mode, None


def measure_point(config: GridConfig, name: str, S: int, D: int, dtype: str, mode: str,
                  schedule: TileSchedule | None, cache: PlanCache, check: bool = True) -> BenchRecord:
    et = ElemType.parse(dtype)
    base = dict(method=name, B=config.B, H=config.H, S=S, D=D, dtype=et.value, causal=mode == "causal")
    if schedule is not None:
        base.update(t_m=schedule.t_m, t_n=schedule.t_n, stages=schedule.stages, layout=schedule.layout.value)
    method = METHODS.get(name)
    if method is None or not method.available:
        return _failed(base, "unsupported", method.detail if method else f"unknown method {name}")
    mask = _mask_for(mode)
    try:
        if schedule is not None:
            schedule.validate()
            get_plan(PlanKey(schedule.t_m, schedule.t_n, D, et, mask.is_causal), cache)
        fn = method.factory(schedule, cache, config.threads)
        if check:
            # points above the oracle limit are checked on an S=256 twin
            twin = min(S, CHECK_MAX_S)
            small = Workload(make_input(Shape(config.B, config.H, twin, D), et, config.seed), mask)
            res = check_correctness(fn, small, et)
            if not res.passed:
                detail = (f"max_abs_err={res.max_abs_err:.3e} > tol={res.tol_used:.1e}"
                          + (f" (S={twin} twin)" if twin != S else ""))
                return _failed(base, "check_failed", detail)
        work = Workload(make_input(Shape(config.B, config.H, S, D), et, config.seed), mask)
        stats = time_method(fn, work, config.n_warmup, config.n_timed)
    except UnsupportedScheduleError as exc:
        return _failed(base, "unsupported", str(exc))
    except (ResourceError, MemoryError) as exc:
        return _failed(base, "oom", str(exc))
    tps = tokens_per_second(config.B, config.H, S, stats.median_ms)
    bw = bandwidth_proxy(config.B, config.H, S, D, et.bytes_per_elem, stats.median_ms)
    return BenchRecord(**base, median_ms=stats.median_ms, p95_ms=stats.p95_ms,
                       tokens_per_s=tps, bw_proxy=bw)


def run_grid(config: GridConfig, *, sweep_schedules: bool = False, cache: PlanCache | None = None,
             check: bool = True, progress: Callable | None = None) -> GridResult:
    """Measure every grid point; failures become NaN records, never dropped rows."""
    config.validate(METHODS)
    cache = cache if cache is not None else DEFAULT_CACHE
    records = []
    for point in grid_points(config, sweep_schedules):
        rec = measure_point(config, *point, cache=cache, check=check)
        if progress is not None:
            progress(rec)
        records.append(rec)
    return GridResult(records, make_manifest(config, len(records)))


# --- CSV persistence -----------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "NaN" if math.isnan(value) else repr(value)
    return str(value)


def write_records(records, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for rec in records:
                writer.writerow([_fmt(getattr(rec, name)) for name in CSV_HEADER])
    except OSError as exc:
        raise OSError(f"cannot write records to {path}: {exc.strerror or exc}") from exc
    return path


_INT_FIELDS = {"B", "H", "S", "D"}
_OPT_INT_FIELDS = {"t_m", "t_n", "stages"}


def _parse_row(row: dict) -> BenchRecord:
    values = {}
    for name in CSV_HEADER:
        raw = row[name]
        if name in _INT_FIELDS:
            values[name] = int(raw)
        elif name in _OPT_INT_FIELDS:
            values[name] = int(raw) if raw != "" else None
        elif name == "layout":
            values[name] = Layout.parse(raw).value if raw != "" else None
        elif name == "causal":
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0"):
                raise ValueError(f"causal must be true/false, got {raw!r}")
            values[name] = lowered in ("true", "1")
        elif name in METRIC_FIELDS:
            values[name] = float(raw)
        elif name == "dtype":
            values[name] = ElemType.parse(raw).value
        else:
            values[name] = raw
    return BenchRecord(**values)


def read_records(path) -> list[BenchRecord]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise OSError(f"cannot read records from {path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise RecordFormatError(f"{path}:1: unexpected header {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise RecordFormatError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                records.append(_parse_row(dict(zip(CSV_HEADER, row))))
            except (ValueError, TileAttnError) as exc:
                raise RecordFormatError(f"{path}:{lineno}: {exc}") from None
    return records


def write_manifest(manifest: dict, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest to {path}: {exc.strerror or exc}") from exc
    return path


def records_equal(a: BenchRecord, b: BenchRecord) -> bool:
    """Field equality treating NaN == NaN."""
    for f in fields(BenchRecord):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        if x != y:
            return False
    return True
