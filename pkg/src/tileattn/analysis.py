"""Derived metrics and report products computed from benchmark records.

Everything here is a pure transform over record lists.  Records only need the
attributes of :class:`tileattn.harness.BenchRecord`.
"""

from __future__ import annotations

import csv
import math
import statistics
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

NAN = float("nan")


def tokens_per_second(B: int, H: int, S: int, t_fwd_ms: float) -> float:
    if not t_fwd_ms > 0:
        raise ValueError(f"forward time must be positive, got {t_fwd_ms}")
    return B * H * S / (t_fwd_ms / 1000.0)


def bandwidth_proxy(B: int, H: int, S: int, D: int, bytes_per_elem: int, t_fwd_ms: float) -> float:
    """Bytes/s for reading q, k, v and writing o once: ``4*B*H*S*D*bytes / t``."""
    if not t_fwd_ms > 0:
        raise ValueError(f"forward time must be positive, got {t_fwd_ms}")
    return 4 * B * H * S * D * bytes_per_elem / (t_fwd_ms / 1000.0)


def flop_rate(B: int, H: int, S: int, D: int, t_fwd_ms: float) -> float:
    """FLOP/s for the two dense GEMMs of the forward pass (``4*B*H*S^2*D``)."""
    if not t_fwd_ms > 0:
        raise ValueError(f"forward time must be positive, got {t_fwd_ms}")
    return 4 * B * H * S * S * D / (t_fwd_ms / 1000.0)


def _finite(x) -> bool:
    return x is not None and isinstance(x, (int, float)) and math.isfinite(x)


def normalize_bw(values) -> list[float]:
    """Divide by the panel maximum; NaN entries stay NaN."""
    values = [float(v) for v in values]
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        raise ValueError("normalize_bw needs at least one finite value")
    peak = max(finite)
    return [v / peak if math.isfinite(v) else NAN for v in values]


def _best_by_point(records, method, dtype=None, causal=None):
    """Highest finite tokens/s per (B,H,S,D,dtype,causal) point for one method.

    Points where the method only has failed records map to NaN.
    """
    best = {}
    for r in records:
        if r.method != method:
            continue
        if dtype is not None and r.dtype != dtype:
            continue
        if causal is not None and r.causal != causal:
            continue
        prev = best.get(r.shape_key, NAN)
        tps = r.tokens_per_s if r.status == "ok" else NAN
        if math.isnan(prev) or (_finite(tps) and tps > prev):
            best[r.shape_key] = tps
    return best


@dataclass(frozen=True)
class RegimeCell:
    S: int
    D: int
    percent_of_baseline: float


def regime_map(records, method: str, baseline: str, dtype=None, causal=None) -> list[RegimeCell]:
    """Method throughput as a percentage of the baseline over the (S, D) grid.

    When a cell holds several paired points (e.g. different B or H) the cell is
    the mean of their percentages.
    """
    ours = _best_by_point(records, method, dtype, causal)
    theirs = _best_by_point(records, baseline, dtype, causal)
    cells = defaultdict(list)
    for key in set(ours) | set(theirs):
        S, D = key[2], key[3]
        a, b = ours.get(key, NAN), theirs.get(key, NAN)
        cells[(S, D)].append(100.0 * (a / b) if _finite(a) and _finite(b) else NAN)
    out = []
    for (S, D) in sorted(cells):
        vals = cells[(S, D)]
        pct = NAN if any(math.isnan(v) for v in vals) else sum(vals) / len(vals)
        out.append(RegimeCell(S, D, pct))
    return out


@dataclass(frozen=True)
class RatioSummary:
    mean: float
    median: float
    wins: int
    total: int  # paired points
    count: int  # paired points with a finite ratio


def ratios(records, method: str, baseline: str, where=None) -> dict:
    """Per-point tokens/s ratio method/baseline for points both sides report."""
    ours = _best_by_point(records, method)
    theirs = _best_by_point(records, baseline)
    out = {}
    for key in sorted(set(ours) & set(theirs)):
        if where is not None and not where(key):
            continue
        a, b = ours[key], theirs[key]
        out[key] = a / b if _finite(a) and _finite(b) else NAN
    return out


def aggregate_ratios(records, method: str, baseline: str, where=None) -> RatioSummary:
    """Mean, median and win count of method/baseline throughput ratios.

    ``where`` optionally filters points by their ``(B,H,S,D,dtype,causal)`` key.
    """
    rs = list(ratios(records, method, baseline, where).values())
    finite = [r for r in rs if math.isfinite(r)]
    if not finite:
        return RatioSummary(NAN, NAN, 0, len(rs), 0)
    return RatioSummary(statistics.fmean(finite), statistics.median(finite),
                        sum(r > 1 for r in finite), len(rs), len(finite))


def aggregate_by(records, method: str, baseline: str, field: str = "D") -> dict:
    index = {"B": 0, "H": 1, "S": 2, "D": 3, "dtype": 4, "causal": 5}[field]
    keys = sorted({k[index] for k in ratios(records, method, baseline)})
    return {v: aggregate_ratios(records, method, baseline, where=lambda k, v=v: k[index] == v)
            for v in keys}


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityRow:
    regime: str
    B: int
    H: int
    S: int
    D: int
    dtype: str
    causal: bool
    best: str
    runner_up: str
    best_tokens_per_s: float
    runner_up_tokens_per_s: float
    drop_percent: float


def regime_label(S: int) -> str:
    if S <= 2048:
        return "short"
    if S <= 4096:
        return "mid"
    return "long"


def schedule_label(r) -> str:
    return f"{r.t_m}x{r.t_n}/s{r.stages}/{r.layout}"


def sensitivity_row(group) -> SensitivityRow:
    """Best vs runner-up schedule for one shape; needs two ``ok`` schedules."""
    ok = [r for r in group if r.status == "ok" and r.t_m is not None and _finite(r.tokens_per_s)]
    if len(ok) < 2:
        raise InsufficientDataError(f"need >= 2 ok schedules per shape, got {len(ok)}")
    ok.sort(key=lambda r: (-r.tokens_per_s, schedule_label(r)))
    best, runner = ok[0], ok[1]
    drop = 100.0 * (best.tokens_per_s - runner.tokens_per_s) / best.tokens_per_s
    B, H, S, D, dtype, causal = best.shape_key
    return SensitivityRow(regime_label(S), B, H, S, D, dtype, causal, schedule_label(best),
                          schedule_label(runner), best.tokens_per_s, runner.tokens_per_s, drop)


def group_by_shape(records, method: str | None = "tiled") -> dict:
    groups = defaultdict(list)
    for r in records:
        if method is None or r.method == method:
            groups[r.shape_key].append(r)
    return dict(sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])))


def sensitivity(records, method: str | None = "tiled") -> list[SensitivityRow]:
    return [sensitivity_row(g) for g in group_by_shape(records, method).values()]


# --- output files ------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["NaN" if isinstance(x, float) and math.isnan(x) else x for x in row])
    return path


def write_regime_csv(cells, path) -> Path:
    return _write_csv(Path(path), ["S", "D", "percent"], [(c.S, c.D, c.percent_of_baseline) for c in cells])


def write_aggregate_csv(rows: dict, path) -> Path:
    """``rows`` maps a comparison label to a :class:`RatioSummary`."""
    return _write_csv(Path(path), ["comparison", "mean_ratio", "median_ratio", "wins", "total", "count"],
                      [(label, s.mean, s.median, s.wins, s.total, s.count) for label, s in rows.items()])


def write_sensitivity_csv(rows, path) -> Path:
    header = ["regime", "B", "H", "S", "D", "dtype", "causal", "best", "runner_up",
              "best_tokens_per_s", "runner_up_tokens_per_s", "drop_percent"]
    return _write_csv(Path(path), header, [
        (r.regime, r.B, r.H, r.S, r.D, r.dtype, str(r.causal).lower(), r.best, r.runner_up,
         r.best_tokens_per_s, r.runner_up_tokens_per_s, r.drop_percent) for r in rows])


def format_aggregate_table(rows: dict) -> str:
    lines = [f"{'Comparison':<32} {'Mean ratio':>11} {'Median ratio':>13} {'Win count':>10}"]
    for label, s in rows.items():
        mean = f"{s.mean:.3f}x" if s.count else "n/a"
        median = f"{s.median:.3f}x" if s.count else "n/a"
        lines.append(f"{label:<32} {mean:>11} {median:>13} {s.wins:>4d} / {s.total:<4d}")
    return "\n".join(lines)


def _pick_panel(records):
    """(D, dtype, causal) slice used by the single-panel plots."""
    ok = [r for r in records if r.status == "ok"] or list(records)
    Ds = sorted({r.D for r in ok})
    D = 128 if 128 in Ds else Ds[-1]
    dtypes = sorted({r.dtype for r in ok if r.D == D})
    dtype = dtypes[0]
    causal_opts = {r.causal for r in ok if r.D == D and r.dtype == dtype}
    causal = False if False in causal_opts else True
    return D, dtype, causal


def emit_plots(records, out_dir, method: str = "tiled", baseline: str = "eager") -> list[Path]:
    """Render throughput, regime-map and bandwidth-proxy SVGs plus companion CSVs.

    Output is byte-identical for identical input.  NaN points are left out of the
    line plots and hatched in the heatmap.
    """
    records = list(records)
    if not records:
        warnings.warn("emit_plots: no records, nothing written", stacklevel=2)
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rc = {"svg.hashsalt": "tileattn", "svg.fonttype": "none", "font.size": 9}
    written = []
    D, dtype, causal = _pick_panel(records)
    methods = sorted({r.method for r in records})
    mask = "causal" if causal else "non-causal"

    with plt.rc_context(rc):
        # throughput vs S, median points with downward p95 whiskers
        tp_rows = []
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, name in enumerate(methods):
            best = {}
            for r in records:
                if r.method == name and r.D == D and r.dtype == dtype and r.causal == causal:
                    cur = best.get(r.S)
                    if cur is None or (r.status == "ok" and (cur.status != "ok" or r.tokens_per_s > cur.tokens_per_s)):
                        best[r.S] = r
            pts = sorted(best.values(), key=lambda r: r.S)
            for r in pts:
                p95_tps = r.B * r.H * r.S / (r.p95_ms / 1000.0) if r.status == "ok" else NAN
                tp_rows.append((name, r.dtype, str(r.causal).lower(), r.S, r.D, r.tokens_per_s, p95_tps))
            okp = [r for r in pts if r.status == "ok"]
            if not okp:
                continue
            xs = np.array([r.S for r in okp], dtype=float) * (1 + 0.01 * i)
            ys = np.array([r.tokens_per_s for r in okp])
            lo = np.array([r.B * r.H * r.S / (r.p95_ms / 1000.0) for r in okp])
            ax.errorbar(xs, ys, yerr=np.vstack([ys - lo, np.zeros_like(ys)]), marker="o", capsize=3, label=name)
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("sequence length S")
        ax.set_ylabel("tokens/s (median)")
        ax.set_title(f"Throughput vs S (D={D}, {dtype}, {mask})")
        ax.grid(True, which="both", alpha=0.3)
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
        written.append(_save(fig, out_dir / "throughput_vs_s.svg"))
        written.append(_write_csv(out_dir / "throughput_vs_s.csv",
                                  ["method", "dtype", "causal", "S", "D", "tokens_per_s", "p95_tokens_per_s"],
                                  tp_rows))

        # regime heatmap
        cells = regime_map(records, method, baseline, dtype=dtype, causal=causal)
        Ss = sorted({c.S for c in cells})
        Ds = sorted({c.D for c in cells})
        grid = np.full((len(Ds), len(Ss)), np.nan)
        for c in cells:
            grid[Ds.index(c.D), Ss.index(c.S)] = c.percent_of_baseline
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.set_facecolor("white")
        if cells:
            ax.add_patch(plt.Rectangle((-0.5, -0.5), len(Ss), len(Ds), fill=False, hatch="//",
                                       edgecolor="0.6", linewidth=0))
            mesh = ax.imshow(np.ma.masked_invalid(grid), cmap="viridis", origin="lower", aspect="auto")
            fig.colorbar(mesh, ax=ax, label=f"% of {baseline}")
            for yi in range(len(Ds)):
                for xi in range(len(Ss)):
                    v = grid[yi, xi]
                    ax.text(xi, yi, "n/a" if np.isnan(v) else f"{v:.0f}%", ha="center", va="center",
                            fontsize=8, color="black" if np.isnan(v) else "white")
        ax.set_xticks(range(len(Ss)), [str(s) for s in Ss])
        ax.set_yticks(range(len(Ds)), [str(d) for d in Ds])
        ax.set_xlabel("S")
        ax.set_ylabel("D")
        ax.set_title(f"{method} as % of {baseline} ({dtype}, {mask})")
        written.append(_save(fig, out_dir / "regime_map.svg"))
        written.append(write_regime_csv(cells, out_dir / "regime_map.csv"))

        # normalized bandwidth proxy, one panel
        panel = []
        for r in sorted(records, key=lambda r: (r.method, r.S)):
            if r.D == D and r.dtype == dtype and r.causal == causal:
                panel.append(r)
        bw_rows = []
        fig, ax = plt.subplots(figsize=(6, 4))
        finite = [r.bw_proxy for r in panel if r.status == "ok" and math.isfinite(r.bw_proxy)]
        if finite:
            normed = normalize_bw([r.bw_proxy for r in panel])
            for name in methods:
                pts = [(r, n) for r, n in zip(panel, normed) if r.method == name]
                bw_rows.extend((name, r.S, r.bw_proxy, n) for r, n in pts)
                fin = [(r.S, n) for r, n in pts if math.isfinite(n)]
                if fin:
                    ax.plot([s for s, _ in fin], [n for _, n in fin], marker="o", label=name)
            if ax.get_legend_handles_labels()[0]:
                ax.legend()
        ax.set_xscale("log", base=2)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("S")
        ax.set_ylabel("normalized bandwidth proxy")
        ax.set_title(f"Bandwidth proxy (D={D}, {dtype}, {mask})")
        ax.grid(True, alpha=0.3)
        written.append(_save(fig, out_dir / "bw_proxy.svg"))
        written.append(_write_csv(out_dir / "bw_proxy.csv", ["method", "S", "bw_proxy", "normalized"], bw_rows))
    return written


def _save(fig, path: Path) -> Path:
    import matplotlib.pyplot as plt

    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
