import math
import random
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tileattn import MaskSpec, PlanCache, Shape, TileSchedule, make_input, sdpa_tiled
from tileattn.config import GridConfig
from tileattn.errors import RecordFormatError, UnsupportedScheduleError
from tileattn import harness
from tileattn.harness import (CSV_HEADER, BenchRecord, Method, Workload, check_correctness, quantiles,
                              read_records, records_equal, run_grid, time_method, write_records)


def _tiny_config(**kw):
    base = dict(methods=["tiled", "eager"], S=[32], D=[16], dtypes=["f32"], masks=["none", "causal"],
                B=1, H=2, n_warmup=1, n_timed=3, schedules=[TileSchedule(16, 16)])
    base.update(kw)
    return GridConfig(**base)


class TestQuantiles:
    def test_examples(self):
        assert quantiles([1, 2, 3, 4, 5]) == (3, 5)
        assert quantiles([3, 1]) == (2.0, 3)
        assert quantiles([7.5] * 100) == (7.5, 7.5)
        assert quantiles(list(range(1, 21))) == (10.5, 19)
        with pytest.raises(ValueError):
            quantiles([])

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200))
    def test_bounds_and_order(self, xs):
        med, p95 = quantiles(xs)
        assert min(xs) <= med <= p95 <= max(xs)
        assert p95 == sorted(xs)[math.ceil(0.95 * len(xs) - 1e-9) - 1]

    def test_permutation_invariance(self):
        rng = random.Random(1)
        xs = [rng.expovariate(1.0) for _ in range(37)]
        ref = quantiles(xs)
        for _ in range(100):
            rng.shuffle(xs)
            assert quantiles(xs) == ref


class TestTiming:
    def test_busy_wait_stub(self):
        def stub(inp, mask, scale):
            end = time.perf_counter() + 0.005
            while time.perf_counter() < end:
                pass
        stats = time_method(stub, Workload(make_input(Shape(1, 1, 4, 4))), n_warmup=1, n_timed=9)
        assert len(stats.samples_ms) == 9
        assert 5.0 <= stats.median_ms < 7.5

    def test_counts_calls_and_preconditions(self):
        calls = []
        work = Workload(make_input(Shape(1, 1, 4, 4)))
        time_method(lambda *a: calls.append(1), work, n_warmup=2, n_timed=3)
        assert len(calls) == 5
        with pytest.raises(ValueError):
            time_method(lambda *a: None, work, n_warmup=1, n_timed=2)
        with pytest.raises(ValueError):
            time_method(lambda *a: None, work, n_warmup=0, n_timed=3)

    def test_plan_cache_touched_only_in_warmup(self):
        cache = PlanCache()
        fn = harness.METHODS["tiled"].factory(TileSchedule(16, 32), cache)
        snapshots = []

        def clock():
            snapshots.append((cache.hits, cache.constructions))
            return time.perf_counter()
        time_method(fn, Workload(make_input(Shape(1, 1, 40, 8))), n_warmup=3, n_timed=4, clock=clock)
        assert snapshots[0] == (0, 1)
        assert set(snapshots) == {(0, 1)}


class TestCorrectness:
    def test_passes_for_tiled(self):
        fn = harness.METHODS["tiled"].factory(TileSchedule(32, 32), PlanCache())
        res = check_correctness(fn, Workload(make_input(Shape(1, 2, 64, 16), "bf16"), MaskSpec.causal()))
        assert res.passed and res.tol_used == 2e-2 and res.max_abs_err <= res.tol_used

    def test_skipped_tile_is_caught(self):
        def faulty(inp, mask, scale):
            # drop the final key tile, as a broken skip rule would
            k, v = inp.k.copy(), inp.v.copy()
            k[:, :, -16:] = -30.0 * np.abs(inp.q).max()
            return sdpa_tiled(inp.replace(k=k, v=v), mask, scale, TileSchedule(16, 16))
        res = check_correctness(faulty, Workload(make_input(Shape(1, 1, 64, 16))))
        assert not res.passed and res.max_abs_err > 1e-4

    def test_nan_output_fails(self):
        res = check_correctness(lambda inp, m, s: np.full(inp.shape.as_tuple(), np.nan),
                                Workload(make_input(Shape(1, 1, 8, 4))))
        assert not res.passed and math.isnan(res.max_abs_err)

    def test_large_shapes_rejected(self):
        with pytest.raises(ValueError):
            check_correctness(lambda *a: None, Workload(make_input(Shape(1, 1, 257, 4))))


class TestRecords:
    def test_invariants(self):
        with pytest.raises(ValueError):
            BenchRecord("tiled", 1, 1, 8, 8, "f32", False, status="oom", status_detail="x", median_ms=1.0)
        with pytest.raises(ValueError):
            BenchRecord("tiled", 1, 1, 8, 8, "f32", False, status="oom")
        with pytest.raises(ValueError):
            BenchRecord("tiled", 1, 1, 8, 8, "f32", False)
        BenchRecord("tiled", 1, 1, 8, 8, "f32", False, status="unsupported", status_detail="no")

    def test_csv_round_trip(self, tmp_path):
        recs = [BenchRecord("tiled", 1, 8, 512, 64, "f16emu", True, 64, 128, 2, "row",
                            1.25, 1.5, 3276800.0, 1.0e9),
                BenchRecord("eager", 1, 8, 8192, 128, "bf16emu", False,
                            status="oom", status_detail="needs 4 GiB, has 1")]
        path = write_records(recs, tmp_path / "r.csv")
        assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
        back = read_records(path)
        assert len(back) == 2 and all(records_equal(a, b) for a, b in zip(recs, back))
        assert math.isnan(back[1].tokens_per_s)

    def test_malformed_line_names_location(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(",".join(CSV_HEADER) + "\n"
                        "tiled,1,8,512,64,f32,false,64,128,2,row,1.0,1.0,1.0,1.0,ok,\n"
                        "tiled,1,8,512,64,f32,maybe,64,128,2,row,1.0,1.0,1.0,1.0,ok,\n")
        with pytest.raises(RecordFormatError, match=r"bad\.csv:3"):
            read_records(path)
        path.write_text("method,B\n")
        with pytest.raises(RecordFormatError, match=":1"):
            read_records(path)


class TestGrid:
    def test_point_count(self):
        cfg = _tiny_config(S=[32, 64], dtypes=["f32", "bf16"], masks=["none"])
        result = run_grid(cfg, cache=PlanCache())
        assert len(result.records) == 8
        assert all(r.ok for r in result.records)
        assert len(result) == 9  # records + manifest
        m = result.manifest
        for key in ("hardware", "artifact_version", "clock_source", "n_warmup", "n_timed", "seed"):
            assert key in m

    def test_schedule_sweep(self):
        cfg = _tiny_config(methods=["tiled"], masks=["none"],
                           schedules=[TileSchedule(16, 16), TileSchedule(32, 16), TileSchedule(16, 24)])
        recs = run_grid(cfg, sweep_schedules=True, cache=PlanCache()).records
        assert [r.status for r in recs] == ["ok", "ok", "unsupported"]
        assert math.isnan(recs[2].median_ms) and "t_n=24" in recs[2].status_detail

    def test_unavailable_backend_becomes_status(self):
        cfg = _tiny_config(methods=["flash_attention2"], masks=["none"])
        (rec,) = run_grid(cfg, cache=PlanCache()).records
        assert rec.status == "unsupported" and rec.status_detail

    def test_check_failure_is_recorded(self, monkeypatch):
        def factory(schedule, cache, workers=None):
            return lambda inp, mask, scale: np.zeros(inp.shape.as_tuple())
        monkeypatch.setitem(harness.METHODS, "broken", Method("broken", factory))
        cfg = _tiny_config(methods=["broken"], masks=["none"], S=[300])
        (rec,) = run_grid(cfg, cache=PlanCache()).records
        assert rec.status == "check_failed" and "S=256 twin" in rec.status_detail

    def test_oom_becomes_status(self, monkeypatch):
        def factory(schedule, cache, workers=None):
            def run(inp, mask, scale):
                raise MemoryError("simulated")
            return run
        monkeypatch.setitem(harness.METHODS, "hungry", Method("hungry", factory))
        (rec,) = run_grid(_tiny_config(methods=["hungry"], masks=["none"]), cache=PlanCache(),
                          check=False).records
        assert rec.status == "oom"

    def test_deterministic_structure(self):
        cfg = _tiny_config()
        a = run_grid(cfg, cache=PlanCache()).records
        b = run_grid(cfg, cache=PlanCache()).records
        strip = lambda r: (r.method, r.shape_key, r.schedule, r.status)  # noqa: E731
        assert [strip(r) for r in a] == [strip(r) for r in b]


def test_unsupported_schedule_error_is_value_agnostic():
    with pytest.raises(UnsupportedScheduleError):
        TileSchedule(48, 16).validate()
