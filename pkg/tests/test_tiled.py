import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import two_pass_row, visited_tiles
from tileattn import (ElemType, KernelStats, MaskSpec, PlanCache, PlanKey, Shape, SoftmaxState,
                      TileSchedule, finalize, get_plan, make_input, online_update, score_tile, sdpa,
                      sdpa_reference, sdpa_tiled)
from tileattn.errors import UnsupportedScheduleError
from tileattn.tiled import THREADS_ENV, worker_count

TOL = {"f32": 1e-4, "f16emu": 5e-3, "bf16emu": 2e-2}


def _fold(tiles, D=1):
    st_ = SoftmaxState.init(1, D)
    for scores, values in tiles:
        st_ = online_update(st_, np.array([scores]), np.array(values, dtype=float))
    return st_


class TestOnlineSoftmax:
    def test_two_tile_worked_example(self):
        first = _fold([([0.0], [[1.0]])])
        assert (first.m[0], first.l[0], first.o[0, 0]) == (0.0, 1.0, 1.0)
        both = _fold([([0.0], [[1.0]]), ([math.log(3)], [[2.0]])])
        assert both.m[0] == pytest.approx(math.log(3), abs=1e-15)
        assert both.l[0] == pytest.approx(4 / 3, abs=1e-12)
        assert both.o[0, 0] == pytest.approx(7 / 3, abs=1e-12)
        assert abs(finalize(both)[0, 0] - 1.75) <= 1e-12

    def test_update_is_functional(self):
        s0 = SoftmaxState.init(1, 1)
        scores = np.array([[0.5]])
        online_update(s0, scores, [[1.0]])
        assert s0.m[0] == -np.inf and scores[0, 0] == 0.5

    def test_all_masked_tile_keeps_state_finite(self):
        st_ = _fold([([-np.inf, -np.inf], [[1.0], [2.0]])])
        assert st_.m[0] == -np.inf and st_.l[0] == 0.0 and st_.o[0, 0] == 0.0
        assert finalize(st_)[0, 0] == 0.0
        st_ = online_update(st_, np.array([[1.0]]), np.array([[5.0]]))
        assert finalize(st_)[0, 0] == 5.0

    def test_tied_maxima(self):
        st_ = _fold([([2.0, 2.0], [[1.0], [3.0]]), ([2.0], [[5.0]])])
        assert st_.m[0] == 2.0 and st_.l[0] == 3.0
        assert finalize(st_)[0, 0] == pytest.approx(3.0, abs=1e-15)

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.data())
    def test_chain_matches_direct_softmax(self, scores, data):
        vals = data.draw(st.lists(st.floats(-5, 5), min_size=len(scores), max_size=len(scores)))
        cuts = sorted(data.draw(st.sets(st.integers(1, len(scores) - 1), max_size=3))) if len(scores) > 1 else []
        bounds = [0, *cuts, len(scores)]
        tiles = [(scores[a:b], [[v] for v in vals[a:b]]) for a, b in zip(bounds, bounds[1:])]
        got = finalize(_fold(tiles))[0, 0]
        assert abs(got - two_pass_row(scores, [[v] for v in vals])[0]) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(-50, 50), min_size=1, max_size=4), min_size=1, max_size=6))
    def test_monotone_state(self, tiles):
        # m is non-decreasing; the unscaled normalizer l * exp(m) is non-decreasing
        st_ = SoftmaxState.init(1, 1)
        prev_m, prev_total = -np.inf, 0.0
        for t in tiles:
            st_ = online_update(st_, np.array([t]), np.ones((len(t), 1)))
            total = st_.l[0] * math.exp(st_.m[0])
            assert st_.m[0] >= prev_m
            assert total >= prev_total * (1 - 1e-12)
            assert 1.0 <= st_.l[0] <= sum(len(x) for x in tiles)
            prev_m, prev_total = st_.m[0], total


def test_score_tile_examples():
    q = np.array([[1.0, 2.0], [0.0, 1.0]])
    k = np.array([[3.0, 0.0, -1.0], [1.0, 2.0, 1.0]])  # [D, cols]
    np.testing.assert_array_equal(score_tile(q, k, 0.5), [[2.5, 2.0, 0.5], [0.5, 1.0, 0.5]])
    out = np.empty((2, 3))
    assert score_tile(q, k, 1.0, out=out) is out


class TestPlanCache:
    def test_hits_and_constructions(self):
        cache = PlanCache()
        key = PlanKey(64, 64, 32, ElemType.F32, True)
        p1 = get_plan(key, cache)
        p2 = get_plan(key, cache)
        assert p1 is p2 and cache.constructions == 1 and cache.hits == 1
        get_plan(PlanKey(64, 64, 32, ElemType.F32, False), cache)
        assert cache.constructions == 2 and len(cache) == 2

    def test_concurrent_lookups_agree(self):
        cache = PlanCache()
        key = PlanKey(32, 64, 16, ElemType.BF16EMU, True)
        got = []
        threads = [threading.Thread(target=lambda: got.append(cache.lookup(key))) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len({id(p) for p in got}) == 1
        assert cache.hits + cache.constructions == 8

    def test_causal_template(self):
        plan = get_plan(PlanKey(16, 16, 8, ElemType.F32, True), PlanCache())
        # query rows [16, 32) against keys [16, 32): lower triangle admitted
        m = plan.diagonal_mask(16, 16, 16, 16)
        expected = np.where(np.arange(16)[None, :] > np.arange(16)[:, None], -np.inf, 0.0)
        np.testing.assert_array_equal(m, expected)

    @pytest.mark.parametrize("sched", [TileSchedule(24, 64), TileSchedule(64, 512), TileSchedule(64, 64, 5)])
    def test_unsupported_schedules(self, sched, small_input):
        with pytest.raises(UnsupportedScheduleError):
            sdpa_tiled(small_input, schedule=sched)

    def test_head_dim_limit(self, cache):
        with pytest.raises(UnsupportedScheduleError):
            get_plan(PlanKey(16, 16, 512, ElemType.F32, False), cache)


def test_ragged_edge_tiles_match_reference(cache):
    inp = make_input(Shape(1, 2, 130, 64), "f32", seed=11)
    for mask in (MaskSpec.none(), MaskSpec.causal(), MaskSpec.padding([97])):
        out = sdpa_tiled(inp, mask, schedule=TileSchedule(64, 64), cache=cache)
        assert np.abs(out - sdpa_reference(inp, mask).o).max() <= 1e-4


def test_f64_mode_is_near_exact(cache):
    inp = make_input(Shape(1, 1, 100, 24), "f32", seed=12)
    for mask in (MaskSpec.none(), MaskSpec.causal()):
        out = sdpa_tiled(inp, mask, schedule=TileSchedule(16, 32, 3, "col"), cache=cache, accumulate="f64")
        assert out.dtype == np.float64
        assert np.abs(out - sdpa_reference(inp, mask).o).max() <= 1e-12


def test_output_on_dtype_grid(cache):
    inp = make_input(Shape(1, 1, 32, 16), "bf16", seed=1)
    out = sdpa_tiled(inp, cache=cache)
    assert np.array_equal(ElemType.BF16EMU.round(out), out)


class TestTileSkipping:
    def test_first_query_tile_reads_one_kv_tile(self, cache):
        stats = KernelStats()
        sdpa_tiled(make_input(Shape(1, 1, 256, 8), "f32"), MaskSpec.causal(),
                   schedule=TileSchedule(64, 64), cache=cache, stats=stats)
        assert stats.visits_per_item[(0, 0)] == 1
        assert [stats.visits_per_item[(0, i)] for i in range(4)] == [1, 2, 3, 4]

    @pytest.mark.parametrize("S,t_m,t_n", [(256, 64, 64), (1000, 128, 64), (1000, 16, 128), (77, 32, 16)])
    def test_visit_count_matches_enumeration(self, S, t_m, t_n, cache):
        stats = KernelStats()
        sdpa_tiled(make_input(Shape(1, 1, S, 8), "f32"), MaskSpec.causal(),
                   schedule=TileSchedule(t_m, t_n), cache=cache, stats=stats)
        assert stats.tile_visits == visited_tiles(S, t_m, t_n)

    def test_padding_does_not_skip(self, cache):
        stats = KernelStats()
        sdpa_tiled(make_input(Shape(1, 1, 128, 8), "f32"), MaskSpec.padding([10]),
                   schedule=TileSchedule(32, 32), cache=cache, stats=stats)
        assert stats.tile_visits == 4 * 4


@pytest.mark.parametrize("sched", [TileSchedule(16, 16, 1), TileSchedule(64, 128, 2),
                                   TileSchedule(128, 256, 4, "col"), TileSchedule(32, 64, 3, "col")])
def test_scratch_within_bound(sched, cache):
    stats = KernelStats()
    D = 96
    sdpa_tiled(make_input(Shape(1, 1, 300, D), "f32"), schedule=sched, cache=cache, stats=stats)
    assert 0 < stats.peak_scratch <= sched.scratch_bound(D)


def test_causal_rows_ignore_future_keys(cache):
    inp = make_input(Shape(1, 2, 96, 16), "f32", seed=5)
    rng = np.random.default_rng(0)
    base = sdpa_tiled(inp, MaskSpec.causal(), schedule=TileSchedule(32, 16, 2), cache=cache)
    for _ in range(5):
        i = int(rng.integers(0, 95))
        k, v = inp.k.copy(), inp.v.copy()
        k[:, :, i + 1:] += rng.standard_normal(k[:, :, i + 1:].shape).astype(np.float32)
        v[:, :, i + 1:] *= -3
        out = sdpa_tiled(inp.replace(k=k, v=v), MaskSpec.causal(), schedule=TileSchedule(32, 16, 2), cache=cache)
        assert np.array_equal(out[:, :, :i + 1].view(np.uint32), base[:, :, :i + 1].view(np.uint32))


def test_worker_pool_is_bitwise_identical(cache):
    inp = make_input(Shape(2, 2, 80, 16), "f16", seed=9)
    one = sdpa_tiled(inp, MaskSpec.causal(), schedule=TileSchedule(16, 32), cache=cache, workers=1)
    many = sdpa_tiled(inp, MaskSpec.causal(), schedule=TileSchedule(16, 32), cache=cache, workers=4)
    assert np.array_equal(one, many)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(THREADS_ENV, "0")
    assert worker_count() >= 1
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ValueError):
        worker_count()


def test_plan_key_mismatch_rejected(cache, small_input):
    plan = get_plan(PlanKey(16, 16, 99, ElemType.F32, False), cache)
    with pytest.raises(ValueError):
        sdpa_tiled(small_input, schedule=TileSchedule(16, 16), plan=plan)


def test_functional_entry_point():
    inp = make_input(Shape(1, 2, 20, 8), "f32", seed=2)
    out = sdpa(inp.q, inp.k, inp.v, causal=True, scale=0.2)
    ref = sdpa_reference(inp, MaskSpec.causal(), 0.2).o
    assert np.abs(out - ref).max() <= 1e-4


@settings(max_examples=40, deadline=None)
@given(S=st.integers(1, 90), D=st.sampled_from([1, 8, 33]), dtype=st.sampled_from(list(TOL)),
       t_m=st.sampled_from([16, 32, 64, 128]), t_n=st.sampled_from([16, 32, 64, 128, 256]),
       stages=st.integers(1, 4), layout=st.sampled_from(["row", "col"]),
       mask_kind=st.sampled_from(["none", "causal", "padding"]), seed=st.integers(0, 2**16))
def test_matches_reference_property(S, D, dtype, t_m, t_n, stages, layout, mask_kind, seed):
    inp = make_input(Shape(2, 1, S, D), dtype, seed)
    mask = {"none": MaskSpec.none(), "causal": MaskSpec.causal(),
            "padding": MaskSpec.padding([S, seed % (S + 1)])}[mask_kind]
    sched = TileSchedule(t_m, t_n, stages, layout)
    stats = KernelStats()
    out = sdpa_tiled(inp, mask, schedule=sched, stats=stats)
    assert np.abs(out - sdpa_reference(inp, mask).o).max() <= TOL[dtype]
    assert stats.peak_scratch <= sched.scratch_bound(D)
