import csv
import math

import numpy as np
import pytest

from conftest import TINY_DEC
from streamcast.aggregation import Aggregator
from streamcast.model import BaseModel
from streamcast.scenario import window_at
from streamcast.streaming import (CSV_HEADER, MISS_THRESHOLD, CacheEntry, QueryCache, ScheduleError,
                                  StreamSchedule, check, min_ade, min_fde, miss_rate, run_stream,
                                  slice_horizon, validate, write_report_csv)


# ---------------------------------------------------------------- schedule


def test_both_long_horizon_configurations_validate():
    assert validate(StreamSchedule(window=10, a=0, b=50, h_obs=50, h_pred=60)) is None
    assert validate(StreamSchedule(window=10, a=0, b=60, h_obs=40, h_pred=70)) is None


def test_overlap_violation():
    msg = validate(StreamSchedule(window=10, a=0, b=60, h_obs=50, h_pred=60))
    assert msg is not None and "M-1=9" in msg
    with pytest.raises(ScheduleError):
        check(StreamSchedule(window=10, a=0, b=60, h_obs=50, h_pred=60))


def test_interval_validation():
    assert validate(StreamSchedule(a=5, b=5)) is not None
    assert validate(StreamSchedule(a=0, b=31)) is not None
    assert validate(StreamSchedule()) is None


def test_episode_too_short(episodes):
    long = StreamSchedule(window=10, a=0, b=60, h_obs=40, h_pred=70)
    assert "frames" in validate(long, episodes[0])
    assert validate(StreamSchedule(), episodes[0]) is None


def test_anchors(episodes):
    s = StreamSchedule()
    ep = episodes[0]
    anchors = s.anchors(ep)
    assert anchors[0] == ep.start_frame + s.h_obs - 1 + s.window - 1
    assert len(anchors) == s.anchors_per_episode
    everything = StreamSchedule(anchors_per_episode=0).anchors(ep)
    assert everything[-1] == ep.start_frame + ep.num_frames - 1 - s.b


# ---------------------------------------------------------------- slicing


def test_identity_slice():
    s = StreamSchedule(window=1, a=0, b=30)
    traj = np.random.default_rng(0).normal(size=(6, 30, 2))
    assert np.array_equal(slice_horizon(traj, 0, s), traj)


def test_slice_positions_example():
    s = StreamSchedule(window=10, a=0, b=50, h_obs=50, h_pred=60)
    pos = np.arange(1, 61, dtype=float)[:, None].repeat(2, axis=1)
    out = slice_horizon(pos, 9, s)
    assert out[0, 0] == 10 and out[-1, 0] == 59 and len(out) == 50


def test_slices_cover_the_same_frames():
    for s in (StreamSchedule(), StreamSchedule(window=10, a=10, b=50, h_obs=50, h_pred=60),
              StreamSchedule(window=10, a=0, b=60, h_obs=40, h_pred=70)):
        t0 = 100
        frames = set()
        for m in range(s.window):
            # forecast frames of a prediction issued at t0 - m
            issued = np.arange(t0 - m + 1, t0 - m + s.h_pred + 1, dtype=float)[:, None].repeat(2, axis=1)
            sl = slice_horizon(issued, m, s)
            assert len(sl) == s.b - s.a
            frames.add(tuple(sl[:, 0]))
        assert frames == {tuple(float(f) for f in range(t0 + s.a + 1, t0 + s.b + 1))}


def test_slice_preserves_values():
    s = StreamSchedule()
    rng = np.random.default_rng(1)
    traj = rng.normal(size=(6, 30, 2))
    for m in range(s.window):
        sl = slice_horizon(traj, m, s)
        for k in range(s.b - s.a):
            assert np.array_equal(sl[:, k], traj[:, s.a + m + k])


def test_slice_offset_out_of_range():
    with pytest.raises(ScheduleError):
        slice_horizon(np.zeros((1, 30, 2)), 11, StreamSchedule())


# ---------------------------------------------------------------- metrics


def test_metric_examples():
    gt = np.cumsum(np.ones((8, 2)), axis=0)
    assert min_ade(gt[None], gt) == 0.0 and min_fde(gt[None], gt) == 0.0
    preds = np.zeros((2, 1, 2))
    preds[0, 0] = [3, 4]
    preds[1, 0] = [30, 40]
    assert min_fde(preds, np.zeros((1, 2))) == 5.0
    assert miss_rate([5.0]) == 1.0
    six = np.stack([gt + 100.0] * 5 + [gt + np.array([0.0, 1.0])])
    assert min_fde(six, gt) == 1.0 and min_ade(six, gt) == 1.0 and miss_rate([1.0]) == 0.0


def dist(p, q):
    dx, dy = p[0] - q[0], p[1] - q[1]
    return math.sqrt(dx * dx + dy * dy)


def oracle(preds, gt):
    best, best_k = math.inf, -1
    for k in range(len(preds)):
        d = dist(preds[k][-1], gt[-1])
        if d < best:
            best, best_k = d, k
    ade = math.fsum(dist(preds[best_k][t], gt[t]) for t in range(len(gt))) / len(gt)
    return ade, best, best > 2.0


def metric_oracle_mismatches(count=1000, seed=0):
    """Number of random instances where the metrics differ from the brute-force oracle."""
    rng = np.random.default_rng(seed)
    bad = 0
    fdes, misses = [], []
    for _ in range(count):
        n, t = int(rng.integers(1, 8)), int(rng.integers(1, 12))
        gt = rng.normal(0, 3, size=(t, 2))
        preds = gt + rng.normal(0, 2, size=(n, t, 2))
        ade, fde, miss = oracle(preds.tolist(), gt.tolist())
        bad += (min_ade(preds, gt) != ade) + (min_fde(preds, gt) != fde)
        fdes.append(fde)
        misses.append(miss)
    bad += miss_rate(fdes) != sum(misses) / len(misses)
    return bad


def test_metrics_match_brute_force():
    assert metric_oracle_mismatches() == 0


def test_miss_rate_threshold_monotone():
    rng = np.random.default_rng(2)
    for _ in range(50):
        f = rng.exponential(2.0, size=40)
        rates = [miss_rate(f, th) for th in (1.0, 2.0, 4.0)]
        assert rates[0] >= rates[1] >= rates[2]
    assert MISS_THRESHOLD == 2.0
    assert miss_rate([2.0]) == 0.0


def test_metric_errors():
    with pytest.raises(ValueError):
        min_fde(np.zeros((0, 3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        min_ade(np.zeros((2, 3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        miss_rate([])


# ---------------------------------------------------------------- cache


def test_query_cache_ring():
    qc = QueryCache(3)
    for t in range(5):
        qc.push(t, CacheEntry([], [], None))
    assert qc.times() == [2, 3, 4] and qc.full() and len(qc) == 3
    qc.push(9, CacheEntry([], [], None))
    assert qc.times() == [9]
    with pytest.raises(KeyError):
        qc.get(4)


# ---------------------------------------------------------------- harness


ALL_SINGLE_MODEL = ("single", "topk", "nms", "kmeans", "learnagg", "learnagg_xattn")


@pytest.fixture(scope="module")
def learned():
    add = Aggregator(TINY_DEC, "add", window=10, seed=1)
    xattn = Aggregator(TINY_DEC, "xattn", window=10, seed=2)
    return {"learnagg": add, "learnagg_xattn": xattn}


def cache_coherence(model, episodes, learned, schedule=StreamSchedule(anchors_per_episode=4)):
    """(reports equal, outputs equal, calls with cache, calls without, anchors)."""
    on = run_stream(model, episodes, schedule, ALL_SINGLE_MODEL, learned, cache=True, collect=True)
    off = run_stream(model, episodes, schedule, ALL_SINGLE_MODEL, learned, cache=False, collect=True)
    same_out = all(a.t0 == b.t0 and all(np.array_equal(a.trajectories[k], b.trajectories[k]) and
                                        np.array_equal(a.scores[k], b.scores[k]) for k in ALL_SINGLE_MODEL)
                   for a, b in zip(on.outputs, off.outputs))
    return on.reports == off.reports, same_out, on.calls, off.calls, on.anchors


def test_cache_coherence_and_call_counts(tiny_model, episodes, learned):
    eps = episodes[:6]
    s = StreamSchedule(anchors_per_episode=4)
    same_rep, same_out, with_cache, without, anchors = cache_coherence(tiny_model, eps, learned, s)
    assert same_rep and same_out
    assert anchors == 6 * 4
    assert with_cache == 6 * (4 + s.window - 1)
    assert without == 6 * 4 * s.window


def test_single_equals_direct_decoding(tiny_model, episodes):
    s = StreamSchedule(anchors_per_episode=3)
    res = run_stream(tiny_model, episodes[:3], s, ("single",), collect=True)
    for out in res.outputs:
        ep = next(e for e in episodes if e.episode_id == out.episode_id)
        _, pred, _ = tiny_model.predict(window_at(ep, out.t0, s.h_obs, s.h_pred, with_future=False))
        assert np.array_equal(out.trajectories["single"], pred.world_trajectories()[:, s.a:s.b])
        assert np.array_equal(out.gt, ep.positions[ep.target_index, out.t0 + s.a + 1:out.t0 + s.b + 1])


def test_window_of_one_reduces_to_single(tiny_model, episodes):
    s = StreamSchedule(window=1, anchors_per_episode=5)
    agg = Aggregator(TINY_DEC, "add", window=1, seed=4)
    res = run_stream(tiny_model, episodes[:6], s, ("single", "topk", "nms", "kmeans"), cache=True)
    base = res.reports["single"]
    for name in ("topk", "nms", "kmeans"):
        r = res.reports[name]
        assert (r.minADE, r.minFDE, r.miss_rate, r.by_maneuver) == (base.minADE, base.minFDE, base.miss_rate,
                                                                    base.by_maneuver)
    assert run_stream(tiny_model, episodes[:2], s, ("learnagg",), {"learnagg": agg}).anchors == 10


def test_threads_do_not_change_reports(tiny_model, episodes, learned):
    s = StreamSchedule(anchors_per_episode=2)
    a = run_stream(tiny_model, episodes[:6], s, ("single", "kmeans", "learnagg"), learned, threads=1)
    b = run_stream(tiny_model, episodes[:6], s, ("single", "kmeans", "learnagg"), learned, threads=3)
    assert a.reports == b.reports


def test_report_contents(tiny_model, episodes, tmp_path):
    res = run_stream(tiny_model, episodes[:8], StreamSchedule(anchors_per_episode=2), ("single", "topk"))
    rep = res.reports["single"]
    assert rep.samples == 16 and 0.0 <= rep.miss_rate <= 1.0
    assert sum(v[3] for k, v in rep.by_maneuver.items() if k != "all") == 16
    assert set(rep.latency_ms) == {"p10", "p50", "p90"}
    path = tmp_path / "m.csv"
    write_report_csv(path, list(res.reports.values()))
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + 2 * 4
    assert all(r[6] == "" for r in rows[1:])


def test_harness_argument_errors(tiny_model, episodes):
    s = StreamSchedule()
    with pytest.raises(ScheduleError):
        run_stream(tiny_model, episodes[:1], s, ("bogus",))
    with pytest.raises(ScheduleError):
        run_stream(tiny_model, episodes[:1], s, ("learnagg",))
    with pytest.raises(ScheduleError):
        run_stream(tiny_model, episodes[:1], s, ("modelens_kmeans",))
    with pytest.raises(ScheduleError):
        run_stream(tiny_model, episodes[:1], StreamSchedule(window=10, a=0, b=60, h_obs=40, h_pred=70))


def test_model_ensemble_aggregators(episodes):
    from conftest import TINY_ENC
    models = [BaseModel(TINY_ENC, TINY_DEC, seed=s) for s in (0, 1000)]
    learned = {"modelens_learnagg": Aggregator(TINY_DEC, "add", window=1, models=2),
               "dual": Aggregator(TINY_DEC, "add", window=10, models=2)}
    s = StreamSchedule(anchors_per_episode=2)
    res = run_stream(models, episodes[:3], s, ("single", "modelens_kmeans", "modelens_learnagg", "dual"),
                     learned)
    for rep in res.reports.values():
        assert rep.samples == 6 and np.isfinite(rep.minFDE)
    assert res.calls == 3 * (2 + 9)
