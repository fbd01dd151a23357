"""Streaming evaluation: sliding anchors, horizon slicing, query caching and metrics.

A prediction issued at anchor t covers frames t+1 .. t+H_pred.  For anchor
t0 the evaluated frames are t0+a+1 .. t0+b; a prediction issued m frames
earlier contributes its positions a+m+1 .. b+m (1-based).
"""
from __future__ import annotations

import csv
import math
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .aggregation import (Aggregator, CandidateSet, add_queries, avg_queries_across_models, kmeans_agg,
                          learn_agg, learn_agg_xattn, nms, topk)
from .decoder import MixturePrediction, RefinedQuerySet, to_world
from .encoder import SceneEmbedding
from .model import BaseModel
from .scenario import MANEUVERS, Episode, window_at

MISS_THRESHOLD = 2.0
AGGREGATORS = ("single", "topk", "nms", "kmeans", "learnagg", "learnagg_xattn",
               "modelens_kmeans", "modelens_learnagg", "dual")
LEARNED = ("learnagg", "learnagg_xattn", "modelens_learnagg", "dual")
MULTI_MODEL = ("modelens_kmeans", "modelens_learnagg", "dual")
CSV_HEADER = ("aggregator", "minADE", "minFDE", "miss_rate", "samples", "maneuver", "latency_ms_p50")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class StreamSchedule:
    window: int = 10  # M
    a: int = 0
    b: int = 20
    h_obs: int = 20
    h_pred: int = 30
    anchors_per_episode: int = 12  # 0 = every feasible anchor

    def first_anchor(self, episode: Episode) -> int:
        return episode.start_frame + self.h_obs - 1 + self.window - 1

    def anchors(self, episode: Episode) -> list[int]:
        last = episode.start_frame + episode.num_frames - 1 - self.b
        out = list(range(self.first_anchor(episode), last + 1))
        return out[:self.anchors_per_episode] if self.anchors_per_episode else out


def validate(schedule: StreamSchedule, episode: Episode | None = None) -> str | None:
    """None when the schedule is usable, otherwise a description of the violation."""
    s = schedule
    if s.window < 1 or s.h_obs < 1 or s.h_pred < 1:
        return "window, H_obs and H_pred must be positive"
    if not 0 <= s.a < s.b:
        return f"evaluation interval needs 0 <= a < b, got a={s.a}, b={s.b}"
    if s.b > s.h_pred:
        return f"b={s.b} exceeds H_pred={s.h_pred}"
    if s.window - 1 > s.h_pred - s.b:
        return (f"M-1={s.window - 1} exceeds H_pred-b={s.h_pred - s.b}: "
                "the oldest prediction does not cover the evaluation interval")
    if s.anchors_per_episode < 0:
        return "anchors_per_episode must be non-negative"
    if episode is not None and not s.anchors(episode):
        need = s.h_obs + s.window - 1 + s.b
        return f"episode {episode.episode_id} has {episode.num_frames} frames, needs at least {need}"
    return None


def check(schedule: StreamSchedule, episode: Episode | None = None) -> None:
    problem = validate(schedule, episode)
    if problem:
        raise ScheduleError(problem)


@dataclass
class SlicedPrediction:
    trajectories: np.ndarray  # (N, b-a, 2)
    scores: np.ndarray
    source_anchor: int


def slice_horizon(traj: np.ndarray, m: int, schedule: StreamSchedule) -> np.ndarray:
    """Keep the part of a (..., H_pred, 2) forecast issued m frames ago that covers the eval frames."""
    if not 0 <= m <= schedule.h_pred - schedule.b:
        raise ScheduleError(f"offset m={m} outside [0, {schedule.h_pred - schedule.b}]")
    return traj[..., schedule.a + m:schedule.b + m, :]


def slice_prediction(pred: MixturePrediction, m: int, schedule: StreamSchedule) -> SlicedPrediction:
    return SlicedPrediction(slice_horizon(pred.world_trajectories(), m, schedule), np.asarray(pred.pi),
                            pred.anchor_time)


# ---------------------------------------------------------------- metrics


def _check_metric_inputs(preds, gt):
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] == 0:
        raise ValueError("predictions must be a non-empty (N, T, 2) array")
    if preds.shape[1:] != gt.shape:
        raise ValueError(f"prediction shape {preds.shape} does not match ground truth {gt.shape}")
    return preds, gt


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # written out rather than norm/hypot so scalar re-implementations agree bitwise
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


def min_fde(preds, gt) -> float:
    preds, gt = _check_metric_inputs(preds, gt)
    return float(np.min(_dist(preds[:, -1], gt[-1])))


def min_ade(preds, gt) -> float:
    """Average displacement of the mode with the smallest endpoint error (first on ties)."""
    preds, gt = _check_metric_inputs(preds, gt)
    k = int(np.argmin(_dist(preds[:, -1], gt[-1])))
    return math.fsum(_dist(preds[k], gt).tolist()) / len(gt)


def miss_rate(fdes, threshold: float = MISS_THRESHOLD) -> float:
    fdes = np.asarray(fdes, dtype=np.float64)
    if fdes.size == 0:
        raise ValueError("no samples")
    return float(np.mean(fdes > threshold))


# ---------------------------------------------------------------- cache


@dataclass
class CacheEntry:
    refined: list[RefinedQuerySet]  # one per model
    preds: list[MixturePrediction]
    embedding: SceneEmbedding


class QueryCache:
    """Ring buffer of the last M frames' outputs keyed by anchor time."""

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("cache size must be positive")
        self.size = size
        self._items: OrderedDict[int, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: int, entry: CacheEntry) -> None:
        if self._items and t != next(reversed(self._items)) + 1:
            self._items.clear()
        self._items[t] = entry
        while len(self._items) > self.size:
            self._items.popitem(last=False)

    def get(self, t: int) -> CacheEntry:
        return self._items[t]

    def times(self) -> list[int]:
        return list(self._items)

    def full(self) -> bool:
        return len(self._items) == self.size


# ---------------------------------------------------------------- harness


@dataclass
class MetricReport:
    aggregator: str
    minADE: float
    minFDE: float
    miss_rate: float
    samples: int
    by_maneuver: dict = field(default_factory=dict)  # maneuver -> (minADE, minFDE, miss_rate, samples)
    latency_ms: dict = field(default_factory=dict, compare=False)  # p10/p50/p90

    def rows(self, report_latency: bool = False) -> list[tuple]:
        lat = f"{self.latency_ms['p50']:.3f}" if report_latency and self.latency_ms else ""
        out = []
        for man in MANEUVERS + ("all",):
            ade, fde, mr, n = self.by_maneuver.get(man, (float("nan"),) * 3 + (0,))
            out.append((self.aggregator, f"{ade:.6f}", f"{fde:.6f}", f"{mr:.6f}", n, man, lat))
        return out


@dataclass
class AnchorOutput:
    episode_id: int
    t0: int
    maneuver: str
    gt: np.ndarray
    trajectories: dict  # aggregator -> (N, b-a, 2) world frame
    scores: dict
    candidates: CandidateSet | None = None


@dataclass
class StreamResult:
    reports: dict[str, MetricReport]
    calls: int
    anchors: int
    outputs: list[AnchorOutput] = field(default_factory=list)


def _candidates(entries: Sequence[CacheEntry], model: int, schedule: StreamSchedule, divisor: int) -> CandidateSet:
    trajs, scores, times, modes = [], [], [], []
    for m, e in enumerate(entries):
        p = e.preds[model]
        trajs.append(slice_horizon(p.world_trajectories(), m, schedule))
        scores.append(np.asarray(p.pi) / divisor)
        times.append(np.full(p.modes, p.anchor_time))
        modes.append(np.arange(p.modes))
    return CandidateSet(np.concatenate(trajs), np.concatenate(scores), np.concatenate(times),
                        np.full(sum(len(s) for s in scores), model), np.concatenate(modes))


def _aggregate(name: str, entries: Sequence[CacheEntry], schedule: StreamSchedule, learned: Mapping[str, Aggregator],
               n_models: int, nms_radius: float, kmeans_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``entries`` newest first; returns (trajectories, scores) for anchor entries[0]."""
    cur = entries[0]
    pose = cur.preds[0].anchor_pose
    M = schedule.window
    n = cur.preds[0].modes
    if name == "single":
        p = cur.preds[0]
        return slice_horizon(p.world_trajectories(), 0, schedule), np.asarray(p.pi)
    if name in ("topk", "nms", "kmeans"):
        cands = _candidates(entries[:M], 0, schedule, M)
        out = {"topk": lambda c: topk(c, n), "nms": lambda c: nms(c, n, nms_radius),
               "kmeans": lambda c: kmeans_agg(c, n, kmeans_seed)}[name](cands)
        return out.trajectories, out.scores
    if name == "modelens_kmeans":
        cands = CandidateSet.concat([_candidates(entries[:1], k, schedule, n_models) for k in range(n_models)])
        out = kmeans_agg(cands, n, kmeans_seed)
        return out.trajectories, out.scores
    agg = learned[name]
    if name == "learnagg":
        q_hat = add_queries([e.refined[0] for e in entries[:agg.window]])
        _, pred = learn_agg(q_hat, cur.embedding, agg, pose)
    elif name == "learnagg_xattn":
        hist = [e.refined[0] for e in entries[:agg.window]]
        pred = learn_agg_xattn(cur.refined[0], hist, cur.embedding, agg, pose)
    else:
        # modelens_learnagg (window 1) and dual (window M) both average across models per anchor
        avg = [avg_queries_across_models(e.refined) for e in entries[:agg.window]]
        _, pred = learn_agg(add_queries(avg), cur.embedding, agg, pose)
    return slice_horizon(pred.world_trajectories(), 0, schedule), np.asarray(pred.pi)


def _predict(models: Sequence[BaseModel], episode: Episode, t: int, schedule: StreamSchedule) -> CacheEntry:
    w = window_at(episode, t, schedule.h_obs, schedule.h_pred, with_future=False)
    refined, preds, emb = [], [], None
    for k, model in enumerate(models):
        q, p, e = model.predict(w)
        refined.append(q)
        preds.append(p)
        if k == 0:
            emb = e
    return CacheEntry(refined, preds, emb)


def _run_episode(models, episode: Episode, schedule: StreamSchedule, names, learned, cache: bool,
                 nms_radius: float, kmeans_seed: int, collect: bool):
    anchors = schedule.anchors(episode)
    M = schedule.window
    k0 = episode.start_frame
    tgt = episode.target_index
    calls = 0
    records = []
    qc = QueryCache(M)
    if cache:
        for t in range(anchors[0] - (M - 1), anchors[0]):
            qc.push(t, _predict(models, episode, t, schedule))
            calls += 1
    for t0 in anchors:
        start = time.perf_counter()
        if cache:
            qc.push(t0, _predict(models, episode, t0, schedule))
            calls += 1
            entries = [qc.get(t0 - m) for m in range(M)]
        else:
            entries = [_predict(models, episode, t0 - m, schedule) for m in range(M)]
            calls += M
        shared = time.perf_counter() - start
        gt = episode.positions[tgt, t0 - k0 + schedule.a + 1:t0 - k0 + schedule.b + 1]
        trajs, scores, lat = {}, {}, {}
        for name in names:
            s = time.perf_counter()
            trajs[name], scores[name] = _aggregate(name, entries, schedule, learned, len(models),
                                                   nms_radius, kmeans_seed)
            lat[name] = shared + time.perf_counter() - s
        cands = _candidates(entries, 0, schedule, M) if collect else None
        records.append((AnchorOutput(episode.episode_id, t0, episode.target_intent, gt, trajs, scores, cands), lat))
    return records, calls


def _summarize(values: list[tuple[float, float, float]]) -> tuple[float, float, float, int]:
    if not values:
        return float("nan"), float("nan"), float("nan"), 0
    arr = np.array(values)
    return float(np.mean(arr[:, 0])), float(np.mean(arr[:, 1])), miss_rate(arr[:, 1]), len(values)


def run_stream(models: BaseModel | Sequence[BaseModel], episodes: Sequence[Episode], schedule: StreamSchedule,
               aggregators: Sequence[str] = ("single",), learned: Mapping[str, Aggregator] | None = None,
               cache: bool = True, threads: int = 1, nms_radius: float = 2.0, kmeans_seed: int = 0,
               collect: bool = False) -> StreamResult:
    """Stream every episode anchor by anchor and score each aggregator.

    With ``cache`` on, each frame triggers one forward pass per model whose
    outputs are kept for M frames; with it off, all M predictions are
    recomputed per anchor.  ``calls`` counts single-window forward passes of
    the first model.
    """
    models = [models] if isinstance(models, BaseModel) else list(models)
    learned = dict(learned or {})
    for name in aggregators:
        if name not in AGGREGATORS:
            raise ScheduleError(f"unknown aggregator {name!r}")
        if name in LEARNED and name not in learned:
            raise ScheduleError(f"aggregator {name!r} needs trained parameters")
        if name in MULTI_MODEL and len(models) < 2:
            raise ScheduleError(f"aggregator {name!r} needs at least two base models")
    if not models or not episodes:
        raise ScheduleError("need at least one model and one episode")
    for ep in episodes:
        check(schedule, ep)
    for name in aggregators:
        if name in LEARNED and learned[name].window > schedule.window:
            raise ScheduleError(f"aggregator {name!r} window exceeds the schedule's M")

    ordered = sorted(episodes, key=lambda e: e.episode_id)

    def job(ep):
        return _run_episode(models, ep, schedule, aggregators, learned, cache, nms_radius, kmeans_seed, collect)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, ordered))
    else:
        results = [job(ep) for ep in ordered]

    calls = sum(c for _, c in results)
    records = [r for recs, _ in results for r in recs]
    reports = {}
    for name in aggregators:
        per = {man: [] for man in MANEUVERS}
        everything, lats = [], []
        for out, lat in records:
            tr = out.trajectories[name]
            v = (min_ade(tr, out.gt), min_fde(tr, out.gt), 0.0)
            per[out.maneuver].append(v)
            everything.append(v)
            lats.append(lat[name] * 1000.0)
        by = {man: _summarize(per[man]) for man in MANEUVERS}
        by["all"] = _summarize(everything)
        ade, fde, mr, n = by["all"]
        p10, p50, p90 = np.percentile(lats, [10, 50, 90])
        reports[name] = MetricReport(name, ade, fde, mr, n, by, {"p10": p10, "p50": p50, "p90": p90})
    return StreamResult(reports, calls, len(records), [o for o, _ in records] if collect else [])


def write_report_csv(path, reports: Sequence[MetricReport], report_latency: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rep in reports:
            w.writerows(rep.rows(report_latency))
