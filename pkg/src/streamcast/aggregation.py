"""Combining predictions across frames or models.

Trajectory-level: Top-K, NMS and endpoint K-means over a candidate pool.
Query-level: element-wise addition of refined mode queries followed by a
learned decoder, a cross-attention variant, and cross-model averaging.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .decoder import (DecoderConfig, MixturePrediction, ModeDecoder, RefinedQuerySet,
                      TrajectoryHeads)
from .encoder import SceneEmbedding
from .layers import LayerNorm, MultiHeadAttention, ParamStore
from .scenario import dumps_record


class AggregationError(ValueError):
    pass


# ---------------------------------------------------------------- candidates


@dataclass
class CandidateSet:
    """K candidate trajectories (world frame) with scores and provenance."""

    trajectories: np.ndarray  # (K, T, 2)
    scores: np.ndarray  # (K,)
    anchor_times: np.ndarray  # (K,) int
    model_ids: np.ndarray  # (K,) int
    mode_indices: np.ndarray  # (K,) int

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        k = len(self.scores)
        self.anchor_times = np.asarray(self.anchor_times, dtype=np.int64).reshape(k)
        self.model_ids = np.asarray(self.model_ids, dtype=np.int64).reshape(k)
        self.mode_indices = np.asarray(self.mode_indices, dtype=np.int64).reshape(k)
        if self.trajectories.ndim != 3 or self.trajectories.shape[0] != k:
            raise AggregationError("trajectories must be (K, T, 2) with one score per candidate")
        if not (np.isfinite(self.scores).all() and np.all(self.scores > 0)):
            raise AggregationError("candidate scores must be finite and positive")

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> "CandidateSet":
        idx = np.asarray(idx, dtype=np.int64)
        return CandidateSet(self.trajectories[idx], self.scores[idx], self.anchor_times[idx],
                            self.model_ids[idx], self.mode_indices[idx])

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1, :]

    @staticmethod
    def concat(sets: Sequence["CandidateSet"]) -> "CandidateSet":
        return CandidateSet(np.concatenate([s.trajectories for s in sets]),
                            np.concatenate([s.scores for s in sets]),
                            np.concatenate([s.anchor_times for s in sets]),
                            np.concatenate([s.model_ids for s in sets]),
                            np.concatenate([s.mode_indices for s in sets]))


def ranking(cands: CandidateSet) -> np.ndarray:
    """Indices by score desc, then anchor time desc, mode index asc, model id asc."""
    return np.lexsort((cands.model_ids, cands.mode_indices, -cands.anchor_times, -cands.scores))


def _check_size(cands: CandidateSet, n: int) -> None:
    if n < 1 or len(cands) < n:
        raise AggregationError(f"need at least {n} candidates, got {len(cands)}")


def topk(cands: CandidateSet, n: int) -> CandidateSet:
    _check_size(cands, n)
    return cands.take(ranking(cands)[:n])


def nms(cands: CandidateSet, n: int, radius: float = 2.0) -> CandidateSet:
    """Greedy endpoint suppression; refills from suppressed candidates if short.

    A candidate is suppressed when its endpoint lies strictly closer than
    ``radius`` to an already kept endpoint, so ``radius=0`` keeps everything.
    """
    _check_size(cands, n)
    if radius < 0:
        raise AggregationError("radius must be non-negative")
    order = ranking(cands)
    ends = cands.endpoints
    kept: list[int] = []
    suppressed = np.zeros(len(cands), dtype=bool)
    for i in order:
        if len(kept) == n:
            break
        if suppressed[i]:
            continue
        kept.append(int(i))
        d = np.hypot(*(ends - ends[i]).T)
        suppressed |= d < radius
        suppressed[i] = False
    if len(kept) < n:
        taken = set(kept)
        kept.extend(int(i) for i in order if int(i) not in taken)
        kept = kept[:n]
    return cands.take(kept)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = np.sum((x - x[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = [i for i in range(n) if i not in centers]
            nxt = free[0]
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[centers].copy()


def kmeans_assign(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
                  tol: float = 1e-6) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns the label per point."""
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(points, k, rng)
    labels = np.zeros(len(points), dtype=np.int64)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = points[members].mean(axis=0)
        for c in range(k):
            if not np.any(labels == c):
                # re-seed an empty cluster from the point farthest from its centroid
                far = np.sum((points - new[labels]) ** 2, axis=1)
                j = int(np.argmax(far))
                new[c] = points[j]
                labels[j] = c
        shift = np.max(np.hypot(*(new - centers).T))
        centers = new
        if shift < tol:
            break
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    final = np.argmin(d2, axis=1)
    # keep every cluster populated after the last reassignment
    if len(np.unique(final)) == k:
        labels = final
    return labels


def kmeans_agg(cands: CandidateSet, n: int, seed: int = 0) -> CandidateSet:
    """Cluster endpoints into ``n`` groups; emit the score-weighted mean trajectory per group.

    Output scores are each cluster's share of the total score mass.
    """
    _check_size(cands, n)
    labels = kmeans_assign(cands.endpoints, n, seed)
    total = cands.scores.sum()
    trajs, scores, anchors, modes = [], [], [], []
    for c in range(n):
        idx = np.flatnonzero(labels == c)
        mass = cands.scores[idx].sum()
        w = cands.scores[idx] / mass
        acc = np.zeros_like(cands.trajectories[0])
        for wi, i in zip(w, idx):
            acc = acc + wi * cands.trajectories[i]
        trajs.append(acc)
        scores.append(mass / total)
        anchors.append(int(cands.anchor_times[idx].max()))
        modes.append(c)
    out = CandidateSet(np.stack(trajs), np.array(scores), np.array(anchors),
                       np.full(n, -1), np.array(modes))
    return out.take(np.lexsort((out.mode_indices, -out.scores)))


def save_candidates(path, cands: CandidateSet) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(len(cands)):
            fh.write(dumps_record({
                "trajectory": cands.trajectories[i],
                "score": float(cands.scores[i]),
                "anchor_time": int(cands.anchor_times[i]),
                "model_id": int(cands.model_ids[i]),
                "mode_index": int(cands.mode_indices[i]),
            }) + "\n")


def load_candidates(path) -> CandidateSet:
    recs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                recs.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise AggregationError(f"{path}: candidate {i} is malformed: {exc}") from None
    if not recs:
        raise AggregationError(f"{path}: no candidates")
    return CandidateSet(np.array([r["trajectory"] for r in recs], dtype=np.float64),
                        np.array([r["score"] for r in recs]),
                        np.array([r["anchor_time"] for r in recs]),
                        np.array([r["model_id"] for r in recs]),
                        np.array([r["mode_index"] for r in recs]))


# ---------------------------------------------------------------- query sets


@dataclass
class AggregatedQuerySet:
    vectors: np.ndarray  # (N, d)
    count: int


@dataclass
class ContextQuerySet:
    vectors: np.ndarray  # (N, d)


def _check_sets(sets: Sequence[RefinedQuerySet]) -> None:
    if not sets:
        raise AggregationError("no query sets given")
    shape = sets[0].vectors.shape
    for s in sets:
        if s.vectors.shape != shape:
            raise AggregationError(f"query set shape {s.vectors.shape} != {shape}")


def add_queries(sets: Sequence[RefinedQuerySet]) -> AggregatedQuerySet:
    """Element-wise sum per mode index, accumulated in the given order.

    The anchors must be consecutive frames (any order).
    """
    _check_sets(sets)
    times = sorted(s.anchor_time for s in sets)
    if times != list(range(times[0], times[0] + len(times))):
        raise AggregationError(f"anchor times {times} are not consecutive")
    acc = sets[0].vectors.copy()
    for s in sets[1:]:
        acc = acc + s.vectors
    return AggregatedQuerySet(acc, len(sets))


def avg_queries_across_models(sets: Sequence[RefinedQuerySet]) -> RefinedQuerySet:
    """Arithmetic mean per mode index of one set per model at the same anchor."""
    _check_sets(sets)
    if len({s.anchor_time for s in sets}) != 1:
        raise AggregationError("query sets come from different anchors")
    acc = sets[0].vectors.copy()
    for s in sets[1:]:
        acc = acc + s.vectors
    return RefinedQuerySet(acc / len(sets), sets[0].anchor_time)


# ---------------------------------------------------------------- learned aggregation


class Aggregator:
    """Decoder + FFN heads refining fused mode queries against the scene memory.

    ``kind`` is ``"add"`` (fuse by element-wise sum) or ``"xattn"`` (current
    queries cross-attend a bank of historical queries whose keys carry a
    learned embedding of their frame offset).  ``window`` is M and
    ``models`` the number of base models whose queries are averaged first.
    """

    def __init__(self, cfg: DecoderConfig, kind: str = "add", window: int = 10, models: int = 1, seed: int = 0):
        if kind not in ("add", "xattn"):
            raise AggregationError(f"unknown aggregator kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.window = window
        self.models = models
        self.seed = seed
        self.store = ParamStore(np.random.default_rng(seed))
        if kind == "xattn":
            self.offsets = self.store.add("agg.offset", self.store.rng.normal(0.0, 0.1, size=(window, cfg.width)))
            self.bank_attn = MultiHeadAttention(self.store, "agg.bank", cfg.width, cfg.heads)
            self.bank_norm = LayerNorm(self.store, "agg.bank_norm", cfg.width)
        self.body = ModeDecoder(cfg, self.store, "agg")
        self.heads = TrajectoryHeads(cfg, self.store, "agg.head")

    def config(self) -> dict:
        return {"kind": self.kind, "window": self.window, "models": self.models, "seed": self.seed}

    def init_from_base(self, base_store: ParamStore) -> None:
        """Copy the base decoder body and heads as a starting point."""
        for name, t in self.store.tensors.items():
            if name.startswith("agg.layer") or name.startswith("agg.head"):
                src = "dec" + name[len("agg"):]
                if src in base_store.tensors:
                    t.data = base_store.tensors[src].data.copy()

    def fuse(self, bank: np.ndarray, offsets: np.ndarray | None = None, rng=None, dropout: float = 0.0,
             current: np.ndarray | None = None):
        """``bank`` (B, M, N, d) of refined queries, newest first at index 0.

        ``offsets`` (B, M) frame offsets of each bank entry from the current
        anchor (defaults to 0..M-1).  ``current`` (B, N, d) are the
        cross-attention queries and default to ``bank[:, 0]``.
        """
        if self.kind == "add":
            acc = bank[:, 0]
            for m in range(1, bank.shape[1]):
                acc = acc + bank[:, m]
            return dm.Tensor(acc)
        B, M, N, d = bank.shape
        if offsets is None:
            offsets = np.broadcast_to(np.arange(M), (B, M))
        if np.any(offsets < 0) or np.any(offsets >= self.window):
            raise AggregationError("bank offsets outside the configured window")
        current = dm.Tensor(bank[:, 0] if current is None else current)
        emb = self.offsets[np.asarray(offsets)]  # (B, M, d)
        keys = dm.reshape(dm.Tensor(bank) + dm.reshape(emb, (B, M, 1, d)), (B, M * N, d))
        values = dm.Tensor(bank.reshape(B, M * N, d))
        upd = self.bank_attn(current, keys, values=values)
        return self.bank_norm(current + dm.dropout(upd, dropout, rng))

    def forward(self, bank: np.ndarray, memory, memory_mask: np.ndarray, offsets=None, rng=None,
                dropout: float = 0.0, current=None):
        """Returns (context queries, logits, mu, scale) tensors."""
        fused = self.fuse(bank, offsets, rng, dropout, current)
        ctx = self.body(fused, dm.as_tensor(memory), memory_mask, rng, dropout)
        logits, mu, scale = self.heads(ctx)
        return ctx, logits, mu, scale

    def digest(self) -> str:
        return self.store.digest()


def _single(agg: Aggregator, bank: np.ndarray, emb: SceneEmbedding, offsets, anchor_pose, current=None):
    with dm.no_grad():
        ctx, logits, mu, scale = agg.forward(bank[None], emb.memory[None], emb.memory_mask[None],
                                             None if offsets is None else np.asarray(offsets)[None],
                                             current=None if current is None else current[None])
        pi = dm.softmax(logits, axis=-1)
    pred = MixturePrediction(pi.data[0].copy(), mu.data[0].copy(), scale.data[0].copy(), emb.t0,
                             tuple(anchor_pose), logits.data[0].copy())
    return ContextQuerySet(ctx.data[0].copy()), pred


def learn_agg(q_hat: AggregatedQuerySet, emb: SceneEmbedding, agg: Aggregator,
              anchor_pose=(0.0, 0.0, 0.0)) -> tuple[ContextQuerySet, MixturePrediction]:
    """Refine an aggregated query set against the current scene embedding."""
    if agg.kind != "add":
        raise AggregationError("learn_agg needs an additive aggregator")
    if q_hat.vectors.shape[-1] != emb.memory.shape[-1]:
        raise AggregationError("query width does not match embedding width")
    return _single(agg, q_hat.vectors[None], emb, None, anchor_pose)


def learn_agg_xattn(current: RefinedQuerySet, history: Sequence[RefinedQuerySet], emb: SceneEmbedding,
                    agg: Aggregator, anchor_pose=(0.0, 0.0, 0.0)) -> MixturePrediction:
    """Cross-attention aggregation over the M sets in ``history`` (current included).

    Each set is keyed by its frame offset from the current anchor, so the
    order of ``history`` does not matter.
    """
    if agg.kind != "xattn":
        raise AggregationError("learn_agg_xattn needs a cross-attention aggregator")
    _check_sets([current, *history])
    if not history:
        raise AggregationError("empty history")
    bank = np.stack([h.vectors for h in history])
    offsets = np.array([current.anchor_time - h.anchor_time for h in history])
    return _single(agg, bank, emb, offsets, anchor_pose, current.vectors)[1]
