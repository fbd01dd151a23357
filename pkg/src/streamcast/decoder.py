"""DETR-style decoding of learnable mode queries into a Laplace mixture."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .layers import MLP, DecoderLayer, ParamStore

SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 64
    heads: int = 4
    modes: int = 6
    layers: int = 2
    horizon: int = 30
    step_scale: float = 1.0  # meters per frame represented by a unit head output


@dataclass
class ModeQuerySet:
    vectors: np.ndarray  # (N, d)


@dataclass
class RefinedQuerySet:
    vectors: np.ndarray  # (N, d)
    anchor_time: int

    @property
    def modes(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MixturePrediction:
    """N-mode Laplace mixture over T' future steps in the agent-centric frame.

    ``pi`` (N,), ``mu`` (N, T', 2), ``scale`` (N, T', 2).  Fields hold numpy
    arrays for inference and may hold Tensors inside a training graph, in
    which case ``logits`` carries the pre-softmax mode scores.
    """

    pi: np.ndarray
    mu: np.ndarray
    scale: np.ndarray
    anchor_time: int = 0
    anchor_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    logits: np.ndarray | None = None

    @property
    def modes(self) -> int:
        return self.mu.shape[0]

    def world_trajectories(self) -> np.ndarray:
        return to_world(np.asarray(self.mu), self.anchor_pose)


class TrajectoryHeads:
    """FFNs turning refined queries into locations, scales and mode scores."""

    def __init__(self, cfg: DecoderConfig, store: ParamStore, prefix: str):
        d, T = cfg.width, cfg.horizon
        self.cfg = cfg
        self.loc = MLP(store, f"{prefix}.loc", d, d, T * 2)
        self.scale = MLP(store, f"{prefix}.scale", d, d, T * 2)
        self.score = MLP(store, f"{prefix}.score", d, d, 1)
        # cumulative sum over time as a constant matrix
        self._cumsum = np.triu(np.ones((T, T)))

    def __call__(self, q: Tensor):
        *lead, d = q.shape
        T = self.cfg.horizon
        steps = dm.reshape(self.loc(q), tuple(lead) + (T, 2)) * self.cfg.step_scale
        steps_t = dm.swapaxes(steps, -1, -2)  # (..., 2, T)
        mu = dm.swapaxes(dm.matmul(steps_t, dm.Tensor(self._cumsum)), -1, -2)
        scale = dm.softplus(dm.reshape(self.scale(q), tuple(lead) + (T, 2))) + SCALE_FLOOR
        logits = dm.reshape(self.score(q), tuple(lead))
        return logits, mu, scale


class ModeDecoder:
    """Refines a set of queries against scene memory (no query parameters of its own)."""

    def __init__(self, cfg: DecoderConfig, store: ParamStore, prefix: str):
        self.cfg = cfg
        hidden = 2 * cfg.width
        self.layers = [DecoderLayer(store, f"{prefix}.layer{i}", cfg.width, cfg.heads, hidden)
                       for i in range(cfg.layers)]

    def __call__(self, queries: Tensor, memory: Tensor, memory_mask: np.ndarray, rng=None,
                 dropout: float = 0.0) -> Tensor:
        drop = dropout if rng is not None else 0.0
        x = queries
        for layer in self.layers:
            x = layer(x, memory, memory_mask, drop, rng)
        return x


class Decoder:
    """Learnable mode queries + :class:`ModeDecoder` + :class:`TrajectoryHeads`."""

    def __init__(self, cfg: DecoderConfig, store: ParamStore, prefix: str = "dec"):
        self.cfg = cfg
        self.queries = store.add(f"{prefix}.queries", store.rng.normal(0.0, 1.0, size=(cfg.modes, cfg.width)))
        self.body = ModeDecoder(cfg, store, prefix)
        self.heads = TrajectoryHeads(cfg, store, f"{prefix}.head")

    def forward(self, memory: Tensor, memory_mask: np.ndarray, rng=None, queries=None, dropout: float = 0.0):
        """Returns (refined queries (B, N, d), logits, mu, scale)."""
        B = memory.shape[0]
        q0 = self.queries if queries is None else dm.as_tensor(queries)
        x = q0 + np.zeros((B, 1, 1))
        refined = self.body(x, memory, memory_mask, rng, dropout)
        logits, mu, scale = self.heads(refined)
        return refined, logits, mu, scale


def decode(embedding, queries: ModeQuerySet, decoder: Decoder,
           anchor_pose=(0.0, 0.0, 0.0)) -> tuple[RefinedQuerySet, MixturePrediction]:
    """Decode one scene embedding with the given initial mode queries."""
    if embedding.memory.shape[-1] != queries.vectors.shape[-1]:
        raise ValueError("embedding width does not match query width")
    with dm.no_grad():
        refined, logits, mu, scale = decoder.forward(
            dm.Tensor(embedding.memory[None]), embedding.memory_mask[None], queries=queries.vectors)
        pi = dm.softmax(logits, axis=-1)
    return (RefinedQuerySet(refined.data[0].copy(), embedding.t0),
            MixturePrediction(pi.data[0].copy(), mu.data[0].copy(), scale.data[0].copy(),
                              embedding.t0, tuple(anchor_pose), logits.data[0].copy()))


# ---------------------------------------------------------------- frames


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_world(points: np.ndarray, anchor_pose) -> np.ndarray:
    """Agent-centric (x forward, y left) to world coordinates."""
    x, y, theta = anchor_pose
    return np.asarray(points, dtype=np.float64) @ _rotation(theta).T + np.array([x, y])


def to_agent(points: np.ndarray, anchor_pose) -> np.ndarray:
    x, y, theta = anchor_pose
    return (np.asarray(points, dtype=np.float64) - np.array([x, y])) @ _rotation(theta)
