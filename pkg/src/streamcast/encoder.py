"""Scene encoder: relative polar descriptors, Fourier features, factorized attention.

Geometry enters the network only through pairwise relative descriptors, so
the embedding is unchanged by any rigid motion of the whole window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .layers import MLP, FeedForward, LayerNorm, MultiHeadAttention, PairAttention, ParamStore
from .scenario import SEMANTICS, SceneWindow, wrap_angle

# raw per-pair inputs: dist, local dx, local dy, cos dh, sin dh, dt
PAIR_RAW = 6
TOKEN_RAW = PAIR_RAW + 2  # plus the motion vector in the agent frame
POINT_RAW = 4


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 64
    heads: int = 4
    bands: int = 8
    temporal_layers: int = 2
    map_layers: int = 2
    agent_layers: int = 2
    distance_scale: float = 0.1  # applied to meters before Fourier encoding
    time_scale: float = 0.1  # applied to frame offsets
    h_obs: int = 20

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by head count")
        if self.bands < 1:
            raise ValueError("bands must be >= 1")


def relative_embedding(pose_i: Sequence[float], pose_j: Sequence[float]) -> np.ndarray:
    """Polar descriptor of element j seen from element i.

    Poses are (x, y, heading, t).  Returns (distance, bearing of j in i's
    frame, heading difference, time difference).
    """
    xi, yi, hi, ti = pose_i
    xj, yj, hj, tj = pose_j
    dx, dy = xj - xi, yj - yi
    c, s = math.cos(hi), math.sin(hi)
    fx, fy = c * dx + s * dy, -s * dx + c * dy
    return np.array([math.hypot(dx, dy), math.atan2(fy, fx), float(wrap_angle(hj - hi)), float(tj - ti)])


def relative_descriptors(pi: np.ndarray, hi: np.ndarray, ti, pj: np.ndarray, hj: np.ndarray, tj) -> np.ndarray:
    """Vectorized :func:`relative_embedding`; broadcasts over leading axes."""
    d = pj - pi
    c, s = np.cos(hi), np.sin(hi)
    fx = c * d[..., 0] + s * d[..., 1]
    fy = -s * d[..., 0] + c * d[..., 1]
    dist = np.hypot(d[..., 0], d[..., 1])
    bearing = np.arctan2(fy, fx)
    dh = wrap_angle(hj - hi)
    dt = np.broadcast_to(np.asarray(tj, dtype=np.float64) - np.asarray(ti, dtype=np.float64), dist.shape)
    return np.stack(np.broadcast_arrays(dist, bearing, dh, dt), axis=-1)


def descriptor_inputs(desc: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Continuous network input for a descriptor.

    Angles go in as cos/sin and the bearing as a scaled local offset, so
    wrap-around at +-pi and the undefined bearing at distance 0 do not
    produce jumps.
    """
    dist, bearing, dh, dt = desc[..., 0], desc[..., 1], desc[..., 2], desc[..., 3]
    ds = cfg.distance_scale
    return np.stack([dist * ds, dist * np.cos(bearing) * ds, dist * np.sin(bearing) * ds,
                     np.cos(dh), np.sin(dh), dt * cfg.time_scale], axis=-1)


def fourier_features(x: np.ndarray, bands: int) -> np.ndarray:
    """[x, sin(2^j pi x), cos(2^j pi x)] for j < bands, per component.

    Output length is ``len(x) * (2 * bands + 1)``: raw inputs first, then
    all sines, then all cosines (component-major within each block).
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    freq = (2.0 ** np.arange(bands)) * math.pi
    arg = x[..., :, None] * freq  # (..., n, bands)
    lead = x.shape[:-1]
    sin = np.sin(arg).reshape(lead + (-1,))
    cos = np.cos(arg).reshape(lead + (-1,))
    return np.concatenate([x, sin, cos], axis=-1)


# ---------------------------------------------------------------- batch preparation


@dataclass
class EncoderInputs:
    """Network-ready features for a batch of windows (all numpy)."""

    token_feats: np.ndarray  # (n_valid_agents, H, Ft), packed over the batch
    agent_index: np.ndarray  # (B, A) row into the packed agents, n_valid for padding
    agent_mask: np.ndarray  # (B, A) bool
    point_feats: np.ndarray  # (B, P, K, Fp)
    point_weights: np.ndarray  # (B, P, 1, K) averaging weights
    semantic: np.ndarray  # (B, P, S) one-hot
    agent_pair_feats: np.ndarray  # (B, A, A, Fr) receiver i, sender k
    agent_pair_mask: np.ndarray  # (B, A, A) bool, sender valid and != receiver
    map_pair_feats: np.ndarray  # (B, A, P, Fr)
    target: np.ndarray  # (B,) int
    t0: np.ndarray  # (B,) int

    @property
    def batch(self) -> int:
        return self.agent_mask.shape[0]


def _window_features(w: SceneWindow, cfg: EncoderConfig):
    A, H = w.positions.shape[:2]
    if H != cfg.h_obs:
        raise ValueError(f"window observes {H} frames, encoder expects {cfg.h_obs}")
    pos, head = w.positions, w.headings
    times = np.arange(H, dtype=np.float64) - (H - 1)
    # temporal tokens: each step relative to the agent's own pose at the anchor
    desc = relative_descriptors(pos[:, -1:, :], head[:, -1:], 0.0, pos, head, times[None, :])
    inputs = descriptor_inputs(desc, cfg)
    local = inputs[..., 1:3] / cfg.distance_scale
    motion = np.zeros_like(local)
    motion[:, 1:] = local[:, 1:] - local[:, :-1]
    tokens = fourier_features(np.concatenate([inputs, motion], axis=-1), cfg.bands)

    pa, ha = pos[:, -1], head[:, -1]
    aa = relative_descriptors(pa[:, None], ha[:, None], 0.0, pa[None, :], ha[None, :], 0.0)
    aa = fourier_features(descriptor_inputs(aa, cfg), cfg.bands)

    point_feats, weights, sem, ppos, phead = _map_features(w.polylines, cfg)
    P = len(w.polylines)
    am = relative_descriptors(pa[:, None], ha[:, None], 0.0, ppos[None, :], phead[None, :], 0.0)
    am = fourier_features(descriptor_inputs(am, cfg), cfg.bands) if P else np.zeros((A, 0, PAIR_RAW * (2 * cfg.bands + 1)))
    return tokens, point_feats, weights, sem, aa, am


_MAP_CACHE: dict = {}


def _map_features(polylines, cfg: EncoderConfig):
    """Point features of each polyline in its own frame (cached per map object)."""
    key = (id(polylines), cfg.bands, cfg.distance_scale)
    hit = _MAP_CACHE.get(key)
    if hit is not None and hit[0] is polylines:
        return hit[1]
    P = len(polylines)
    K = max((len(pl.points) for pl in polylines), default=2)
    Fp = POINT_RAW * (2 * cfg.bands + 1)
    point_feats = np.zeros((P, K, Fp))
    weights = np.zeros((P, 1, K))
    sem = np.zeros((P, len(SEMANTICS)))
    ppos = np.zeros((P, 2))
    phead = np.zeros(P)
    for j, pl in enumerate(polylines):
        pts = pl.points
        seg = np.diff(pts, axis=0)
        seg_dir = np.arctan2(seg[:, 1], seg[:, 0])
        seg_dir = np.concatenate([seg_dir, seg_dir[-1:]])
        ppos[j] = pts[0]
        phead[j] = seg_dir[0]
        d = relative_descriptors(pts[0], seg_dir[0], 0.0, pts, seg_dir, 0.0)
        raw = np.stack([d[:, 0] * np.cos(d[:, 1]) * cfg.distance_scale,
                        d[:, 0] * np.sin(d[:, 1]) * cfg.distance_scale,
                        np.cos(d[:, 2]), np.sin(d[:, 2])], axis=-1)
        n = len(pts)
        point_feats[j, :n] = fourier_features(raw, cfg.bands)
        weights[j, 0, :n] = 1.0 / n
        sem[j, SEMANTICS.index(pl.semantic)] = 1.0
    out = (point_feats, weights, sem, ppos, phead)
    if len(_MAP_CACHE) > 4096:
        _MAP_CACHE.clear()
    _MAP_CACHE[key] = (polylines, out)
    return out


def prepare_batch(windows: Sequence[SceneWindow], cfg: EncoderConfig) -> EncoderInputs:
    feats = [_window_features(w, cfg) for w in windows]
    B = len(windows)
    A = max(f[0].shape[0] for f in feats)
    P = max(f[1].shape[0] for f in feats)
    K = max(f[1].shape[1] for f in feats)
    H = cfg.h_obs
    Fp = POINT_RAW * (2 * cfg.bands + 1)
    Fr = PAIR_RAW * (2 * cfg.bands + 1)
    tok = np.concatenate([f[0] for f in feats], axis=0)
    index = np.full((B, A), tok.shape[0], dtype=np.int64)
    amask = np.zeros((B, A), dtype=bool)
    pf = np.zeros((B, P, K, Fp))
    pw = np.zeros((B, P, 1, K))
    sem = np.zeros((B, P, len(SEMANTICS)))
    aa = np.zeros((B, A, A, Fr))
    am = np.zeros((B, A, P, Fr))
    row = 0
    for b, (t, p, w_, s, aa_, am_) in enumerate(feats):
        a, np_, k = t.shape[0], p.shape[0], p.shape[1]
        index[b, :a] = np.arange(row, row + a)
        row += a
        amask[b, :a] = True
        pf[b, :np_, :k] = p
        pw[b, :np_, :, :k] = w_
        sem[b, :np_] = s
        aa[b, :a, :a] = aa_
        am[b, :a, :np_] = am_
    eye = np.eye(A, dtype=bool)[None]
    pair_mask = amask[:, None, :] & ~eye
    if P and any(f[1].shape[0] != P for f in feats):
        raise ValueError("windows in a batch must share the polyline count")
    return EncoderInputs(tok, index, amask, pf, pw, sem, aa, pair_mask, am,
                         np.array([w.target for w in windows]), np.array([w.t0 for w in windows]))


# ---------------------------------------------------------------- network


@dataclass
class SceneEmbedding:
    """Per-agent and per-polyline context vectors for one window.

    ``memory`` holds the rows a decoder attends to: every agent and polyline
    vector fused with its relation to the target agent.
    """

    agents: np.ndarray  # (A, d)
    maps: np.ndarray  # (P, d)
    t0: int
    target: int
    memory: np.ndarray  # (A + P, d)
    memory_mask: np.ndarray  # (A + P,) bool


@dataclass
class EmbeddingBatch:
    agents: Tensor  # (B, A, d)
    maps: Tensor  # (B, P, d)
    memory: Tensor  # (B, A + P, d)
    memory_mask: np.ndarray  # (B, A + P)
    target: np.ndarray
    t0: np.ndarray

    def item(self, b: int) -> SceneEmbedding:
        return SceneEmbedding(self.agents.data[b].copy(), self.maps.data[b].copy(), int(self.t0[b]),
                              int(self.target[b]), self.memory.data[b].copy(), self.memory_mask[b].copy())


class _SelfBlock:
    def __init__(self, store, name, d, heads):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads)
        self.ffn = FeedForward(store, f"{name}.ffn", d, 2 * d)
        self.n1 = LayerNorm(store, f"{name}.n1", d)
        self.n2 = LayerNorm(store, f"{name}.n2", d)

    def __call__(self, x, drop, rng, last_only=False):
        q = x[..., -1:, :] if last_only else x
        q = self.n1(q + dm.dropout(self.attn(q, x), drop, rng))
        return self.n2(q + dm.dropout(self.ffn(q), drop, rng))


class _PairBlock:
    def __init__(self, store, name, d, heads):
        self.attn = PairAttention(store, f"{name}.attn", d, heads)
        self.ffn = FeedForward(store, f"{name}.ffn", d, 2 * d)
        self.n1 = LayerNorm(store, f"{name}.n1", d)
        self.n2 = LayerNorm(store, f"{name}.n2", d)

    def __call__(self, x, pairs, mask, has_sender, drop, rng):
        upd = self.attn(x, pairs, mask)
        if has_sender is not None:
            # receivers without any valid sender get a zero update
            upd = upd * has_sender
        x = self.n1(x + dm.dropout(upd, drop, rng))
        return self.n2(x + dm.dropout(self.ffn(x), drop, rng))


class Encoder:
    """Factorized-attention scene encoder.

    Stages: temporal self-attention over each agent's history, agent-map
    cross-attention, agent-agent attention.
    """

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str = "enc"):
        self.cfg = cfg
        d, h = cfg.width, cfg.heads
        fb = 2 * cfg.bands + 1
        self.token_proj = MLP(store, f"{prefix}.token", TOKEN_RAW * fb, d, d)
        self.point_proj = MLP(store, f"{prefix}.point", POINT_RAW * fb, d, d)
        self.semantic = store.glorot(f"{prefix}.semantic", len(SEMANTICS), d)
        self.map_rel = MLP(store, f"{prefix}.map_rel", PAIR_RAW * fb, d, d)
        self.agent_rel = MLP(store, f"{prefix}.agent_rel", PAIR_RAW * fb, d, d)
        self.temporal = [_SelfBlock(store, f"{prefix}.temporal{i}", d, h) for i in range(cfg.temporal_layers)]
        self.agent_map = [_PairBlock(store, f"{prefix}.a2m{i}", d, h) for i in range(cfg.map_layers)]
        self.agent_agent = [_PairBlock(store, f"{prefix}.a2a{i}", d, h) for i in range(cfg.agent_layers)]

    def forward(self, inp: EncoderInputs, rng: np.random.Generator | None = None,
                dropout: float = 0.0) -> EmbeddingBatch:
        """Dropout is active only when ``rng`` is given."""
        drop = dropout if rng is not None else 0.0
        B, A = inp.agent_mask.shape
        P = inp.point_feats.shape[1]
        d = self.cfg.width

        x = self.token_proj(inp.token_feats)  # (n_valid, H, d)
        # only the anchor-time token is consumed downstream, so the last
        # temporal layer attends from that token alone
        for i, blk in enumerate(self.temporal):
            x = blk(x, drop, rng, last_only=i == len(self.temporal) - 1)
        packed = dm.reshape(x, (x.shape[0], d))
        # scatter to (B, A, d); padding rows read an appended zero row
        agents = dm.concat([packed, np.zeros((1, d))], axis=0)[inp.agent_index]

        if P:
            pts = self.point_proj(inp.point_feats)  # (B, P, K, d)
            maps = dm.reshape(dm.matmul(dm.Tensor(inp.point_weights), pts), (B, P, d))
            maps = maps + dm.matmul(dm.Tensor(inp.semantic), self.semantic)
            r_am = self.map_rel(inp.map_pair_feats)  # (B, A, P, d)
            pairs_map = dm.reshape(maps, (B, 1, P, d)) + r_am
            for blk in self.agent_map:
                agents = blk(agents, pairs_map, None, None, drop, rng)
        else:
            maps = dm.Tensor(np.zeros((B, 0, d)))
            r_am = None

        r_aa = self.agent_rel(inp.agent_pair_feats)  # (B, A, A, d)
        has_sender = inp.agent_pair_mask.any(axis=-1)[..., None].astype(np.float64)
        if has_sender.any():
            for blk in self.agent_agent:
                pairs = dm.reshape(agents, (B, 1, A, d)) + r_aa
                agents = blk(agents, pairs, inp.agent_pair_mask, has_sender, drop, rng)

        rows = np.arange(B)
        mem_agents = agents + r_aa[rows, inp.target]  # (B, A, d)
        if P:
            memory = dm.concat([mem_agents, maps + r_am[rows, inp.target]], axis=1)
        else:
            memory = mem_agents
        mem_mask = np.concatenate([inp.agent_mask, np.ones((B, P), dtype=bool)], axis=1)
        return EmbeddingBatch(agents, maps, memory, mem_mask, inp.target, inp.t0)


def encode(window: SceneWindow, encoder: Encoder) -> SceneEmbedding:
    """Embed a single window (inference, no dropout)."""
    with dm.no_grad():
        batch = encoder.forward(prepare_batch([window], encoder.cfg))
    return batch.item(0)
