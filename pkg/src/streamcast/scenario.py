"""Synthetic four-way-intersection traffic episodes and their file format.

A target agent approaches the intersection from one arm, picks a maneuver
(straight, left, right) at the stop line and follows a piecewise
constant-curvature path.  Background agents drive straight along other
lanes.  Everything is deterministic for a given (config, seed).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANEUVERS = ("straight", "left", "right")
SEMANTICS = ("lane_center", "boundary", "crosswalk")
FORMAT_VERSION = 1
EPISODE_FIELDS = ("episode_id", "start_frame", "agent_ids", "target_id", "positions",
                  "headings", "intents", "polylines")


class ScenarioError(ValueError):
    pass


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]
    heading: float
    t: int
    motion: tuple[float, float]


@dataclass
class MapPolyline:
    points: np.ndarray  # (K, 2)
    semantic: str = "lane_center"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] != 2:
            raise ScenarioError("polyline needs at least 2 two-dimensional points")
        if np.any(np.all(np.diff(self.points, axis=0) == 0.0, axis=1)):
            raise ScenarioError("polyline has repeated consecutive points")
        if self.semantic not in SEMANTICS:
            raise ScenarioError(f"unknown semantic attribute {self.semantic!r}")

    def __eq__(self, other):
        return (isinstance(other, MapPolyline) and self.semantic == other.semantic
                and np.array_equal(self.points, other.points))


@dataclass
class Episode:
    """Multi-agent stream over frames ``start_frame .. start_frame + T - 1``.

    ``positions`` is (A, T, 2) in the world frame and ``headings`` (A, T).
    Agent 0 is not special; ``target_id`` names the predicted agent.
    ``intents`` holds the generator's latent maneuver per agent and is never
    shown to a model.
    """

    episode_id: int
    positions: np.ndarray
    headings: np.ndarray
    polylines: list[MapPolyline]
    intents: list[str]
    agent_ids: list[int]
    target_id: int = 0
    start_frame: int = 0

    @property
    def num_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def num_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def target_index(self) -> int:
        return self.agent_ids.index(self.target_id)

    @property
    def target_intent(self) -> str:
        return self.intents[self.target_index]

    @property
    def motion(self) -> np.ndarray:
        return motion_vectors(self.positions)

    def state(self, agent: int, t: int) -> AgentState:
        k = t - self.start_frame
        m = self.motion[agent, k]
        p = self.positions[agent, k]
        return AgentState((float(p[0]), float(p[1])), float(self.headings[agent, k]), t,
                          (float(m[0]), float(m[1])))

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.episode_id == other.episode_id and self.start_frame == other.start_frame
                and self.agent_ids == other.agent_ids and self.target_id == other.target_id
                and self.intents == other.intents
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.headings, other.headings)
                and self.polylines == other.polylines)


@dataclass
class SceneWindow:
    """Observed history ending at anchor ``t0`` plus optional future of the target."""

    t0: int
    positions: np.ndarray  # (A, H_obs, 2)
    headings: np.ndarray  # (A, H_obs)
    motion: np.ndarray  # (A, H_obs, 2)
    polylines: list[MapPolyline]
    target: int  # row index into the agent axis
    future: np.ndarray | None = None  # (H_pred, 2) world frame
    episode_id: int = -1
    intent: str = ""

    @property
    def h_obs(self) -> int:
        return self.positions.shape[1]

    @property
    def anchor_pose(self) -> tuple[float, float, float]:
        p = self.positions[self.target, -1]
        return float(p[0]), float(p[1]), float(self.headings[self.target, -1])

    def transformed(self, angle: float, shift: Sequence[float]) -> "SceneWindow":
        """Apply a global rotation then translation to every coordinate."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        shift = np.asarray(shift, dtype=np.float64)
        return SceneWindow(
            t0=self.t0,
            positions=self.positions @ rot.T + shift,
            headings=wrap_angle(self.headings + angle),
            motion=self.motion @ rot.T,
            polylines=[MapPolyline(pl.points @ rot.T + shift, pl.semantic) for pl in self.polylines],
            target=self.target,
            future=None if self.future is None else self.future @ rot.T + shift,
            episode_id=self.episode_id,
            intent=self.intent,
        )


def motion_vectors(positions: np.ndarray) -> np.ndarray:
    """p^t - p^{t-1} along the time axis, zero at the first frame."""
    m = np.zeros_like(positions)
    m[:, 1:] = positions[:, 1:] - positions[:, :-1]
    return m


# ---------------------------------------------------------------- generation


@dataclass
class GeneratorConfig:
    frames: int = 70
    frame_rate_hz: float = 10.0
    h_obs: int = 20
    h_pred: int = 30
    ensemble_frames: int = 10
    maneuver_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    speed_range: tuple[float, float] = (5.0, 15.0)
    noise: float = 0.05
    arm_length: float = 50.0
    lane_offset: float = 1.75
    stop_offset: float = 6.0
    radius_range: tuple[float, float] = (6.0, 12.0)
    decision_frame_range: tuple[int, int] = (25, 50)
    max_background: int = 4
    world_pose: bool = True
    point_spacing: float = 10.0

    def validate(self) -> None:
        p = np.asarray(self.maneuver_probs, dtype=np.float64)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ScenarioError(f"maneuver probabilities must be 3 non-negative values summing to 1, got {self.maneuver_probs}")
        need = self.h_obs + self.h_pred + self.ensemble_frames
        if self.frames < need:
            raise ScenarioError(f"frame count {self.frames} < H_obs + H_pred + M = {need}")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ScenarioError("invalid speed range")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ScenarioError("invalid radius range")
        if self.noise < 0:
            raise ScenarioError("noise must be non-negative")


def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _resample(a: np.ndarray, b: np.ndarray, spacing: float) -> np.ndarray:
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    w = np.linspace(0.0, 1.0, n)[:, None]
    return a[None] * (1.0 - w) + b[None] * w


def intersection_map(cfg: GeneratorConfig) -> list[MapPolyline]:
    """Lane centerlines, right road edges and crosswalks for four arms (intersection frame)."""
    w, s, L = cfg.lane_offset, cfg.stop_offset, cfg.arm_length
    polys = []
    for k in range(4):
        r = _rot(k * math.pi / 2)
        segs = [
            (np.array([w, -L]), np.array([w, -s]), "lane_center"),  # incoming
            (np.array([-w, -s]), np.array([-w, -L]), "lane_center"),  # outgoing
            (np.array([2 * w, -L]), np.array([2 * w, -s]), "boundary"),
            (np.array([-2 * w, -s + 1.5]), np.array([2 * w, -s + 1.5]), "crosswalk"),
        ]
        for a, b, sem in segs:
            polys.append(MapPolyline(_resample(r @ a, r @ b, cfg.point_spacing) if sem != "crosswalk"
                                     else np.stack([r @ a, r @ b]), sem))
    return polys


def _target_path(maneuver: str, radius: float, cfg: GeneratorConfig, s: np.ndarray):
    """Position and heading at signed arclength ``s`` (0 at the stop line), intersection frame.

    The approach runs north along x = lane_offset.
    """
    w, y0 = cfg.lane_offset, -cfg.stop_offset
    pos = np.zeros(s.shape + (2,))
    head = np.full(s.shape, math.pi / 2)
    before = s <= 0
    pos[before, 0] = w
    pos[before, 1] = y0 + s[before]
    after = ~before
    sa = s[after]
    if maneuver == "straight":
        pos[after, 0] = w
        pos[after, 1] = y0 + sa
        return pos, head
    arc_len = radius * math.pi / 2
    on_arc = sa <= arc_len
    phi = np.minimum(sa, arc_len) / radius
    if maneuver == "right":
        cx, cy = w + radius, y0
        ax = cx - radius * np.cos(phi)
        ay = cy + radius * np.sin(phi)
        ah = math.pi / 2 - phi
        ex, ey, eh, dx, dy = cx, cy + radius, 0.0, 1.0, 0.0
    else:
        cx, cy = w - radius, y0
        ax = cx + radius * np.cos(phi)
        ay = cy + radius * np.sin(phi)
        ah = math.pi / 2 + phi
        ex, ey, eh, dx, dy = cx, cy + radius, math.pi, -1.0, 0.0
    rest = sa - arc_len
    px = np.where(on_arc, ax, ex + dx * rest)
    py = np.where(on_arc, ay, ey + dy * rest)
    ph = np.where(on_arc, ah, eh)
    pos[after, 0] = px
    pos[after, 1] = py
    head[after] = ph
    return pos, head


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def generate_episode(cfg: GeneratorConfig, seed: int, episode_id: int | None = None) -> Episode:
    cfg.validate()
    rng = np.random.default_rng(seed)
    T = cfg.frames
    dt = 1.0 / cfg.frame_rate_hz
    vlo, vhi = cfg.speed_range

    maneuver = MANEUVERS[int(rng.choice(3, p=np.asarray(cfg.maneuver_probs, dtype=np.float64)))]
    radius = float(rng.uniform(*cfg.radius_range))
    k_dec = int(rng.integers(cfg.decision_frame_range[0], cfg.decision_frame_range[1] + 1))
    v0 = float(rng.uniform(vlo, vhi))
    if maneuver == "straight":
        v1 = v0 * float(rng.uniform(0.9, 1.1))
    else:
        v1 = v0 * float(rng.uniform(0.6, 0.8))
    v1 = float(np.clip(v1, vlo, vhi))
    frames = np.arange(T, dtype=np.float64)
    speed = v0 + (v1 - v0) * _smoothstep((frames - k_dec) / 15.0)
    # arclength at frame k: distance covered at the per-frame speed before it
    travel = np.concatenate([[0.0], np.cumsum(speed[:-1] * dt)])
    s = travel - travel[k_dec]
    tpos, thead = _target_path(maneuver, radius, cfg, s)

    positions = [tpos]
    headings = [thead]
    intents = [maneuver]

    n_bg = int(rng.integers(0, cfg.max_background + 1))
    lanes = rng.permutation(7)[:n_bg]  # 4 arms x (in, out) minus the target's incoming lane
    for lane in lanes:
        lane = int(lane) + 1
        arm, outgoing = divmod(lane, 2)
        r = _rot(arm * math.pi / 2)
        v = float(rng.uniform(vlo, vhi))
        offset = float(rng.uniform(-cfg.arm_length, 0.0))
        dist = offset + frames * v * dt
        if outgoing:
            local = np.stack([np.full(T, -cfg.lane_offset), -cfg.stop_offset - dist], axis=-1)
            h = -math.pi / 2
        else:
            local = np.stack([np.full(T, cfg.lane_offset), -cfg.arm_length + dist], axis=-1)
            h = math.pi / 2
        positions.append(local @ r.T)
        headings.append(np.full(T, float(wrap_angle(h + arm * math.pi / 2))))
        intents.append("straight")

    pos = np.stack(positions)
    head = np.stack(headings)
    if cfg.noise > 0:
        pos = pos + rng.normal(0.0, cfg.noise, size=pos.shape)
    polys = intersection_map(cfg)
    if cfg.world_pose:
        ang = float(rng.uniform(-math.pi, math.pi))
        shift = rng.uniform(-100.0, 100.0, size=2)
        R = _rot(ang)
        pos = pos @ R.T + shift
        head = head + ang
        polys = [MapPolyline(p.points @ R.T + shift, p.semantic) for p in polys]
    head = wrap_angle(head)
    return Episode(
        episode_id=int(seed if episode_id is None else episode_id),
        positions=pos,
        headings=np.asarray(head),
        polylines=polys,
        intents=intents,
        agent_ids=list(range(pos.shape[0])),
        target_id=0,
        start_frame=0,
    )


def generate_episodes(cfg: GeneratorConfig, count: int, seed: int) -> list[Episode]:
    """``count`` episodes with per-episode seeds spawned from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [generate_episode(cfg, int(s), episode_id=i) for i, s in enumerate(seeds)]


# ---------------------------------------------------------------- windows


def valid_anchor_range(episode: Episode, h_obs: int, h_pred: int) -> tuple[int, int]:
    """Inclusive (first, last) anchor for which a full window exists."""
    first = episode.start_frame + h_obs - 1
    last = episode.start_frame + episode.num_frames - 1 - h_pred
    return first, last


def window_at(episode: Episode, t0: int, h_obs: int, h_pred: int,
              target: int | None = None, with_future: bool = True) -> SceneWindow:
    """Sliding window anchored at ``t0`` (the last observed frame).

    With ``with_future=False`` only the observed span must lie inside the
    episode; the future is then omitted.
    """
    if target is None:
        target = episode.target_index
    k0 = t0 - episode.start_frame
    lo = k0 - h_obs + 1
    hi = k0 + (h_pred if with_future else 0)
    if lo < 0 or hi > episode.num_frames - 1:
        raise ScenarioError(f"anchor {t0} out of range for episode {episode.episode_id} "
                            f"(frames {episode.start_frame}..{episode.start_frame + episode.num_frames - 1})")
    pos = episode.positions[:, lo:k0 + 1].copy()
    future = episode.positions[target, k0 + 1:k0 + 1 + h_pred].copy() if with_future else None
    return SceneWindow(
        t0=t0,
        positions=pos,
        headings=episode.headings[:, lo:k0 + 1].copy(),
        motion=motion_vectors(pos),
        polylines=episode.polylines,
        target=target,
        future=future,
        episode_id=episode.episode_id,
        intent=episode.intents[target],
    )


# ---------------------------------------------------------------- persistence


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    if isinstance(x, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in x.items()) + "}"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps_record(obj) -> str:
    """Compact JSON with floats written at 17 significant digits."""
    return _fmt(obj)


def _episode_record(ep: Episode) -> dict:
    return {
        "episode_id": ep.episode_id,
        "start_frame": ep.start_frame,
        "agent_ids": ep.agent_ids,
        "target_id": ep.target_id,
        "positions": np.asarray(ep.positions, dtype=np.float64),
        "headings": np.asarray(ep.headings, dtype=np.float64),
        "intents": ep.intents,
        "polylines": [{"semantic": p.semantic, "points": p.points} for p in ep.polylines],
    }


def _episode_from_record(rec: dict) -> Episode:
    missing = [f for f in EPISODE_FIELDS if f not in rec]
    if missing:
        raise KeyError(f"missing fields {missing}")
    pos = np.asarray(rec["positions"], dtype=np.float64)
    head = np.asarray(rec["headings"], dtype=np.float64)
    if pos.ndim != 3 or pos.shape[2] != 2 or head.shape != pos.shape[:2]:
        raise ValueError("inconsistent positions/headings shapes")
    return Episode(
        episode_id=int(rec["episode_id"]),
        positions=pos,
        headings=head,
        polylines=[MapPolyline(np.asarray(p["points"], dtype=np.float64), p["semantic"]) for p in rec["polylines"]],
        intents=[str(i) for i in rec["intents"]],
        agent_ids=[int(i) for i in rec["agent_ids"]],
        target_id=int(rec["target_id"]),
        start_frame=int(rec["start_frame"]),
    )


def save_episodes(path, episodes: Iterable[Episode], frame_rate_hz: float = 10.0) -> None:
    path = Path(path)
    header = {"format_version": FORMAT_VERSION, "frame_rate_hz": float(frame_rate_hz),
              "fields": list(EPISODE_FIELDS)}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(dumps_record(header) + "\n")
        for ep in episodes:
            fh.write(dumps_record(_episode_record(ep)) + "\n")


def load_episodes(path) -> list[Episode]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ScenarioError(f"{path}: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: record 0 (header) is malformed: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ScenarioError(f"{path}: format version {header.get('format_version')!r} != {FORMAT_VERSION}")
    episodes = []
    for i, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            episodes.append(_episode_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise ScenarioError(f"{path}: record {i} is malformed: {exc}") from None
    return episodes
