"""Losses, the base training loop and aggregator fine-tuning."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .aggregation import Aggregator
from .decoder import MixturePrediction, to_agent
from .model import BaseModel
from .scenario import Episode, SceneWindow, valid_anchor_range, window_at

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr: float = 5e-4
    epochs: int = 16
    batch_size: int = 32
    weight_decay: float = 1e-4
    dropout: float = 0.1
    seed: int = 0
    finetune_lr: float | None = None  # None -> half of ``lr``
    finetune_epochs: int = 8
    best_mode: str = "sum"  # or "endpoint"
    windows_per_episode: int = 1
    agg_anchors_per_episode: int = 2

    def __post_init__(self):
        if self.finetune_lr is None:
            self.finetune_lr = self.lr / 2.0

    def validate(self) -> None:
        rates = (self.lr, self.finetune_lr, self.batch_size)
        if any(r <= 0 for r in rates) or self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise TrainingError("learning rates and batch size must be positive, dropout in [0, 1)")
        if self.epochs < 1 or self.finetune_epochs < 1:
            raise TrainingError("epochs must be at least 1")
        if self.lam < 0:
            raise TrainingError("lambda must be non-negative")
        if self.best_mode not in ("sum", "endpoint"):
            raise TrainingError(f"unknown best-mode rule {self.best_mode!r}")
        if self.windows_per_episode < 1 or self.agg_anchors_per_episode < 1:
            raise TrainingError("per-episode sample counts must be positive")


# ---------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    L_traj: float
    L_cls: float
    total: float
    best: np.ndarray  # (B,) best mode index per sample


def _mode_logprob(mu, scale, gt) -> dm.Tensor:
    """Laplace log-density of ``gt`` under each mode: (..., N)."""
    gt = np.asarray(gt, dtype=np.float64)[..., None, :, :]
    resid = dm.tabs(dm.as_tensor(gt) - mu)
    lp = -dm.log(scale * 2.0) - resid / scale
    return dm.tsum(lp, axis=(-1, -2))


def _log_pi(pred: MixturePrediction) -> dm.Tensor:
    if pred.logits is not None:
        return dm.log_softmax(dm.as_tensor(pred.logits), axis=-1)
    return dm.log(dm.as_tensor(pred.pi))


def _batched(pred: MixturePrediction, gt):
    gt = np.asarray(gt, dtype=np.float64)
    mu = dm.as_tensor(pred.mu)
    if gt.shape[-2:] != mu.shape[-2:]:
        raise TrainingError(f"ground truth shape {gt.shape} does not match prediction {mu.shape}")
    return mu, dm.as_tensor(pred.scale), gt


def mixture_nll(pred: MixturePrediction, gt) -> dm.Tensor:
    """Negative log-likelihood of the Laplace mixture, averaged over any batch axes."""
    mu, scale, gt = _batched(pred, gt)
    joint = _log_pi(pred) + _mode_logprob(mu, scale, gt)
    return dm.mean(-dm.logsumexp(joint, axis=-1))


def best_modes(mu: np.ndarray, gt: np.ndarray, rule: str = "sum") -> np.ndarray:
    """Index of the mode closest to ``gt`` (lowest index on ties)."""
    err = np.linalg.norm(mu - np.asarray(gt)[..., None, :, :], axis=-1)  # (..., N, T)
    score = err[..., -1] if rule == "endpoint" else err.sum(axis=-1)
    return np.argmin(score, axis=-1)


def wta_traj_loss(pred: MixturePrediction, gt, rule: str = "sum") -> tuple[dm.Tensor, np.ndarray]:
    """Laplace NLL of the best mode only; other modes receive no gradient."""
    mu, scale, gt = _batched(pred, gt)
    single = mu.ndim == 3
    if single:
        mu, scale, gt = dm.reshape(mu, (1,) + mu.shape), dm.reshape(scale, (1,) + scale.shape), gt[None]
    best = best_modes(mu.data, gt, rule)
    rows = np.arange(len(best))
    mu_b = dm.reshape(mu[rows, best], (len(best), 1) + mu.shape[2:])
    sc_b = dm.reshape(scale[rows, best], (len(best), 1) + scale.shape[2:])
    lp = _mode_logprob(mu_b, sc_b, gt)  # (B, 1)
    loss = dm.mean(-lp)
    return loss, (best[0] if single else best)


def cls_loss(pred: MixturePrediction, gt) -> dm.Tensor:
    """Mixture NLL with locations and scales held constant."""
    frozen = MixturePrediction(pred.pi, dm.as_tensor(pred.mu).detach(), dm.as_tensor(pred.scale).detach(),
                               pred.anchor_time, pred.anchor_pose, pred.logits)
    return mixture_nll(frozen, gt)


def total_loss(logits, mu, scale, gt, lam: float = 1.0, rule: str = "sum") -> tuple[dm.Tensor, LossBreakdown]:
    pred = MixturePrediction(None, mu, scale, logits=logits)
    traj, best = wta_traj_loss(pred, gt, rule)
    cls = cls_loss(pred, gt)
    total = traj + cls * lam
    return total, LossBreakdown(traj.item(), cls.item(), total.item(), np.atleast_1d(best))


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"loss diverged at epoch {epoch}, step {step}: {value}")


# ---------------------------------------------------------------- base training


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def _sample_windows(data, rng: np.random.Generator, per_episode: int, h_obs: int, h_pred: int) -> list[SceneWindow]:
    out = []
    for item in data:
        if isinstance(item, SceneWindow):
            out.append(item)
            continue
        lo, hi = valid_anchor_range(item, h_obs, h_pred)
        for t0 in rng.integers(lo, hi + 1, size=per_episode):
            out.append(window_at(item, int(t0), h_obs, h_pred))
    return out


def _agent_future(w: SceneWindow) -> np.ndarray:
    if w.future is None:
        raise TrainingError("training windows need a future")
    return to_agent(w.future, w.anchor_pose)


def train_base(data: Sequence[SceneWindow | Episode], model: BaseModel, cfg: TrainConfig) -> TrainResult:
    """Train ``model`` in place.

    ``data`` holds windows or episodes; for episodes, ``windows_per_episode``
    anchors are drawn afresh each epoch.
    """
    cfg.validate()
    if len(data) == 0:
        raise TrainingError("empty training set")
    h_obs, h_pred = model.enc_cfg.h_obs, model.dec_cfg.horizon
    n_items = len(data) * (1 if isinstance(data[0], SceneWindow) else cfg.windows_per_episode)
    per_epoch = -(-n_items // cfg.batch_size)
    sched = dm.LRSchedule(cfg.lr, cfg.epochs * per_epoch)
    opt = dm.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.store.tensors
    result = TrainResult()
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        windows = _sample_windows(data, rng, cfg.windows_per_episode, h_obs, h_pred)
        order = rng.permutation(len(windows))
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        total, count = 0.0, 0
        for s in range(per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            batch = [windows[i] for i in idx]
            gt = np.stack([_agent_future(w) for w in batch])
            try:
                _, _, logits, mu, scale = model.forward(batch, drop_rng, cfg.dropout)
                loss, parts = total_loss(logits, mu, scale, gt, cfg.lam, cfg.best_mode)
                _check_finite(parts.total, epoch + 1, s)
                grads = dm.backward(loss)
            except dm.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch + 1}, step {s}: {exc}") from exc
            named = {t.name: g for t, g in grads.items() if t.name in params}
            dm.adamw_step(params, named, opt, dm.cosine_rate(result.steps, sched))
            result.steps += 1
            total += parts.total * len(idx)
            count += len(idx)
        result.epoch_losses.append(total / count)
        log.info("base epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, result.epoch_losses[-1])
    result.seconds = time.perf_counter() - start
    return result


# ---------------------------------------------------------------- aggregator fine-tuning


@dataclass
class AggSamples:
    """Precomputed frozen-base outputs for aggregator training.

    ``banks[i]`` is (M, N, d) with the newest anchor first.
    """

    banks: list[np.ndarray]
    memories: list[np.ndarray]
    targets: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.banks)


def _base_outputs(bases: Sequence[BaseModel], windows: list[SceneWindow], chunk: int = 64):
    """Refined queries averaged across ``bases`` and the first base's memory rows."""
    refined = [[] for _ in windows]
    memory = [None] * len(windows)
    for k, base in enumerate(bases):
        for c in range(0, len(windows), chunk):
            part = windows[c:c + chunk]
            emb, q = base.predict_batch(part)
            for j in range(len(part)):
                refined[c + j].append(q[j])
                if k == 0:
                    memory[c + j] = emb.memory.data[j][emb.memory_mask[j]].copy()
    avg = []
    for qs in refined:
        acc = qs[0].copy()
        for q in qs[1:]:
            acc = acc + q
        avg.append(acc / len(qs))
    return avg, memory


def collect_agg_samples(bases: Sequence[BaseModel], episodes: Sequence[Episode], window: int,
                        per_episode: int, seed: int) -> AggSamples:
    """Run the frozen base model(s) over consecutive anchors of each episode."""
    base = bases[0]
    h_obs, h_pred = base.enc_cfg.h_obs, base.dec_cfg.horizon
    rng = np.random.default_rng([seed, 7])
    windows, spans = [], []
    for ep in episodes:
        lo, hi = valid_anchor_range(ep, h_obs, h_pred)
        first = lo + window - 1 + per_episode - 1
        if first > hi:
            raise TrainingError(f"episode {ep.episode_id} too short for a {window}-anchor window")
        t_end = int(rng.integers(first, hi + 1))
        t_start = t_end - (per_episode - 1) - (window - 1)
        spans.append((len(windows), t_start, t_end))
        for t in range(t_start, t_end + 1):
            windows.append(window_at(ep, t, h_obs, h_pred))
    refined, memory = _base_outputs(bases, windows)
    out = AggSamples([], [], [])
    for off, t_start, t_end in spans:
        for t in range(t_end - per_episode + 1, t_end + 1):
            j = off + t - t_start
            out.banks.append(np.stack([refined[j - m] for m in range(window)]))
            out.memories.append(memory[j])
            out.targets.append(_agent_future(windows[j]))
    return out


def pad_memory(memories: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    L = max(m.shape[0] for m in memories)
    d = memories[0].shape[1]
    out = np.zeros((len(memories), L, d))
    mask = np.zeros((len(memories), L), dtype=bool)
    for i, m in enumerate(memories):
        out[i, :len(m)] = m
        mask[i, :len(m)] = True
    return out, mask


def train_aggregator(bases: BaseModel | Sequence[BaseModel], episodes: Sequence[Episode], agg: Aggregator,
                     cfg: TrainConfig, samples: AggSamples | None = None) -> TrainResult:
    """Fine-tune ``agg`` on refined queries from frozen base model(s).

    Only aggregator parameters change; the base digests are checked after.
    """
    cfg.validate()
    bases = [bases] if isinstance(bases, BaseModel) else list(bases)
    if len(bases) != agg.models:
        raise TrainingError(f"aggregator expects {agg.models} base model(s), got {len(bases)}")
    before = [b.digest() for b in bases]
    if samples is None:
        samples = collect_agg_samples(bases, episodes, agg.window, cfg.agg_anchors_per_episode, cfg.seed)
    if len(samples) == 0:
        raise TrainingError("no aggregator training samples")
    per_epoch = -(-len(samples) // cfg.batch_size)
    sched = dm.LRSchedule(cfg.finetune_lr, cfg.finetune_epochs * per_epoch)
    opt = dm.OptimizerState(lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    params = agg.store.tensors
    result = TrainResult()
    start = time.perf_counter()
    for epoch in range(cfg.finetune_epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 2])
        order = rng.permutation(len(samples))
        drop_rng = np.random.default_rng([cfg.seed, epoch, 3])
        total, count = 0.0, 0
        for s in range(per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            bank = np.stack([samples.banks[i] for i in idx])
            mem, mask = pad_memory([samples.memories[i] for i in idx])
            gt = np.stack([samples.targets[i] for i in idx])
            _, logits, mu, scale = agg.forward(bank, mem, mask, rng=drop_rng, dropout=cfg.dropout)
            loss, parts = total_loss(logits, mu, scale, gt, cfg.lam, cfg.best_mode)
            _check_finite(parts.total, epoch + 1, s)
            grads = dm.backward(loss)
            named = {t.name: g for t, g in grads.items() if t.name in params}
            dm.adamw_step(params, named, opt, dm.cosine_rate(result.steps, sched))
            result.steps += 1
            total += parts.total * len(idx)
            count += len(idx)
        result.epoch_losses.append(total / count)
        log.info("aggregator epoch %d/%d loss %.4f", epoch + 1, cfg.finetune_epochs, result.epoch_losses[-1])
    if [b.digest() for b in bases] != before:
        raise TrainingError("base parameters changed during aggregator training")
    result.seconds = time.perf_counter() - start
    return result
