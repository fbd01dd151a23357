"""File-level pipeline steps behind the command line."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .aggregation import Aggregator
from .checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import BaseModel
from .plotting import trajectory_svg
from .scenario import Episode, generate_episodes, load_episodes, save_episodes
from .streaming import LEARNED, MULTI_MODEL, MetricReport, run_stream, write_report_csv
from .training import AggSamples, TrainResult, collect_agg_samples, train_aggregator, train_base

log = logging.getLogger(__name__)

# aggregator name -> (kind, uses every ensemble member, window is M rather than 1)
AGG_LAYOUT = {
    "learnagg": ("add", False, True),
    "learnagg_xattn": ("xattn", False, True),
    "modelens_learnagg": ("add", True, False),
    "dual": ("add", True, True),
}


def seed_dir(out, seed: int) -> Path:
    return Path(out) / f"seed{seed}"


def data_paths(out) -> tuple[Path, Path]:
    d = Path(out) / "data"
    return d / "train.jsonl", d / "eval.jsonl"


def write_effective_config(cfg: ExperimentConfig, out) -> None:
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "effective_config.json").write_text(cfg.dumps() + "\n", encoding="utf-8")


# ---------------------------------------------------------------- data


def gen_data(cfg: ExperimentConfig, out) -> tuple[Path, Path]:
    train_path, eval_path = data_paths(out)
    train_path.parent.mkdir(parents=True, exist_ok=True)
    seed = cfg.data.data_seed
    splits = {"train": (train_path, cfg.data.train_episodes, seed),
              "eval": (eval_path, cfg.data.eval_episodes, seed + 1)}
    manifest = {"config_digest": cfg.digest(), "splits": {}}
    for name, (path, count, s) in splits.items():
        save_episodes(path, generate_episodes(cfg.generator, count, s), cfg.generator.frame_rate_hz)
        manifest["splits"][name] = {"file": path.name, "episodes": count, "seed": s, "sha256": file_digest(path)}
    (train_path.parent / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return train_path, eval_path


def load_split(cfg: ExperimentConfig, out, split: str) -> list[Episode]:
    train_path, eval_path = data_paths(out)
    path = train_path if split == "train" else eval_path
    if not path.exists():
        gen_data(cfg, out)
    return load_episodes(path)


# ---------------------------------------------------------------- checkpoints


def save_base(path, model: BaseModel, result: TrainResult, cfg: ExperimentConfig) -> None:
    meta = {"kind": "base", "model": model.config(), "config_digest": cfg.digest(),
            "epochs": len(result.epoch_losses), "final_loss": result.final_loss,
            "epoch_losses": result.epoch_losses, "lambda": cfg.train.lam}
    save_checkpoint(path, model.store.state(), meta)


def load_base(path) -> BaseModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "base":
        raise CheckpointError(f"{path} is not a base-model checkpoint")
    mc = meta["model"]
    model = BaseModel(EncoderConfig(**mc["encoder"]), DecoderConfig(**mc["decoder"]), mc["seed"])
    model.store.load(arrays)
    return model


def save_agg(path, agg: Aggregator, result: TrainResult, base_digests: list[str], cfg: ExperimentConfig) -> None:
    meta = {"kind": "aggregator", "aggregator": agg.config(), "decoder": asdict(agg.cfg),
            "config_digest": cfg.digest(), "base_checkpoints": base_digests,
            "epochs": len(result.epoch_losses), "final_loss": result.final_loss,
            "epoch_losses": result.epoch_losses, "lambda": cfg.train.lam}
    save_checkpoint(path, agg.store.state(), meta)


def load_agg(path) -> Aggregator:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "aggregator":
        raise CheckpointError(f"{path} is not an aggregator checkpoint")
    a = meta["aggregator"]
    agg = Aggregator(DecoderConfig(**meta["decoder"]), a["kind"], a["window"], a["models"], a["seed"])
    agg.store.load(arrays)
    return agg


def base_path(out, seed: int, member: int) -> Path:
    return seed_dir(out, seed) / f"base_{member}.ckpt"


def agg_path(out, seed: int, name: str) -> Path:
    return seed_dir(out, seed) / f"agg_{name}.ckpt"


def needs_ensemble(cfg: ExperimentConfig) -> bool:
    return any(a in MULTI_MODEL for a in cfg.aggregators)


def member_seeds(cfg: ExperimentConfig, seed: int) -> list[int]:
    return cfg.member_seeds(seed) if needs_ensemble(cfg) else [seed]


# ---------------------------------------------------------------- steps


def train_base_step(cfg: ExperimentConfig, seed: int, out, train_eps=None) -> list[Path]:
    train_eps = load_split(cfg, out, "train") if train_eps is None else train_eps
    seed_dir(out, seed).mkdir(parents=True, exist_ok=True)
    paths = []
    for member in member_seeds(cfg, seed):
        model = BaseModel(cfg.encoder, cfg.decoder, seed=member)
        result = train_base(train_eps, model, replace(cfg.train, seed=member))
        path = base_path(out, seed, member)
        save_base(path, model, result, cfg)
        log.info("base model %d: final loss %.4f (%.1fs)", member, result.final_loss, result.seconds)
        paths.append(path)
    return paths


def load_bases(cfg: ExperimentConfig, seed: int, out) -> list[BaseModel]:
    bases = []
    for member in member_seeds(cfg, seed):
        path = base_path(out, seed, member)
        if not path.exists():
            raise FileNotFoundError(f"base checkpoint {path} not found; run train-base first")
        bases.append(load_base(path))
    return bases


def train_agg_step(cfg: ExperimentConfig, seed: int, out, train_eps=None) -> dict[str, Path]:
    names = [a for a in cfg.aggregators if a in LEARNED]
    if not names:
        return {}
    train_eps = load_split(cfg, out, "train") if train_eps is None else train_eps
    bases = load_bases(cfg, seed, out)
    files = [base_path(out, seed, m) for m in member_seeds(cfg, seed)]
    before = [file_digest(p) for p in files]
    M = cfg.schedule.window
    tc = replace(cfg.train, seed=seed)
    cache: dict[bool, AggSamples] = {}
    paths = {}
    for name in names:
        kind, ensemble, full = AGG_LAYOUT[name]
        members = bases if ensemble else bases[:1]
        if ensemble not in cache:
            cache[ensemble] = collect_agg_samples(members, train_eps, M, tc.agg_anchors_per_episode, seed)
        samples = cache[ensemble]
        if not full:
            samples = AggSamples([b[:1] for b in samples.banks], samples.memories, samples.targets)
        agg = Aggregator(cfg.decoder, kind, M if full else 1, len(members), seed)
        if cfg.init_agg_from_base:
            agg.init_from_base(bases[0].store)
        result = train_aggregator(members, train_eps, agg, tc, samples=samples)
        path = agg_path(out, seed, name)
        save_agg(path, agg, result, before[:len(members)], cfg)
        log.info("aggregator %s: final loss %.4f (%.1fs)", name, result.final_loss, result.seconds)
        paths[name] = path
    if [file_digest(p) for p in files] != before:
        raise RuntimeError("base checkpoint changed during aggregator training")
    return paths


def eval_step(cfg: ExperimentConfig, seed: int, out, eval_eps=None, collect: bool = False, write: bool = True):
    eval_eps = load_split(cfg, out, "eval") if eval_eps is None else eval_eps
    bases = load_bases(cfg, seed, out)
    learned = {}
    for name in cfg.aggregators:
        if name in LEARNED:
            path = agg_path(out, seed, name)
            if not path.exists():
                raise FileNotFoundError(f"aggregator checkpoint {path} not found; run train-agg first")
            learned[name] = load_agg(path)
    result = run_stream(bases, eval_eps, cfg.schedule, cfg.aggregators, learned, cache=True,
                        threads=cfg.threads, nms_radius=cfg.nms_radius, kmeans_seed=cfg.kmeans_seed,
                        collect=collect)
    if write:
        seed_dir(out, seed).mkdir(parents=True, exist_ok=True)
        write_report_csv(seed_dir(out, seed) / "metrics.csv", list(result.reports.values()), cfg.report_latency)
    return result


def median_reports(per_seed: list[dict[str, MetricReport]]) -> list[MetricReport]:
    """Median over seeds of every metric; sample counts are summed."""
    out = []
    for name in per_seed[0]:
        reps = [r[name] for r in per_seed]
        by = {}
        for man in reps[0].by_maneuver:
            vals = np.array([r.by_maneuver[man][:3] for r in reps], dtype=np.float64)
            n = sum(r.by_maneuver[man][3] for r in reps)
            med = np.median(vals, axis=0) if n else np.full(3, np.nan)
            by[man] = (float(med[0]), float(med[1]), float(med[2]), int(n))
        ade, fde, mr, n = by["all"]
        lat = {k: float(np.median([r.latency_ms[k] for r in reps])) for k in reps[0].latency_ms}
        out.append(MetricReport(name, ade, fde, mr, n, by, lat))
    return out


def compare(cfg: ExperimentConfig, out) -> dict[int, dict[str, MetricReport]]:
    """Train and evaluate every configured aggregator for each seed; write the combined table."""
    write_effective_config(cfg, out)
    train_eps = load_split(cfg, out, "train")
    eval_eps = load_split(cfg, out, "eval")
    per_seed = {}
    for seed in cfg.seeds:
        train_base_step(cfg, seed, out, train_eps)
        train_agg_step(cfg, seed, out, train_eps)
        result = eval_step(cfg, seed, out, eval_eps)
        write_report_csv(Path(out) / f"compare_seed{seed}.csv", list(result.reports.values()), cfg.report_latency)
        per_seed[seed] = result.reports
    write_report_csv(Path(out) / "compare.csv", median_reports(list(per_seed.values())), cfg.report_latency)
    return per_seed


def plot_step(cfg: ExperimentConfig, seed: int, out, count: int = 4, ensembled: str | None = None) -> list[Path]:
    """SVGs for the first ``count`` eval episodes at their middle streamed anchor."""
    eval_eps = sorted(load_split(cfg, out, "eval"), key=lambda e: e.episode_id)[:count]
    if ensembled is None:
        ensembled = "learnagg" if "learnagg" in cfg.aggregators else "kmeans"
    sub = replace(cfg, aggregators=["single", ensembled])
    result = eval_step(sub, seed, out, eval_eps, collect=True, write=False)
    plot_dir = seed_dir(out, seed) / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    by_episode: dict[int, list] = {}
    for o in result.outputs:
        by_episode.setdefault(o.episode_id, []).append(o)
    lookup = {e.episode_id: e for e in eval_eps}
    paths = []
    for eid, outs in by_episode.items():
        o = outs[len(outs) // 2]
        ep = lookup[eid]
        k0 = o.t0 - ep.start_frame
        hist = ep.positions[ep.target_index, max(0, k0 - cfg.schedule.h_obs + 1):k0 + 1]
        lanes = [pl.points for pl in ep.polylines]
        svg = trajectory_svg(o.gt, o.trajectories["single"], o.trajectories[ensembled], o.candidates.trajectories,
                             hist, lanes, title=f"episode {eid} anchor {o.t0} ({o.maneuver})")
        path = plot_dir / f"episode{eid}_t{o.t0}.svg"
        path.write_text(svg, encoding="utf-8")
        paths.append(path)
    return paths
