import csv
import hashlib
import json
import re

import numpy as np
import pytest

from helpers import tiny_config_tree
from streamcast import experiment as ex
from streamcast.cli import main
from streamcast.config import ConfigError, ExperimentConfig, from_dict, load_config
from streamcast.plotting import parse_path
from streamcast.scenario import MANEUVERS, load_episodes, window_at


def write_config(path, tree):
    path.write_text(json.dumps(tree))
    return str(path)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_is_deterministic_and_creates_directories(tmp_path):
    cfg = write_config(tmp_path / "c.json", tiny_config_tree(tmp_path / "unused"))
    a, b = tmp_path / "deep" / "a", tmp_path / "deep" / "b"
    assert main(["gen-data", "--config", cfg, "--seed", "4", "--out", str(a)]) == 0
    assert main(["gen-data", "--config", cfg, "--seed", "4", "--out", str(b)]) == 0
    for name in ("train.jsonl", "eval.jsonl", "manifest.json"):
        assert sha(a / "data" / name) == sha(b / "data" / name)
    manifest = json.loads((a / "data" / "manifest.json").read_text())
    assert manifest["splits"]["train"]["seed"] == 4 and manifest["splits"]["eval"]["seed"] == 5
    assert len(load_episodes(a / "data" / "train.jsonl")) == 24
    assert (a / "effective_config.json").exists()


def test_unknown_key_exits_with_key_name(tmp_path, capsys):
    tree = tiny_config_tree(tmp_path)
    tree["train"]["learning_rate"] = 1.0
    cfg = write_config(tmp_path / "c.json", tree)
    assert main(["gen-data", "--config", cfg]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_config_consistency_checks(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key: bogus"):
        from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="ensemble_frames"):
        from_dict({"schedule": {"window": 5}})
    with pytest.raises(ConfigError, match="schedule"):
        from_dict({"schedule": {"b": 30}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    cfg = ExperimentConfig()
    assert cfg.train.lam == 1.0 and cfg.nms_radius == 2.0 and cfg.kmeans_seed == 0
    assert cfg.member_seeds(2) == [2, 1002]


def test_missing_checkpoint_exit_code(tmp_path):
    cfg = write_config(tmp_path / "c.json", tiny_config_tree(tmp_path / "run"))
    assert main(["eval", "--config", cfg]) == 3


@pytest.fixture(scope="module")
def compared(tmp_path_factory):
    out = tmp_path_factory.mktemp("cmp")
    aggs = ["single", "topk", "nms", "kmeans", "learnagg", "learnagg_xattn", "modelens_kmeans",
            "modelens_learnagg", "dual"]
    cfg = write_config(out / "c.json", tiny_config_tree(out / "run", aggregators=aggs))
    assert main(["compare", "--config", cfg]) == 0
    return out / "run", aggs, cfg


def test_compare_table_shape(compared):
    run, aggs, _ = compared
    rows = list(csv.reader((run / "compare.csv").open()))
    assert rows[0] == ["aggregator", "minADE", "minFDE", "miss_rate", "samples", "maneuver", "latency_ms_p50"]
    assert len(rows) - 1 == len(aggs) * (len(MANEUVERS) + 1)
    assert [r[0] for r in rows[1::4]] == aggs
    assert (run / "compare_seed0.csv").read_bytes() == (run / "seed0" / "metrics.csv").read_bytes()


def test_eval_reproduces_compare(compared):
    run, _, cfg = compared
    before = sha(run / "seed0" / "metrics.csv")
    assert main(["eval", "--config", cfg]) == 0
    assert sha(run / "seed0" / "metrics.csv") == before


def test_checkpoint_round_trip(compared, tmp_path):
    run, _, cfg = compared
    model = ex.load_base(run / "seed0" / "base_0.ckpt")
    eps = load_episodes(run / "data" / "eval.jsonl")
    rng = np.random.default_rng(0)
    windows = []
    for _ in range(100):
        ep = eps[int(rng.integers(len(eps)))]
        windows.append(window_at(ep, int(rng.integers(ep.start_frame + 19, ep.start_frame + 40)), 20, 30))
    before = [model.predict(w) for w in windows]
    path = tmp_path / "copy.ckpt"
    from streamcast.training import TrainResult
    ex.save_base(path, model, TrainResult([1.0]), load_config(cfg))
    again = ex.load_base(path)
    for w, (q, p, _) in zip(windows, before):
        q2, p2, _ = again.predict(w)
        assert np.array_equal(q.vectors, q2.vectors)
        assert np.array_equal(p.mu, p2.mu) and np.array_equal(p.pi, p2.pi) and np.array_equal(p.scale, p2.scale)


def test_window_one_topk_matches_baseline(tmp_path):
    tree = tiny_config_tree(tmp_path / "run", aggregators=("single", "topk"), window=1)
    cfg = write_config(tmp_path / "c.json", tree)
    assert main(["train-base", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg]) == 0
    rows = list(csv.reader((tmp_path / "run" / "seed0" / "metrics.csv").open()))[1:]
    single = [r[1:] for r in rows if r[0] == "single"]
    top = [r[1:] for r in rows if r[0] == "topk"]
    assert single == top


def test_plot_straight_episode(tmp_path):
    tree = tiny_config_tree(tmp_path / "run", aggregators=("single", "kmeans"), noise=0.0,
                            maneuver_probs=[1.0, 0.0, 0.0])
    cfg = write_config(tmp_path / "c.json", tree)
    assert main(["train-base", "--config", cfg]) == 0
    assert main(["plot", "--config", cfg, "--count", "2"]) == 0
    svgs = sorted((tmp_path / "run" / "seed0" / "plots").glob("*.svg"))
    assert len(svgs) == 2
    for svg in svgs:
        text = svg.read_text()
        for group in ("ground-truth", "single", "ensembled", "candidate"):
            assert f'<g id="{group}"' in text
        gt = re.search(r'<g id="ground-truth"[^>]*>\s*<path d="([^"]+)"', text).group(1)
        pts = parse_path(gt)
        d = pts[-1] - pts[0]
        d = d / np.linalg.norm(d)
        rel = pts - pts[0]
        # pixel coordinates are printed with 3 decimals
        assert np.max(np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0])) < 5e-3
