import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_DEC
from helpers import probe_params
from streamcast import diffmath as dm
from streamcast.aggregation import (AggregatedQuerySet, AggregationError, Aggregator, CandidateSet,
                                    add_queries, avg_queries_across_models, kmeans_agg, learn_agg,
                                    learn_agg_xattn, load_candidates, nms, save_candidates, topk)
from streamcast.decoder import DecoderConfig, RefinedQuerySet
from streamcast.encoder import SceneEmbedding
from streamcast.layers import ParamStore


def cset(trajs, scores, anchors=None, modes=None, models=None):
    k = len(scores)
    return CandidateSet(np.asarray(trajs, dtype=float), np.asarray(scores, dtype=float),
                        np.zeros(k) if anchors is None else anchors,
                        np.zeros(k) if models is None else models,
                        np.arange(k) if modes is None else modes)


def random_cands(rng, k=None, t=5, coarse=False):
    k = int(rng.integers(1, 25)) if k is None else k
    # coarse scores force ties so the tie rule is exercised
    scores = rng.integers(1, 4, size=k) / 4 if coarse else rng.uniform(0.01, 1, k)
    return cset(rng.normal(0, 5, size=(k, t, 2)), scores, rng.integers(0, 5, k),
                rng.integers(0, 6, k), rng.integers(0, 2, k))


def equal_sets(a: CandidateSet, b: CandidateSet) -> bool:
    return all(np.array_equal(x, y) for x, y in [(a.trajectories, b.trajectories), (a.scores, b.scores),
                                                 (a.anchor_times, b.anchor_times),
                                                 (a.model_ids, b.model_ids), (a.mode_indices, b.mode_indices)])


# ---------------------------------------------------------------- top-k


def test_topk_orders_by_score():
    c = cset(np.arange(4)[:, None, None] * np.ones((4, 3, 2)), [0.3, 0.4, 0.1, 0.2])
    out = topk(c, 2)
    assert list(out.scores) == [0.4, 0.3]
    assert np.array_equal(out.trajectories[0], c.trajectories[1])


def test_topk_ties_prefer_recent_anchors():
    c = cset(np.zeros((6, 2, 2)), np.ones(6), anchors=[3, 5, 4, 5, 3, 4], modes=[0, 1, 0, 0, 1, 1])
    out = topk(c, 3)
    assert list(out.anchor_times) == [5, 5, 4]
    assert list(out.mode_indices) == [0, 1, 0]


def test_topk_full_size_is_reordering(rng):
    c = random_cands(rng, 10)
    out = topk(c, 10)
    assert sorted(out.scores) == sorted(c.scores)
    assert np.all(np.diff(out.scores) <= 0)


def test_topk_too_few():
    with pytest.raises(AggregationError):
        topk(cset(np.zeros((2, 2, 2)), [1, 1]), 3)


# ---------------------------------------------------------------- NMS


def test_nms_radius_zero_is_topk():
    rng = np.random.default_rng(0)
    for i in range(1000):
        c = random_cands(rng, coarse=i % 2 == 0)
        n = int(rng.integers(1, len(c) + 1))
        assert equal_sets(nms(c, n, radius=0.0), topk(c, n))


def test_nms_suppresses_close_pair():
    t = np.zeros((2, 3, 2))
    t[1, -1] = [1.0, 0.0]
    out = nms(cset(t, [0.3, 0.7]), 1, radius=2.0)
    assert out.scores[0] == 0.7


def greedy_oracle(ends, scores, n, radius):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    kept = []
    for i in order:
        if all(np.hypot(*(ends[i] - ends[j])) >= radius for j in kept):
            kept.append(i)
        if len(kept) == n:
            break
    return kept


def test_nms_two_clusters():
    rng = np.random.default_rng(1)
    for _ in range(20):
        centers = np.array([[0.0, 0.0], [20.0, 0.0]])
        ends = np.concatenate([c + rng.uniform(-1, 1, size=(6, 2)) for c in centers])
        t = np.repeat(ends[:, None, :], 4, axis=1)
        scores = rng.uniform(0.01, 1, 12)
        out = nms(cset(t, scores), 2, radius=3.0)
        want = greedy_oracle(ends, scores, 2, 3.0)
        assert sorted(out.scores) == sorted(scores[want])
        assert {int(np.argmax(scores[:6])), 6 + int(np.argmax(scores[6:]))} == set(want)


def test_nms_refills_when_everything_is_suppressed():
    out = nms(cset(np.zeros((4, 2, 2)), [0.4, 0.3, 0.2, 0.1]), 3, radius=5.0)
    assert list(out.scores) == [0.4, 0.3, 0.2]


# ---------------------------------------------------------------- k-means


def test_kmeans_identical_clusters():
    a, b = np.zeros((3, 2)), np.full((3, 2), 30.0)
    out = kmeans_agg(cset([a, a, a, b], [0.2, 0.2, 0.2, 0.4]), 2)
    assert np.allclose(out.scores, [0.6, 0.4], atol=1e-12)
    assert np.allclose(out.trajectories[0], a) and np.allclose(out.trajectories[1], b)


def test_kmeans_weighted_mean_example():
    A = np.array([[0.0, 0.0], [1.0, 2.0]])
    B = np.array([[4.0, 0.0], [1.0, 6.0]])
    out = kmeans_agg(cset([A, B], [1.0, 3.0]), 1)
    assert np.allclose(out.trajectories[0], 0.25 * A + 0.75 * B, atol=1e-15)
    assert out.scores[0] == 1.0


def separated_clusters(rng, k=6, per=10, t=6):
    centers = np.array([[40.0 * (i % 3), 40.0 * (i // 3)] for i in range(k)])
    trajs, truth = [], []
    for c in range(k):
        for _ in range(per):
            end = centers[c] + rng.uniform(-0.5, 0.5, 2)
            path = np.linspace(0, 1, t)[:, None] * end[None, :] + rng.normal(0, 0.3, (t, 2))
            path[-1] = end
            trajs.append(path)
            truth.append(c)
    return np.array(trajs), np.array(truth), centers


def test_kmeans_matches_partition_oracle():
    rng = np.random.default_rng(2)
    for trial in range(10):
        trajs, truth, centers = separated_clusters(rng)
        scores = rng.uniform(0.05, 1, len(truth))
        out = kmeans_agg(cset(trajs, scores), 6, seed=trial)
        assert out.scores.sum() == pytest.approx(1.0, abs=1e-9)
        for j in range(6):
            # identify the cluster by nearest true endpoint
            c = int(np.argmin(np.linalg.norm(centers - out.trajectories[j, -1], axis=1)))
            idx = np.flatnonzero(truth == c)
            w = scores[idx]
            oracle = sum(w[i] * trajs[idx[i]] for i in range(len(idx))) / w.sum()
            assert np.max(np.abs(out.trajectories[j] - oracle)) < 1e-9
            assert out.scores[j] == pytest.approx(w.sum() / scores.sum(), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kmeans_outputs_are_convex_combinations(seed, n):
    rng = np.random.default_rng(seed)
    c = random_cands(rng, k=n + int(rng.integers(0, 20)))
    out = kmeans_agg(c, n)
    assert out.scores.sum() == pytest.approx(1.0, abs=1e-9)
    lo, hi = c.trajectories.min(axis=0), c.trajectories.max(axis=0)
    assert np.all(out.trajectories >= lo - 1e-9) and np.all(out.trajectories <= hi + 1e-9)


def test_kmeans_is_deterministic(rng):
    c = random_cands(rng, 30)
    assert equal_sets(kmeans_agg(c, 6, seed=3), kmeans_agg(c, 6, seed=3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_selectors_return_input_members(seed):
    rng = np.random.default_rng(seed)
    c = random_cands(rng)
    n = int(rng.integers(1, len(c) + 1))
    for out in (topk(c, n), nms(c, n, radius=float(rng.uniform(0, 10)))):
        assert len(out) == n
        for traj in out.trajectories:
            assert any(np.array_equal(traj, x) for x in c.trajectories)


def test_candidate_dump_round_trip(tmp_path, rng):
    c = random_cands(rng, 8)
    save_candidates(tmp_path / "c.jsonl", c)
    assert equal_sets(load_candidates(tmp_path / "c.jsonl"), c)
    (tmp_path / "bad.jsonl").write_text('{"score": 1}\n{not json\n')
    with pytest.raises(AggregationError, match="candidate 1"):
        load_candidates(tmp_path / "bad.jsonl")


def test_candidate_validation():
    with pytest.raises(AggregationError):
        cset(np.zeros((2, 3, 2)), [1.0, 0.0])
    with pytest.raises(AggregationError):
        cset(np.zeros((2, 3, 2)), [1.0])


# ---------------------------------------------------------------- query arithmetic


def qsets(rng, m, n=6, d=8, t0=10):
    return [RefinedQuerySet(rng.normal(size=(n, d)), t0 - k) for k in range(m)]


def test_add_queries_examples(rng):
    s = qsets(rng, 1)
    assert np.array_equal(add_queries(s).vectors, s[0].vectors)
    three = qsets(rng, 3)
    three[0].vectors[:] = 0.0
    three[2].vectors[:] = 0.0
    out = add_queries(three)
    assert np.array_equal(out.vectors, three[1].vectors) and out.count == 3


def test_add_queries_scalar_oracle(rng):
    for _ in range(50):
        sets = qsets(rng, int(rng.integers(1, 11)))
        out = add_queries(sets).vectors
        N, d = out.shape
        for n in range(N):
            for j in range(d):
                acc = 0.0
                for s in sets:
                    acc = acc + s.vectors[n, j]
                assert out[n, j] == acc


def test_add_queries_canonical_order(rng):
    sets = qsets(rng, 5)
    shuffled = [sets[i] for i in rng.permutation(5)]
    canon = sorted(shuffled, key=lambda s: -s.anchor_time)
    assert np.array_equal(add_queries(canon).vectors, add_queries(sets).vectors)


def test_add_queries_mismatch(rng):
    with pytest.raises(AggregationError):
        add_queries([RefinedQuerySet(np.zeros((6, 8)), 1), RefinedQuerySet(np.zeros((5, 8)), 0)])
    with pytest.raises(AggregationError):
        add_queries([RefinedQuerySet(np.zeros((6, 8)), 3), RefinedQuerySet(np.zeros((6, 8)), 0)])


def test_avg_queries_examples(rng):
    v = rng.normal(size=(6, 8))
    assert np.array_equal(avg_queries_across_models([RefinedQuerySet(v, 4)]).vectors, v)
    zero = avg_queries_across_models([RefinedQuerySet(v, 4), RefinedQuerySet(-v, 4)]).vectors
    assert np.all(zero == 0.0)
    sets = [RefinedQuerySet(rng.normal(size=(6, 8)), 4) for _ in range(3)]
    out = avg_queries_across_models(sets).vectors
    for n in range(6):
        for j in range(8):
            assert out[n, j] == (sets[0].vectors[n, j] + sets[1].vectors[n, j] + sets[2].vectors[n, j]) / 3
    with pytest.raises(AggregationError):
        avg_queries_across_models([RefinedQuerySet(v, 4), RefinedQuerySet(v, 5)])


# ---------------------------------------------------------------- learned aggregation


def embedding(rng, d, rows=6, t0=20):
    return SceneEmbedding(np.zeros((2, d)), np.zeros((rows - 2, d)), t0, 0, rng.normal(size=(rows, d)),
                          np.ones(rows, dtype=bool))


def test_learn_agg_head_contract(rng):
    agg = Aggregator(TINY_DEC, "add", window=3)
    emb = embedding(rng, TINY_DEC.width)
    q = add_queries(qsets(rng, 3, TINY_DEC.modes, TINY_DEC.width, t0=20))
    ctx, pred = learn_agg(q, emb, agg)
    assert pred.pi.sum() == pytest.approx(1.0, abs=1e-12) and np.all(pred.scale > 0)
    assert ctx.vectors.shape == (TINY_DEC.modes, TINY_DEC.width)
    ctx2, pred2 = learn_agg(q, emb, agg)
    assert np.array_equal(pred.mu, pred2.mu) and np.array_equal(ctx.vectors, ctx2.vectors)


def test_learn_agg_rejects_width_mismatch(rng):
    agg = Aggregator(TINY_DEC, "add", window=3)
    with pytest.raises(AggregationError):
        learn_agg(AggregatedQuerySet(np.zeros((3, 8)), 1), embedding(rng, TINY_DEC.width), agg)


def test_xattn_degenerate_bank(rng):
    agg = Aggregator(TINY_DEC, "xattn", window=1)
    emb = embedding(rng, TINY_DEC.width)
    cur = qsets(rng, 1, TINY_DEC.modes, TINY_DEC.width)[0]
    p1 = learn_agg_xattn(cur, [cur], emb, agg)
    p2 = learn_agg_xattn(cur, [cur], emb, agg)
    assert np.all(np.isfinite(p1.mu)) and np.array_equal(p1.mu, p2.mu)
    assert p1.pi.sum() == pytest.approx(1.0, abs=1e-12)


def test_xattn_history_order_is_irrelevant(rng):
    agg = Aggregator(TINY_DEC, "xattn", window=5, seed=2)
    emb = embedding(rng, TINY_DEC.width)
    for _ in range(10):
        hist = qsets(rng, 5, TINY_DEC.modes, TINY_DEC.width, t0=20)
        base = learn_agg_xattn(hist[0], hist, emb, agg)
        perm = [hist[i] for i in rng.permutation(5)]
        other = learn_agg_xattn(hist[0], perm, emb, agg)
        assert np.max(np.abs(other.mu - base.mu)) < 1e-9
        assert np.max(np.abs(other.pi - base.pi)) < 1e-9


def test_xattn_offsets_are_bounded(rng):
    agg = Aggregator(TINY_DEC, "xattn", window=2)
    hist = qsets(rng, 3, TINY_DEC.modes, TINY_DEC.width)
    with pytest.raises(AggregationError):
        learn_agg_xattn(hist[0], hist, embedding(rng, TINY_DEC.width), agg)


def test_init_from_base_copies_decoder(tiny_model):
    agg = Aggregator(TINY_DEC, "add", window=2)
    agg.init_from_base(tiny_model.store)
    a, b = agg.store.tensors["agg.layer0.cross.q.w"].data, tiny_model.store.tensors["dec.layer0.cross.q.w"].data
    assert np.array_equal(a, b) and a is not b


def agg_grad_error(seed, kind="add"):
    """Finite-difference check of the aggregation decoder through the training loss."""
    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(width=8, heads=2, modes=3, layers=1, horizon=4)
    agg = Aggregator(cfg, kind, window=3, seed=seed)
    bank = rng.normal(size=(2, 3, 3, 8))
    memory = rng.normal(size=(2, 5, 8))
    mask = np.ones((2, 5), dtype=bool)
    mask[0, 4:] = False
    gt = rng.normal(size=(2, 1, 4, 2))

    def f():
        _, logits, mu, scale = agg.forward(bank, memory, mask)
        logpi = dm.log_softmax(logits, axis=-1)
        nll = dm.tsum(dm.tabs(mu - gt) / scale + dm.log(scale), axis=(-1, -2))
        return dm.mean(dm.logsumexp(logpi - nll, axis=-1)) * -1.0

    return probe_params(f, list(agg.store.tensors.values()), rng, per_tensor=2)


@pytest.mark.parametrize("kind", ["add", "xattn"])
@pytest.mark.parametrize("seed", range(3))
def test_aggregator_gradients(kind, seed):
    assert agg_grad_error(seed, kind) < 1e-4


def test_aggregator_store_is_separate(tiny_model):
    agg = Aggregator(TINY_DEC, "add", window=2)
    assert not set(agg.store.tensors) & set(tiny_model.store.tensors)
    assert isinstance(agg.store, ParamStore)
