import math

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import trapezoid
from scipy.sparse.csgraph import shortest_path

from config.settings import default_settings
from core.geo import RoadGraph
from core.keypoint_extractor import KeypointSet
from core.nn import functional as F
from core.nn.gradcheck import max_gradient_error
from core.nn.layers import MultiHeadSelfAttention
from core.nn.tensor import Tensor, precision
from core.relation_predictor import (AttentionMask, LinkCandidates, RelationPredictor, attention_mask,
                                     build_candidates, build_relation_predictor, dump_candidates_csv,
                                     enrich_keypoints, link_embedding, link_embeddings, neighbourhood_bound,
                                     relation_loss, sample_pairs, total_loss)


def _keypoints(rng, n, extent=64):
    cells = rng.choice(extent * extent, size=n, replace=False)
    return KeypointSet(np.stack([cells // extent, cells % extent], axis=1).astype(np.int64), np.ones(n))


def _mask_oracle(src, dst, xy, d_l):
    p = len(src)
    blocked = np.ones((p, p), dtype=np.int64)
    for a in range(p):
        for b in range(p):
            for u in (src[a], dst[a]):
                for v in (src[b], dst[b]):
                    if math.dist(xy[u], xy[v]) <= d_l:
                        blocked[a, b] = 0
    return blocked


def _sample_oracle(g, n_r, d_kp):
    ids = g.sorted_vertex_ids()
    n = len(ids)
    adj = np.zeros((n, n))
    for u, v in g.undirected_edges():
        adj[ids.index(u), ids.index(v)] = adj[ids.index(v), ids.index(u)] = 1
    hops = shortest_path(adj, unweighted=True, directed=False)
    xy = np.array([g.vertices[i] for i in ids])
    pos, neg = [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if hops[i, j] == 1:
                pos.append([i, j])
            elif 2 <= hops[i, j] <= n_r or math.dist(xy[i], xy[j]) < 3 * d_kp:
                neg.append([i, j])
    return pos, neg


def _random_graph(rng, n):
    verts = {k: tuple(rng.uniform(0, 60, size=2)) for k in range(n)}
    edges = set()
    for _ in range(n):
        u, v = rng.choice(n, size=2, replace=False)
        edges.add((int(u), int(v)))
        if rng.random() < 0.7:
            edges.add((int(v), int(u)))
    return RoadGraph(verts, edges)


# ------------------ KEYPOINT-WISE ENRICHMENT ------------------

def test_single_keypoint_attention_is_a_projection():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        grid = Tensor(rng.normal(size=(1, 16, 16, 8)))
        attn = MultiHeadSelfAttention("relation.kp_attn", 8, 2, seed=1)
        kps = KeypointSet(np.array([[20, 36]]), np.ones(1))
        feats = enrich_keypoints(grid, kps, attn)
        assert feats.enriched.shape == (1, 16)
        np.testing.assert_array_equal(feats.raw.data[0], grid.data[0, 5, 9])
        pe = F.sinusoidal_encoding(kps.xy(), 8)
        expected = attn.out(attn.value(Tensor(feats.raw.data + pe))).data
        np.testing.assert_allclose(feats.enriched.data[:, 8:], expected, atol=1e-12)


def test_keypoint_enrichment_is_permutation_equivariant():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        grid = Tensor(rng.normal(size=(1, 16, 16, 8)))
        attn = MultiHeadSelfAttention("relation.kp_attn", 8, 2, seed=2)
        kps = _keypoints(rng, 9)
        perm = rng.permutation(9)
        base = enrich_keypoints(grid, kps, attn).enriched.data
        moved = enrich_keypoints(grid, KeypointSet(kps.cells[perm], kps.scores[perm]), attn).enriched.data
    np.testing.assert_allclose(moved, base[perm], atol=1e-10)


def test_ablated_keypoint_enrichment_repeats_raw_feature():
    rng = np.random.default_rng(2)
    grid = Tensor(rng.normal(size=(1, 16, 16, 8)))
    feats = enrich_keypoints(grid, _keypoints(rng, 4), MultiHeadSelfAttention("a", 8, 2), ablated=True)
    np.testing.assert_array_equal(feats.enriched.data[:, :8], feats.enriched.data[:, 8:])
    assert enrich_keypoints(grid, KeypointSet.empty(), MultiHeadSelfAttention("a", 8, 2)).enriched.shape == (0, 16)


# ------------------ LINK EMBEDDING ------------------

def test_link_embedding_on_constant_grid():
    grid = Tensor(np.broadcast_to(np.arange(8, dtype=np.float64), (1, 10, 10, 8)).copy())
    for a, b in [((0, 0), (9, 9)), ((2.5, 1.0), (2.5, 1.2)), ((7, 3), (1, 8))]:
        np.testing.assert_allclose(link_embedding(grid, a, b).data, np.arange(8), atol=1e-5)


def test_short_link_averages_its_endpoints():
    rng = np.random.default_rng(3)
    grid = Tensor(rng.normal(size=(1, 10, 10, 4)))
    a, b = (2.0, 3.0), (2.5, 3.0)
    ends = F.bilinear_sample(grid[0], [a, b]).data
    np.testing.assert_allclose(link_embedding(grid, a, b).data, ends.mean(axis=0), atol=1e-6)


def test_link_embedding_matches_dense_sampling():
    yy, xx = np.mgrid[0:16, 0:16]
    smooth = np.stack([2 + np.sin(xx / 5 + k) * np.cos(yy / 7 - k) for k in range(6)], axis=-1)
    with precision(np.float64):
        grid = Tensor(smooth[None])
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 15, size=(50, 2))
        b = rng.uniform(0, 15, size=(50, 2))
        got = link_embeddings(grid, a, b).data
    for k in range(50):
        n = max(2, int(np.ceil(np.linalg.norm(b[k] - a[k]))) + 1) * 10
        t = np.linspace(0, 1, n)
        samples = F.bilinear_sample(grid[0], a[k] + t[:, None] * (b[k] - a[k])).data
        oracle = trapezoid(samples, t, axis=0)
        np.testing.assert_allclose(got[k], oracle, rtol=0.02)


def test_link_embedding_rejects_degenerate_segment():
    with pytest.raises(ValueError):
        link_embedding(Tensor(np.zeros((1, 4, 4, 2))), (1, 1), (1, 1))


# ------------------ CANDIDATES AND MASK ------------------

def test_candidate_counts():
    assert len(build_candidates(np.array([[0, 0], [5, 0], [0, 5]]))) == 6
    assert len(build_candidates(np.array([[0, 0], [100, 0]]), d_cand=50)) == 0
    assert len(build_candidates(np.array([[0, 0]]))) == 0
    with pytest.raises(ValueError):
        LinkCandidates([1], [1])


def test_candidates_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        xy = rng.uniform(0, 64, size=(int(rng.integers(0, 30)), 2))
        d = float(rng.uniform(5, 60))
        cands = build_candidates(xy, d)
        expected = [(i, j) for i in range(len(xy)) for j in range(len(xy)) if i != j and math.dist(xy[i], xy[j]) <= d]
        assert list(zip(cands.src.tolist(), cands.dst.tolist())) == expected


def test_mask_examples():
    xy = np.array([[0, 0], [10, 0], [1000, 0], [1010, 0]], dtype=float)
    cands = LinkCandidates([0, 2], [1, 3])
    mask = attention_mask(cands, xy, 50.0)
    assert mask.dense().tolist() == [[0, 1], [1, 0]]
    assert mask.attended_pairs() == 2


def test_mask_matches_brute_force_and_bound():
    rng = np.random.default_rng(6)
    for _ in range(100):
        kps = _keypoints(rng, int(rng.integers(2, 11)))
        xy = kps.xy()
        cands = build_candidates(xy)
        d_l = float(rng.uniform(3, 40))
        mask = attention_mask(cands, xy, d_l)
        dense = mask.dense()
        np.testing.assert_array_equal(dense, _mask_oracle(cands.src, cands.dst, xy, d_l))
        np.testing.assert_array_equal(dense, dense.T)
        assert np.all(np.diag(dense) == 0)
        assert (1 - dense).sum(axis=1).max() <= neighbourhood_bound(cands, xy, d_l)


# ------------------ LINK-WISE ENRICHMENT AND CLASSIFICATION ------------------

def _prepared(rng, n=7, channels=8, ablate_links=False):
    model = RelationPredictor(channels, 2, 2, hidden=16, seed=7, ablate_links=ablate_links)
    grid = Tensor(rng.normal(size=(1, 16, 16, channels)))
    kps = _keypoints(rng, n)
    feats = enrich_keypoints(grid, kps, model.kp_attn)
    cands = build_candidates(kps.xy())
    cands.link_embed = link_embeddings(grid, kps.xy()[cands.src] / 4, kps.xy()[cands.dst] / 4)
    return model, feats, cands, kps


def test_sparse_link_attention_matches_dense_reference():
    rng = np.random.default_rng(8)
    with precision(np.float64):
        model, feats, cands, kps = _prepared(rng)
        mask = attention_mask(cands, kps.xy(), 20.0)
        model.enrich_links(cands, feats, mask)
        dense = model.link_attn(model.link_proj(cands.pair_embed), mask=mask.dense())
    assert cands.enriched.shape == (len(cands), 80)
    np.testing.assert_allclose(cands.enriched.data[:, 40:], dense.data, atol=1e-5)


def test_mask_edit_only_touches_its_row():
    rng = np.random.default_rng(9)
    with precision(np.float64):
        model, feats, cands, kps = _prepared(rng)
        mask = attention_mask(cands, kps.xy(), 30.0)
        base = model.enrich_links(cands, feats, mask).enriched.data.copy()
        allowed = mask.allowed.tolil()
        rows, cols = mask.pairs
        r, c = next((r, c) for r, c in zip(rows, cols) if r != c)
        allowed[r, c] = False
        allowed = allowed.tocsr()
        allowed.eliminate_zeros()
        edited = model.enrich_links(cands, feats, AttentionMask(allowed, 30.0)).enriched.data
    others = np.arange(len(cands)) != r
    np.testing.assert_allclose(edited[others], base[others], atol=1e-12)
    assert not np.allclose(edited[r], base[r])


def test_single_candidate_attends_to_itself():
    rng = np.random.default_rng(10)
    with precision(np.float64):
        model, feats, _, kps = _prepared(rng, n=2)
        cands = LinkCandidates([0], [1])
        cands.link_embed = Tensor(rng.normal(size=(1, 8)))
        model.enrich_links(cands, feats, attention_mask(cands, kps.xy(), 5.0))
        attn = model.link_attn
        expected = attn.out(attn.value(model.link_proj(cands.pair_embed))).data
    np.testing.assert_allclose(cands.enriched.data[:, 40:], expected, atol=1e-12)


def test_ablated_link_enrichment_equals_self_only_attention():
    rng = np.random.default_rng(11)
    with precision(np.float64):
        model, feats, cands, kps = _prepared(rng, ablate_links=True)
        model.enrich_links(cands, feats, attention_mask(cands, kps.xy(), 1000.0))
        attn = model.link_attn
        expected = attn.out(attn.value(model.link_proj(cands.pair_embed))).data
    np.testing.assert_allclose(cands.enriched.data[:, 40:], expected, atol=1e-12)


def test_classifier_range_and_determinism():
    rng = np.random.default_rng(12)
    model, feats, cands, kps = _prepared(rng)
    model.enrich_links(cands, feats, attention_mask(cands, kps.xy(), 20.0))
    probs = model.classify_links(cands).data
    assert np.all((probs > 0) & (probs < 1))
    same = LinkCandidates([0, 1], [1, 0])
    same.enriched = Tensor(np.repeat(cands.enriched.data[:1], 2, axis=0))
    twin = model.classify_links(same).data
    assert twin[0] == twin[1]


def test_gradient_through_relation_path():
    rng = np.random.default_rng(13)
    with precision(np.float64):
        model = RelationPredictor(8, 2, 2, hidden=16, seed=14)
        grid = Tensor(rng.normal(size=(1, 8, 8, 8)), requires_grad=True)
        kps = _keypoints(rng, 5, extent=32)
        labels = rng.integers(0, 2, size=20).astype(float)

        def loss():
            cands = build_candidates(kps.xy())
            return relation_loss(model(grid, kps, cands, d_l=12.0), labels, len(kps))
        err = max_gradient_error(loss, [grid, model.fc1.weight.tensor, model.link_proj.bias.tensor], 1e-6)
    assert err < 1e-6


def test_predictor_follows_ablation_flags():
    settings = default_settings()
    settings["ablations"].update({"ke": True, "le": True})
    model = build_relation_predictor(settings)
    assert model.ablate_keypoints and model.ablate_links
    assert model.fc1.in_features == 640


# ------------------ SAMPLING AND LOSS ------------------

def test_path_graph_samples():
    g = RoadGraph({0: (0, 0), 1: (100, 0), 2: (200, 0), 3: (300, 0)},
                  [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)])
    samples = sample_pairs(g, n_r=3, d_kp=6.0)
    assert samples.positives.tolist() == [[0, 1], [1, 0], [1, 2], [2, 1], [2, 3], [3, 2]]
    negatives = {tuple(p) for p in samples.hard_negatives.tolist()}
    assert negatives == {(0, 2), (0, 3), (1, 3), (2, 0), (3, 0), (3, 1)}


def test_close_disconnected_vertices_are_hard_negatives():
    g = RoadGraph({0: (0, 0), 1: (5, 0)})
    samples = sample_pairs(g, n_r=3, d_kp=6.0)
    assert len(samples.positives) == 0
    assert samples.hard_negatives.tolist() == [[0, 1], [1, 0]]


def test_samples_match_brute_force():
    rng = np.random.default_rng(15)
    for _ in range(100):
        g = _random_graph(rng, int(rng.integers(2, 16)))
        n_r = int(rng.integers(2, 5))
        samples = sample_pairs(g, n_r=n_r, d_kp=4.0)
        pos, neg = _sample_oracle(g, n_r, 4.0)
        assert samples.positives.tolist() == pos
        assert samples.hard_negatives.tolist() == neg
        assert not {tuple(p) for p in pos} & {tuple(p) for p in neg}


def test_samples_restricted_to_tile_vertices_keep_global_hops():
    g = RoadGraph({0: (0, 0), 1: (100, 0), 2: (200, 0)}, [(0, 1), (1, 2)])
    samples = sample_pairs(g, n_r=3, d_kp=6.0, vertex_ids=[0, 2])
    assert len(samples.positives) == 0
    assert samples.hard_negatives.tolist() == [[0, 1], [1, 0]]
    cands = samples.candidates()
    assert cands.src.tolist() == [0, 1] and samples.labels().tolist() == [0.0, 0.0]


def test_relation_loss_closed_forms():
    labels = np.array([1, 1, 0, 0])
    assert relation_loss(Tensor(np.array([1.0, 1.0, 0.0, 0.0])), labels, 3).item() < 1e-5
    assert relation_loss(Tensor(np.full(4, 0.5)), labels, 3).item() == pytest.approx(4 * math.log(2) / 3, rel=1e-6)
    assert relation_loss(Tensor(np.zeros(0)), np.zeros(0), 3).item() == 0.0
    l_kp = Tensor(np.array(0.7))
    assert total_loss(l_kp, Tensor(np.array(2.0)), 0.0) is l_kp
    assert total_loss(l_kp, Tensor(np.array(2.0)), 0.5).item() == pytest.approx(1.7)


def test_candidate_dump(tmp_path):
    cands = LinkCandidates([0, 1], [1, 0])
    cands.probability = np.array([0.9, 0.2])
    path = dump_candidates_csv(cands, np.array([[0, 0], [3, 4]]), str(tmp_path / "cands.csv"), labels=[1, 0])
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["src", "dst", "distance", "probability", "label"]
    assert frame["distance"].tolist() == [5.0, 5.0]
    assert frame["label"].tolist() == [1, 0]
