import numpy as np
import pytest

from core.graph_assembler import AssemblyConfig, assemble, global_positions
from core.keypoint_extractor import KeypointSet
from core.model import TileInference
from core.relation_predictor import LinkCandidates, build_candidates


def _result(origin, cells, src=(), dst=(), probs=()):
    cands = LinkCandidates(np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64))
    cands.probability = np.asarray(probs, dtype=np.float64)
    kps = KeypointSet(np.asarray(cells, dtype=np.int64).reshape(-1, 2), np.ones(len(cells)))
    return TileInference(origin, kps, cands, heatmaps=None, smoothed=None)


def test_one_direction_above_threshold_gives_one_edge():
    g = assemble([_result((0, 0), [[10, 10], [10, 40]], [0, 1], [1, 0], [0.9, 0.1])])
    assert len(g) == 2
    assert g.sorted_edges() == [(0, 1)]
    assert g.vertices[0] == (10.5, 10.5)
    assert g.vertices[1] == (40.5, 10.5)


def test_symmetrize_adds_reverse_edges():
    g = assemble([_result((0, 0), [[10, 10], [10, 40]], [0, 1], [1, 0], [0.9, 0.1])],
                 AssemblyConfig(symmetrize=True))
    assert g.sorted_edges() == [(0, 1), (1, 0)]


def test_keypoint_seen_by_two_tiles_merges_at_midpoint():
    left = _result((0, 0), [[100, 20], [100, 255]], [0], [1], [0.8])
    right = _result((0, 256), [[100, 1], [100, 60]], [0], [1], [0.7])
    g = assemble([left, right], AssemblyConfig(merge_radius=4.0))
    assert len(g) == 3
    assert g.vertices[1] == (256.5, 100.5)
    assert g.sorted_edges() == [(0, 1), (1, 2)]


def test_same_tile_neighbours_are_not_merged():
    g = assemble([_result((0, 0), [[5, 5], [5, 7]], [0], [1], [0.9])], AssemblyConfig(merge_radius=4.0))
    assert len(g) == 2
    assert g.sorted_edges() == [(0, 1)]


def test_empty_inputs_give_empty_graph():
    assert len(assemble([])) == 0
    assert len(assemble([_result((0, 0), np.zeros((0, 2)))])) == 0


def test_global_positions_use_cell_centres():
    np.testing.assert_array_equal(global_positions(_result((256, 512), [[3, 7]])), [[519.5, 259.5]])


def test_edges_match_thresholded_probability_table():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(0, 30))
        cells = rng.choice(64 * 64, size=n, replace=False)
        cells = np.stack([cells // 64, cells % 64], axis=1)
        cands = build_candidates(cells[:, ::-1].astype(np.float64))
        probs = rng.random(len(cands))
        tau = float(rng.uniform(0.05, 0.95))
        result = _result((0, 0), cells, cands.src, cands.dst, probs)
        g = assemble([result], AssemblyConfig(tau_link=tau))

        table = np.zeros((n, n))
        table[cands.src, cands.dst] = probs
        expected = {(i, j) for i in range(n) for j in range(n) if i != j and table[i, j] >= tau}
        assert set(g.edges) == expected
        assert len(g) == n


def test_invalid_threshold():
    with pytest.raises(ValueError):
        AssemblyConfig(tau_link=1.0)
