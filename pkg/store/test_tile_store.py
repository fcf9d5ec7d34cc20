import json

import numpy as np
import pytest

from core.errors import MissingInputError, ShapeMismatchError
from core.geo import GeoPoint, GridSpec, RoadGraph
from core.rasterizer import N_CHANNELS, FeatureGrid, partition_tiles, render_supervision
from store.tile_store import TileStore


def _tiles():
    spec = GridSpec(GeoPoint(116.3, 39.95), 300, 300, 1.0)
    rng = np.random.default_rng(0)
    grid = FeatureGrid(spec, rng.poisson(2.0, size=(300, 300, N_CHANNELS)).astype(np.float64))
    return spec, partition_tiles(grid)


def test_write_then_read_tiles(tmp_path):
    spec, tiles = _tiles()
    with TileStore(str(tmp_path), mode="w", spec=spec) as store:
        for i, tile in enumerate(tiles):
            store.write_tile(tile, split="train" if i else "test")

    with TileStore(str(tmp_path)) as store:
        assert store.spec == spec
        assert store.tile_names() == sorted(t.name for t in tiles)
        assert store.tile_names("test") == [tiles[0].name]
        back = store.read_tile(tiles[1].name)
    np.testing.assert_array_equal(back.data, tiles[1].data)
    np.testing.assert_array_equal(back.scales, tiles[1].scales)
    assert back.origin_cell == tiles[1].origin_cell


def test_supervision_roundtrip(tmp_path):
    spec, tiles = _tiles()
    sup = render_supervision(RoadGraph({0: (5.5, 5.5), 1: (40.5, 5.5)}, [(0, 1)]), (0, 0))
    with TileStore(str(tmp_path), mode="w", spec=spec) as store:
        store.write_tile(tiles[0])
        store.write_supervision(tiles[0].name, sup)
    with TileStore(str(tmp_path)) as store:
        back = store.read_supervision(tiles[0].name)
    np.testing.assert_array_equal(back.keypoint_map, sup.keypoint_map)
    np.testing.assert_array_equal(back.region_mask, sup.region_mask)
    np.testing.assert_array_equal(back.keypoints, [[5.5, 5.5], [40.5, 5.5]])
    assert back.vertex_ids.tolist() == [0, 1]


def test_file_layout_is_little_endian_with_header(tmp_path):
    spec, tiles = _tiles()
    with TileStore(str(tmp_path), mode="w", spec=spec) as store:
        path = store.write_tile(tiles[0])
    raw = path.read_bytes()
    assert raw[:4] == b"DGMT"
    assert len(raw) == 16 + 40 + 4 * N_CHANNELS + 4 * 256 * 256 * N_CHANNELS
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["tiles"][0]["origin_cell"] == [0, 0]


def test_failed_write_leaves_no_manifest(tmp_path):
    spec, tiles = _tiles()
    with pytest.raises(RuntimeError):
        with TileStore(str(tmp_path), mode="w", spec=spec) as store:
            store.write_tile(tiles[0])
            raise RuntimeError("boom")
    assert not (tmp_path / "manifest.json").exists()


def test_missing_store_and_bad_shape(tmp_path):
    with pytest.raises(MissingInputError):
        with TileStore(str(tmp_path / "nope")):
            pass
    spec, tiles = _tiles()
    with TileStore(str(tmp_path), mode="w", spec=spec, tile_size=128) as store:
        with pytest.raises(ShapeMismatchError):
            store.write_tile(tiles[0])
