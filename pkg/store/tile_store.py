import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import MissingInputError, ShapeMismatchError
from core.geo import GeoPoint, GridSpec
from core.rasterizer import N_CHANNELS, SupervisionTile, Tile

MAGIC = b"DGMT"
VERSION = 1
KIND_FEATURES = 0
KIND_SUPERVISION = 1
MANIFEST_NAME = "manifest.json"

# magic, version, kind, tile size, channel count
_HEADER = struct.Struct("<4sHHII")
# origin lng, origin lat, rows, cols, cell size, origin row, origin col
_FRAME = struct.Struct("<ddIIdII")


class TileStore:
    """
    File-backed store of feature tiles and their supervision tiles.

    One little-endian binary file per tile under `features/` and `supervision/`, plus a
    `manifest.json` listing every tile, the grid spec, the channel maxima and the split.
    Opened with mode "w" the layout is created on enter and the manifest written on a clean exit.
    """

    def __init__(self, root: str, mode: str = "r", spec: Optional[GridSpec] = None, tile_size: int = 256):
        if mode not in ("r", "w"):
            raise ValueError(f"mode must be 'r' or 'w', got {mode!r}")
        self.root = Path(root)
        self.mode = mode
        self.spec = spec
        self.tile_size = tile_size
        self.tiles: Dict[str, Tuple[int, int]] = {}
        self.splits: Dict[str, str] = {}
        self.scales: Optional[List[float]] = None
        self.keypoints: Dict[str, Tuple[List[int], List[List[float]]]] = {}

    def __enter__(self):
        if self.mode == "w":
            if self.spec is None:
                raise ValueError("a grid spec is required to open a tile store for writing")
            (self.root / "features").mkdir(parents=True, exist_ok=True)
            (self.root / "supervision").mkdir(parents=True, exist_ok=True)
        else:
            self._load_manifest()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type:
            logging.error(f"Tile store write failed, manifest not updated: {exc_val}")
            return
        if self.mode == "w":
            self._write_manifest()

    # ------------------ MANIFEST ------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def _write_manifest(self):
        doc = {
            "grid": self.spec.to_dict(),
            "tile_size": self.tile_size,
            "channel_maxima": self.scales,
            "tiles": [self._entry(name, origin) for name, origin in sorted(self.tiles.items())],
        }
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        logging.info(f"Wrote tile store manifest with {len(self.tiles)} tiles to {self.manifest_path}")

    def _entry(self, name: str, origin: Tuple[int, int]) -> Dict:
        entry = {"name": name, "origin_cell": list(origin), "split": self.splits.get(name)}
        if name in self.keypoints:
            entry["vertex_ids"], entry["keypoints"] = self.keypoints[name]
        return entry

    def _load_manifest(self):
        if not self.manifest_path.exists():
            raise MissingInputError(f"tile store manifest not found: {self.manifest_path}")
        doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        self.spec = GridSpec.from_dict(doc["grid"])
        self.tile_size = int(doc["tile_size"])
        self.scales = doc.get("channel_maxima")
        for entry in doc["tiles"]:
            self.tiles[entry["name"]] = (int(entry["origin_cell"][0]), int(entry["origin_cell"][1]))
            if entry.get("split"):
                self.splits[entry["name"]] = entry["split"]
            if "keypoints" in entry:
                self.keypoints[entry["name"]] = (entry["vertex_ids"], entry["keypoints"])

    # ------------------ TILE FILES ------------------

    def _encode(self, kind: int, origin: Tuple[int, int], scales: np.ndarray, data: np.ndarray) -> bytes:
        channels = data.shape[-1]
        header = _HEADER.pack(MAGIC, VERSION, kind, self.tile_size, channels)
        frame = _FRAME.pack(self.spec.origin.lng, self.spec.origin.lat, self.spec.rows, self.spec.cols,
                            self.spec.cell_size, origin[0], origin[1])
        return header + frame + np.asarray(scales, dtype="<f4").tobytes() + np.asarray(data, dtype="<f4").tobytes()

    def _decode(self, path: Path, kind: int):
        if not path.exists():
            raise MissingInputError(f"tile file not found: {path}")
        raw = path.read_bytes()
        magic, version, file_kind, tile_size, channels = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC or version != VERSION or file_kind != kind:
            raise ShapeMismatchError(f"{path} is not a version {VERSION} tile file of kind {kind}")
        lng, lat, rows, cols, cell, r0, c0 = _FRAME.unpack_from(raw, _HEADER.size)
        spec = GridSpec(GeoPoint(lng, lat), rows, cols, cell)
        offset = _HEADER.size + _FRAME.size
        scales = np.frombuffer(raw, dtype="<f4", count=channels, offset=offset).astype(np.float64)
        offset += 4 * channels
        expected = tile_size * tile_size * channels
        data = np.frombuffer(raw, dtype="<f4", offset=offset)
        if data.size != expected:
            raise ShapeMismatchError(f"{path} holds {data.size} values, expected {tile_size}x{tile_size}x{channels}")
        return spec, (r0, c0), scales, data.reshape(tile_size, tile_size, channels).astype(np.float32)

    def write_tile(self, tile: Tile, split: Optional[str] = None) -> Path:
        if tile.data.shape != (self.tile_size, self.tile_size, N_CHANNELS):
            raise ShapeMismatchError(
                f"tile data has shape {tile.data.shape}, expected ({self.tile_size}, {self.tile_size}, {N_CHANNELS})")
        path = self.root / "features" / f"{tile.name}.bin"
        path.write_bytes(self._encode(KIND_FEATURES, tile.origin_cell, tile.scales, tile.data))
        self.tiles[tile.name] = tile.origin_cell
        if split:
            self.splits[tile.name] = split
        if self.scales is None:
            self.scales = [float(s) for s in tile.scales]
        return path

    def write_supervision(self, name: str, sup: SupervisionTile) -> Path:
        data = np.stack([sup.keypoint_map, sup.region_mask], axis=-1)
        path = self.root / "supervision" / f"{name}.bin"
        path.write_bytes(self._encode(KIND_SUPERVISION, sup.origin_cell, np.ones(2), data))
        self.keypoints[name] = ([int(v) for v in sup.vertex_ids],
                                np.asarray(sup.keypoints, dtype=np.float64).reshape(-1, 2).tolist())
        return path

    def read_tile(self, name: str) -> Tile:
        _, origin, scales, data = self._decode(self.root / "features" / f"{name}.bin", KIND_FEATURES)
        return Tile(origin, data, scales)

    def read_supervision(self, name: str) -> SupervisionTile:
        _, origin, _, data = self._decode(self.root / "supervision" / f"{name}.bin", KIND_SUPERVISION)
        ids, xy = self.keypoints.get(name, ([], []))
        return SupervisionTile(origin, data[..., 0].copy(), data[..., 1].copy(),
                               keypoints=np.asarray(xy, dtype=np.float64).reshape(-1, 2),
                               vertex_ids=np.asarray(ids, dtype=np.int64))

    def has_supervision(self, name: str) -> bool:
        return (self.root / "supervision" / f"{name}.bin").exists()

    def tile_names(self, split: Optional[str] = None) -> List[str]:
        """Sorted tile names, optionally restricted to one split ('all' means every tile)."""
        names = sorted(self.tiles)
        if split is None or split == "all":
            return names
        return [n for n in names if self.splits.get(n) == split]
