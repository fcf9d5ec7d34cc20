import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.spatial import cKDTree

from core.geo import RoadGraph
from core.model import TileInference


@dataclass(frozen=True)
class AssemblyConfig:
    tau_link: float = 0.5
    merge_radius: float = 4.0
    symmetrize: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau_link < 1.0:
            raise ValueError(f"tau_link must lie in (0, 1), got {self.tau_link}")
        if self.merge_radius < 0:
            raise ValueError(f"merge_radius must be non-negative, got {self.merge_radius}")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "AssemblyConfig":
        return cls(**settings["assembly"])


def global_positions(result: TileInference) -> np.ndarray:
    """Cell centres of a tile's keypoints in full-grid (x, y)."""
    r0, c0 = result.origin_cell
    return result.keypoints.xy() + np.array([c0 + 0.5, r0 + 0.5])


def kept_links(result: TileInference, tau_link: float) -> List[Tuple[int, int]]:
    """Ordered keypoint pairs whose link probability reaches tau_link."""
    cands = result.candidates
    if len(cands) == 0 or cands.probability is None:
        return []
    keep = np.asarray(cands.probability) >= tau_link
    return list(zip(cands.src[keep].tolist(), cands.dst[keep].tolist()))


def _merge_groups(xy: np.ndarray, tile_of: np.ndarray, radius: float) -> DisjointSet:
    groups = DisjointSet(range(len(xy)))
    if len(xy) < 2 or radius <= 0:
        return groups
    for i, j in sorted(cKDTree(xy).query_pairs(radius)):
        if tile_of[i] != tile_of[j]:
            groups.merge(i, j)
    return groups


def assemble(results: Sequence[TileInference], cfg: AssemblyConfig = AssemblyConfig()) -> RoadGraph:
    """
    Road graph from per-tile keypoints and link probabilities.

    Keypoints from different tiles lying within merge_radius of each other become one vertex
    at their centroid. Vertex ids follow the first member in tile order. Links at or above
    tau_link become directed edges; duplicates and links collapsed onto one vertex are dropped.
    """
    positions, tile_of, offsets = [], [], []
    total = 0
    for t, result in enumerate(results):
        xy = global_positions(result)
        positions.append(xy)
        tile_of.append(np.full(len(xy), t))
        offsets.append(total)
        total += len(xy)
    if total == 0:
        return RoadGraph.empty()
    xy = np.concatenate(positions)
    groups = _merge_groups(xy, np.concatenate(tile_of), cfg.merge_radius)

    members = sorted((min(s), sorted(s)) for s in groups.subsets())
    vertex_of = np.empty(total, dtype=np.int64)
    vertices = {}
    for vid, (_, group) in enumerate(members):
        vertex_of[group] = vid
        vertices[vid] = tuple(xy[group].mean(axis=0))

    edges = set()
    for offset, result in zip(offsets, results):
        for i, j in kept_links(result, cfg.tau_link):
            u, v = int(vertex_of[offset + i]), int(vertex_of[offset + j])
            if u == v:
                continue
            edges.add((u, v))
            if cfg.symmetrize:
                edges.add((v, u))

    merged = total - len(vertices)
    logging.info(f"Assembled {len(vertices)} vertices ({merged} merged across tiles) and {len(edges)} edges")
    return RoadGraph(vertices, sorted(edges))
