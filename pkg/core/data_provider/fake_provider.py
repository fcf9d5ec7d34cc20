import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy.spatial import Delaunay, QhullError

from core.errors import ConfigError
from core.geo import GeoPoint, GridCoord, GridSpec, RoadGraph, unproject
from core.trajectory_parser import TrajPoint, Trajectory
from .base import World, WorldProvider

GRAPH_STYLES = ("grid-perturbed", "poisson-delaunay")


@dataclass(frozen=True)
class SynthConfig:
    graph_style: str = "grid-perturbed"
    region_size: Tuple[float, float] = (480.0, 480.0)
    trajectory_count: int = 600
    sampling_interval: int = 5
    gps_noise_sigma: float = 3.0
    density_profile: Tuple[Tuple[float, ...], ...] = ((1.0, 1.0), (1.0, 0.25))
    seed: int = 0
    block_size: float = 80.0
    jitter: float = 8.0
    deletion_rate: float = 0.15
    min_spacing: float = 45.0
    prune_quantile: float = 0.85
    speed: float = 10.0
    one_way_fraction: float = 0.0
    origin: GeoPoint = field(default_factory=lambda: GeoPoint(116.30, 39.95))
    margin: float = 16.0
    start_epoch: int = 1700000000

    def __post_init__(self):
        object.__setattr__(self, "region_size", tuple(float(v) for v in self.region_size))
        object.__setattr__(self, "density_profile", tuple(tuple(float(v) for v in row) for row in self.density_profile))
        if self.graph_style not in GRAPH_STYLES:
            raise ConfigError(f"unknown graph_style {self.graph_style!r}, expected one of {GRAPH_STYLES}")
        if len(self.region_size) != 2 or min(self.region_size) <= 0:
            raise ConfigError(f"region_size must be two positive lengths, got {self.region_size}")
        if self.trajectory_count <= 0 or self.sampling_interval <= 0:
            raise ConfigError("trajectory_count and sampling_interval must be positive")
        if self.gps_noise_sigma < 0:
            raise ConfigError(f"gps_noise_sigma must be >= 0, got {self.gps_noise_sigma}")
        if self.speed <= 0 or self.margin < 0:
            raise ConfigError("speed must be positive and margin non-negative")
        rows = self.density_profile
        if not rows or not rows[0] or any(len(r) != len(rows[0]) for r in rows):
            raise ConfigError("density_profile must be a non-empty rectangular table")
        if min(min(r) for r in rows) < 0 or max(max(r) for r in rows) <= 0:
            raise ConfigError("density_profile multipliers must be >= 0 with at least one positive")
        if not 0.0 <= self.deletion_rate < 1.0 or not 0.0 <= self.one_way_fraction <= 1.0:
            raise ConfigError("deletion_rate must lie in [0, 1) and one_way_fraction in [0, 1]")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "SynthConfig":
        synth = dict(settings["synth"])
        lng, lat = synth.pop("origin")
        return cls(origin=GeoPoint(float(lng), float(lat)), seed=int(settings["seed"]), **synth)

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["origin"] = [self.origin.lng, self.origin.lat]
        doc["region_size"] = list(self.region_size)
        doc["density_profile"] = [list(r) for r in self.density_profile]
        return doc


class SyntheticWorldProvider(WorldProvider):
    """
    Builds a seeded road graph and drives simulated vehicles over it.
    Everything it emits is a pure function of the SynthConfig (seed included).
    """

    def __init__(self, cfg: SynthConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        width, height = cfg.region_size
        self._spec = GridSpec(
            origin=cfg.origin,
            rows=int(math.ceil(height + 2 * cfg.margin)),
            cols=int(math.ceil(width + 2 * cfg.margin)),
            cell_size=1.0,
        )

    @property
    def spec(self) -> GridSpec:
        return self._spec

    # ------------------ GRAPH GENERATION ------------------

    def generate_graph(self) -> RoadGraph:
        rng = np.random.default_rng([self.cfg.seed, 0])
        if self.cfg.graph_style == "grid-perturbed":
            positions, roads = self._lattice_roads(rng)
        else:
            positions, roads = self._delaunay_roads(rng)

        vertices = {i: (float(x), float(y)) for i, (x, y) in enumerate(positions)}
        edges = self._orient_roads(roads, len(vertices), rng)
        graph = RoadGraph(vertices, edges)
        logging.info(f"Generated {self.cfg.graph_style} graph: {len(graph.vertices)} vertices, {len(graph.edges)} directed edges")
        return graph

    def _lattice_roads(self, rng: np.random.Generator) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
        width, height = self.cfg.region_size
        nx_count = int(math.floor(width / self.cfg.block_size)) + 1
        ny_count = int(math.floor(height / self.cfg.block_size)) + 1
        if nx_count < 2 or ny_count < 2:
            raise ConfigError(
                f"region {width}x{height} m is too small for one {self.cfg.block_size} m lattice cell")

        jitter = rng.uniform(-1.0, 1.0, size=(ny_count * nx_count, 2)) * self.cfg.jitter
        positions = np.array([
            (self.cfg.margin + i * self.cfg.block_size, self.cfg.margin + j * self.cfg.block_size)
            for j in range(ny_count) for i in range(nx_count)
        ], dtype=np.float64) + jitter

        roads = []
        for j in range(ny_count):
            for i in range(nx_count):
                vid = j * nx_count + i
                if i + 1 < nx_count:
                    roads.append((vid, vid + 1))
                if j + 1 < ny_count:
                    roads.append((vid, vid + nx_count))

        order = rng.permutation(len(roads))
        draws = rng.random(len(roads))
        g = nx.Graph(roads)
        for idx in order:
            if draws[idx] >= self.cfg.deletion_rate:
                continue
            u, v = roads[idx]
            g.remove_edge(u, v)
            if not nx.has_path(g, u, v):
                g.add_edge(u, v)
        kept = sorted((min(u, v), max(u, v)) for u, v in g.edges())
        return positions, kept

    def _poisson_disc(self, rng: np.random.Generator) -> np.ndarray:
        width, height = self.cfg.region_size
        attempts = int(30 * width * height / self.cfg.min_spacing ** 2)
        candidates = rng.uniform(0.0, 1.0, size=(attempts, 2)) * (width, height)
        accepted = np.empty((0, 2))
        for c in candidates:
            if len(accepted) and np.min(np.hypot(*(accepted - c).T)) < self.cfg.min_spacing:
                continue
            accepted = np.vstack([accepted, c])
        return accepted + self.cfg.margin

    def _delaunay_roads(self, rng: np.random.Generator) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
        positions = self._poisson_disc(rng)
        if len(positions) < 3:
            raise ConfigError("region too small for a Delaunay road graph (fewer than 3 disc samples)")
        try:
            tri = Delaunay(positions)
        except QhullError as e:
            raise ConfigError(f"degenerate Poisson-disc sample, cannot triangulate: {e}") from e

        candidates = set()
        for simplex in tri.simplices:
            for a, b in ((0, 1), (1, 2), (0, 2)):
                u, v = int(simplex[a]), int(simplex[b])
                candidates.add((min(u, v), max(u, v)))
        candidates = sorted(candidates)

        g = nx.Graph()
        for u, v in candidates:
            g.add_edge(u, v, length=float(np.hypot(*(positions[u] - positions[v]))))
        lengths = np.array([g.edges[e]["length"] for e in candidates])
        cutoff = float(np.quantile(lengths, self.cfg.prune_quantile))
        spanning = {(min(u, v), max(u, v)) for u, v in nx.minimum_spanning_edges(g, weight="length", data=False)}
        kept = [e for e, length in zip(candidates, lengths) if e in spanning or length <= cutoff]
        return positions, kept

    def _orient_roads(self, roads: Sequence[Tuple[int, int]], n: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
        """Two directed edges per road; a `one_way_fraction` share keeps one direction if the graph stays strongly connected."""
        edges = set()
        for u, v in roads:
            edges |= {(u, v), (v, u)}
        if self.cfg.one_way_fraction <= 0:
            return sorted(edges)

        dg = nx.DiGraph()
        dg.add_nodes_from(range(n))
        dg.add_edges_from(edges)
        draws = rng.random(len(roads))
        flips = rng.random(len(roads))
        for (u, v), draw, flip in zip(roads, draws, flips):
            if draw >= self.cfg.one_way_fraction:
                continue
            drop = (u, v) if flip < 0.5 else (v, u)
            dg.remove_edge(*drop)
            if not nx.is_strongly_connected(dg):
                dg.add_edge(*drop)
        return sorted(dg.edges())

    # ------------------ TRAJECTORY SIMULATION ------------------

    def _density_region(self, xy: np.ndarray) -> np.ndarray:
        width, height = self.cfg.region_size
        profile = self.cfg.density_profile
        n_rows, n_cols = len(profile), len(profile[0])
        r = np.clip(np.floor((xy[:, 1] - self.cfg.margin) / height * n_rows), 0, n_rows - 1).astype(int)
        c = np.clip(np.floor((xy[:, 0] - self.cfg.margin) / width * n_cols), 0, n_cols - 1).astype(int)
        return r * n_cols + c

    def _drive(self, g: nx.DiGraph, graph: RoadGraph, rng: np.random.Generator) -> np.ndarray:
        """Noiseless positions sampled along one shortest path; empty if no usable path was drawn."""
        ids = graph.sorted_vertex_ids()
        step = self.cfg.speed * self.cfg.sampling_interval
        for _ in range(10):
            a, b = rng.choice(len(ids), size=2, replace=False)
            src, dst = ids[int(a)], ids[int(b)]
            try:
                path = nx.shortest_path(g, src, dst, weight="length")
            except nx.NetworkXNoPath:
                continue
            poly = np.array([graph.vertices[v] for v in path], dtype=np.float64)
            cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(poly, axis=0).T))])
            offset = rng.uniform(0.0, step)
            s = offset + step * np.arange(int(max(0.0, cum[-1] - offset) // step) + 1)
            s = s[s <= cum[-1]]
            if len(s) >= 2:
                return np.column_stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])])
        return np.empty((0, 2))

    def _simulate_one(self, k: int, streams: Tuple[np.random.SeedSequence, np.random.SeedSequence],
                      g: nx.DiGraph, graph: RoadGraph) -> List[Trajectory]:
        path_rng = np.random.default_rng(streams[0])
        thin_rng = np.random.default_rng(streams[1])
        true_xy = self._drive(g, graph, path_rng)
        if len(true_xy) < 2:
            return []
        n = len(true_xy)
        noisy = true_xy + path_rng.normal(0.0, 1.0, size=(n, 2)) * self.cfg.gps_noise_sigma
        t0 = self.cfg.start_epoch + int(path_rng.integers(0, 86400))
        times = t0 + self.cfg.sampling_interval * np.arange(n)

        # Runs of consecutive points in one density region are kept or dropped together
        flat = [m for row in self.cfg.density_profile for m in row]
        top = max(flat)
        regions = self._density_region(true_xy)
        keep = np.zeros(n, dtype=bool)
        start = 0
        for i in range(1, n + 1):
            if i == n or regions[i] != regions[start]:
                keep[start:i] = thin_rng.random() < flat[regions[start]] / top
                start = i

        pieces: List[List[int]] = []
        for i in range(n):
            if not keep[i]:
                continue
            if pieces and pieces[-1][-1] == i - 1:
                pieces[-1].append(i)
            else:
                pieces.append([i])
        pieces = [p for p in pieces if len(p) >= 2]

        out = []
        for j, piece in enumerate(pieces):
            name = f"sim{k:05d}" if len(pieces) == 1 else f"sim{k:05d}_{j}"
            points = tuple(
                TrajPoint(unproject(GridCoord(float(noisy[i, 0]), float(noisy[i, 1])), self._spec), float(times[i]))
                for i in piece
            )
            out.append(Trajectory(name, points))
        return out

    def simulate_trajectories(self, graph: RoadGraph) -> List[Trajectory]:
        if len(graph) < 2:
            return []
        g = graph.to_networkx(directed=True)
        root = np.random.SeedSequence([self.cfg.seed, 1])
        streams = [tuple(child.spawn(2)) for child in root.spawn(self.cfg.trajectory_count)]

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            results = list(pool.map(lambda k: self._simulate_one(k, streams[k], g, graph),
                                    range(self.cfg.trajectory_count)))

        trajectories = [t for batch in results for t in batch]
        logging.info(f"Simulated {len(trajectories)} trajectories "
                     f"({sum(len(t) for t in trajectories)} points) over {self.cfg.trajectory_count} trips")
        return trajectories

    def generate_world(self) -> World:
        world = super().generate_world()
        world.meta = {"synth": self.cfg.to_dict()}
        return world
