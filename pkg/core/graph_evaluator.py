import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Hashable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from core.errors import InvalidGraphError, MissingInputError
from core.geo import RoadGraph

SNAP_EPS = 1e-9


@dataclass(frozen=True)
class EvalParams:
    topo_interval: float = 5.0
    topo_match_radius: float = 15.0
    topo_radius: float = 300.0
    topo_seeds: int = 100
    topo_aggregation: str = "pooled"
    apls_control_spacing: float = 50.0
    apls_snap_radius: float = 15.0
    apls_max_pairs: int = 500
    directed: bool = False
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "EvalParams":
        return cls(seed=settings["seed"], threads=settings["runtime"]["threads"], **settings["eval"])


@dataclass
class EvalReport:
    topo_precision: float
    topo_recall: float
    topo_f1: float
    apls: float
    params: Dict[str, Any] = field(default_factory=dict)

    def to_lines(self) -> List[str]:
        lines = [f"{f.name}={getattr(self, f.name):.6f}" for f in fields(self) if f.name != "params"]
        lines += [f"param.{key}={value}" for key, value in sorted(self.params.items())]
        return lines

    def write(self, path: str) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return out

    @classmethod
    def read(cls, path: str) -> "EvalReport":
        src = Path(path)
        if not src.exists():
            raise MissingInputError(f"evaluation report not found: {src}")
        metrics, params = {}, {}
        for line in src.read_text(encoding="utf-8").splitlines():
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key.startswith("param."):
                params[key[len("param."):]] = value
            else:
                metrics[key] = float(value)
        return cls(params=params, **metrics)


def f1_score(precision: float, recall: float) -> float:
    if precision <= 0 or recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ------------------ SHORTEST PATHS ------------------

def _path_lengths(g: nx.Graph, source: Hashable, radius: Optional[float]) -> Dict[Hashable, float]:
    return nx.single_source_dijkstra_path_length(g, source, cutoff=radius, weight="length")


def shortest_paths(g: RoadGraph, sources: Sequence[int], radius: Optional[float] = None,
                   directed: bool = False, threads: int = 1) -> Tuple[List[int], np.ndarray]:
    """
    Dijkstra path lengths from each source to every vertex.
    Returns the sorted vertex ids and a (len(sources), len(ids)) table; unreachable
    vertices (or those beyond `radius`) hold +inf.
    """
    ids = g.sorted_vertex_ids()
    column = {vid: k for k, vid in enumerate(ids)}
    nxg = g.to_networkx(directed=directed)
    table = np.full((len(sources), len(ids)), np.inf)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda s: _path_lengths(nxg, s, radius), sources))
    for i, lengths in enumerate(rows):
        for vid, length in lengths.items():
            table[i, column[vid]] = length
    return ids, table


# ------------------ TOPO ------------------

def _edge_views(g: RoadGraph, directed: bool) -> List[Tuple[int, int]]:
    return g.sorted_edges() if directed else g.undirected_edges()


def _sample_along(g: RoadGraph, edges: Sequence[Tuple[int, int]], interval: float) -> Tuple[np.ndarray, List]:
    """Midpoints of equal sub-intervals no longer than `interval` on every edge, with (u, v, offset from u)."""
    points, where = [], []
    for u, v in edges:
        length = g.edge_length(u, v)
        pieces = max(1, int(math.ceil(length / interval - 1e-12)))
        a, b = g.position(u), g.position(v)
        for k in range(pieces):
            t = (k + 0.5) / pieces
            points.append(a + t * (b - a))
            where.append((u, v, t * length))
    return np.asarray(points, dtype=np.float64).reshape(-1, 2), where


def _reachable(where: List, lengths: Dict[int, float], radius: float, directed: bool,
               edge_length) -> np.ndarray:
    keep = np.zeros(len(where), dtype=bool)
    for k, (u, v, offset) in enumerate(where):
        best = lengths.get(u, math.inf) + offset
        if not directed:
            best = min(best, lengths.get(v, math.inf) + edge_length(u, v) - offset)
        keep[k] = best <= radius
    return keep


def greedy_match(marbles: np.ndarray, holes: np.ndarray, radius: float) -> int:
    """Number of marble/hole pairs claimed greedily by increasing distance, ties by index."""
    if len(marbles) == 0 or len(holes) == 0:
        return 0
    near = cKDTree(holes).query_ball_point(marbles, radius)
    i = np.repeat(np.arange(len(marbles)), [len(hits) for hits in near])
    j = np.fromiter((h for hits in near for h in hits), dtype=np.int64, count=len(i))
    if len(i) == 0:
        return 0
    dist = np.linalg.norm(marbles[i] - holes[j], axis=1)
    order = np.lexsort((j, i, dist))
    used_m = np.zeros(len(marbles), dtype=bool)
    used_h = np.zeros(len(holes), dtype=bool)
    matched = 0
    for a, b in zip(i[order], j[order]):
        if not used_m[a] and not used_h[b]:
            used_m[a] = used_h[b] = True
            matched += 1
    return matched


class TopoEvaluator:
    """Hole/marble comparison of the road network reachable from seed locations."""

    def __init__(self, pred: RoadGraph, gt: RoadGraph, params: EvalParams = EvalParams()):
        if len(gt) == 0:
            raise InvalidGraphError("cannot evaluate against an empty ground-truth graph")
        self.pred = pred
        self.gt = gt
        self.params = params
        self.gt_nx = gt.to_networkx(directed=params.directed)
        self.pred_nx = pred.to_networkx(directed=params.directed)
        self.holes, self.hole_where = _sample_along(gt, _edge_views(gt, params.directed), params.topo_interval)
        self.marbles, self.marble_where = _sample_along(pred, _edge_views(pred, params.directed), params.topo_interval)
        self.pred_ids, self.pred_xy = pred.positions_array()

    def seeds(self) -> List[int]:
        """GT vertices ordered by position, then a seeded sample without replacement."""
        ids = sorted(self.gt.vertices, key=lambda vid: (self.gt.vertices[vid], vid))
        count = min(self.params.topo_seeds, len(ids))
        picks = np.random.default_rng(self.params.seed).choice(len(ids), size=count, replace=False)
        return [ids[k] for k in sorted(picks)]

    def _match_seed(self, seed: int) -> Optional[int]:
        if len(self.pred_ids) == 0:
            return None
        d = np.linalg.norm(self.pred_xy - self.gt.position(seed), axis=1)
        k = int(np.argmin(d))
        return self.pred_ids[k] if d[k] <= self.params.topo_match_radius else None

    def seed_counts(self, seed: int) -> Tuple[int, int, int]:
        """(matched, marbles, holes) for one seed."""
        p = self.params
        gt_len = _path_lengths(self.gt_nx, seed, p.topo_radius)
        holes = _reachable(self.hole_where, gt_len, p.topo_radius, p.directed, self.gt.edge_length)
        pred_seed = self._match_seed(seed)
        if pred_seed is None:
            return 0, 0, int(holes.sum())
        pred_len = _path_lengths(self.pred_nx, pred_seed, p.topo_radius)
        marbles = _reachable(self.marble_where, pred_len, p.topo_radius, p.directed, self.pred.edge_length)
        matched = greedy_match(self.marbles[marbles], self.holes[holes], p.topo_match_radius)
        return matched, int(marbles.sum()), int(holes.sum())

    def evaluate(self) -> Tuple[float, float, float]:
        seeds = self.seeds()
        with ThreadPoolExecutor(max_workers=self.params.threads) as pool:
            counts = np.array(list(pool.map(self.seed_counts, seeds)), dtype=np.float64).reshape(-1, 3)
        if self.params.topo_aggregation == "per_seed":
            precision = float(np.mean(np.divide(counts[:, 0], counts[:, 1], out=np.zeros(len(counts)),
                                                where=counts[:, 1] > 0)))
            recall = float(np.mean(np.divide(counts[:, 0], counts[:, 2], out=np.zeros(len(counts)),
                                             where=counts[:, 2] > 0)))
        else:
            matched, marbles, holes = counts.sum(axis=0)
            precision = matched / marbles if marbles else 0.0
            recall = matched / holes if holes else 0.0
        logging.debug(f"TOPO over {len(seeds)} seeds: precision={precision:.4f} recall={recall:.4f}")
        return float(precision), float(recall), f1_score(precision, recall)


def topo(pred: RoadGraph, gt: RoadGraph, params: EvalParams = EvalParams()) -> Tuple[float, float, float]:
    return TopoEvaluator(pred, gt, params).evaluate()


# ------------------ APLS ------------------

def _chain_edges(g: RoadGraph, a: int, b: int, chain: List[Hashable], nodes: Dict[Hashable, np.ndarray],
                 out: nx.Graph) -> None:
    forward, backward = (a, b) in g.edges, (b, a) in g.edges
    for u, v in zip(chain[:-1], chain[1:]):
        length = float(np.linalg.norm(nodes[v] - nodes[u]))
        if forward or not out.is_directed():
            out.add_edge(u, v, length=length)
        if backward and out.is_directed():
            out.add_edge(v, u, length=length)


def with_control_points(g: RoadGraph, spacing: float, directed: bool) -> Tuple[nx.Graph, List[Hashable], Dict]:
    """
    Graph with a control point every `spacing` along each road (strictly inside it).
    Control points are all vertices plus the inserted points, in a fixed order.
    """
    nodes: Dict[Hashable, np.ndarray] = {vid: g.position(vid) for vid in g.sorted_vertex_ids()}
    out = nx.DiGraph() if directed else nx.Graph()
    out.add_nodes_from(nodes)
    controls: List[Hashable] = list(nodes)
    for a, b in g.undirected_edges():
        length = g.edge_length(a, b)
        pa, pb = nodes[a], nodes[b]
        chain: List[Hashable] = [a]
        k = 1
        while k * spacing < length - SNAP_EPS:
            node = ("c", a, b, k)
            nodes[node] = pa + (k * spacing / length) * (pb - pa)
            chain.append(node)
            controls.append(node)
            k += 1
        chain.append(b)
        _chain_edges(g, a, b, chain, nodes, out)
    return out, controls, nodes


def _project(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from every point to every segment and the clamped projection parameter."""
    d = seg_b - seg_a
    denom = np.maximum((d ** 2).sum(axis=1), 1e-300)
    t = ((points[:, None, :] - seg_a[None]) * d[None]).sum(axis=2) / denom[None]
    t = np.clip(t, 0.0, 1.0)
    foot = seg_a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - foot, axis=2), t


def snap_points(points: np.ndarray, target: RoadGraph, radius: float,
                directed: bool) -> Tuple[nx.Graph, List[Optional[Hashable]]]:
    """
    Snaps each point to the nearest location on the target's roads within `radius`, splitting
    roads at the snap locations. Returns the split graph and the node of each point (None if unsnapped).
    """
    nodes: Dict[Hashable, np.ndarray] = {vid: target.position(vid) for vid in target.sorted_vertex_ids()}
    out = nx.DiGraph() if directed else nx.Graph()
    out.add_nodes_from(nodes)
    roads = target.undirected_edges()
    snapped: List[Optional[Hashable]] = [None] * len(points)
    splits: Dict[Tuple[int, int], List[Tuple[float, Hashable]]] = {road: [] for road in roads}
    if roads and len(points):
        seg_a = np.array([nodes[a] for a, _ in roads])
        seg_b = np.array([nodes[b] for _, b in roads])
        dist, t = _project(np.asarray(points, dtype=np.float64), seg_a, seg_b)
        best = np.argmin(dist, axis=1)
        for k, road_idx in enumerate(best):
            if dist[k, road_idx] > radius:
                continue
            a, b = roads[road_idx]
            tk = float(t[k, road_idx])
            if tk <= SNAP_EPS:
                snapped[k] = a
            elif tk >= 1.0 - SNAP_EPS:
                snapped[k] = b
            else:
                node = ("s", k)
                nodes[node] = nodes[a] + tk * (nodes[b] - nodes[a])
                splits[(a, b)].append((tk, k))
                snapped[k] = node
    for a, b in roads:
        inner = [("s", k) for _, k in sorted(splits[(a, b)])]
        _chain_edges(target, a, b, [a] + inner + [b], nodes, out)
    return out, snapped


def valid_control_pairs(controls: Sequence, src_len: Dict[int, Dict]) -> Tuple[np.ndarray, np.ndarray]:
    """Control index pairs i < j joined by a finite, positive source path."""
    rows, cols = np.triu_indices(len(controls), k=1)
    pairs = zip(rows.tolist(), cols.tolist())
    lengths = np.array([src_len[i].get(controls[j], math.inf) for i, j in pairs], dtype=np.float64)
    keep = np.isfinite(lengths) & (lengths > 0)
    return rows[keep], cols[keep]


def sample_control_pairs(rows: np.ndarray, cols: np.ndarray, max_pairs: int,
                         seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if len(rows) > max_pairs:
        picks = np.sort(np.random.default_rng(seed).choice(len(rows), size=max_pairs, replace=False))
        rows, cols = rows[picks], cols[picks]
    return rows, cols


def apls_directional(source: RoadGraph, target: RoadGraph, params: EvalParams = EvalParams()) -> float:
    """
    One-sided path-length similarity: control points on `source` are snapped onto `target`
    and path lengths are compared over min(apls_max_pairs, valid pairs) pairs drawn from the
    pairs with a positive source length. 0 when there is no such pair.
    """
    if len(source) == 0 or len(target) == 0:
        return 0.0
    src_g, controls, positions = with_control_points(source, params.apls_control_spacing, params.directed)
    points = np.array([positions[c] for c in controls])
    tgt_g, snapped = snap_points(points, target, params.apls_snap_radius, params.directed)

    with ThreadPoolExecutor(max_workers=params.threads) as pool:
        src_len = dict(enumerate(pool.map(lambda c: _path_lengths(src_g, c, None), controls)))
        valid = valid_control_pairs(controls, src_len)
        rows, cols = sample_control_pairs(*valid, params.apls_max_pairs, params.seed)
        tgt_starts = sorted({i for i in rows.tolist() if snapped[i] is not None})
        tgt_len = dict(zip(tgt_starts, pool.map(lambda i: _path_lengths(tgt_g, snapped[i], None), tgt_starts)))
    logging.debug(f"APLS compares {len(rows)} control pairs")

    contributions = []
    for i, j in zip(rows.tolist(), cols.tolist()):
        l_src = src_len[i][controls[j]]
        if snapped[i] is None or snapped[j] is None:
            contributions.append(1.0)
            continue
        l_tgt = tgt_len[i].get(snapped[j], math.inf)
        contributions.append(1.0 if not math.isfinite(l_tgt) else min(1.0, abs(l_src - l_tgt) / l_src))
    if not contributions:
        return 0.0
    return 1.0 - float(np.mean(contributions))


def apls(pred: RoadGraph, gt: RoadGraph, params: EvalParams = EvalParams()) -> float:
    """Mean of the GT-to-prediction and prediction-to-GT path-length similarities."""
    if len(gt) == 0:
        raise InvalidGraphError("cannot evaluate against an empty ground-truth graph")
    if len(pred) == 0:
        return 0.0
    return 0.5 * (apls_directional(gt, pred, params) + apls_directional(pred, gt, params))


def evaluate(pred: RoadGraph, gt: RoadGraph, params: EvalParams = EvalParams()) -> EvalReport:
    precision, recall, f1 = topo(pred, gt, params)
    score = apls(pred, gt, params)
    report = EvalReport(precision, recall, f1, score, params=asdict(params))
    logging.info(f"TOPO P={precision:.4f} R={recall:.4f} F1={f1:.4f}, APLS={score:.4f}")
    return report
