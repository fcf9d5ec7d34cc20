import json
import math
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, Tuple

import networkx as nx
import numpy as np

from core.errors import GridSpecError, InvalidGraphError, MissingInputError

METERS_PER_DEGREE_LAT = 111319.49

Edge = Tuple[int, int]


@dataclass(frozen=True)
class GeoPoint:
    lng: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lng) and math.isfinite(self.lat)):
            raise GridSpecError(f"non-finite coordinate ({self.lng}, {self.lat})")
        if not -180.0 <= self.lng <= 180.0:
            raise GridSpecError(f"longitude {self.lng} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise GridSpecError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class GridCoord:
    """Fractional grid position: x is the column axis, y the row axis (southward)."""
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GridSpecError(f"non-finite grid coordinate ({self.x}, {self.y})")

    def cell(self) -> Tuple[int, int]:
        """(row, col) of the cell holding this coordinate."""
        return int(math.floor(self.y)), int(math.floor(self.x))


@dataclass(frozen=True)
class GridSpec:
    origin: GeoPoint
    rows: int
    cols: int
    cell_size: float = 1.0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise GridSpecError(f"grid must have positive size, got {self.rows}x{self.cols}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise GridSpecError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def meters_per_degree_lng(self) -> float:
        return METERS_PER_DEGREE_LAT * math.cos(math.radians(self.origin.lat))

    def contains(self, c: GridCoord) -> bool:
        return 0.0 <= c.x < self.cols and 0.0 <= c.y < self.rows

    def to_dict(self) -> Dict[str, float]:
        return {
            "origin_lng": self.origin.lng,
            "origin_lat": self.origin.lat,
            "rows": self.rows,
            "cols": self.cols,
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "GridSpec":
        return cls(
            origin=GeoPoint(float(data["origin_lng"]), float(data["origin_lat"])),
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            cell_size=float(data.get("cell_size", 1.0)),
        )

    @classmethod
    def from_bounds(cls, points: Iterable[GeoPoint], cell_size: float = 1.0, margin: float = 16.0) -> "GridSpec":
        """
        Smallest north-west anchored grid covering the points, padded by `margin` metres.
        """
        pts = list(points)
        if not pts:
            raise GridSpecError("cannot derive a grid from an empty point set")
        min_lng = min(p.lng for p in pts)
        max_lng = max(p.lng for p in pts)
        min_lat = min(p.lat for p in pts)
        max_lat = max(p.lat for p in pts)
        m_lng = METERS_PER_DEGREE_LAT * math.cos(math.radians(max_lat))
        origin = GeoPoint(min_lng - margin / m_lng, max_lat + margin / METERS_PER_DEGREE_LAT)
        unit = cls(origin, 1, 1, cell_size)
        far = project(GeoPoint(max_lng, min_lat), unit)
        cols = int(math.ceil(far.x + margin / cell_size)) + 1
        rows = int(math.ceil(far.y + margin / cell_size)) + 1
        return cls(origin, rows, cols, cell_size)


def project(p: GeoPoint, spec: GridSpec) -> GridCoord:
    """Local equirectangular projection into the grid frame anchored at the spec origin."""
    if not (math.isfinite(p.lng) and math.isfinite(p.lat)):
        raise GridSpecError(f"cannot project non-finite point ({p.lng}, {p.lat})")
    x = (p.lng - spec.origin.lng) * spec.meters_per_degree_lng / spec.cell_size
    y = (spec.origin.lat - p.lat) * METERS_PER_DEGREE_LAT / spec.cell_size
    return GridCoord(x, y)


def unproject(c: GridCoord, spec: GridSpec) -> GeoPoint:
    """Exact inverse of `project` under the same spec."""
    if not (math.isfinite(c.x) and math.isfinite(c.y)):
        raise GridSpecError(f"cannot unproject non-finite coordinate ({c.x}, {c.y})")
    lng = spec.origin.lng + c.x * spec.cell_size / spec.meters_per_degree_lng
    lat = spec.origin.lat - c.y * spec.cell_size / METERS_PER_DEGREE_LAT
    return GeoPoint(lng, lat)


def geo_distance_m(a: GeoPoint, b: GeoPoint) -> float:
    """Equirectangular distance in metres, evaluated at the mean latitude."""
    mean_lat = math.radians((a.lat + b.lat) / 2.0)
    dx = (b.lng - a.lng) * METERS_PER_DEGREE_LAT * math.cos(mean_lat)
    dy = (b.lat - a.lat) * METERS_PER_DEGREE_LAT
    return math.hypot(dx, dy)


class RoadGraph:
    """
    Directed road graph in grid coordinates. Vertices map an integer id to an (x, y)
    pair; edges are ordered id pairs. Immutable once built.
    """

    def __init__(self, vertices: Mapping[int, Tuple[float, float]], edges: Iterable[Edge] = ()):
        verts: Dict[int, Tuple[float, float]] = {}
        for vid, xy in vertices.items():
            x, y = float(xy[0]), float(xy[1])
            if not (math.isfinite(x) and math.isfinite(y)):
                raise InvalidGraphError(f"vertex {vid} has non-finite position ({x}, {y})")
            verts[int(vid)] = (x, y)
        edge_set = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                raise InvalidGraphError(f"self-loop on vertex {u}")
            if u not in verts or v not in verts:
                raise InvalidGraphError(f"edge ({u}, {v}) references a missing vertex")
            edge_set.add((u, v))
        self._vertices = MappingProxyType(verts)
        self._edges: FrozenSet[Edge] = frozenset(edge_set)

    @property
    def vertices(self) -> Mapping[int, Tuple[float, float]]:
        return self._vertices

    @property
    def edges(self) -> FrozenSet[Edge]:
        return self._edges

    @classmethod
    def empty(cls) -> "RoadGraph":
        return cls({}, ())

    def __len__(self) -> int:
        return len(self._vertices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return dict(self._vertices) == dict(other._vertices) and self._edges == other._edges

    def __repr__(self) -> str:
        return f"RoadGraph(vertices={len(self._vertices)}, edges={len(self._edges)})"

    def position(self, vid: int) -> np.ndarray:
        return np.asarray(self._vertices[vid], dtype=np.float64)

    def edge_length(self, u: int, v: int) -> float:
        (x0, y0), (x1, y1) = self._vertices[u], self._vertices[v]
        return math.hypot(x1 - x0, y1 - y0)

    def sorted_vertex_ids(self) -> List[int]:
        return sorted(self._vertices)

    def sorted_edges(self) -> List[Edge]:
        return sorted(self._edges)

    def undirected_edges(self) -> List[Edge]:
        """One (min, max) pair per road, whichever directions it carries."""
        return sorted({(min(u, v), max(u, v)) for u, v in self._edges})

    def to_networkx(self, directed: bool = True) -> nx.Graph:
        g = nx.DiGraph() if directed else nx.Graph()
        for vid in self.sorted_vertex_ids():
            x, y = self._vertices[vid]
            g.add_node(vid, x=x, y=y)
        for u, v in self.sorted_edges():
            g.add_edge(u, v, length=self.edge_length(u, v))
        return g

    def subgraph(self, vertex_ids: Iterable[int]) -> "RoadGraph":
        keep = set(vertex_ids)
        verts = {vid: xy for vid, xy in self._vertices.items() if vid in keep}
        edges = [(u, v) for u, v in self._edges if u in keep and v in keep]
        return RoadGraph(verts, edges)

    def translate(self, dx: float, dy: float) -> "RoadGraph":
        verts = {vid: (x + dx, y + dy) for vid, (x, y) in self._vertices.items()}
        return RoadGraph(verts, self._edges)

    def positions_array(self) -> Tuple[List[int], np.ndarray]:
        ids = self.sorted_vertex_ids()
        if not ids:
            return ids, np.zeros((0, 2))
        return ids, np.array([self._vertices[i] for i in ids], dtype=np.float64)


def densify_graph(g: RoadGraph, max_gap: float) -> RoadGraph:
    """
    Splits every road longer than `max_gap` with evenly spaced collinear shape points.
    Both directions of a two-way road share the inserted vertices.
    """
    if not max_gap > 0:
        raise ValueError(f"max_gap must be positive, got {max_gap}")
    vertices = dict(g.vertices)
    next_id = max(vertices) + 1 if vertices else 0
    edges: List[Edge] = []

    for a, b in g.undirected_edges():
        forward = (a, b) in g.edges
        backward = (b, a) in g.edges
        length = g.edge_length(a, b)
        pieces = max(1, int(math.ceil(length / max_gap - 1e-12)))
        chain = [a]
        (xa, ya), (xb, yb) = vertices[a], vertices[b]
        for k in range(1, pieces):
            t = k / pieces
            vertices[next_id] = (xa + t * (xb - xa), ya + t * (yb - ya))
            chain.append(next_id)
            next_id += 1
        chain.append(b)
        for u, v in zip(chain[:-1], chain[1:]):
            if forward:
                edges.append((u, v))
            if backward:
                edges.append((v, u))
    return RoadGraph(vertices, edges)


# ------------------ GeoJSON I/O ------------------

def graph_to_geojson(g: RoadGraph, spec: GridSpec) -> Dict:
    """One Point per vertex (property id) and one LineString per directed edge (u, v)."""
    features = []
    for vid in g.sorted_vertex_ids():
        x, y = g.vertices[vid]
        p = unproject(GridCoord(x, y), spec)
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [p.lng, p.lat]},
            "properties": {"id": vid},
        })
    for u, v in g.sorted_edges():
        pu = unproject(GridCoord(*g.vertices[u]), spec)
        pv = unproject(GridCoord(*g.vertices[v]), spec)
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [[pu.lng, pu.lat], [pv.lng, pv.lat]]},
            "properties": {"u": u, "v": v},
        })
    return {"type": "FeatureCollection", "features": features}


def write_geojson(g: RoadGraph, spec: GridSpec, path: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(graph_to_geojson(g, spec), f, indent=1)


def _is_oneway(props: Mapping) -> bool:
    value = props.get("oneway")
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("yes", "true", "1")


def geojson_to_graph(doc: Mapping, spec: GridSpec, two_way: bool = True) -> RoadGraph:
    """
    Builds a RoadGraph from either the project format (Points with `id`, LineStrings with
    `u`/`v`) or a generic LineString collection, where vertices are deduplicated by coordinate.
    """
    features = doc.get("features", [])
    vertices: Dict[int, Tuple[float, float]] = {}
    edges: List[Edge] = []
    by_coord: Dict[Tuple[float, float], int] = {}

    for feat in features:
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") == "Point" and "id" in props:
            lng, lat = geom["coordinates"][:2]
            c = project(GeoPoint(float(lng), float(lat)), spec)
            vertices[int(props["id"])] = (c.x, c.y)
            by_coord[(float(lng), float(lat))] = int(props["id"])

    def vertex_for(lng: float, lat: float) -> int:
        key = (float(lng), float(lat))
        if key not in by_coord:
            vid = max(vertices) + 1 if vertices else 0
            c = project(GeoPoint(*key), spec)
            vertices[vid] = (c.x, c.y)
            by_coord[key] = vid
        return by_coord[key]

    for feat in features:
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "LineString":
            continue
        if "u" in props and "v" in props:
            edges.append((int(props["u"]), int(props["v"])))
            continue
        coords = geom.get("coordinates", [])
        chain = [vertex_for(lng, lat) for lng, lat, *_ in coords]
        both = two_way and not _is_oneway(props)
        for u, v in zip(chain[:-1], chain[1:]):
            if u == v:
                continue
            edges.append((u, v))
            if both:
                edges.append((v, u))
    return RoadGraph(vertices, edges)


def _load_geojson(path: str) -> dict:
    src = Path(path)
    if not src.exists():
        raise MissingInputError(f"GeoJSON file not found: {src}")
    try:
        with open(src, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidGraphError(f"{src} is not valid GeoJSON: {e}") from e
    if not isinstance(doc, dict):
        raise InvalidGraphError(f"{src} must hold a GeoJSON object")
    return doc


def read_geojson(path: str, spec: GridSpec, two_way: bool = True) -> RoadGraph:
    doc = _load_geojson(path)
    return geojson_to_graph(doc, spec, two_way=two_way)


def geojson_points(path: str) -> List[GeoPoint]:
    """Every coordinate in a GeoJSON file, used to derive a common evaluation frame."""
    doc = _load_geojson(path)
    points = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        coords = geom.get("coordinates", [])
        if geom.get("type") == "Point":
            coords = [coords]
        for lng, lat, *_ in coords:
            points.append(GeoPoint(float(lng), float(lat)))
    return points
