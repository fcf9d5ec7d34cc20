import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

from core.geo import GridSpec, RoadGraph, write_geojson
from core.trajectory_parser import Trajectory, write_trajectories_csv

GRAPH_FILE = "graph.geojson"
TRAJECTORIES_FILE = "trajectories.csv"
WORLD_FILE = "world.json"


@dataclass
class World:
    """A ground-truth road graph together with the GPS traces observed on it."""
    graph: RoadGraph
    trajectories: List[Trajectory]
    spec: GridSpec
    meta: Dict[str, Any] = field(default_factory=dict)

    def save(self, world_dir: str) -> Path:
        """
        Writes the world in the production input formats:
        graph.geojson, trajectories.csv and world.json (grid spec + generator settings).
        """
        out = Path(world_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_geojson(self.graph, self.spec, str(out / GRAPH_FILE))
        write_trajectories_csv(self.trajectories, str(out / TRAJECTORIES_FILE))
        doc = {"grid": self.spec.to_dict(), **self.meta}
        (out / WORLD_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        logging.info(f"Saved world ({len(self.graph)} vertices, {len(self.trajectories)} trajectories) to {out}")
        return out


class WorldProvider(ABC):
    @abstractmethod
    def generate_graph(self) -> RoadGraph:
        """
        Returns the ground-truth road graph in grid coordinates.
        """

    @abstractmethod
    def simulate_trajectories(self, graph: RoadGraph) -> List[Trajectory]:
        """
        Returns GPS traces driven along `graph`, ordered by trajectory id.
        """

    @property
    @abstractmethod
    def spec(self) -> GridSpec:
        """The grid frame the graph coordinates live in."""

    def generate_world(self) -> World:
        graph = self.generate_graph()
        trajectories = self.simulate_trajectories(graph)
        return World(graph=graph, trajectories=trajectories, spec=self.spec)
