import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
import numpy as np
from matplotlib.collections import LineCollection

from core.geo import GridSpec, RoadGraph
from core.trajectory_parser import Trajectory

matplotlib.use("agg")
import matplotlib.pyplot as plt  # noqa: E402

PRED_COLOR = "#2ca02c"
GT_COLOR = "#1f77b4"
POINT_COLOR = "#9e9e9e"
SVG_SALT = "dgmap"


def graph_segments(g: RoadGraph) -> np.ndarray:
    """(k, 2, 2) line segments, one per road regardless of direction."""
    roads = g.undirected_edges()
    if not roads:
        return np.zeros((0, 2, 2))
    return np.array([[g.vertices[u], g.vertices[v]] for u, v in roads], dtype=np.float64)


def trajectory_points(trajs: Sequence[Trajectory], spec: GridSpec) -> np.ndarray:
    parts = [t.grid_xy(spec) for t in trajs]
    return np.concatenate(parts) if parts else np.zeros((0, 2))


def render_map(path: str, pred: RoadGraph, gt: Optional[RoadGraph] = None,
               points: Optional[np.ndarray] = None, title: Optional[str] = None,
               extent: Optional[Sequence[float]] = None, figsize: float = 8.0) -> Path:
    """
    SVG overlay of the predicted map (green) over the ground truth (blue), with an optional
    underlay of trajectory points. Coordinates are grid cells, y pointing down.
    """
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(1, 1, figsize=(figsize, figsize))
    try:
        if points is not None and len(points):
            ax.scatter(points[:, 0], points[:, 1], s=0.5, c=POINT_COLOR, linewidths=0, zorder=1)
        if gt is not None:
            ax.add_collection(LineCollection(graph_segments(gt), colors=GT_COLOR, linewidths=2.5, zorder=2,
                                             label="ground truth"))
        ax.add_collection(LineCollection(graph_segments(pred), colors=PRED_COLOR, linewidths=1.2, zorder=3,
                                         label="inferred"))
        if extent is not None:
            x0, x1, y0, y1 = extent
            ax.set_xlim(x0, x1)
            ax.set_ylim(y1, y0)
        else:
            ax.autoscale()
            ax.invert_yaxis()
        ax.set_aspect("equal")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", fontsize="small")
        with plt.rc_context({"svg.hashsalt": SVG_SALT}):
            fig.savefig(out, format="svg", metadata={"Date": None}, bbox_inches="tight")
    finally:
        plt.close(fig)
    logging.info(f"Rendered map with {len(pred.undirected_edges())} inferred roads to {out}")
    return out
