import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.settings import save_resolved_config
from core.data_provider.base import GRAPH_FILE, TRAJECTORIES_FILE, WORLD_FILE, World
from core.data_provider.fake_provider import SynthConfig, SyntheticWorldProvider
from core.errors import MissingInputError
from core.geo import GridSpec, RoadGraph, densify_graph, geojson_points, read_geojson, write_geojson
from core.graph_assembler import AssemblyConfig, assemble
from core.graph_evaluator import EvalParams, EvalReport, evaluate
from core.keypoint_extractor import dump_heatmaps_pgm
from core.map_renderer import render_map, trajectory_points
from core.model import TileInference, load_model
from core.rasterizer import partition_tiles, rasterize, render_supervision
from core.relation_predictor import dump_candidates_csv
from core.trainer import DENSE_GRAPH_FILE, assign_splits, train
from core.trajectory_parser import Trajectory, read_trajectories_csv
from store.tile_store import TileStore

PRED_FILE = "pred.geojson"
GT_SUBSET_FILE = "gt_subset.geojson"
REPORT_FILE = "eval_report.txt"


def _read_trajectories(path: Path, settings: Dict[str, Any]) -> List[Trajectory]:
    ingest = settings["ingest"]
    trajs, report = read_trajectories_csv(str(path), strict=ingest["strict"], max_gap_s=ingest["max_gap_s"],
                                          max_speed_mps=ingest["max_speed_mps"])
    if report.errors:
        logging.warning(f"{len(report.errors)} trajectory rows were rejected ({report.summary()})")
    return trajs


def world_spec(world_dir: Path, trajs: List[Trajectory], settings: Dict[str, Any]) -> GridSpec:
    """The grid recorded with a synthetic world, or the bounds of the inputs for any other data."""
    world_file = world_dir / WORLD_FILE
    if world_file.exists():
        return GridSpec.from_dict(json.loads(world_file.read_text(encoding="utf-8"))["grid"])
    points = [p.position for t in trajs for p in t.points]
    graph_file = world_dir / GRAPH_FILE
    if graph_file.exists():
        points += geojson_points(str(graph_file))
    grid = settings["grid"]
    return GridSpec.from_bounds(points, cell_size=grid["cell_size"], margin=grid["margin"])


# ------------------ COMMANDS ------------------

def run_synth(settings: Dict[str, Any], out_dir: str) -> World:
    provider = SyntheticWorldProvider(SynthConfig.from_settings(settings), threads=settings["runtime"]["threads"])
    world = provider.generate_world()
    world.save(out_dir)
    save_resolved_config(settings, out_dir)
    return world


def run_rasterize(settings: Dict[str, Any], world_dir: str, out_dir: str) -> List[str]:
    """
    Feature tiles and supervision tiles for a world directory (trajectories.csv, graph.geojson
    and optionally world.json). Returns the tile names written.
    """
    src = Path(world_dir)
    trajs = _read_trajectories(src / TRAJECTORIES_FILE, settings)
    spec = world_spec(src, trajs, settings)
    raster, tile_size = settings["raster"], settings["grid"]["tile_size"]

    grid = rasterize(trajs, spec, threads=settings["runtime"]["threads"], chunk_size=raster["chunk_size"])
    tiles = partition_tiles(grid, tile_size)
    graph_file = src / GRAPH_FILE
    dense = None
    if graph_file.exists():
        gt = read_geojson(str(graph_file), spec, two_way=settings["ingest"]["two_way_roads"])
        dense = densify_graph(gt, raster["densify_max_gap"])
    else:
        logging.warning(f"No ground-truth graph in {src}; writing feature tiles only")

    splits = assign_splits([t.name for t in tiles], settings["train"]["split"], settings["seed"])
    with TileStore(out_dir, mode="w", spec=spec, tile_size=tile_size) as store:
        for tile in tiles:
            store.write_tile(tile, split=splits[tile.name])
            if dense is not None:
                sup = render_supervision(dense, tile.origin_cell, tile_size, raster["sigma_kp"], raster["road_width"])
                store.write_supervision(tile.name, sup)
    if dense is not None:
        write_geojson(dense, spec, str(Path(out_dir) / DENSE_GRAPH_FILE))
    save_resolved_config(settings, out_dir)
    return [t.name for t in tiles]


def run_train(settings: Dict[str, Any], store_dir: str, out_dir: str, resume: bool = False):
    save_resolved_config(settings, out_dir)
    return train(settings, store_dir, out_dir, resume=resume)


def _tile_window(result: TileInference, tile_size: int):
    r0, c0 = result.origin_cell
    return c0, c0 + tile_size, r0, r0 + tile_size


def gt_subset(gt: RoadGraph, windows) -> RoadGraph:
    """Ground truth restricted to vertices inside any of the (x0, x1, y0, y1) windows."""
    keep = [vid for vid, (x, y) in gt.vertices.items()
            if any(x0 <= x < x1 and y0 <= y < y1 for x0, x1, y0, y1 in windows)]
    return gt.subgraph(keep)


def run_infer(settings: Dict[str, Any], store_dir: str, checkpoint_dir: str, out_dir: str,
              split: str = "test") -> RoadGraph:
    """Road graph for the tiles of one split, plus the matching ground-truth subset."""
    out = Path(out_dir)
    model = load_model(settings, checkpoint_dir)
    debug = settings["runtime"]["debug"]
    results = []
    with TileStore(store_dir) as store:
        names = store.tile_names(split)
        if not names:
            raise MissingInputError(f"tile store {store_dir} has no tiles in split '{split}'")
        for name in names:
            result = model.infer_tile(store.read_tile(name))
            results.append(result)
            if debug:
                dump_heatmaps_pgm(result.heatmaps.o_k, result.heatmaps.o_r, result.smoothed, str(out / "debug"), name)
                dump_candidates_csv(result.candidates, result.keypoints.xy(), str(out / "debug" / f"{name}_links.csv"))
        spec, tile_size = store.spec, store.tile_size

    pred = assemble(results, AssemblyConfig.from_settings(settings))
    write_geojson(pred, spec, str(out / PRED_FILE))
    dense_file = Path(store_dir) / DENSE_GRAPH_FILE
    if dense_file.exists():
        gt = read_geojson(str(dense_file), spec, two_way=False)
        write_geojson(gt_subset(gt, [_tile_window(r, tile_size) for r in results]), spec, str(out / GT_SUBSET_FILE))
    save_resolved_config(settings, out_dir)
    logging.info(f"Inferred {len(pred)} vertices over {len(results)} '{split}' tiles")
    return pred


def _common_frame(paths: List[str], settings: Dict[str, Any]) -> GridSpec:
    points = [p for path in paths for p in geojson_points(path)]
    grid = settings["grid"]
    return GridSpec.from_bounds(points, cell_size=grid["cell_size"], margin=grid["margin"])


def run_eval(settings: Dict[str, Any], pred_path: str, gt_path: str, out_path: str) -> EvalReport:
    spec = _common_frame([pred_path, gt_path], settings)
    two_way = settings["ingest"]["two_way_roads"]
    pred = read_geojson(pred_path, spec, two_way=two_way)
    gt = read_geojson(gt_path, spec, two_way=two_way)
    report = evaluate(pred, gt, EvalParams.from_settings(settings))
    report.write(out_path)
    save_resolved_config(settings, str(Path(out_path).parent))
    return report


def run_render(settings: Dict[str, Any], pred_path: str, out_path: str, gt_path: Optional[str] = None,
               trajectories_path: Optional[str] = None):
    paths = [pred_path] + ([gt_path] if gt_path else [])
    spec = _common_frame(paths, settings)
    two_way = settings["ingest"]["two_way_roads"]
    pred = read_geojson(pred_path, spec, two_way=two_way)
    gt = read_geojson(gt_path, spec, two_way=two_way) if gt_path else None
    points = None
    if trajectories_path:
        points = trajectory_points(_read_trajectories(Path(trajectories_path), settings), spec)
        inside = (points[:, 0] >= 0) & (points[:, 0] < spec.cols) & (points[:, 1] >= 0) & (points[:, 1] < spec.rows)
        points = points[inside]
    return render_map(out_path, pred, gt, points=points, title=Path(pred_path).stem,
                      extent=(0, spec.cols, 0, spec.rows))
