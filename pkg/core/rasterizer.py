import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.errors import ShapeMismatchError
from core.geo import GridCoord, GridSpec, RoadGraph
from core.trajectory_parser import Trajectory

N_CHANNELS = 11
POINT_CHANNEL = 0
DIRECTION_CHANNELS = range(1, 9)
SPEED_CHANNEL = 9
LINE_CHANNEL = 10
COUNT_CHANNELS = (0, 1, 2, 3, 4, 5, 6, 7, 8, 10)
TILE_SIZE = 256

# Speeds are accumulated as integer micro-metres per second so sums do not depend on order
SPEED_QUANTUM = 1_000_000


@dataclass
class FeatureGrid:
    spec: GridSpec
    channels: np.ndarray  # (rows, cols, 11) float64

    def __post_init__(self):
        expected = (self.spec.rows, self.spec.cols, N_CHANNELS)
        if self.channels.shape != expected:
            raise ShapeMismatchError(f"feature grid has shape {self.channels.shape}, expected {expected}")


@dataclass
class Tile:
    origin_cell: Tuple[int, int]
    data: np.ndarray  # (tile, tile, 11) float32, normalized
    scales: np.ndarray  # (11,) per-channel maxima over the full grid

    @property
    def name(self) -> str:
        return f"tile_{self.origin_cell[0]:06d}_{self.origin_cell[1]:06d}"


@dataclass
class SupervisionTile:
    origin_cell: Tuple[int, int]
    keypoint_map: np.ndarray  # (tile, tile) float32 in [0, 1]
    region_mask: np.ndarray  # (tile, tile) float32 in {0, 1}
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # tile-local (x, y) cells
    vertex_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # graph ids of `keypoints`


def direction_bin(a: GridCoord, b: GridCoord) -> int:
    """
    Eight 45-degree sectors counter-clockwise from east, bin 0 centered on due east.
    Grid y points south, so it is negated to measure angles with north up.
    """
    dx, dy = b.x - a.x, b.y - a.y
    if dx == 0 and dy == 0:
        raise ValueError("direction of a zero-length step is undefined")
    return int(direction_bins(np.array([dx]), np.array([dy]))[0])


def direction_bins(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    theta = np.mod(np.arctan2(-dy, dx), 2 * np.pi)
    return (np.floor((theta + np.pi / 8) / (np.pi / 4)).astype(np.int64)) % 8


def supercover_cells(x0: float, y0: float, x1: float, y1: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    (rows, cols) of every cell whose half-open square [c, c + 1) x [r, r + 1) meets the segment
    (x0, y0)-(x1, y1). Every cell whose interior the segment crosses is marked. A point on a grid line
    belongs to the cell after the line, so a segment along a grid line marks a single row or column.
    Cells may fall outside any grid; callers clip.
    """
    lo_x, hi_x = min(x0, x1), max(x0, x1)
    cols = np.arange(math.floor(lo_x), math.floor(hi_x) + 1)
    if x1 == x0:
        r_lo = np.full(len(cols), math.floor(min(y0, y1)), dtype=np.int64)
        r_hi = np.full(len(cols), math.floor(max(y0, y1)), dtype=np.int64)
    else:
        xa = np.maximum(cols, lo_x).astype(np.float64)
        xb = np.minimum(cols + 1, hi_x).astype(np.float64)
        # the right edge x = c + 1 belongs to the next column
        open_right = xb == cols + 1
        slope = (y1 - y0) / (x1 - x0)
        ya = y0 + (xa - x0) * slope
        yb = y0 + (xb - x0) * slope
        r_lo = np.floor(np.minimum(ya, yb)).astype(np.int64)
        r_hi = np.floor(np.maximum(ya, yb)).astype(np.int64)
        # rising through the open edge: the top value is excluded
        top_open = open_right & (slope > 0)
        r_hi[top_open] = np.ceil(yb[top_open]).astype(np.int64) - 1
        r_hi = np.maximum(r_hi, r_lo)
    counts = r_hi - r_lo + 1
    rows = np.repeat(r_lo, counts) + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
    return rows.astype(np.int64), np.repeat(cols, counts).astype(np.int64)


def _chunk_indices(trajs: Sequence[Trajectory], spec: GridSpec):
    """Flat accumulator indices for one chunk of trajectories."""
    rows, cols = spec.rows, spec.cols
    point_idx, dir_idx, speed_idx, speed_val, line_idx = [], [], [], [], []

    for traj in trajs:
        xy = traj.grid_xy(spec)
        t = traj.timestamps()
        cell_r = np.floor(xy[:, 1]).astype(np.int64)
        cell_c = np.floor(xy[:, 0]).astype(np.int64)
        inside = (cell_r >= 0) & (cell_r < rows) & (cell_c >= 0) & (cell_c < cols)
        flat = cell_r * cols + cell_c
        point_idx.append(flat[inside])

        dx = np.diff(xy[:, 0])
        dy = np.diff(xy[:, 1])
        dt = np.diff(t)
        first_inside = inside[:-1]

        moving = first_inside & ((dx != 0) | (dy != 0))
        if moving.any():
            bins = direction_bins(dx[moving], dy[moving])
            dir_idx.append(flat[:-1][moving] * 8 + bins)

        timed = first_inside & (dt > 0)
        if timed.any():
            speed = np.hypot(dx[timed], dy[timed]) * spec.cell_size / dt[timed]
            speed_idx.append(flat[:-1][timed])
            speed_val.append(np.rint(speed * SPEED_QUANTUM).astype(np.int64))

        for i in range(len(xy) - 1):
            r, c = supercover_cells(xy[i, 0], xy[i, 1], xy[i + 1, 0], xy[i + 1, 1])
            ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
            if ok.any():
                line_idx.append(r[ok] * cols + c[ok])

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    return cat(point_idx), cat(dir_idx), cat(speed_idx), cat(speed_val), cat(line_idx)


def rasterize(trajs: Sequence[Trajectory], spec: GridSpec, threads: int = 1, chunk_size: int = 64) -> FeatureGrid:
    """
    Builds the 11-channel feature grid: point count, eight direction bins, mean speed and
    line frequency. Work is split into fixed chunks and merged in chunk order, so the result
    is identical for any thread count.
    """
    n_cells = spec.rows * spec.cols
    chunks = [trajs[i:i + chunk_size] for i in range(0, len(trajs), chunk_size)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(lambda chunk: _chunk_indices(chunk, spec), chunks))

    def merged(k):
        arrays = [p[k] for p in parts]
        return np.concatenate(arrays) if arrays else np.zeros(0, dtype=np.int64)

    point_idx, dir_idx, speed_idx, speed_val, line_idx = (merged(k) for k in range(5))

    channels = np.zeros((n_cells, N_CHANNELS), dtype=np.float64)
    channels[:, POINT_CHANNEL] = np.bincount(point_idx, minlength=n_cells)
    channels[:, 1:9] = np.bincount(dir_idx, minlength=n_cells * 8).reshape(n_cells, 8)
    channels[:, LINE_CHANNEL] = np.bincount(line_idx, minlength=n_cells)

    speed_sum = np.zeros(n_cells, dtype=np.int64)
    np.add.at(speed_sum, speed_idx, speed_val)
    speed_n = np.bincount(speed_idx, minlength=n_cells)
    has_speed = speed_n > 0
    channels[has_speed, SPEED_CHANNEL] = speed_sum[has_speed] / speed_n[has_speed] / SPEED_QUANTUM

    logging.info(f"Rasterized {len(trajs)} trajectories onto a {spec.rows}x{spec.cols} grid "
                 f"({int(point_idx.size)} in-grid points)")
    return FeatureGrid(spec, channels.reshape(spec.rows, spec.cols, N_CHANNELS))


# ------------------ TILING ------------------

def tile_origins(spec: GridSpec, tile_size: int = TILE_SIZE) -> List[Tuple[int, int]]:
    return [(r, c) for r in range(0, spec.rows, tile_size) for c in range(0, spec.cols, tile_size)]


def normalize(values: np.ndarray, scales: np.ndarray) -> np.ndarray:
    out = np.zeros(values.shape, dtype=np.float64)
    for ch in range(N_CHANNELS):
        vmax = float(scales[ch])
        if vmax <= 0:
            continue
        if ch == SPEED_CHANNEL:
            out[..., ch] = values[..., ch] / vmax
        else:
            out[..., ch] = np.log1p(values[..., ch]) / np.log1p(vmax)
    return np.clip(out, 0.0, 1.0)


def partition_tiles(grid: FeatureGrid, tile_size: int = TILE_SIZE) -> List[Tile]:
    """
    Row-major, non-overlapping tiles; remainders are zero-padded. Every tile records the
    full-grid channel maxima used for its normalization.
    """
    scales = grid.channels.reshape(-1, N_CHANNELS).max(axis=0).astype(np.float32).astype(np.float64)
    tiles = []
    for r0, c0 in tile_origins(grid.spec, tile_size):
        window = grid.channels[r0:r0 + tile_size, c0:c0 + tile_size]
        data = np.zeros((tile_size, tile_size, N_CHANNELS), dtype=np.float32)
        data[:window.shape[0], :window.shape[1]] = normalize(window, scales)
        tiles.append(Tile((r0, c0), data, scales.copy()))
    logging.info(f"Partitioned grid into {len(tiles)} tiles of {tile_size}x{tile_size}")
    return tiles


def denormalize_tile(tile: Tile) -> np.ndarray:
    """Inverts the tile normalization; count channels come back as exact integers."""
    data = tile.data.astype(np.float64)
    out = np.zeros(data.shape, dtype=np.float64)
    for ch in range(N_CHANNELS):
        vmax = float(tile.scales[ch])
        if vmax <= 0:
            continue
        if ch == SPEED_CHANNEL:
            out[..., ch] = data[..., ch] * vmax
        else:
            out[..., ch] = np.rint(np.expm1(data[..., ch] * np.log1p(vmax)))
    return out


# ------------------ SUPERVISION ------------------

def _disc(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx ** 2 + yy ** 2) <= radius ** 2


def render_supervision(
        g: RoadGraph,
        origin_cell: Tuple[int, int],
        tile_size: int = TILE_SIZE,
        sigma_kp: float = 2.0,
        road_width: int = 3,
) -> SupervisionTile:
    """
    Keypoint heatmap and road-region mask for one tile of a densified graph.

    Keypoints snap to the cell holding them; each contributes a Gaussian truncated at 3 sigma
    and the map keeps the per-cell maximum. The mask is the supercover of every edge dilated
    by a disc of diameter `road_width`.
    """
    r0, c0 = origin_cell
    keypoint_map = np.zeros((tile_size, tile_size), dtype=np.float64)
    radius = max(0, int(road_width) // 2)
    pad = radius
    padded = np.zeros((tile_size + 2 * pad, tile_size + 2 * pad), dtype=bool)

    local_kps, local_ids = [], []
    reach = int(math.ceil(3 * sigma_kp))
    for vid in g.sorted_vertex_ids():
        x, y = g.vertices[vid]
        lx, ly = x - c0, y - r0
        if not (0 <= lx < tile_size and 0 <= ly < tile_size):
            continue
        local_kps.append((lx, ly))
        local_ids.append(vid)
        kr, kc = int(math.floor(ly)), int(math.floor(lx))
        rr0, rr1 = max(0, kr - reach), min(tile_size, kr + reach + 1)
        cc0, cc1 = max(0, kc - reach), min(tile_size, kc + reach + 1)
        yy, xx = np.mgrid[rr0:rr1, cc0:cc1]
        d2 = (yy - kr) ** 2 + (xx - kc) ** 2
        blob = np.where(d2 <= (3 * sigma_kp) ** 2, np.exp(-d2 / (2 * sigma_kp ** 2)), 0.0)
        np.maximum(keypoint_map[rr0:rr1, cc0:cc1], blob, out=keypoint_map[rr0:rr1, cc0:cc1])

    lim = tile_size + pad
    for u, v in g.sorted_edges():
        (xu, yu), (xv, yv) = g.vertices[u], g.vertices[v]
        xu, xv = xu - c0 + pad, xv - c0 + pad
        yu, yv = yu - r0 + pad, yv - r0 + pad
        if max(xu, xv) < -1 or min(xu, xv) > lim + 1 or max(yu, yv) < -1 or min(yu, yv) > lim + 1:
            continue
        rows, cols = supercover_cells(xu, yu, xv, yv)
        ok = (rows >= 0) & (rows < lim + pad) & (cols >= 0) & (cols < lim + pad)
        padded[rows[ok], cols[ok]] = True

    if radius > 0:
        padded = ndimage.binary_dilation(padded, structure=_disc(radius))
    region_mask = padded[pad:pad + tile_size, pad:pad + tile_size].astype(np.float32)

    return SupervisionTile(
        origin_cell=(r0, c0),
        keypoint_map=keypoint_map.astype(np.float32),
        region_mask=region_mask,
        keypoints=np.array(local_kps, dtype=np.float64).reshape(-1, 2),
        vertex_ids=np.array(local_ids, dtype=np.int64),
    )
