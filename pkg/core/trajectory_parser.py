import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, List, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import MissingInputError, TrajectoryParseError
from core.geo import GeoPoint, GridSpec, geo_distance_m, project

REQUIRED_COLUMNS = ("traj_id", "timestamp", "lat", "lng")


@dataclass(frozen=True)
class TrajPoint:
    position: GeoPoint
    timestamp: float

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise TrajectoryParseError(f"timestamp must be finite and non-negative, got {self.timestamp}")


@dataclass(frozen=True)
class Trajectory:
    """A temporally ordered GPS trace. Construction enforces >= 2 points and sorted timestamps."""
    id: str
    points: Tuple[TrajPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if len(self.points) < 2:
            raise TrajectoryParseError(f"trajectory {self.id!r} needs at least 2 points, got {len(self.points)}")
        for a, b in zip(self.points[:-1], self.points[1:]):
            if b.timestamp < a.timestamp:
                raise TrajectoryParseError(f"trajectory {self.id!r} has decreasing timestamps")

    def __len__(self) -> int:
        return len(self.points)

    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.points], dtype=np.float64)

    def grid_xy(self, spec: GridSpec) -> np.ndarray:
        """(n, 2) array of projected (x, y) grid coordinates."""
        out = np.empty((len(self.points), 2), dtype=np.float64)
        for i, p in enumerate(self.points):
            c = project(p.position, spec)
            out[i] = (c.x, c.y)
        return out


@dataclass
class ParseReport:
    rows_read: int = 0
    rows_dropped: int = 0
    split_count: int = 0
    trajectories_dropped: int = 0
    errors: List[Tuple[int, str]] = field(default_factory=list)

    def summary(self) -> str:
        return (f"rows read: {self.rows_read}, rows dropped: {self.rows_dropped}, "
                f"splits: {self.split_count}, trajectories dropped: {self.trajectories_dropped}")


def _row_error(report: ParseReport, strict: bool, row_number: int, reason: str) -> None:
    if strict:
        raise TrajectoryParseError(f"row {row_number}: {reason}")
    report.errors.append((row_number, reason))
    report.rows_dropped += 1


def _split_points(points: List[TrajPoint], max_gap_s: float, max_speed_mps: float) -> List[List[TrajPoint]]:
    pieces = [[points[0]]]
    for prev, cur in zip(points[:-1], points[1:]):
        dt = cur.timestamp - prev.timestamp
        dist = geo_distance_m(prev.position, cur.position)
        if dt > max_gap_s:
            pieces.append([cur])
            continue
        if dt > 0:
            too_fast = dist / dt > max_speed_mps
        else:
            too_fast = dist > 0
        if too_fast:
            pieces.append([cur])
        else:
            pieces[-1].append(cur)
    return pieces


def parse_trajectories(
        stream: Union[str, IO[str]],
        strict: bool = False,
        max_gap_s: float = 60.0,
        max_speed_mps: float = 50.0,
) -> Tuple[List[Trajectory], ParseReport]:
    """
    Parses a `traj_id,timestamp,lat,lng` CSV into cleaned trajectories.

    Rows are grouped by id and time-sorted; a trace is cut wherever consecutive points are more
    than `max_gap_s` apart or imply a speed above `max_speed_mps`. Pieces of a cut trace are
    named `<id>_<k>`. Pieces with fewer than two points are dropped.
    """
    bad_lines: List[List[str]] = []

    def _on_bad_line(fields: List[str]):
        bad_lines.append(fields)
        return None

    try:
        df = pd.read_csv(
            stream,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
            engine="python",
            on_bad_lines="error" if strict else _on_bad_line,
        )
    except pd.errors.EmptyDataError as e:
        raise TrajectoryParseError("trajectory CSV is empty (missing header)") from e
    except pd.errors.ParserError as e:
        raise TrajectoryParseError(f"malformed trajectory CSV: {e}") from e

    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise TrajectoryParseError(f"trajectory CSV header is missing columns {missing}")

    report = ParseReport(rows_read=len(df) + len(bad_lines))
    for fields in bad_lines:
        report.errors.append((0, f"wrong field count: {fields!r}"))
        report.rows_dropped += 1
    df = df[list(REQUIRED_COLUMNS)].copy()
    df["row_number"] = np.arange(2, len(df) + 2)
    df["traj_id"] = df["traj_id"].fillna("").astype(str).str.strip()
    for col in ("timestamp", "lat", "lng"):
        df[col] = pd.to_numeric(df[col], errors="coerce")

    valid = np.ones(len(df), dtype=bool)
    for i, row in enumerate(df.itertuples(index=False)):
        reason = None
        if not row.traj_id:
            reason = "empty traj_id"
        elif not all(math.isfinite(v) for v in (row.timestamp, row.lat, row.lng)):
            reason = "non-numeric or missing field"
        elif row.timestamp < 0:
            reason = "negative timestamp"
        elif not (-90.0 <= row.lat <= 90.0 and -180.0 <= row.lng <= 180.0):
            reason = "coordinate out of range"
        if reason is not None:
            _row_error(report, strict, int(row.row_number), reason)
            valid[i] = False

    df = df[valid].sort_values(["traj_id", "timestamp", "lat", "lng"], kind="mergesort")

    trajectories: List[Trajectory] = []
    for traj_id, group in df.groupby("traj_id", sort=True):
        points = [TrajPoint(GeoPoint(float(r.lng), float(r.lat)), float(r.timestamp))
                  for r in group.itertuples(index=False)]
        pieces = _split_points(points, max_gap_s, max_speed_mps)
        report.split_count += len(pieces) - 1
        for k, piece in enumerate(pieces):
            if len(piece) < 2:
                report.trajectories_dropped += 1
                report.rows_dropped += len(piece)
                continue
            name = traj_id if len(pieces) == 1 else f"{traj_id}_{k}"
            trajectories.append(Trajectory(name, tuple(piece)))

    logging.info(f"Parsed {len(trajectories)} trajectories ({report.summary()})")
    return trajectories, report


def read_trajectories_csv(path: str, **kwargs) -> Tuple[List[Trajectory], ParseReport]:
    src = Path(path)
    if not src.exists():
        raise MissingInputError(f"trajectory CSV not found: {src}")
    with open(src, "r", encoding="utf-8") as f:
        return parse_trajectories(f, **kwargs)


def trajectories_to_frame(trajs: Iterable[Trajectory]) -> pd.DataFrame:
    rows = []
    for traj in trajs:
        for p in traj.points:
            ts = int(p.timestamp) if float(p.timestamp).is_integer() else p.timestamp
            rows.append((traj.id, ts, p.position.lat, p.position.lng))
    return pd.DataFrame(rows, columns=list(REQUIRED_COLUMNS))


def write_trajectories_csv(trajs: Iterable[Trajectory], path: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    trajectories_to_frame(trajs).to_csv(out, index=False, float_format="%.10f")
