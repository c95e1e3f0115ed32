"""Embedding queries over a finalized map and occupancy-grid goal synthesis.

Instances are ranked by cosine similarity between a query embedding and each
node's fused image-text embedding. The selected node's centroid is projected
onto a top-down occupancy grid (built from the map's points, inflated by the
robot radius, reachability marked by BFS) and the closest reachable free cell
becomes the navigation goal.

All operations are read-only over an immutable map snapshot; grid builders
return new grids.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import ParameterError, QueryError
from .mapping import InstanceMap


class CellState(IntEnum):
    FREE = 0
    OCCUPIED = 1
    INFLATED = 2
    REACHABLE = 3  # free and reached by BFS


@dataclass(frozen=True)
class NavConfig:
    cell_size: float = 0.05
    z_min: float = 0.1
    z_max: float = 1.5
    robot_radius: float = 0.25
    grid_margin: float = 1.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ParameterError("cell_size must be positive")
        if self.z_min >= self.z_max:
            raise ParameterError("z_min must be below z_max")
        if self.robot_radius < 0 or self.grid_margin < 0:
            raise ParameterError("radius and margin must be non-negative")

    def to_dict(self) -> dict:
        return {"cell_size": self.cell_size, "z_min": self.z_min, "z_max": self.z_max,
                "robot_radius": self.robot_radius, "grid_margin": self.grid_margin}

    @classmethod
    def from_dict(cls, data: Mapping) -> "NavConfig":
        return cls(**dict(data))


@dataclass(frozen=True)
class Query:
    """A structured instance request with a pre-computed text-space embedding."""

    text: str
    embedding: np.ndarray
    instance_rank: int = 1

    def __post_init__(self):
        vec = np.asarray(self.embedding, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ParameterError("query embedding must be a finite vector")
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            raise ParameterError("query embedding norm too small")
        object.__setattr__(self, "embedding", vec / norm)
        if self.instance_rank < 1:
            raise ParameterError("instance_rank must be at least 1")


@dataclass(frozen=True)
class RankedMatch:
    node_id: int
    score: float
    rank: int


@dataclass(frozen=True)
class OccupancyGrid:
    """Top-down grid; cell (row, col) covers origin + [col, col+1) x [row, row+1) cells."""

    origin: tuple[float, float]
    cell_size: float
    cells: np.ndarray  # (height, width) uint8 of CellState

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    def world_to_cell(self, x: float, y: float) -> tuple[int, int] | None:
        col = int(np.floor((x - self.origin[0]) / self.cell_size))
        row = int(np.floor((y - self.origin[1]) / self.cell_size))
        if 0 <= row < self.height and 0 <= col < self.width:
            return row, col
        return None

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + (col + 0.5) * self.cell_size,
                self.origin[1] + (row + 0.5) * self.cell_size)


@dataclass(frozen=True)
class GoalPoint:
    x: float
    y: float
    row: int
    col: int
    node_id: int


def rank_instances(instance_map: InstanceMap, query: Query) -> list[RankedMatch]:
    """All nodes ordered by cosine similarity to the query, best first.

    Equal scores order by ascending node id. Positive rescaling of the query
    embedding cannot change the ranking (cosine normalizes).
    """
    if not instance_map.nodes:
        raise QueryError("map contains no instances")
    scored = []
    for node_id in sorted(instance_map.nodes):
        node = instance_map.nodes[node_id]
        if node.clip_embedding.shape != query.embedding.shape:
            raise ParameterError(
                f"query dimension {query.embedding.shape[0]} does not match "
                f"map embedding dimension {node.clip_embedding.shape[0]}")
        denom = float(np.linalg.norm(node.clip_embedding) * np.linalg.norm(query.embedding))
        scored.append((float(np.dot(query.embedding, node.clip_embedding) / denom), node_id))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [RankedMatch(node_id=nid, score=score, rank=i + 1)
            for i, (score, nid) in enumerate(scored)]


def select_instance(matches: list[RankedMatch], instance_rank: int) -> int:
    """Node id at the requested 1-based rank."""
    if not (1 <= instance_rank <= len(matches)):
        raise QueryError(
            f"instance rank {instance_rank} out of range: only {len(matches)} instances")
    return matches[instance_rank - 1].node_id


def build_grid(instance_map: InstanceMap, cell_size: float,
               z_band: tuple[float, float], margin: float = 0.0) -> OccupancyGrid:
    """Project map points into a top-down grid.

    A cell is occupied when at least one point with z inside the (inclusive)
    band falls into it; every other cell is free. Extents cover all map
    points plus *margin* meters on each side.
    """
    if cell_size <= 0:
        raise ParameterError("cell_size must be positive")
    z_min, z_max = z_band
    if z_min >= z_max:
        raise ParameterError("z band must be non-empty")
    if margin < 0:
        raise ParameterError("margin must be non-negative")
    points = instance_map.all_points()
    if points.shape[0] == 0:
        raise QueryError("cannot build an occupancy grid from an empty map")
    origin = (float(points[:, 0].min() - margin), float(points[:, 1].min() - margin))
    width = int(np.floor((points[:, 0].max() + margin - origin[0]) / cell_size)) + 1
    height = int(np.floor((points[:, 1].max() + margin - origin[1]) / cell_size)) + 1
    cells = np.full((height, width), CellState.FREE, dtype=np.uint8)
    banded = points[(points[:, 2] >= z_min) & (points[:, 2] <= z_max)]
    if banded.shape[0]:
        cols = np.floor((banded[:, 0] - origin[0]) / cell_size).astype(np.int64)
        rows = np.floor((banded[:, 1] - origin[1]) / cell_size).astype(np.int64)
        cells[rows, cols] = CellState.OCCUPIED
    return OccupancyGrid(origin=origin, cell_size=cell_size, cells=cells)


def _disk_offsets(radius: float, cell_size: float) -> np.ndarray:
    reach = int(np.floor(radius / cell_size))
    di, dj = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    return (np.hypot(di, dj) * cell_size) <= radius


def inflate(grid: OccupancyGrid, robot_radius: float) -> OccupancyGrid:
    """Mark free cells within the robot radius of any occupied cell as inflated.

    Distances compare cell centers; occupied cells are unchanged.
    """
    if robot_radius < 0:
        raise ParameterError("robot_radius must be non-negative")
    cells = grid.cells.copy()
    occupied = cells == CellState.OCCUPIED
    structure = _disk_offsets(robot_radius, grid.cell_size)
    near = ndimage.binary_dilation(occupied, structure=structure)
    free = (cells == CellState.FREE) | (cells == CellState.REACHABLE)
    cells[near & free] = CellState.INFLATED
    return replace(grid, cells=cells)


def mark_reachable(grid: OccupancyGrid, start: tuple[float, float]) -> OccupancyGrid:
    """Flood the free space reachable from *start* with 8-connected BFS."""
    cell = grid.world_to_cell(*start)
    if cell is None:
        raise QueryError(f"start position {start} lies outside the grid")
    state = CellState(grid.cells[cell])
    if state not in (CellState.FREE, CellState.REACHABLE):
        raise QueryError(f"start position {start} is on a {state.name.lower()} cell")
    cells = grid.cells.copy()
    passable = (cells == CellState.FREE) | (cells == CellState.REACHABLE)
    height, width = cells.shape
    queue = deque([cell])
    cells[cell] = CellState.REACHABLE
    while queue:
        row, col = queue.popleft()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nr, nc = row + dr, col + dc
                if 0 <= nr < height and 0 <= nc < width and passable[nr, nc] \
                        and cells[nr, nc] != CellState.REACHABLE:
                    cells[nr, nc] = CellState.REACHABLE
                    queue.append((nr, nc))
    return replace(grid, cells=cells)


def closest_reachable_cell(grid: OccupancyGrid, target: tuple[float, float]) -> tuple[int, int]:
    """Reachable free cell whose center is closest to a world (x, y) point.

    Ties resolve to the lexicographically smallest (row, col).
    """
    reachable = np.argwhere(grid.cells == CellState.REACHABLE)
    if reachable.shape[0] == 0:
        raise QueryError("no reachable free cells in the grid")
    centers_x = grid.origin[0] + (reachable[:, 1] + 0.5) * grid.cell_size
    centers_y = grid.origin[1] + (reachable[:, 0] + 0.5) * grid.cell_size
    dist_sq = (centers_x - target[0]) ** 2 + (centers_y - target[1]) ** 2
    best = int(np.argmin(dist_sq))  # argwhere rows are (row, col) sorted, argmin takes first
    return int(reachable[best, 0]), int(reachable[best, 1])


def goal_for(instance_map: InstanceMap, grid: OccupancyGrid, node_id: int) -> GoalPoint:
    """Reachable free cell closest to the node centroid's top-down projection."""
    if node_id not in instance_map.nodes:
        raise QueryError(f"node {node_id} is not in the map")
    centroid = instance_map.nodes[node_id].centroid()
    row, col = closest_reachable_cell(grid, (float(centroid[0]), float(centroid[1])))
    x, y = grid.cell_center(row, col)
    return GoalPoint(x=x, y=y, row=row, col=col, node_id=node_id)


@dataclass(frozen=True)
class Answer:
    goal: GoalPoint
    matches: list[RankedMatch]
    grid: OccupancyGrid


def answer(instance_map: InstanceMap, query: Query, robot_xy: tuple[float, float],
           nav: NavConfig = NavConfig()) -> Answer:
    """End-to-end query: rank, select, grid, inflate, BFS, goal."""
    matches = rank_instances(instance_map, query)
    node_id = select_instance(matches, query.instance_rank)
    grid = build_grid(instance_map, nav.cell_size, (nav.z_min, nav.z_max),
                      margin=nav.grid_margin)
    grid = inflate(grid, nav.robot_radius)
    grid = mark_reachable(grid, robot_xy)
    goal = goal_for(instance_map, grid, node_id)
    return Answer(goal=goal, matches=matches, grid=grid)


_PGM_LEVELS = {CellState.OCCUPIED: 0, CellState.INFLATED: 64,
               CellState.FREE: 255, CellState.REACHABLE: 255}


def _write_pgm(path: Path, image: np.ndarray, comments: list[str]) -> None:
    header = ["P5"] + [f"# {c}" for c in comments] + [
        f"{image.shape[1]} {image.shape[0]}", "255", ""]
    with path.open("wb") as handle:
        handle.write("\n".join(header).encode("ascii"))
        handle.write(image.astype(np.uint8).tobytes())


def export_grid(grid: OccupancyGrid, stem: str | Path,
                meta: Mapping | None = None) -> list[Path]:
    """Write <stem>.pgm, <stem>_reachable.pgm and <stem>.json.

    The main image encodes occupied=0, inflated=64, free=255; the companion
    marks reachable cells 255 on black. Row 0 of the grid is the top image row.
    """
    stem = Path(stem)
    meta_dict = dict(meta) if meta else {}
    comments = [f"meta {json.dumps(meta_dict, sort_keys=True)}"] if meta_dict else []
    levels = np.zeros(256, dtype=np.uint8)
    for state, level in _PGM_LEVELS.items():
        levels[int(state)] = level
    main = levels[grid.cells]
    reachable = np.where(grid.cells == CellState.REACHABLE, 255, 0).astype(np.uint8)
    pgm_path = stem.with_suffix(".pgm")
    reach_path = stem.parent / (stem.name + "_reachable.pgm")
    json_path = stem.with_suffix(".json")
    _write_pgm(pgm_path, main, comments)
    _write_pgm(reach_path, reachable, comments)
    header = {
        "origin": [grid.origin[0], grid.origin[1]],
        "cell_size": grid.cell_size,
        "width": grid.width,
        "height": grid.height,
        "meta": meta_dict,
    }
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n",
                         encoding="utf-8")
    return [pgm_path, reach_path, json_path]
