"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately naive (O(n^2) scans, per-cell loops, stdlib
data structures) and shares no code path with the package under test.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def nnratio_bruteforce(pt_i: np.ndarray, pt_j: np.ndarray, delta_nn: float) -> float:
    if pt_j.shape[0] == 0:
        return 0.0
    diff = pt_i[:, None, :] - pt_j[None, :, :]
    dmin = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    return float(np.count_nonzero(dmin <= delta_nn)) / pt_i.shape[0]


def nnratio_hits_bruteforce(pt_i: np.ndarray, pt_j: np.ndarray, delta_nn: float) -> np.ndarray:
    """Per-point indicator of having a neighbor within delta_nn."""
    if pt_j.shape[0] == 0:
        return np.zeros(pt_i.shape[0], dtype=bool)
    diff = pt_i[:, None, :] - pt_j[None, :, :]
    dmin = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    return dmin <= delta_nn


def dbscan_bruteforce(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Reference DBSCAN: full O(n^2) neighborhood matrix, seed scan in index
    order, BFS growth through core points."""
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    diff = points[:, None, :] - points[None, :, :]
    neighbor = np.sqrt((diff ** 2).sum(-1)) <= eps
    core = neighbor.sum(axis=1) >= min_pts
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = [seed]
        while queue:
            current = queue.pop(0)
            for nb in np.flatnonzero(neighbor[current]):
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(int(nb))
        cluster += 1
    return labels


def voxel_centroids_naive(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Dict-hashed voxel centroids, ordered by voxel key."""
    cells: dict[tuple, list] = {}
    for p in points:
        key = tuple(int(v) for v in np.floor(p / voxel_size))
        cells.setdefault(key, []).append(p)
    return np.array([np.mean(cells[key], axis=0) for key in sorted(cells)])


def decode_mask_bitmap(width: int, height: int, runs) -> set[int]:
    """Expand RLE runs into a pixel index set by literal enumeration."""
    pixels, cursor, foreground = set(), 0, False
    for run in runs:
        if foreground:
            pixels.update(range(cursor, cursor + run))
        cursor += run
        foreground = not foreground
    assert cursor == width * height
    return pixels


def occupied_cells_naive(points: np.ndarray, origin, cell_size: float,
                         z_band) -> set[tuple[int, int]]:
    occupied = set()
    for x, y, z in points:
        if z_band[0] <= z <= z_band[1]:
            col = int(np.floor((x - origin[0]) / cell_size))
            row = int(np.floor((y - origin[1]) / cell_size))
            occupied.add((row, col))
    return occupied


def inflate_bruteforce(cells: np.ndarray, occupied_value: int, free_value: int,
                       cell_size: float, radius: float) -> set[tuple[int, int]]:
    """All-pairs distance check: free cells within radius of any occupied cell."""
    occupied = np.argwhere(cells == occupied_value)
    inflated = set()
    for row in range(cells.shape[0]):
        for col in range(cells.shape[1]):
            if cells[row, col] != free_value or occupied.size == 0:
                continue
            dist = np.hypot(occupied[:, 0] - row, occupied[:, 1] - col) * cell_size
            if dist.min() <= radius:
                inflated.add((row, col))
    return inflated


def reachable_floodfill(passable: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """8-connected component of the start cell via scipy labeling."""
    structure = np.ones((3, 3), dtype=bool)
    components, _ = ndimage.label(passable, structure=structure)
    return components == components[start]


def closest_cell_scan(cell_mask: np.ndarray, origin, cell_size: float,
                      target) -> tuple[int, int]:
    """Full-grid scan for the closest marked cell, (row, col) lexicographic ties."""
    best = None
    best_d2 = None
    for row in range(cell_mask.shape[0]):
        for col in range(cell_mask.shape[1]):
            if not cell_mask[row, col]:
                continue
            cx = origin[0] + (col + 0.5) * cell_size
            cy = origin[1] + (row + 0.5) * cell_size
            d2 = (cx - target[0]) ** 2 + (cy - target[1]) ** 2
            if best_d2 is None or d2 < best_d2:
                best, best_d2 = (row, col), d2
    assert best is not None
    return best
