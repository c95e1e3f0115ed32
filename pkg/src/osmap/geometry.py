"""Pure spatial kernels over (N, 3) float point arrays.

Point clouds are plain numpy arrays of shape (N, 3) in meters. Everything
here is deterministic and exact: nearest-neighbor queries go through a k-d
tree, never an approximate index, because the overlap ratios feed threshold
decisions downstream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError
from .frames import CameraIntrinsics, DepthImage, Pose


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box in the world frame."""

    min_corner: np.ndarray
    max_corner: np.ndarray


def empty_cloud() -> np.ndarray:
    return np.empty((0, 3), dtype=np.float64)


def as_cloud(points) -> np.ndarray:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.size == 0:
        return empty_cloud()
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ParameterError(f"expected an (N, 3) point array, got shape {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise ParameterError("point cloud contains non-finite coordinates")
    return cloud


def back_project(depth: DepthImage, intrinsics: CameraIntrinsics,
                 pixels: np.ndarray) -> np.ndarray:
    """Lift row-major pixel indices into the camera frame via the pinhole model.

    Depths are millimeters and are converted to meters; pixels with zero
    (invalid) depth are skipped. Output rows follow ascending pixel index.
    """
    pixels = np.unique(np.asarray(pixels, dtype=np.int64))
    if pixels.size == 0:
        return empty_cloud()
    if pixels[0] < 0 or pixels[-1] >= depth.width * depth.height:
        raise ParameterError("pixel index outside image bounds")
    d_mm = depth.values.reshape(-1)[pixels].astype(np.float64)
    valid = d_mm > 0
    pixels = pixels[valid]
    if pixels.size == 0:
        return empty_cloud()
    d = d_mm[valid] / 1000.0
    u = (pixels % depth.width).astype(np.float64)
    v = (pixels // depth.width).astype(np.float64)
    x = (u - intrinsics.cx) * d / intrinsics.fx
    y = (v - intrinsics.cy) * d / intrinsics.fy
    return np.column_stack([x, y, d])


def quaternion_to_matrix(quat: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized first."""
    q = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ParameterError("zero quaternion has no rotation")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(matrix: np.ndarray) -> np.ndarray:
    """Unit (w, x, y, z) quaternion of a rotation matrix (largest-pivot branch)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ParameterError("rotation matrix must be 3x3")
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * np.sqrt(1.0 + trace)
        quat = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                         (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        quat = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                         (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        quat = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                         0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        quat = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                         (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat / np.linalg.norm(quat)


def transform(cloud: np.ndarray, pose: Pose) -> np.ndarray:
    """Apply the camera-to-world rigid transform: rotate, then translate."""
    cloud = as_cloud(cloud)
    if cloud.shape[0] == 0:
        return cloud
    rotation = quaternion_to_matrix(pose.rotation)
    return cloud @ rotation.T + pose.translation


def voxel_downsample(cloud: np.ndarray, voxel_size: float) -> np.ndarray:
    """Replace the points of each occupied voxel with their centroid.

    Voxels are the half-open cubes [k*s, (k+1)*s); output rows are ordered by
    voxel key, which makes the operation deterministic and idempotent.
    """
    if voxel_size <= 0:
        raise ParameterError("voxel_size must be positive")
    cloud = as_cloud(cloud)
    if cloud.shape[0] == 0:
        return cloud
    keys = np.floor(cloud / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3), dtype=np.float64)
    np.add.at(sums, inverse, cloud)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    return sums / counts[:, None]


def dbscan(cloud: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering with noise labels.

    A point is core when its closed eps-ball (counting itself) holds at least
    *min_pts* points; clusters are grown breadth-first from core points in
    ascending index order, so labels are contiguous from 0 and deterministic.
    Unreached non-core points get label -1.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if min_pts < 1:
        raise ParameterError("min_pts must be at least 1")
    cloud = as_cloud(cloud)
    n = cloud.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(cloud)
    neighborhoods = tree.query_ball_point(cloud, r=eps)
    core = np.fromiter((len(nb) >= min_pts for nb in neighborhoods), dtype=bool, count=n)
    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            current = queue.popleft()
            for neighbor in neighborhoods[current]:
                if labels[neighbor] == -1:
                    labels[neighbor] = cluster
                    if core[neighbor]:
                        queue.append(neighbor)
        cluster += 1
    return labels


def largest_cluster(cloud: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Points of the highest-cardinality cluster; ties go to the lowest id.

    All-noise input yields an empty cloud.
    """
    cloud = as_cloud(cloud)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != cloud.shape[0]:
        raise ParameterError("labels do not match the cloud")
    clustered = labels[labels >= 0]
    if clustered.size == 0:
        return empty_cloud()
    counts = np.bincount(clustered)
    best = int(np.argmax(counts))  # argmax returns the first maximum
    return cloud[labels == best]


def nn_overlap_ratio(pt_i: np.ndarray, pt_j: np.ndarray, delta_nn: float) -> float:
    """Fraction of pt_i whose nearest neighbor in pt_j lies within delta_nn.

    Directional; an empty pt_j overlaps nothing and scores 0.
    """
    if delta_nn < 0:
        raise ParameterError("delta_nn must be non-negative")
    pt_i = as_cloud(pt_i)
    if pt_i.shape[0] == 0:
        raise ParameterError("pt_i must be non-empty")
    pt_j = as_cloud(pt_j)
    if pt_j.shape[0] == 0:
        return 0.0
    distances, _ = cKDTree(pt_j).query(pt_i, k=1)
    return float(np.count_nonzero(distances <= delta_nn)) / pt_i.shape[0]


def semantic_similarity(f_i: np.ndarray, f_j: np.ndarray) -> float:
    """Cosine similarity of two feature vectors mapped affinely onto [0, 1]."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape or f_i.ndim != 1:
        raise ParameterError(f"feature dimension mismatch: {f_i.shape} vs {f_j.shape}")
    norm_i = np.linalg.norm(f_i)
    norm_j = np.linalg.norm(f_j)
    if norm_i == 0 or norm_j == 0:
        raise ParameterError("zero feature vector has no direction")
    cosine = float(np.dot(f_i, f_j) / (norm_i * norm_j))
    return min(1.0, max(0.0, 0.5 * (1.0 + cosine)))


def aabb_of(cloud: np.ndarray) -> Aabb:
    """Componentwise min/max corners of a non-empty cloud."""
    cloud = as_cloud(cloud)
    if cloud.shape[0] == 0:
        raise ParameterError("bounding box of an empty cloud is undefined")
    return Aabb(min_corner=cloud.min(axis=0), max_corner=cloud.max(axis=0))
