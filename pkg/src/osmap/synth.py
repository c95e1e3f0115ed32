"""Synthetic scenes with analytic RGB-D rendering and pipeline evaluation.

Scenes place box/sphere primitives in an open room. Each class gets a pair
of mutually orthogonal unit prototype embeddings; objects carry per-instance
perturbations of their class prototypes, and rendered detections perturb the
object prototypes again. Margins are enforced at generation time, which makes
instance discrimination and retrieval behavior provable instead of
model-dependent.

Rendering casts one ray per pixel through a z-buffer over all primitives, so
depth images, masks and occlusions are exact up to millimeter quantization.
Everything is deterministic given the seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError, QueryError
from .frames import CameraIntrinsics, DepthImage, Detection, FrameRecord, Pose, SequenceHeader
from .geometry import matrix_to_quaternion, quaternion_to_matrix
from .mapping import InstanceMap
from .masks import encode_mask
from .nav import NavConfig, Query, answer, build_grid, closest_reachable_cell, inflate, mark_reachable

_RAY_EPS = 1e-6
# Background primitives (the floor) get ids in this range; they never enter
# the ground-truth object list.
_BACKGROUND_ID_BASE = 9000


@dataclass(frozen=True)
class CameraParams:
    n_poses: int = 14
    orbit_radius: float = 4.2
    height: float = 1.5
    target_height: float = 0.35
    image_width: int = 320
    image_height: int = 240
    fov_deg: float = 90.0


@dataclass(frozen=True)
class SceneParams:
    n_objects: int = 6
    room_size: tuple[float, float] = (6.0, 6.0)
    classes: tuple[str, ...] = ("chair", "table", "plant", "monitor", "sofa", "crate")
    d_clip: int = 64
    d_dino: int = 48
    extent_range: tuple[float, float] = (0.3, 0.7)
    min_separation: float = 0.6
    inter_class_margin: float = 0.3
    intra_class_floor: float = 0.9
    instance_spread: float = 0.25
    include_floor: bool = True
    camera: CameraParams = field(default_factory=CameraParams)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneParams":
        kwargs = dict(data)
        kwargs.pop("seed", None)
        if "camera" in kwargs:
            kwargs["camera"] = CameraParams(**kwargs["camera"])
        for key in ("room_size", "classes", "extent_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    class_name: str
    shape: str  # "box" or "sphere"
    center: np.ndarray
    yaw: float
    extent: np.ndarray  # full size per axis; spheres use their diameter
    clip_prototype: np.ndarray
    dino_prototype: np.ndarray


@dataclass(frozen=True)
class SyntheticScene:
    params: SceneParams
    seed: int
    objects: list[SceneObject]
    background_objects: list[SceneObject]
    class_clip_prototypes: dict[str, np.ndarray]
    class_dino_prototypes: dict[str, np.ndarray]
    floor_z: float = 0.0

    def header(self) -> SequenceHeader:
        return SequenceHeader(d_clip=self.params.d_clip, d_dino=self.params.d_dino)


@dataclass(frozen=True)
class EpisodeSpec:
    """One scripted query with its ground truth and success threshold."""

    text: str
    embedding: np.ndarray
    instance_rank: int
    gt_object_id: int
    gt_position: tuple[float, float]
    threshold: float

    def __post_init__(self):
        if self.threshold <= 0:
            raise ParameterError("episode threshold must be positive")
        if self.instance_rank < 1:
            raise ParameterError("instance_rank must be at least 1")


def perturb_unit(vec: np.ndarray, scale: float, rng: np.random.Generator,
                 min_cosine: float) -> np.ndarray:
    """Unit vector near *vec*: add Gaussian noise, renormalize, keep the
    cosine to the original at or above *min_cosine* (noise shrinks on retry)."""
    vec = np.asarray(vec, dtype=np.float64)
    for _ in range(32):
        noisy = vec + scale * rng.standard_normal(vec.size)
        norm = np.linalg.norm(noisy)
        if norm > 1e-12:
            noisy /= norm
            if float(np.dot(noisy, vec)) >= min_cosine:
                return noisy
        scale *= 0.5
    return vec.copy()


def _orthonormal_prototypes(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if n > dim:
        raise ParameterError(f"cannot build {n} orthogonal prototypes in dimension {dim}")
    gaussian = rng.standard_normal((dim, n))
    q, r = np.linalg.qr(gaussian)
    return (q * np.sign(np.diag(r))).T  # rows are unit and pairwise orthogonal


def generate_scene(params: SceneParams, seed: int) -> SyntheticScene:
    """Place non-overlapping primitives with margin-controlled embeddings.

    Deterministic for a given seed. Object centers keep their bounding
    spheres at least min_separation apart; an infeasible request fails after
    bounded retries.
    """
    rng = np.random.default_rng(seed)
    n_classes = len(params.classes)
    if n_classes == 0:
        raise ParameterError("at least one class is required")
    clip_protos = _orthonormal_prototypes(n_classes, params.d_clip, rng)
    dino_protos = _orthonormal_prototypes(n_classes, params.d_dino, rng)
    class_clip = {name: clip_protos[i] for i, name in enumerate(params.classes)}
    class_dino = {name: dino_protos[i] for i, name in enumerate(params.classes)}

    half_x, half_y = params.room_size[0] / 2.0, params.room_size[1] / 2.0
    placed: list[tuple[np.ndarray, float]] = []  # (center, bounding radius)
    objects: list[SceneObject] = []
    for index in range(params.n_objects):
        class_name = params.classes[index % n_classes]
        shape = "box" if rng.random() < 0.5 else "sphere"
        if shape == "sphere":
            diameter = float(rng.uniform(*params.extent_range))
            extent = np.full(3, diameter)
        else:
            extent = rng.uniform(*params.extent_range, size=3)
        bound = float(np.linalg.norm(extent)) / 2.0
        span_x, span_y = half_x - bound, half_y - bound
        if span_x <= 0 or span_y <= 0:
            raise ParameterError(
                f"object {index} of extent {extent.round(2)} cannot fit in the room")
        center = None
        for _ in range(1000):
            candidate = np.array([rng.uniform(-span_x, span_x),
                                  rng.uniform(-span_y, span_y),
                                  extent[2] / 2.0])
            if all(np.linalg.norm(candidate - other) >= bound + other_bound + params.min_separation
                   for other, other_bound in placed):
                center = candidate
                break
        if center is None:
            raise ParameterError(
                f"could not place object {index + 1} of {params.n_objects} "
                f"after 1000 attempts; the room is too crowded")
        placed.append((center, bound))
        objects.append(SceneObject(
            object_id=index,
            class_name=class_name,
            shape=shape,
            center=center,
            yaw=float(rng.uniform(0.0, 2.0 * np.pi)) if shape == "box" else 0.0,
            extent=extent,
            clip_prototype=perturb_unit(class_clip[class_name], params.instance_spread,
                                        rng, params.intra_class_floor),
            dino_prototype=perturb_unit(class_dino[class_name], params.instance_spread,
                                        rng, params.intra_class_floor),
        ))

    background: list[SceneObject] = []
    if params.include_floor:
        thickness = 0.05
        background.append(SceneObject(
            object_id=_BACKGROUND_ID_BASE,
            class_name="floor",
            shape="box",
            center=np.array([0.0, 0.0, -thickness / 2.0]),
            yaw=0.0,
            extent=np.array([params.room_size[0], params.room_size[1], thickness]),
            clip_prototype=_unit(rng.standard_normal(params.d_clip)),
            dino_prototype=_unit(rng.standard_normal(params.d_dino)),
        ))
    return SyntheticScene(params=params, seed=seed, objects=objects,
                          background_objects=background,
                          class_clip_prototypes=class_clip,
                          class_dino_prototypes=class_dino)


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def make_intrinsics(width: int, height: int, fov_deg: float) -> CameraIntrinsics:
    focal = width / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    return CameraIntrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera pose at *eye* with +z toward *target* and image-y pointing down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ParameterError("camera eye and target coincide")
    forward /= norm
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-9:
        raise ParameterError("camera may not look straight along the world z axis")
    right /= right_norm
    down = np.cross(forward, right)
    rotation = np.column_stack([right, down, forward])
    return Pose(translation=eye, rotation=matrix_to_quaternion(rotation))


def orbit_poses(camera: CameraParams, center_xy: tuple[float, float] = (0.0, 0.0)) -> list[Pose]:
    """Evenly spaced ring of inward-looking camera poses."""
    target = np.array([center_xy[0], center_xy[1], camera.target_height])
    poses = []
    for k in range(camera.n_poses):
        angle = 2.0 * np.pi * k / camera.n_poses
        eye = np.array([center_xy[0] + camera.orbit_radius * np.cos(angle),
                        center_xy[1] + camera.orbit_radius * np.sin(angle),
                        camera.height])
        poses.append(look_at(eye, target))
    return poses


def _ray_grid(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions per pixel, z component 1, row-major (N, 3)."""
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    x = (uu - intrinsics.cx) / intrinsics.fx
    y = (vv - intrinsics.cy) / intrinsics.fy
    return np.column_stack([x.reshape(-1), y.reshape(-1), np.ones(x.size)])


def _intersect_sphere(origin: np.ndarray, dirs: np.ndarray,
                      center: np.ndarray, radius: float) -> np.ndarray:
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c0 = float(oc @ oc) - radius * radius
    disc = b * b - 4.0 * a * c0
    hit = disc >= 0.0
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - sqrt_disc) / (2.0 * a)
    t_far = (-b + sqrt_disc) / (2.0 * a)
    t = np.where(t_near > _RAY_EPS, t_near, np.where(t_far > _RAY_EPS, t_far, np.inf))
    return np.where(hit, t, np.inf)


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                   yaw: float, half_extent: np.ndarray) -> np.ndarray:
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)
    world_to_obj = np.array([[cos_y, sin_y, 0.0],
                             [-sin_y, cos_y, 0.0],
                             [0.0, 0.0, 1.0]])
    o = world_to_obj @ (origin - center)
    d = dirs @ world_to_obj.T
    parallel = np.abs(d) < 1e-12
    d_safe = np.where(parallel, 1.0, d)
    t1 = (-half_extent - o) / d_safe
    t2 = (half_extent - o) / d_safe
    inside = np.abs(o) <= half_extent
    entry = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    exit_ = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_min = entry.max(axis=1)
    t_max = exit_.min(axis=1)
    hit = (t_max >= t_min) & (t_max > _RAY_EPS)
    t = np.where(t_min > _RAY_EPS, t_min, t_max)
    return np.where(hit, t, np.inf)


def _intersect(obj: SceneObject, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    if obj.shape == "sphere":
        return _intersect_sphere(origin, dirs, obj.center, float(obj.extent[0]) / 2.0)
    return _intersect_box(origin, dirs, obj.center, obj.yaw, obj.extent / 2.0)


def render_depth(scene: SyntheticScene, pose: Pose,
                 intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer render: (depth_mm uint16 (H,W), owner int (H,W)).

    Owner holds the index into foreground+background objects, -1 where no
    primitive is hit; depth 0 means invalid (no hit or out of uint16 range).
    """
    rotation = quaternion_to_matrix(pose.rotation)
    dirs = _ray_grid(intrinsics) @ rotation.T
    origin = pose.translation
    everything = scene.objects + scene.background_objects
    t_buffer = np.full(dirs.shape[0], np.inf)
    owner = np.full(dirs.shape[0], -1, dtype=np.int64)
    for index, obj in enumerate(everything):
        t = _intersect(obj, origin, dirs)
        closer = t < t_buffer
        t_buffer[closer] = t[closer]
        owner[closer] = index
    depth_mm = np.where(np.isfinite(t_buffer), np.round(t_buffer * 1000.0), 0.0)
    out_of_range = (depth_mm < 1.0) | (depth_mm > 65535.0)
    depth_mm = np.where(out_of_range, 0.0, depth_mm).astype(np.uint16)
    owner = np.where(out_of_range, -1, owner)
    shape = (intrinsics.height, intrinsics.width)
    return depth_mm.reshape(shape), owner.reshape(shape)


def render_frames(scene: SyntheticScene, poses: Sequence[Pose] | None = None,
                  *, detection_noise: float = 0.03, detection_floor: float = 0.99,
                  min_mask_pixels: int = 40) -> list[FrameRecord]:
    """Render per-pose frame records with exact masks and perturbed embeddings.

    Every visible object (by at least *min_mask_pixels* pixels) yields one
    detection with confidence 1.0; embedding noise is seeded per
    (scene, frame, object), so rendering is reproducible end to end.
    """
    camera = scene.params.camera
    intrinsics = make_intrinsics(camera.image_width, camera.image_height, camera.fov_deg)
    if poses is None:
        poses = orbit_poses(camera)
    everything = scene.objects + scene.background_objects
    records = []
    for frame_id, pose in enumerate(poses):
        depth_mm, owner = render_depth(scene, pose, intrinsics)
        detections = []
        flat_owner = owner.reshape(-1)
        for index, obj in enumerate(everything):
            pixels = np.flatnonzero(flat_owner == index)
            if pixels.size < min_mask_pixels:
                continue
            cols = pixels % intrinsics.width
            rows = pixels // intrinsics.width
            rng = np.random.default_rng((scene.seed, frame_id, int(obj.object_id)))
            detections.append(Detection(
                label=obj.class_name,
                bbox=(float(cols.min()), float(rows.min()),
                      float(cols.max() + 1), float(rows.max() + 1)),
                confidence=1.0,
                mask=encode_mask(pixels, intrinsics.width, intrinsics.height),
                clip_embedding=perturb_unit(obj.clip_prototype, detection_noise,
                                            rng, detection_floor),
                dino_embedding=perturb_unit(obj.dino_prototype, detection_noise,
                                            rng, detection_floor),
            ))
        records.append(FrameRecord(
            frame_id=frame_id,
            intrinsics=intrinsics,
            pose=pose,
            depth=DepthImage(width=intrinsics.width, height=intrinsics.height,
                             values=depth_mm),
            detections=detections,
        ))
    return records


def make_episodes(scene: SyntheticScene, count: int, *, seed: int,
                  threshold: float = 1.0, instance_fraction: float = 0.6,
                  query_noise: float = 0.05, query_floor: float = 0.98) -> list[EpisodeSpec]:
    """Scripted query suite over a scene.

    Instance episodes query one object's own embedding at rank 1. Class-rank
    episodes query the class prototype at a sampled rank; their ground truth
    is the object at that rank when ranking all objects by cosine to the
    query, which is independent of the pipeline under test.
    """
    if not scene.objects:
        return []
    rng = np.random.default_rng((seed, scene.seed))
    episodes = []
    n_instance = round(count * instance_fraction)
    by_class: dict[str, list[SceneObject]] = {}
    for obj in scene.objects:
        by_class.setdefault(obj.class_name, []).append(obj)
    class_names = sorted(by_class)
    for k in range(count):
        if k < n_instance:
            obj = scene.objects[int(rng.integers(len(scene.objects)))]
            embedding = perturb_unit(obj.clip_prototype, query_noise, rng, query_floor)
            episodes.append(EpisodeSpec(
                text=f"the {obj.class_name} (object {obj.object_id})",
                embedding=embedding,
                instance_rank=1,
                gt_object_id=obj.object_id,
                gt_position=(float(obj.center[0]), float(obj.center[1])),
                threshold=threshold,
            ))
        else:
            class_name = class_names[int(rng.integers(len(class_names)))]
            members = by_class[class_name]
            rank = 1 + int(rng.integers(len(members)))
            embedding = perturb_unit(scene.class_clip_prototypes[class_name],
                                     query_noise, rng, query_floor)
            ranked = sorted(
                scene.objects,
                key=lambda o: (-float(np.dot(embedding, o.clip_prototype)), o.object_id))
            gt = ranked[rank - 1]
            episodes.append(EpisodeSpec(
                text=f"the {class_name} ranked {rank}",
                embedding=embedding,
                instance_rank=rank,
                gt_object_id=gt.object_id,
                gt_position=(float(gt.center[0]), float(gt.center[1])),
                threshold=threshold,
            ))
    return episodes


def evaluate_success(episodes: Sequence[EpisodeSpec], instance_map: InstanceMap,
                     nav: NavConfig, robot_xy: tuple[float, float] | None = None) -> dict:
    """Run every episode through the query pipeline and score it.

    An episode succeeds when the produced goal lies within its threshold of
    the ground-truth goal (the reachable cell closest to the true object
    position, computed with the same grid machinery). Failed queries are
    recorded per episode, never raised.
    """
    grid = inflate(build_grid(instance_map, nav.cell_size, (nav.z_min, nav.z_max),
                              margin=nav.grid_margin), nav.robot_radius)
    if robot_xy is None:
        robot_xy = grid.cell_center(0, 0)
    reachable_grid = mark_reachable(grid, robot_xy)
    results = []
    successes = 0
    for episode in episodes:
        entry: dict = {
            "text": episode.text,
            "instance_rank": episode.instance_rank,
            "gt_object_id": episode.gt_object_id,
            "threshold": episode.threshold,
        }
        try:
            gt_cell = closest_reachable_cell(reachable_grid, episode.gt_position)
            gt_goal = reachable_grid.cell_center(*gt_cell)
            result = answer(instance_map,
                            Query(text=episode.text, embedding=episode.embedding,
                                  instance_rank=episode.instance_rank),
                            robot_xy, nav)
            distance = float(np.hypot(result.goal.x - gt_goal[0], result.goal.y - gt_goal[1]))
            success = distance <= episode.threshold
            entry.update({
                "success": success,
                "goal": [result.goal.x, result.goal.y],
                "gt_goal": [gt_goal[0], gt_goal[1]],
                "distance": distance,
                "node_id": result.goal.node_id,
            })
        except QueryError as exc:
            success = False
            entry.update({"success": False, "reason": str(exc)})
        successes += int(success)
        results.append(entry)
    count = len(results)
    return {
        "episode_count": count,
        "success_count": successes,
        "success_rate": (successes / count) if count else 0.0,
        "robot_start": [robot_xy[0], robot_xy[1]],
        "episodes": results,
    }


@dataclass(frozen=True)
class RecoveryReport:
    true_positives: int
    false_positives: int
    misses: int
    matches: list[tuple[int, int, float]]  # (node_id, object_id, centroid distance)

    def to_dict(self) -> dict:
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "misses": self.misses,
            "matches": [[n, o, d] for n, o, d in self.matches],
        }


def evaluate_instance_recovery(scene: SyntheticScene,
                               instance_map: InstanceMap) -> RecoveryReport:
    """Greedily match map nodes to ground-truth objects.

    A node may match an object of the same class whose center lies within
    half the object's largest extent of the node centroid; matching is
    greedy by ascending distance. Unmatched nodes are false positives,
    unmatched objects are misses.
    """
    candidates = []
    for node_id in sorted(instance_map.nodes):
        node = instance_map.nodes[node_id]
        label = node.dominant_label()
        centroid = node.centroid()
        for obj in scene.objects:
            if obj.class_name != label:
                continue
            distance = float(np.linalg.norm(centroid - obj.center))
            if distance <= 0.5 * float(obj.extent.max()):
                candidates.append((distance, node_id, obj.object_id))
    candidates.sort()
    matched_nodes: set[int] = set()
    matched_objects: set[int] = set()
    matches = []
    for distance, node_id, object_id in candidates:
        if node_id in matched_nodes or object_id in matched_objects:
            continue
        matched_nodes.add(node_id)
        matched_objects.add(object_id)
        matches.append((node_id, object_id, distance))
    return RecoveryReport(
        true_positives=len(matches),
        false_positives=len(instance_map.nodes) - len(matches),
        misses=len(scene.objects) - len(matches),
        matches=matches,
    )
