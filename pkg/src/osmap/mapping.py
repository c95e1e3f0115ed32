"""Incremental 3D instance map: merge-or-add association, refinement, export.

Each object instance is a SceneNode holding a downsampled world-frame point
cloud and fused embeddings. New detections become candidate nodes; a
candidate merges into an existing node only when both the volumetric-overlap
gate and the semantic-similarity gate pass, otherwise it is added as a new
node. A final refinement pass fuses nodes that still share spatial occupancy.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import OsmapError, ParameterError, SchemaError, StateError
from .frames import DEFAULT_BACKGROUND_LABELS, FrameRecord
from .geometry import (
    Aabb,
    aabb_of,
    back_project,
    dbscan,
    largest_cluster,
    nn_overlap_ratio,
    semantic_similarity,
    transform,
    voxel_downsample,
)
from .masks import decode_mask

MANIFEST_NAME = "manifest.json"
SCENE_PLY_NAME = "scene.ply"
MAP_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MergeConfig:
    """Thresholds and sizes steering candidate construction and association."""

    delta_nn: float = 0.05
    tau_geo: float = 0.25
    tau_sem: float = 0.75
    tau_refine: float = 0.25
    voxel_size: float = 0.025
    dbscan_eps: float = 0.075
    dbscan_min_pts: int = 10
    min_points: int = 50
    min_detections: int = 2
    background_labels: frozenset[str] = DEFAULT_BACKGROUND_LABELS

    def __post_init__(self):
        for name in ("tau_geo", "tau_sem", "tau_refine"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ParameterError(f"{name} must lie in [0,1], got {value}")
        for name in ("delta_nn", "voxel_size", "dbscan_eps"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("dbscan_min_pts", "min_points", "min_detections"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1")

    def to_dict(self) -> dict:
        return {
            "delta_nn": self.delta_nn,
            "tau_geo": self.tau_geo,
            "tau_sem": self.tau_sem,
            "tau_refine": self.tau_refine,
            "voxel_size": self.voxel_size,
            "dbscan_eps": self.dbscan_eps,
            "dbscan_min_pts": self.dbscan_min_pts,
            "min_points": self.min_points,
            "min_detections": self.min_detections,
            "background_labels": sorted(self.background_labels),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MergeConfig":
        kwargs = dict(data)
        if "background_labels" in kwargs:
            kwargs["background_labels"] = frozenset(kwargs["background_labels"])
        return cls(**kwargs)


@dataclass
class SceneNode:
    """One fused object instance; node_id is -1 until the map adopts it."""

    node_id: int
    cloud: np.ndarray
    clip_embedding: np.ndarray
    dino_embedding: np.ndarray
    bbox: Aabb
    num_detections: int
    source_frames: list[tuple[int, int]]
    label_histogram: dict[str, int]

    @property
    def point_count(self) -> int:
        return int(self.cloud.shape[0])

    def centroid(self) -> np.ndarray:
        return self.cloud.mean(axis=0)

    def dominant_label(self) -> str:
        """Most frequent source label; count ties break alphabetically."""
        return min(self.label_histogram.items(), key=lambda kv: (-kv[1], kv[0]))[0]


@dataclass(frozen=True)
class MatchScore:
    geo: float
    sem: float
    merged_decision: bool


@dataclass(frozen=True)
class FrameStats:
    """Per-frame bookkeeping for the build log."""

    frame_id: int
    candidates: int
    merged: int
    added: int
    node_count: int


def detection_to_candidate(frame: FrameRecord, det_index: int,
                           config: MergeConfig) -> SceneNode | None:
    """Build a candidate node from one detection, or None when it yields nothing.

    A detection produces no candidate when its label is background, too few of
    its mask pixels carry valid depth, or density clustering rejects every
    point as noise.
    """
    if not (0 <= det_index < len(frame.detections)):
        raise ParameterError(f"detection index {det_index} out of range")
    det = frame.detections[det_index]
    blocked = {label.casefold() for label in config.background_labels}
    if det.label.casefold() in blocked:
        return None
    pixels = decode_mask(det.mask)
    cam_cloud = back_project(frame.depth, frame.intrinsics, pixels)
    if cam_cloud.shape[0] < config.dbscan_min_pts:
        return None
    world_cloud = transform(cam_cloud, frame.pose)
    downsampled = voxel_downsample(world_cloud, config.voxel_size)
    labels = dbscan(downsampled, config.dbscan_eps, config.dbscan_min_pts)
    main = largest_cluster(downsampled, labels)
    if main.shape[0] == 0:
        return None
    return SceneNode(
        node_id=-1,
        cloud=main,
        clip_embedding=det.clip_embedding.copy(),
        dino_embedding=det.dino_embedding.copy(),
        bbox=aabb_of(main),
        num_detections=1,
        source_frames=[(frame.frame_id, det_index)],
        label_histogram={det.label: 1},
    )


def match_score(candidate: SceneNode, node: SceneNode, config: MergeConfig) -> MatchScore:
    """Symmetrized overlap plus semantic similarity, gated conjunctively."""
    if candidate.dino_embedding.shape != node.dino_embedding.shape:
        raise ParameterError("dino embedding dimensions differ")
    geo = max(
        nn_overlap_ratio(candidate.cloud, node.cloud, config.delta_nn),
        nn_overlap_ratio(node.cloud, candidate.cloud, config.delta_nn),
    )
    sem = semantic_similarity(candidate.dino_embedding, node.dino_embedding)
    return MatchScore(geo=geo, sem=sem,
                      merged_decision=geo >= config.tau_geo and sem >= config.tau_sem)


def _fuse_embeddings(a: np.ndarray, b: np.ndarray, weight_a: int, weight_b: int) -> np.ndarray:
    blended = weight_a * a + weight_b * b
    norm = float(np.linalg.norm(blended))
    if norm < 1e-12:
        # Degenerate antiparallel blend; keep the better-supported side.
        return (a if weight_a >= weight_b else b).copy()
    return blended / norm


def merge_into(node: SceneNode, candidate: SceneNode, config: MergeConfig) -> SceneNode:
    """Fuse *candidate* into *node*, keeping node's id.

    Clouds are unioned and re-downsampled; embeddings are averaged weighted
    by each side's detection count, so well-observed nodes dominate.
    """
    cloud = voxel_downsample(np.vstack([node.cloud, candidate.cloud]), config.voxel_size)
    weight_n, weight_c = node.num_detections, candidate.num_detections
    histogram = dict(node.label_histogram)
    for label, count in candidate.label_histogram.items():
        histogram[label] = histogram.get(label, 0) + count
    return SceneNode(
        node_id=node.node_id,
        cloud=cloud,
        clip_embedding=_fuse_embeddings(node.clip_embedding, candidate.clip_embedding,
                                        weight_n, weight_c),
        dino_embedding=_fuse_embeddings(node.dino_embedding, candidate.dino_embedding,
                                        weight_n, weight_c),
        bbox=aabb_of(cloud),
        num_detections=weight_n + weight_c,
        source_frames=node.source_frames + candidate.source_frames,
        label_histogram=histogram,
    )


@dataclass
class InstanceMap:
    """The evolving map; a single-writer state machine over SceneNodes."""

    config: MergeConfig = field(default_factory=MergeConfig)
    nodes: dict[int, SceneNode] = field(default_factory=dict)
    next_id: int = 0
    frames_processed: int = 0

    def initialize(self, frame: FrameRecord) -> FrameStats:
        """Seed the map from its reference frame; the map must be empty."""
        if self.nodes or self.frames_processed:
            raise StateError("initialize requires an empty map")
        return self.update(frame)

    def update(self, frame: FrameRecord) -> FrameStats:
        """Merge-or-add every surviving candidate of *frame*, in detection order.

        Each candidate is scored against every node currently in the map
        (including nodes touched earlier in this same frame); among nodes
        passing both gates the highest geo+sem wins, lowest id on ties.
        """
        candidates = merged = added = 0
        for det_index in range(len(frame.detections)):
            candidate = detection_to_candidate(frame, det_index, self.config)
            if candidate is None:
                continue
            candidates += 1
            best_id: int | None = None
            best_total = -np.inf
            for node_id in sorted(self.nodes):
                score = match_score(candidate, self.nodes[node_id], self.config)
                if score.merged_decision and score.geo + score.sem > best_total:
                    best_id = node_id
                    best_total = score.geo + score.sem
            if best_id is None:
                candidate.node_id = self.next_id
                self.nodes[self.next_id] = candidate
                self.next_id += 1
                added += 1
            else:
                self.nodes[best_id] = merge_into(self.nodes[best_id], candidate, self.config)
                merged += 1
        self.frames_processed += 1
        return FrameStats(frame_id=frame.frame_id, candidates=candidates,
                          merged=merged, added=added, node_count=len(self.nodes))

    def _mergeable_pairs(self) -> list[tuple[int, int]]:
        """Node-id pairs whose overlap and semantics both clear the refine gates."""
        ids = sorted(self.nodes)
        pairs = []
        for i, id_a in enumerate(ids):
            node_a = self.nodes[id_a]
            for id_b in ids[i + 1:]:
                node_b = self.nodes[id_b]
                geo = max(
                    nn_overlap_ratio(node_a.cloud, node_b.cloud, self.config.delta_nn),
                    nn_overlap_ratio(node_b.cloud, node_a.cloud, self.config.delta_nn),
                )
                if geo < self.config.tau_refine:
                    continue
                sem = semantic_similarity(node_a.dino_embedding, node_b.dino_embedding)
                if sem >= self.config.tau_sem:
                    pairs.append((id_a, id_b))
        return pairs

    def refine(self) -> "InstanceMap":
        """Fuse nodes that still share spatial occupancy, until none remain.

        Pairs passing tau_refine and tau_sem are grouped with union-find and
        each group is fused in ascending node-id order. Rounds repeat until a
        fixpoint, so no mergeable pair survives and a second refine is a no-op.
        """
        while True:
            pairs = self._mergeable_pairs()
            if not pairs:
                return self
            parent = {nid: nid for nid in self.nodes}

            def find(nid: int) -> int:
                while parent[nid] != nid:
                    parent[nid] = parent[parent[nid]]
                    nid = parent[nid]
                return nid

            for id_a, id_b in pairs:
                root_a, root_b = find(id_a), find(id_b)
                if root_a != root_b:
                    parent[max(root_a, root_b)] = min(root_a, root_b)
            groups: dict[int, list[int]] = {}
            for nid in sorted(self.nodes):
                groups.setdefault(find(nid), []).append(nid)
            for root in sorted(groups):
                members = groups[root]  # ascending ids; root is the smallest
                if len(members) == 1:
                    continue
                fused = self.nodes[members[0]]
                for member in members[1:]:
                    fused = merge_into(fused, self.nodes[member], self.config)
                    del self.nodes[member]
                self.nodes[root] = fused

    def finalize(self) -> "InstanceMap":
        """Drop nodes below the minimum point or detection support."""
        self.nodes = {
            nid: node for nid, node in self.nodes.items()
            if node.point_count >= self.config.min_points
            and node.num_detections >= self.config.min_detections
        }
        return self

    def all_points(self) -> np.ndarray:
        """All node cloud points stacked, nodes in ascending id order."""
        clouds = [self.nodes[nid].cloud for nid in sorted(self.nodes)]
        if not clouds:
            return np.empty((0, 3), dtype=np.float64)
        return np.vstack(clouds)


def build_map(frames: Iterable[FrameRecord],
              config: MergeConfig | None = None) -> tuple[InstanceMap, list[FrameStats]]:
    """Run the full pipeline over a frame sequence: update all, refine, finalize."""
    instance_map = InstanceMap(config=config or MergeConfig())
    stats = [instance_map.update(frame) for frame in frames]
    instance_map.refine()
    instance_map.finalize()
    return instance_map, stats


def node_color(node_id: int) -> tuple[int, int, int]:
    """Deterministic distinct-ish RGB for a node, via golden-ratio hues."""
    hue = (node_id * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray,
              comments: Iterable[str] = ()) -> None:
    """Write a binary little-endian PLY with xyz float32 and rgb uint8."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    if colors.ndim == 1:
        colors = np.broadcast_to(colors, (points.shape[0], 3))
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header += [
        f"element vertex {points.shape[0]}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header", "",
    ]
    record = np.empty(points.shape[0], dtype=_PLY_DTYPE)
    record["x"], record["y"], record["z"] = points.T.astype(np.float32)
    record["red"], record["green"], record["blue"] = colors.T
    with Path(path).open("wb") as handle:
        handle.write("\n".join(header).encode("ascii"))
        handle.write(record.tobytes())


_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])

_PLY_EXPECTED_PROPERTIES = [
    "property float x", "property float y", "property float z",
    "property uchar red", "property uchar green", "property uchar blue",
]


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a PLY written by write_ply; returns (points float64, colors uint8)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise SchemaError(f"not a PLY file: {path}")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    count = None
    properties = []
    for line in lines[1:]:
        if line.startswith("comment"):
            continue
        if line.startswith("format"):
            if line != "format binary_little_endian 1.0":
                raise SchemaError(f"unsupported PLY format in {path}")
        elif line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("element"):
            raise SchemaError(f"unsupported PLY element in {path}")
        elif line.startswith("property"):
            properties.append(line)
    if count is None or properties != _PLY_EXPECTED_PROPERTIES:
        raise SchemaError(f"unsupported PLY layout in {path}")
    body = raw[end + len(b"end_header\n"):]
    record = np.frombuffer(body, dtype=_PLY_DTYPE, count=count)
    points = np.column_stack([record["x"], record["y"], record["z"]]).astype(np.float64)
    colors = np.column_stack([record["red"], record["green"], record["blue"]])
    return points, colors


def _node_ply_name(node_id: int) -> str:
    return f"node_{node_id:06d}.ply"


def export_map(instance_map: InstanceMap, directory: str | Path,
               meta: Mapping | None = None) -> dict:
    """Write per-node PLYs, a combined scene PLY, and the JSON manifest.

    *meta* (for example the effective run config and input hash) is embedded
    verbatim in the manifest and as comments in the PLY headers. Returns the
    manifest dict. Output bytes are a pure function of map content and meta.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OsmapError(f"cannot create map directory {directory}: {exc}") from exc
    meta_dict = dict(meta) if meta else {}
    comments = [f"config {json.dumps(instance_map.config.to_dict(), sort_keys=True)}"]
    if meta_dict:
        comments.append(f"meta {json.dumps(meta_dict, sort_keys=True)}")
    nodes_json = []
    scene_points = []
    scene_colors = []
    for node_id in sorted(instance_map.nodes):
        node = instance_map.nodes[node_id]
        color = node_color(node_id)
        ply_name = _node_ply_name(node_id)
        write_ply(directory / ply_name, node.cloud, np.array(color, dtype=np.uint8),
                  comments=comments)
        scene_points.append(node.cloud)
        scene_colors.append(np.tile(np.array(color, dtype=np.uint8), (node.point_count, 1)))
        nodes_json.append({
            "id": node_id,
            "ply": ply_name,
            "color": list(color),
            "bbox": {"min": [float(v) for v in node.bbox.min_corner],
                     "max": [float(v) for v in node.bbox.max_corner]},
            "point_count": node.point_count,
            "num_detections": node.num_detections,
            "label_histogram": dict(sorted(node.label_histogram.items())),
            "source_frames": [[int(f), int(d)] for f, d in node.source_frames],
            "clip_embedding": [float(v) for v in node.clip_embedding],
            "dino_embedding": [float(v) for v in node.dino_embedding],
        })
    all_points = np.vstack(scene_points) if scene_points else np.empty((0, 3))
    all_colors = np.vstack(scene_colors) if scene_colors else np.empty((0, 3), dtype=np.uint8)
    write_ply(directory / SCENE_PLY_NAME, all_points, all_colors, comments=comments)
    manifest = {
        "schema_version": MAP_SCHEMA_VERSION,
        "config": instance_map.config.to_dict(),
        "meta": meta_dict,
        "frames_processed": instance_map.frames_processed,
        "next_id": instance_map.next_id,
        "nodes": nodes_json,
    }
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                                 encoding="utf-8")
    except OSError as exc:
        raise OsmapError(f"cannot write manifest {manifest_path}: {exc}") from exc
    return manifest


def load_map(directory: str | Path) -> InstanceMap:
    """Reconstruct an InstanceMap from an exported directory.

    Bounding boxes are recomputed from the (float32-serialized) clouds so the
    bbox invariant holds exactly on the loaded map.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise SchemaError(f"map not found: no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("schema_version") != MAP_SCHEMA_VERSION:
        raise SchemaError(f"unsupported map schema_version {manifest.get('schema_version')}")
    config = MergeConfig.from_dict(manifest["config"])
    nodes: dict[int, SceneNode] = {}
    for entry in manifest["nodes"]:
        cloud, _ = read_ply(directory / entry["ply"])
        if cloud.shape[0] != entry["point_count"]:
            raise SchemaError(f"node {entry['id']}: PLY point count does not match manifest")
        nodes[int(entry["id"])] = SceneNode(
            node_id=int(entry["id"]),
            cloud=cloud,
            clip_embedding=np.asarray(entry["clip_embedding"], dtype=np.float64),
            dino_embedding=np.asarray(entry["dino_embedding"], dtype=np.float64),
            bbox=aabb_of(cloud),
            num_detections=int(entry["num_detections"]),
            source_frames=[(int(f), int(d)) for f, d in entry["source_frames"]],
            label_histogram={str(k): int(v) for k, v in entry["label_histogram"].items()},
        )
    return InstanceMap(config=config, nodes=nodes,
                       next_id=int(manifest["next_id"]),
                       frames_processed=int(manifest["frames_processed"]))
