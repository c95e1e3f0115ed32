"""Open-set 3D semantic instance mapping from posed RGB-D frame records.

The package ingests frame records carrying depth, poses, masks and
per-detection embeddings, fuses them into an instance map of object nodes,
answers embedding queries against that map, and synthesizes reachable
navigation goals on an occupancy grid. A synthetic harness generates
ground-truth scenes for end-to-end evaluation.
"""

from .errors import OsmapError, ParameterError, QueryError, SchemaError, StateError
from .frames import (
    DEFAULT_BACKGROUND_LABELS,
    CameraIntrinsics,
    Detection,
    DepthImage,
    FrameRecord,
    Pose,
    SequenceHeader,
    filter_background,
    parse_frame_record,
    parse_header,
    read_frames,
    write_frames,
)
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
from .mapping import (
    InstanceMap,
    MergeConfig,
    SceneNode,
    build_map,
    detection_to_candidate,
    export_map,
    load_map,
    match_score,
    merge_into,
)
from .masks import InstanceMask, decode_mask, encode_mask
from .nav import (
    GoalPoint,
    NavConfig,
    OccupancyGrid,
    Query,
    RankedMatch,
    answer,
    build_grid,
    export_grid,
    goal_for,
    inflate,
    mark_reachable,
    rank_instances,
    select_instance,
)
from .synth import (
    EpisodeSpec,
    SceneParams,
    SyntheticScene,
    evaluate_instance_recovery,
    evaluate_success,
    generate_scene,
    make_episodes,
    render_frames,
)

__version__ = "0.1.0"
