from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from osmap.errors import ParameterError
from osmap.frames import Pose
from osmap.geometry import back_project, transform
from osmap.mapping import MergeConfig, build_map
from osmap.masks import decode_mask
from osmap.nav import NavConfig
from osmap.synth import (
    CameraParams,
    EpisodeSpec,
    SceneObject,
    SceneParams,
    SyntheticScene,
    evaluate_instance_recovery,
    evaluate_success,
    generate_scene,
    look_at,
    make_episodes,
    make_intrinsics,
    render_depth,
    render_frames,
)

MERGE = MergeConfig(min_points=30, min_detections=2)
FAST_CAMERA = CameraParams(n_poses=8)
IDENTITY = Pose(translation=np.zeros(3), rotation=np.array([1.0, 0.0, 0.0, 0.0]))


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(SceneParams(n_objects=5, camera=FAST_CAMERA), seed=31)


@pytest.fixture(scope="module")
def small_frames(small_scene):
    return render_frames(small_scene)


@pytest.fixture(scope="module")
def small_map(small_frames):
    instance_map, _ = build_map(small_frames, MERGE)
    return instance_map


def single_object_scene(obj, d_clip=16, d_dino=12):
    params = SceneParams(n_objects=0, d_clip=d_clip, d_dino=d_dino,
                         include_floor=False, camera=FAST_CAMERA)
    proto = np.zeros(d_clip)
    proto[0] = 1.0
    dproto = np.zeros(d_dino)
    dproto[0] = 1.0
    return SyntheticScene(params=params, seed=0, objects=[obj], background_objects=[],
                          class_clip_prototypes={obj.class_name: proto},
                          class_dino_prototypes={obj.class_name: dproto})


def make_object(object_id=0, class_name="ball", shape="sphere", center=(0, 0, 2.0),
                yaw=0.0, extent=0.6, d_clip=16, d_dino=12):
    proto = np.zeros(d_clip)
    proto[min(object_id, d_clip - 1)] = 1.0
    dproto = np.zeros(d_dino)
    dproto[min(object_id, d_dino - 1)] = 1.0
    return SceneObject(object_id=object_id, class_name=class_name, shape=shape,
                       center=np.asarray(center, dtype=float), yaw=yaw,
                       extent=np.full(3, extent) if np.isscalar(extent)
                       else np.asarray(extent, dtype=float),
                       clip_prototype=proto, dino_prototype=dproto)


# ------------------------------------------------------------ generate_scene

def test_scene_is_seed_deterministic():
    a = generate_scene(SceneParams(n_objects=6), seed=7)
    b = generate_scene(SceneParams(n_objects=6), seed=7)
    assert len(a.objects) == len(b.objects)
    for oa, ob in zip(a.objects, b.objects):
        assert oa.class_name == ob.class_name and oa.shape == ob.shape
        np.testing.assert_array_equal(oa.center, ob.center)
        np.testing.assert_array_equal(oa.clip_prototype, ob.clip_prototype)


def test_different_seeds_give_different_scenes():
    a = generate_scene(SceneParams(n_objects=6), seed=7)
    b = generate_scene(SceneParams(n_objects=6), seed=8)
    assert any(not np.array_equal(oa.center, ob.center)
               for oa, ob in zip(a.objects, b.objects))


def test_zero_objects_gives_empty_scene():
    scene = generate_scene(SceneParams(n_objects=0), seed=1)
    assert scene.objects == []


def test_impossible_packing_raises():
    params = SceneParams(n_objects=50, room_size=(2.0, 2.0), extent_range=(0.6, 0.9))
    with pytest.raises(ParameterError, match="room|place|fit"):
        generate_scene(params, seed=1)


def test_prototype_margins_hold(small_scene):
    params = small_scene.params
    names = list(small_scene.class_clip_prototypes)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            cos = float(np.dot(small_scene.class_clip_prototypes[a],
                               small_scene.class_clip_prototypes[b]))
            assert abs(cos) <= params.inter_class_margin + 1e-9
    for obj in small_scene.objects:
        cos = float(np.dot(obj.clip_prototype,
                           small_scene.class_clip_prototypes[obj.class_name]))
        assert cos >= params.intra_class_floor - 1e-9


def test_objects_respect_separation(small_scene):
    objs = small_scene.objects
    for i, a in enumerate(objs):
        for b in objs[i + 1:]:
            gap = np.linalg.norm(a.center - b.center) \
                - np.linalg.norm(a.extent) / 2 - np.linalg.norm(b.extent) / 2
            assert gap >= small_scene.params.min_separation - 1e-9


# ------------------------------------------------------------------ rendering

def test_camera_facing_away_sees_nothing(small_scene):
    away = look_at(np.array([12.0, 0.0, 1.5]), np.array([30.0, 0.0, 1.5]))
    frames = render_frames(small_scene, poses=[away])
    assert frames[0].detections == []


def test_sphere_mask_matches_analytic_disc_area():
    radius, distance = 0.3, 2.0
    scene = single_object_scene(make_object(shape="sphere", center=(0, 0, distance),
                                            extent=2 * radius))
    frames = render_frames(scene, poses=[IDENTITY])
    assert len(frames[0].detections) == 1
    detection = frames[0].detections[0]
    intr = frames[0].intrinsics
    pixel_radius = intr.fx * radius / np.sqrt(distance ** 2 - radius ** 2)
    expected_area = np.pi * pixel_radius ** 2
    area = decode_mask(detection.mask).size
    assert abs(area - expected_area) / expected_area < 0.05


def test_zbuffer_occlusion_matches_per_object_renders():
    near = make_object(object_id=0, class_name="near", shape="box",
                       center=(0, 0, 2.0), extent=0.5)
    far = make_object(object_id=1, class_name="far", shape="box",
                      center=(0, 0, 4.0), extent=1.4)
    both = single_object_scene(near)
    both = dataclasses.replace(both, objects=[near, far])
    intr = make_intrinsics(FAST_CAMERA.image_width, FAST_CAMERA.image_height,
                           FAST_CAMERA.fov_deg)
    _, owner = render_depth(both, IDENTITY, intr)
    t_near = render_depth(single_object_scene(near), IDENTITY, intr)[0].astype(float)
    t_far = render_depth(single_object_scene(far), IDENTITY, intr)[0].astype(float)
    t_near[t_near == 0] = np.inf
    t_far[t_far == 0] = np.inf
    expected = np.where(np.isinf(np.minimum(t_near, t_far)), -1,
                        np.where(t_near <= t_far, 0, 1))
    np.testing.assert_array_equal(owner, expected)
    # the near box hides part of the far box
    assert np.count_nonzero(owner == 1) < np.count_nonzero(np.isfinite(t_far))
    assert np.count_nonzero(owner == 0) == np.count_nonzero(np.isfinite(t_near))


def _surface_distance(obj, points):
    if obj.shape == "sphere":
        return np.abs(np.linalg.norm(points - obj.center, axis=1) - obj.extent[0] / 2)
    cos_y, sin_y = np.cos(obj.yaw), np.sin(obj.yaw)
    world_to_obj = np.array([[cos_y, sin_y, 0], [-sin_y, cos_y, 0], [0, 0, 1]])
    local = np.abs((points - obj.center) @ world_to_obj.T) - obj.extent / 2
    return np.abs(local.max(axis=1))


def test_rendered_masks_backproject_onto_surfaces(small_scene, small_frames):
    everything = {obj.class_name: obj
                  for obj in small_scene.objects + small_scene.background_objects}
    checked = 0
    for frame in small_frames[:3]:
        for detection in frame.detections:
            obj = everything[detection.label]
            cloud = transform(
                back_project(frame.depth, frame.intrinsics, decode_mask(detection.mask)),
                frame.pose)
            assert _surface_distance(obj, cloud).max() <= 0.025  # within one voxel
            checked += 1
    assert checked > 0


def test_rendering_is_deterministic(small_scene, small_frames):
    again = render_frames(small_scene)
    assert len(again) == len(small_frames)
    for fa, fb in zip(small_frames, again):
        np.testing.assert_array_equal(fa.depth.values, fb.depth.values)
        assert len(fa.detections) == len(fb.detections)
        for da, db in zip(fa.detections, fb.detections):
            assert da.mask.runs == db.mask.runs
            np.testing.assert_array_equal(da.clip_embedding, db.clip_embedding)


def test_floor_is_rendered_but_filtered_by_mapping(small_scene, small_frames, small_map):
    floor_frames = [f for f in small_frames
                    if any(d.label == "floor" for d in f.detections)]
    assert floor_frames  # the floor is visible somewhere
    labels = {node.dominant_label() for node in small_map.nodes.values()}
    assert "floor" not in labels


# ------------------------------------------------------------------- episodes

def test_episodes_are_deterministic(small_scene):
    a = make_episodes(small_scene, 10, seed=5)
    b = make_episodes(small_scene, 10, seed=5)
    assert len(a) == len(b) == 10
    for ea, eb in zip(a, b):
        assert ea.text == eb.text and ea.gt_object_id == eb.gt_object_id
        np.testing.assert_array_equal(ea.embedding, eb.embedding)


def test_episode_threshold_validation():
    with pytest.raises(ParameterError):
        EpisodeSpec(text="x", embedding=np.ones(4), instance_rank=1,
                    gt_object_id=0, gt_position=(0, 0), threshold=0.0)


def test_evaluate_success_records_rank_failures(small_scene, small_map):
    episodes = make_episodes(small_scene, 4, seed=5)
    broken = dataclasses.replace(episodes[0], instance_rank=99)
    report = evaluate_success([broken], small_map, NavConfig(robot_radius=0.18))
    assert report["success_count"] == 0
    assert "reason" in report["episodes"][0]
    assert "99" in report["episodes"][0]["reason"]


def test_evaluate_success_order_invariant(small_scene, small_map):
    episodes = make_episodes(small_scene, 12, seed=5)
    nav = NavConfig(robot_radius=0.18)
    forward = evaluate_success(episodes, small_map, nav)
    backward = evaluate_success(list(reversed(episodes)), small_map, nav)
    assert forward["success_rate"] == backward["success_rate"]
    assert forward["success_count"] == backward["success_count"]


def test_evaluate_success_happy_path(small_scene, small_map):
    episodes = make_episodes(small_scene, 10, seed=5)
    report = evaluate_success(episodes, small_map, NavConfig(robot_radius=0.18))
    assert report["success_rate"] >= 0.9
    for entry in report["episodes"]:
        if entry["success"]:
            assert entry["distance"] <= entry["threshold"]


def test_class_query_ranks_whole_class_above_others(small_scene, small_map):
    from osmap.nav import Query, rank_instances
    rng = np.random.default_rng(17)
    by_label = {}
    for node in small_map.nodes.values():
        by_label.setdefault(node.dominant_label(), set()).add(node.node_id)
    multi = [name for name, ids in by_label.items() if ids]
    for class_name in multi:
        from osmap.synth import perturb_unit
        query = perturb_unit(small_scene.class_clip_prototypes[class_name],
                             0.05, rng, 0.98)
        matches = rank_instances(small_map, Query(text=class_name, embedding=query))
        k = len(by_label[class_name])
        top_ids = {m.node_id for m in matches[:k]}
        assert top_ids == by_label[class_name]


# ------------------------------------------------------------------- recovery

def test_recovery_perfect_map(small_scene, small_map):
    report = evaluate_instance_recovery(small_scene, small_map)
    assert report.true_positives == len(small_scene.objects)
    assert report.false_positives == 0
    assert report.misses == 0


def test_recovery_empty_map(small_scene):
    empty, _ = build_map([], MERGE)
    report = evaluate_instance_recovery(small_scene, empty)
    assert (report.true_positives, report.false_positives, report.misses) \
        == (0, 0, len(small_scene.objects))


def test_recovery_miss_plus_false_positive_shape(small_scene, small_map):
    # Drop one true node and plant a spurious one: (N-1, 1, 1).
    damaged = dataclasses.replace(small_map)
    damaged.nodes = dict(small_map.nodes)
    dropped = sorted(damaged.nodes)[0]
    ghost = dataclasses.replace(
        damaged.nodes[dropped],
        node_id=999,
        cloud=damaged.nodes[dropped].cloud + np.array([50.0, 50.0, 0.0]))
    del damaged.nodes[dropped]
    damaged.nodes[999] = ghost
    report = evaluate_instance_recovery(small_scene, damaged)
    assert report.true_positives == len(small_scene.objects) - 1
    assert report.false_positives == 1
    assert report.misses == 1
