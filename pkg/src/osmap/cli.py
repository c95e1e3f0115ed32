"""Command-line surface: build, query, eval, export, inspect.

Configuration is a flat key=value text file plus repeatable --set KEY=VALUE
flags; precedence is flag > file > built-in default. Every artifact embeds
the effective config and the SHA-256 of its inputs, and contains nothing
run-dependent, so identical inputs reproduce identical bytes.

Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import OsmapError, SchemaError
from .frames import iter_frames
from .mapping import InstanceMap, MergeConfig, export_map, load_map
from .nav import NavConfig, Query, answer, build_grid, export_grid
from .synth import SceneParams, evaluate_instance_recovery, generate_scene, make_episodes, render_frames
from . import synth

_BENCH_SCENES = "benchmark_scenes_v1.json"
_BENCH_EPISODES = "benchmark_episodes_v1.json"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration for one command invocation."""

    merge: MergeConfig = field(default_factory=MergeConfig)
    nav: NavConfig = field(default_factory=NavConfig)
    success_threshold: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        flat = dict(self.merge.to_dict())
        flat.update(self.nav.to_dict())
        flat["success_threshold"] = self.success_threshold
        flat["seed"] = self.seed
        return flat


def _parse_labels(text: str) -> frozenset[str]:
    return frozenset(part.strip() for part in text.split(",") if part.strip())


# key -> (parser, config section); sections are reassembled in _build_run_config.
_CONFIG_KEYS: dict[str, tuple] = {
    "delta_nn": (float, "merge"),
    "tau_geo": (float, "merge"),
    "tau_sem": (float, "merge"),
    "tau_refine": (float, "merge"),
    "voxel_size": (float, "merge"),
    "dbscan_eps": (float, "merge"),
    "dbscan_min_pts": (int, "merge"),
    "min_points": (int, "merge"),
    "min_detections": (int, "merge"),
    "background_labels": (_parse_labels, "merge"),
    "cell_size": (float, "nav"),
    "z_min": (float, "nav"),
    "z_max": (float, "nav"),
    "robot_radius": (float, "nav"),
    "grid_margin": (float, "nav"),
    "success_threshold": (float, "top"),
    "seed": (int, "top"),
}


def _parse_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise SchemaError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_run_config(config_file: str | None, overrides: list[str]) -> RunConfig:
    """Assemble the effective config: defaults, then file, then --set flags."""
    raw: dict[str, str] = {}
    if config_file:
        raw.update(_parse_config_file(Path(config_file)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    sections: dict[str, dict] = {"merge": {}, "nav": {}, "top": {}}
    for key, value in raw.items():
        if key not in _CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r} "
                             f"(known: {', '.join(sorted(_CONFIG_KEYS))})")
        parser, section = _CONFIG_KEYS[key]
        try:
            sections[section][key] = parser(value)
        except ValueError as exc:
            raise SchemaError(f"config key {key}: cannot parse {value!r}: {exc}") from exc
    top = sections["top"]
    return RunConfig(
        merge=MergeConfig(**sections["merge"]),
        nav=NavConfig(**sections["nav"]),
        success_threshold=top.get("success_threshold", 1.0),
        seed=top.get("seed", 0),
    )


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_build(args) -> int:
    config = load_run_config(args.config, args.set or [])
    frames_path = Path(args.frames)
    if not frames_path.is_file():
        raise SchemaError(f"frames file not found: {frames_path}")
    input_hash = _sha256_file(frames_path)
    instance_map = InstanceMap(config=config.merge)
    log_lines = [f"# config {json.dumps(config.to_dict(), sort_keys=True)}",
                 f"# input {frames_path.name} sha256 {input_hash}"]
    for _, frame in iter_frames(frames_path):
        stats = instance_map.update(frame)
        log_lines.append(
            f"frame {stats.frame_id}: candidates={stats.candidates} "
            f"merged={stats.merged} added={stats.added} nodes={stats.node_count}")
    instance_map.refine()
    log_lines.append(f"refine: nodes={len(instance_map.nodes)}")
    instance_map.finalize()
    log_lines.append(f"finalize: nodes={len(instance_map.nodes)}")
    out_dir = Path(args.output)
    meta = {"command": "build", "input_name": frames_path.name,
            "input_sha256": input_hash, "run_config": config.to_dict()}
    export_map(instance_map, out_dir, meta=meta)
    (out_dir / "build.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    if not instance_map.nodes:
        print("warning: final map has no nodes", file=sys.stderr)
    print(f"built {len(instance_map.nodes)} nodes from "
          f"{instance_map.frames_processed} frames into {out_dir}")
    return 0


def _parse_query_payload(raw: str, source: str) -> Query:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"query {source} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or "embedding" not in obj:
        raise SchemaError(f"query {source} must be an object with an 'embedding' field")
    embedding = obj["embedding"]
    if not isinstance(embedding, list) or not embedding:
        raise SchemaError("query embedding must be a non-empty list of numbers")
    rank = obj.get("instance_rank", 1)
    if not isinstance(rank, int) or isinstance(rank, bool) or rank < 1:
        raise SchemaError("instance_rank must be a positive integer")
    text = obj.get("text", "")
    if not isinstance(text, str):
        raise SchemaError("query text must be a string")
    return Query(text=text, embedding=np.asarray(embedding, dtype=np.float64),
                 instance_rank=rank)


def cmd_query(args) -> int:
    config = load_run_config(args.config, args.set or [])
    instance_map = load_map(args.mapdir)
    if args.query == "-":
        payload = sys.stdin.read()
        query = _parse_query_payload(payload, "stdin")
    else:
        query_path = Path(args.query)
        if not query_path.is_file():
            raise SchemaError(f"query file not found: {query_path}")
        query = _parse_query_payload(query_path.read_text(encoding="utf-8"), str(query_path))
    if args.robot is not None:
        robot_xy = (args.robot[0], args.robot[1])
    else:
        base = build_grid(instance_map, config.nav.cell_size,
                          (config.nav.z_min, config.nav.z_max),
                          margin=config.nav.grid_margin)
        robot_xy = base.cell_center(0, 0)
    result = answer(instance_map, query, robot_xy, config.nav)
    response = {
        "goal": {"x": result.goal.x, "y": result.goal.y,
                 "row": result.goal.row, "col": result.goal.col,
                 "node_id": result.goal.node_id},
        "matches": [{"node_id": m.node_id, "score": m.score, "rank": m.rank}
                    for m in result.matches],
        "robot": [robot_xy[0], robot_xy[1]],
        "config": config.to_dict(),
    }
    rendered = json.dumps(response, sort_keys=True, indent=2)
    if args.output:
        Path(args.output).write_text(rendered + "\n", encoding="utf-8")
    else:
        print(rendered)
    if args.emit_grid:
        export_grid(result.grid, args.emit_grid, meta={"config": config.to_dict()})
    return 0


def _load_suite_json(path_arg: str | None, bundled_name: str) -> tuple[str, str]:
    """Return (name, raw text) for a suite file or the bundled default."""
    if path_arg:
        path = Path(path_arg)
        if not path.is_file():
            raise SchemaError(f"spec file not found: {path}")
        return path.name, path.read_text(encoding="utf-8")
    return bundled_name, resources.files("osmap.data").joinpath(bundled_name).read_text("utf-8")


def cmd_eval(args) -> int:
    config = load_run_config(args.config, args.set or [])
    scenes_name, scenes_raw = _load_suite_json(args.scenes, _BENCH_SCENES)
    episodes_name, episodes_raw = _load_suite_json(args.episodes, _BENCH_EPISODES)
    try:
        scenes_spec = json.loads(scenes_raw)
        episodes_spec = json.loads(episodes_raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"spec file is not valid JSON: {exc}") from exc
    if "scenes" not in scenes_spec or not isinstance(scenes_spec["scenes"], list):
        raise SchemaError("scenes spec must contain a 'scenes' list")
    recipe = episodes_spec if isinstance(episodes_spec, dict) else {}
    per_scene = int(recipe.get("per_scene", 25))
    episode_seed = int(recipe.get("seed", config.seed))
    threshold = float(recipe.get("threshold", config.success_threshold))
    # A suite may pin nav/merge fields so its results stay reproducible
    # independently of the local config defaults.
    nav_config = NavConfig(**{**config.nav.to_dict(), **recipe.get("nav", {})})
    merge_config = MergeConfig.from_dict({**config.merge.to_dict(), **recipe.get("merge", {})})
    scene_blocks = []
    total = successes = 0
    for entry in scenes_spec["scenes"]:
        if "seed" not in entry:
            raise SchemaError("every scene entry needs a 'seed'")
        params = SceneParams.from_dict(entry)
        scene = generate_scene(params, int(entry["seed"]))
        frames = render_frames(scene)
        instance_map = InstanceMap(config=merge_config)
        for frame in frames:
            instance_map.update(frame)
        instance_map.refine()
        instance_map.finalize()
        episodes = make_episodes(
            scene, per_scene, seed=episode_seed, threshold=threshold,
            instance_fraction=float(recipe.get("instance_fraction", 0.6)),
            query_noise=float(recipe.get("query_noise", 0.05)),
            query_floor=float(recipe.get("query_floor", 0.98)))
        report = synth.evaluate_success(episodes, instance_map, nav_config)
        block = {
            "seed": int(entry["seed"]),
            "n_objects": params.n_objects,
            "node_count": len(instance_map.nodes),
            "report": report,
        }
        if args.recovery:
            block["recovery"] = evaluate_instance_recovery(scene, instance_map).to_dict()
        scene_blocks.append(block)
        total += report["episode_count"]
        successes += report["success_count"]
    effective = dict(merge_config.to_dict())
    effective.update(nav_config.to_dict())
    effective.update({"success_threshold": threshold, "seed": episode_seed})
    overall = {
        "suite": {"scenes_file": scenes_name, "episodes_file": episodes_name,
                  "scenes_sha256": hashlib.sha256(scenes_raw.encode()).hexdigest(),
                  "episodes_sha256": hashlib.sha256(episodes_raw.encode()).hexdigest()},
        "config": effective,
        "episode_count": total,
        "success_count": successes,
        "success_rate": (successes / total) if total else 0.0,
        "scenes": scene_blocks,
    }
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", overall)
    lines = [f"{'scene seed':>10}  {'objects':>7}  {'episodes':>8}  {'success':>7}  {'rate':>6}"]
    for block in scene_blocks:
        rate = block["report"]["success_rate"]
        lines.append(f"{block['seed']:>10}  {block['n_objects']:>7}  "
                     f"{block['report']['episode_count']:>8}  "
                     f"{block['report']['success_count']:>7}  {rate:>6.2f}")
    lines.append(f"{'total':>10}  {'':>7}  {total:>8}  {successes:>7}  "
                 f"{overall['success_rate']:>6.2f}")
    summary = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_export(args) -> int:
    instance_map = load_map(args.mapdir)
    manifest_path = Path(args.mapdir) / "manifest.json"
    meta = json.loads(manifest_path.read_text(encoding="utf-8")).get("meta", {})
    export_map(instance_map, args.output, meta=meta)
    print(f"exported {len(instance_map.nodes)} nodes to {args.output}")
    return 0


def cmd_inspect(args) -> int:
    instance_map = load_map(args.mapdir)
    print(f"map {args.mapdir}: {len(instance_map.nodes)} nodes, "
          f"{instance_map.frames_processed} frames processed")
    for node_id in sorted(instance_map.nodes):
        node = instance_map.nodes[node_id]
        mins = ", ".join(f"{v:.3f}" for v in node.bbox.min_corner)
        maxs = ", ".join(f"{v:.3f}" for v in node.bbox.max_corner)
        print(f"  node {node_id}: label={node.dominant_label()} "
              f"points={node.point_count} detections={node.num_detections} "
              f"bbox=[{mins}] .. [{maxs}]")
    return 0


# ---------------------------------------------------------------- wiring


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osmap",
                     description="Open-set 3D instance mapping and goal synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p_build = sub.add_parser("build", parents=[common],
                             help="build a map directory from a frame-record file")
    p_build.add_argument("frames", help="JSON-lines frame-record file")
    p_build.add_argument("-o", "--output", required=True, help="map output directory")
    p_build.set_defaults(func=cmd_build)

    p_query = sub.add_parser("query", parents=[common],
                             help="answer an embedding query against a map")
    p_query.add_argument("mapdir", help="map directory from 'build'")
    p_query.add_argument("--query", required=True,
                         help="query JSON file, or - for stdin")
    p_query.add_argument("--robot", nargs=2, type=float, metavar=("X", "Y"),
                         help="robot world position (default: grid corner)")
    p_query.add_argument("-o", "--output", help="write the response JSON here")
    p_query.add_argument("--emit-grid", metavar="STEM",
                         help="also write <STEM>.pgm, <STEM>_reachable.pgm, <STEM>.json")
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="run the synthetic benchmark suite")
    p_eval.add_argument("--scenes", help="scenes spec JSON (default: bundled)")
    p_eval.add_argument("--episodes", help="episodes spec JSON (default: bundled)")
    p_eval.add_argument("-o", "--output", required=True, help="report output directory")
    p_eval.add_argument("--recovery", action="store_true",
                        help="include instance-recovery counts per scene")
    p_eval.set_defaults(func=cmd_eval)

    p_export = sub.add_parser("export", help="re-export a map directory")
    p_export.add_argument("mapdir")
    p_export.add_argument("-o", "--output", required=True)
    p_export.set_defaults(func=cmd_export)

    p_inspect = sub.add_parser("inspect", help="print a map manifest summary")
    p_inspect.add_argument("mapdir")
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OsmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
