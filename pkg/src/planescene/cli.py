"""Command-line interface.

Subcommands mirror the pipeline stages; ``run`` chains them.  Single-stage
commands operate on a workspace directory and write into ``<out>/stage/``
so each step is re-runnable from its on-disk inputs.

Exit codes: 0 success, 2 input/config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, pipeline, report
from .errors import DependencyError, InputError, PlaneSceneError
from .metrics import eval_reconstruction
from .plane_depth import build_plane_aware_depth, render_plane_set
from .supervision import best_view_per_plane, build_supervision_map
from .synth import raycast_view
from .view_select import select_novel_views
from .visibility import build_grid, load_grid, render_visibility, save_grid

logger = logging.getLogger(__name__)


def _load_workspace_config(args) -> tuple[pipeline.PipelineConfig,
                                          pipeline.Workspace]:
    if args.config:
        config = pipeline.load_config(args.config)
    else:
        candidate = Path(args.out or "workspace") / "config.json"
        if candidate.exists():
            config = pipeline.PipelineConfig.from_dict(io.load_json(candidate))
        else:
            config = pipeline.PipelineConfig()
    if args.out:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "loops", None) is not None:
        config.n_loops = args.loops
    config.validate()
    return config, pipeline.Workspace(config.out_dir)


def _stage_inputs(ws: pipeline.Workspace):
    views = ws.load_views()
    if not views:
        raise InputError("workspace has no views")
    return views


def cmd_synth(args) -> int:
    config, ws = _load_workspace_config(args)
    if config.synth is None:
        raise InputError("synth requires a config with a [synth] section")
    pipeline.synthesize_views(ws, config)
    print(f"synthesized {len(ws.state()['views'])} views in {ws.root}")
    return 0


def cmd_extract_planes(args) -> int:
    config, ws = _load_workspace_config(args)
    views = _stage_inputs(ws)
    masks = pipeline.compute_masks(views, config)
    for record, view_masks in zip(views, masks):
        ws.write_masks(ws.stage_dir / "masks", record.view_id, view_masks)
    print(f"extracted {sum(len(m) for m in masks)} plane masks "
          f"across {len(views)} views")
    return 0


def cmd_fit_planes(args) -> int:
    config, ws = _load_workspace_config(args)
    views = _stage_inputs(ws)
    masks_dir = ws.stage_dir / "masks"
    if not masks_dir.exists():
        raise DependencyError("run extract-planes first")
    masks = [ws.load_masks(masks_dir, r.view_id) for r in views]
    planes, _ = pipeline.fit_global_planes(views, masks, config)
    ws.write_planes(ws.stage_dir / "planes", planes)
    print(f"fitted {len(planes)} global planes")
    return 0


def _stage_geometry(config, ws):
    views = _stage_inputs(ws)
    masks_dir = ws.stage_dir / "masks"
    planes_path = ws.stage_dir / "planes.json"
    if not masks_dir.exists() or not planes_path.exists():
        raise DependencyError("run extract-planes and fit-planes first")
    masks = [ws.load_masks(masks_dir, r.view_id) for r in views]
    planes = ws.load_planes(ws.stage_dir)
    by_member = {}
    for plane in planes:
        for member in plane.members:
            by_member[member] = plane
    return views, masks, planes, by_member


def cmd_plane_depth(args) -> int:
    config, ws = _load_workspace_config(args)
    views, masks, planes, by_member = _stage_geometry(config, ws)
    for record, view_masks in zip(views, masks):
        pairs = [(m, by_member[(record.view_id, j)])
                 for j, m in enumerate(view_masks)
                 if (record.view_id, j) in by_member]
        pad = build_plane_aware_depth(record.camera, pairs, record.mono)
        ws.write_plane_aware(ws.stage_dir / "depth", record.view_id, pad)
    print(f"wrote plane-aware depth for {len(views)} views")
    return 0


def _stage_depths(ws, views):
    depth_dir = ws.stage_dir / "depth"
    if not depth_dir.exists():
        raise DependencyError("run plane-depth first")
    return {r.view_id: ws.load_plane_aware(depth_dir, r.view_id)
            for r in views}


def cmd_build_grid(args) -> int:
    config, ws = _load_workspace_config(args)
    views = _stage_inputs(ws)
    pads = _stage_depths(ws, views)
    usable = [r for r in views if pads[r.view_id].depth.validity.any()]
    grid = build_grid([pads[r.view_id].depth for r in usable],
                      [r.camera for r in usable],
                      voxel_size=pipeline.auto_voxel_size(views, config),
                      depth_margin_rel=config.depth_margin_rel,
                      max_voxels=config.max_voxels)
    save_grid(ws.stage_dir / "grid.bin", grid)
    print(f"grid {grid.dims} with {grid.n_visible} visible voxels")
    return 0


def cmd_select_views(args) -> int:
    config, ws = _load_workspace_config(args)
    views, masks, planes, _ = _stage_geometry(config, ws)
    grid_path = ws.stage_dir / "grid.bin"
    if not grid_path.exists():
        raise DependencyError("run build-grid first")
    grid = load_grid(grid_path)
    scene = ws.scene()
    if scene is not None:
        occluder = lambda camera: raycast_view(scene, camera).depth
    else:
        occluder = lambda camera: render_plane_set(planes, camera)[0]
    proposals = select_novel_views(
        planes, grid, views[0].camera, per_plane=config.per_plane,
        occluder_depth_fn=occluder, stride=config.selection_stride,
        min_plane_clearance=config.min_plane_clearance,
        depth_tol_rel=config.depth_tol_rel,
        dedup_angle_deg=config.dedup_angle_deg)
    pipeline._write_proposals(ws.stage_dir / "proposals.json", proposals)
    print(f"selected {len(proposals)} novel view proposals")
    return 0


def cmd_assign_supervision(args) -> int:
    config, ws = _load_workspace_config(args)
    views, masks, planes, _ = _stage_geometry(config, ws)
    pads = _stage_depths(ws, views)
    cameras = {r.view_id: r.camera for r in views}
    depths = {v: pads[v].depth for v in pads}
    winners = best_view_per_plane(planes, cameras, depths,
                                  depth_tol_rel=config.depth_tol_rel)
    out = ws.stage_dir / "supervision"
    out.mkdir(parents=True, exist_ok=True)
    order = [r.view_id for r in views]
    for record in views:
        smap = build_supervision_map(record.view_id, pads[record.view_id],
                                     record.camera, winners, cameras, depths,
                                     order, depth_tol_rel=config.depth_tol_rel)
        io.write_png16(out / f"view_{record.view_id:03d}_source.png",
                       smap.source_view + 1)
        io.write_png16(out / f"view_{record.view_id:03d}_kind.png",
                       smap.region_kind)
    print(f"wrote supervision maps for {len(views)} views "
          f"({len(winners)} planes with source views)")
    return 0


def cmd_render_visibility(args) -> int:
    grid = load_grid(args.grid)
    cameras = io.load_cameras_json(args.camera)
    if len(cameras) != 1:
        raise InputError("--camera must contain exactly one camera")
    depth = io.read_depth_pfm(args.depth)
    mask = render_visibility(grid, cameras[0], depth, q_samples=args.q)
    io.write_mask_png(args.out_mask, mask.values)
    if args.figure:
        report.save_mask_figure(args.figure, mask.values,
                                title="visibility mask")
    print(f"visible fraction {mask.values.mean():.4f}")
    return 0


def cmd_run(args) -> int:
    config, ws = _load_workspace_config(args)
    pipeline.run_init(config)
    for _ in range(config.n_loops):
        pipeline.run_loop(config, ws)
    fused, metrics = pipeline.export_scene(config, ws)
    print(f"pipeline complete: {len(fused)} fused points, "
          f"{config.n_loops} loops")
    if metrics:
        print(f"chamfer: {metrics['chamfer']:.4f} m | "
              f"f-score: {metrics['fscore']:.2f} | "
              f"normal consistency: {metrics['normal_consistency']:.2f}")
    return 0


def cmd_eval(args) -> int:
    pred = io.read_ply(args.pred)
    gt = io.read_ply(args.gt)
    metrics = eval_reconstruction(pred, gt, fscore_thresh=args.threshold)
    out_dir = Path(args.report_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_metrics_csv(out_dir / "metrics.csv", [metrics.as_dict()])
    report.save_cloud_figure(out_dir / "pred_cloud.png", pred,
                             title="predicted cloud")
    report.save_cloud_figure(out_dir / "gt_cloud.png", gt,
                             title="ground-truth cloud")
    for key, value in metrics.as_dict().items():
        print(f"{key}: {'' if value is None else round(value, 6)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planescene",
        description="Plane-aware scene geometry pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, loops=False):
        p.add_argument("--config", help="pipeline config (JSON or TOML)")
        p.add_argument("--out", help="workspace directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("-v", "--verbose", action="store_true")
        if loops:
            p.add_argument("--loops", type=int, help="loop count override")

    for name, fn, loops in [
        ("synth", cmd_synth, False),
        ("extract-planes", cmd_extract_planes, False),
        ("fit-planes", cmd_fit_planes, False),
        ("plane-depth", cmd_plane_depth, False),
        ("build-grid", cmd_build_grid, False),
        ("select-views", cmd_select_views, False),
        ("assign-supervision", cmd_assign_supervision, False),
        ("run", cmd_run, True),
    ]:
        p = sub.add_parser(name)
        add_common(p, loops=loops)
        p.set_defaults(func=fn)

    p = sub.add_parser("render-visibility")
    p.add_argument("--grid", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--q", type=int, default=32)
    p.add_argument("--figure")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_render_visibility)

    p = sub.add_parser("eval")
    p.add_argument("--pred", required=True, help="predicted cloud (PLY)")
    p.add_argument("--gt", required=True, help="ground-truth cloud (PLY)")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--report-dir", default="report")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PlaneSceneError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
