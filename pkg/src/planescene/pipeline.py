"""End-to-end orchestration: initialization, geometry-guided loops, export.

The workspace directory is the only state.  Every stage can be re-run from
its on-disk inputs; re-running with the same config and seed reproduces
byte-identical artifacts.

Layout:
    <out>/config.json, state.json, scene.json (synthetic runs)
    <out>/views/view_XXX/{camera.json, color.png, depth.pfm, normal.pfm,
                          instance.png, mono.pfm}
    <out>/loop_XXX/{masks/, planes.json, planes/, depth/,
                    grid.bin, proposals.json, visibility/, supervision/}
    <out>/report/{fused.ply, metrics.csv, *.png}
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import io, report
from .core import (Camera, DepthMap, InstanceMaskMap, NormalMap, PointCloud,
                   backproject_depth)
from .errors import (DegenerateGeometryError, DependencyError, InputError,
                     PlaneSceneError)
from .metrics import eval_reconstruction
from .plane_depth import (SOURCE_ALIGNED_MONO, SOURCE_PLANE_BASE,
                          PlaneAwareDepth, build_plane_aware_depth,
                          render_plane_set)
from .planes import GlobalPlane, associate_points, fit_plane_ransac, merge_masks
from .segmentation import (PlaneMask2D, cluster_normals,
                           default_min_mask_pixels, extract_plane_masks)
from .supervision import best_view_per_plane, build_supervision_map
from .synth import (SceneSpec, Sphere, box_faces, box_room_faces, corrupt_mono,
                    make_camera, raycast_view, sample_surface_points,
                    scene_bounds, spec_from_dict, spec_to_dict)
from .view_select import (ViewProposal, elliptical_trajectory,
                          select_novel_views)
from .visibility import (VisibilityGrid, build_grid, load_grid,
                         render_visibility, sample_points_visibility,
                         save_grid)

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig", "SynthSceneConfig", "Workspace", "ViewRecord",
    "SceneGeometry", "InpainterAdapter", "StubInpainter", "load_config",
    "run_init", "run_loop", "export_scene", "compute_geometry",
]


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class SynthSceneConfig:
    """Synthetic scene generation parameters (optional config section).

    Cameras sit on an inner ring looking through the room center with an
    alternating up/down pitch so floor and ceiling are both observed at
    usable (non-grazing) angles from multiple views.
    """

    extents: tuple[float, float, float] = (4.0, 3.0, 5.0)
    n_views: int = 5
    width: int = 64
    height: int = 48
    fov_deg: float = 70.0
    camera_arc_deg: float = 360.0
    camera_pitch_frac: float = 0.30   # vertical offset as a fraction of height
    boxes: list = field(default_factory=list)    # [[cx,cy,cz,sx,sy,sz], ...]
    spheres: list = field(default_factory=list)  # [[cx,cy,cz,r], ...]
    mono_scale: float = 2.0
    mono_shift: float = 0.5
    mono_noise: float = 0.0


@dataclass
class PipelineConfig:
    """All tunables of the pipeline, one section per module."""

    out_dir: str = "workspace"
    input_dir: str | None = None
    seed: int = 0

    # segmentation
    k: int = 6
    min_mask_pixels: int | None = None      # None: 0.5% of the image area

    # merging / association
    overlap_thresh: float = 0.3
    normal_angle_deg: float = 15.0
    depth_tol_rel: float = 0.01
    backproject_stride: int = 2

    # RANSAC
    ransac_inlier_dist: float = 0.02
    ransac_iterations: int = 1000

    # visibility grid
    voxel_size: float | None = None         # None: max scene extent / 48
    q_samples: int = 32
    depth_margin_rel: float = 0.01
    max_voxels: int = 256 ** 3

    # view selection
    per_plane: int = 1
    selection_stride: int = 1
    min_plane_clearance: float = 0.2
    dedup_angle_deg: float = 5.0
    include_elliptical: bool = True         # ellipse poses on the first loop

    # loops
    n_loops: int = 3
    views_per_loop: int = 10

    # export / evaluation
    export_voxel: float = 0.05
    export_stride: int = 2
    fscore_thresh: float = 0.05
    gt_sample_spacing: float = 0.08

    synth: SynthSceneConfig | None = None

    def validate(self) -> None:
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (0 < self.overlap_thresh <= 1, "overlap_thresh in (0, 1]"),
            (0 < self.normal_angle_deg <= 90, "normal_angle_deg in (0, 90]"),
            (self.depth_tol_rel > 0, "depth_tol_rel must be positive"),
            (self.ransac_inlier_dist > 0, "ransac_inlier_dist positive"),
            (self.ransac_iterations >= 1, "ransac_iterations >= 1"),
            (self.q_samples >= 1, "q_samples >= 1"),
            (self.n_loops >= 0, "n_loops must be >= 0"),
            (self.views_per_loop >= 1, "views_per_loop >= 1"),
            (self.per_plane >= 1, "per_plane >= 1"),
            (self.backproject_stride >= 1, "backproject_stride >= 1"),
            (self.selection_stride >= 1, "selection_stride >= 1"),
            (self.export_voxel > 0, "export_voxel positive"),
            (self.export_stride >= 1, "export_stride >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise InputError(f"bad config: {message}")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        if self.synth is not None:
            data["synth"] = dataclasses.asdict(self.synth)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        synth = data.pop("synth", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        config = cls(**data)
        if synth is not None:
            synth_known = {f.name for f in dataclasses.fields(SynthSceneConfig)}
            bad = set(synth) - synth_known
            if bad:
                raise InputError(f"unknown synth config keys: {sorted(bad)}")
            config.synth = SynthSceneConfig(**{
                k: tuple(v) if k == "extents" else v for k, v in synth.items()})
        config.validate()
        return config


def load_config(path) -> PipelineConfig:
    """Read a pipeline config from JSON or TOML."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            data = tomllib.loads(path.read_text())
        except Exception as exc:
            raise InputError(f"cannot parse TOML config {path}: {exc}") from exc
    else:
        data = io.load_json(path)
    if not isinstance(data, dict):
        raise InputError("config root must be a table/object")
    return PipelineConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Views and workspace

@dataclass
class ViewRecord:
    """One training view with all of its rasters."""

    view_id: int
    kind: str                       # "input" | "generated"
    camera: Camera
    color: np.ndarray
    depth: DepthMap
    normals: NormalMap
    instances: InstanceMaskMap
    mono: DepthMap | None


class Workspace:
    """Path helper around the on-disk pipeline state."""

    def __init__(self, root) -> None:
        self.root = Path(root)

    # -- paths ---------------------------------------------------------
    @property
    def state_path(self) -> Path:
        return self.root / "state.json"

    @property
    def scene_path(self) -> Path:
        return self.root / "scene.json"

    def view_dir(self, view_id: int) -> Path:
        return self.root / "views" / f"view_{view_id:03d}"

    def loop_dir(self, loop: int) -> Path:
        return self.root / f"loop_{loop:03d}"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def stage_dir(self) -> Path:
        return self.root / "stage"

    # -- state ---------------------------------------------------------
    def state(self) -> dict:
        if not self.state_path.exists():
            raise DependencyError(
                f"workspace {self.root} is not initialized (missing state.json)")
        return io.load_json(self.state_path)

    def write_state(self, state: dict) -> None:
        io.save_json(self.state_path, state)

    def scene(self) -> SceneSpec | None:
        if self.scene_path.exists():
            return spec_from_dict(io.load_json(self.scene_path))
        return None

    # -- views ---------------------------------------------------------
    def write_view(self, record: ViewRecord) -> None:
        d = self.view_dir(record.view_id)
        d.mkdir(parents=True, exist_ok=True)
        io.save_json(d / "camera.json", io.camera_to_dict(record.camera))
        io.write_color_png(d / "color.png", record.color)
        io.write_depth_pfm(d / "depth.pfm", record.depth)
        io.write_normal_pfm(d / "normal.pfm", record.normals)
        io.write_instance_png(d / "instance.png", record.instances)
        if record.mono is not None:
            io.write_depth_pfm(d / "mono.pfm", record.mono)

    def load_view(self, view_id: int, kind: str) -> ViewRecord:
        d = self.view_dir(view_id)
        if not d.exists():
            raise DependencyError(f"missing view directory {d}")
        camera = io.camera_from_dict(io.load_json(d / "camera.json"))
        mono_path = d / "mono.pfm"
        return ViewRecord(
            view_id=view_id, kind=kind, camera=camera,
            color=io.read_color_png(d / "color.png"),
            depth=io.read_depth_pfm(d / "depth.pfm"),
            normals=io.read_normal_pfm(d / "normal.pfm"),
            instances=io.read_instance_png(d / "instance.png"),
            mono=io.read_depth_pfm(mono_path) if mono_path.exists() else None,
        )

    def load_views(self) -> list[ViewRecord]:
        state = self.state()
        return [self.load_view(v["id"], v["kind"]) for v in state["views"]]

    # -- per-stage artifacts --------------------------------------------
    def write_masks(self, directory: Path, view_id: int,
                    masks: Sequence[PlaneMask2D]) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        if masks:
            h, w = masks[0].mask.shape
        else:
            h = w = 1
        labels = np.zeros((h, w), dtype=np.int64)
        for j, mask in enumerate(masks):
            labels[mask.mask] = j + 1
        io.write_png16(directory / f"view_{view_id:03d}.png", labels)
        io.save_json(directory / f"view_{view_id:03d}.json", [
            {"mean_normal": [float(x) for x in m.mean_normal],
             "instance_label": m.instance_label} for m in masks])

    def load_masks(self, directory: Path, view_id: int) -> list[PlaneMask2D]:
        labels = io.read_png16(directory / f"view_{view_id:03d}.png")
        sidecar = io.load_json(directory / f"view_{view_id:03d}.json")
        masks = []
        for j, meta in enumerate(sidecar):
            masks.append(PlaneMask2D(
                view_id=view_id, mask=labels == j + 1,
                mean_normal=np.array(meta["mean_normal"]),
                instance_label=int(meta["instance_label"])))
        return masks

    def write_planes(self, directory: Path, planes: Sequence[GlobalPlane]
                     ) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        for plane in planes:
            records.append({
                "id": plane.id,
                "n": [float(x) for x in plane.normal],
                "d": float(plane.offset),
                "centroid": [float(x) for x in plane.centroid],
                "members": [list(m) for m in plane.members],
                "n_support": len(plane.support),
                "n_confident": len(plane.confident_support),
                "used_fallback_support": plane.used_fallback_support,
            })
            io.write_ply(directory / f"plane_{plane.id:03d}.ply",
                         plane.support)
        io.save_json(directory.parent / "planes.json", records)

    def load_planes(self, loop_or_stage_dir: Path) -> list[GlobalPlane]:
        records = io.load_json(loop_or_stage_dir / "planes.json")
        planes = []
        for rec in records:
            support = io.read_ply(loop_or_stage_dir / "planes" /
                                  f"plane_{rec['id']:03d}.ply")
            planes.append(GlobalPlane(
                id=int(rec["id"]),
                members=tuple((int(v), int(j)) for v, j in rec["members"]),
                support=support,
                confident_support=PointCloud.empty(),
                centroid=np.array(rec["centroid"]),
                normal=np.array(rec["n"]),
                offset=float(rec["d"]),
                used_fallback_support=bool(rec.get("used_fallback_support",
                                                   False))))
        return planes

    def write_plane_aware(self, directory: Path, view_id: int,
                          pad: PlaneAwareDepth) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        io.write_depth_pfm(directory / f"view_{view_id:03d}.pfm", pad.depth)
        io.write_png16(directory / f"view_{view_id:03d}_source.png",
                       pad.source)
        io.save_json(directory / f"view_{view_id:03d}_align.json", {
            "a": pad.align_a, "b": pad.align_b,
            "rms": None if np.isnan(pad.align_rms) else pad.align_rms,
            "valid": pad.align_valid})

    def load_plane_aware(self, directory: Path, view_id: int
                         ) -> PlaneAwareDepth:
        depth = io.read_depth_pfm(directory / f"view_{view_id:03d}.pfm")
        source = io.read_png16(directory / f"view_{view_id:03d}_source.png")
        align = io.load_json(directory / f"view_{view_id:03d}_align.json")
        return PlaneAwareDepth(
            depth=depth, source=source, align_a=float(align["a"]),
            align_b=float(align["b"]),
            align_rms=float("nan") if align["rms"] is None else align["rms"],
            align_valid=bool(align["valid"]))


# ---------------------------------------------------------------------------
# Inpainting adapter

class InpainterAdapter(Protocol):
    """Completes a novel view's color raster.

    Implementations must preserve pixels where the visibility mask is 1
    bit-exactly; the pipeline asserts this on every invocation.
    """

    def inpaint(self, reference_colors: Sequence[np.ndarray],
                raw_color: np.ndarray, visibility, camera: Camera
                ) -> np.ndarray: ...


@dataclass
class StubInpainter:
    """Copies synthetic ground-truth color when a scene is available;
    otherwise fills invisible pixels with the first reference's mean color."""

    scene: SceneSpec | None = None

    def inpaint(self, reference_colors, raw_color, visibility, camera):
        invisible_fill: np.ndarray
        if self.scene is not None:
            invisible_fill = raycast_view(self.scene, camera).color
        elif len(reference_colors):
            mean = reference_colors[0].reshape(-1, 3).mean(axis=0)
            invisible_fill = np.broadcast_to(mean, raw_color.shape)
        else:
            invisible_fill = np.full_like(raw_color, 0.5)
        return np.where(visibility.values[..., None], raw_color,
                        invisible_fill)


# ---------------------------------------------------------------------------
# Geometry recomputation (shared by init, loops, stage subcommands)

@dataclass
class SceneGeometry:
    masks: list[list[PlaneMask2D]]
    planes: list[GlobalPlane]
    mask_to_plane: dict[tuple[int, int], GlobalPlane]
    plane_aware: dict[int, PlaneAwareDepth]


def compute_masks(views: Sequence[ViewRecord], config: PipelineConfig
                  ) -> list[list[PlaneMask2D]]:
    masks = []
    for record in views:
        min_px = config.min_mask_pixels
        if min_px is None:
            min_px = default_min_mask_pixels(record.camera.width,
                                             record.camera.height)
        try:
            cluster_map = cluster_normals(record.normals, config.k,
                                          seed=config.seed + record.view_id)
            view_masks = extract_plane_masks(cluster_map, record.instances,
                                             record.normals, min_px,
                                             view_id=record.view_id)
        except PlaneSceneError as exc:
            logger.warning("view %d: plane extraction failed (%s)",
                           record.view_id, exc)
            view_masks = []
        masks.append(view_masks)
    return masks


def fit_global_planes(views: Sequence[ViewRecord],
                      masks: Sequence[Sequence[PlaneMask2D]],
                      config: PipelineConfig
                      ) -> tuple[list[GlobalPlane],
                                 dict[tuple[int, int], GlobalPlane]]:
    clouds = [backproject_depth(r.camera, r.depth,
                                stride=config.backproject_stride,
                                view_id=r.view_id) for r in views]
    assoc = associate_points(masks, clouds, [r.camera for r in views],
                             [r.depth for r in views],
                             depth_tol_rel=config.depth_tol_rel)
    centers = {r.view_id: r.camera.center for r in views}
    planes, mapping = [], {}
    for plane in merge_masks(assoc, overlap_thresh=config.overlap_thresh,
                             normal_angle_deg=config.normal_angle_deg):
        try:
            fitted = fit_plane_ransac(plane, centers,
                                      inlier_dist=config.ransac_inlier_dist,
                                      iterations=config.ransac_iterations,
                                      seed=config.seed)
        except DegenerateGeometryError as exc:
            logger.warning("plane %d skipped: %s", plane.id, exc)
            continue
        planes.append(fitted)
        for member in fitted.members:
            mapping[member] = fitted
    return planes, mapping


def compute_geometry(views: Sequence[ViewRecord], config: PipelineConfig
                     ) -> SceneGeometry:
    """Masks, merged planes, and plane-aware depths for the current views."""
    masks = compute_masks(views, config)
    planes, mapping = fit_global_planes(views, masks, config)
    plane_aware = {}
    for record, view_masks in zip(views, masks):
        pairs = [(m, mapping[(record.view_id, j)])
                 for j, m in enumerate(view_masks)
                 if (record.view_id, j) in mapping]
        plane_aware[record.view_id] = build_plane_aware_depth(
            record.camera, pairs, record.mono)
    return SceneGeometry(masks=masks, planes=planes, mask_to_plane=mapping,
                         plane_aware=plane_aware)


def auto_voxel_size(views: Sequence[ViewRecord], config: PipelineConfig
                    ) -> float:
    if config.voxel_size is not None:
        return config.voxel_size
    mins, maxs = [], []
    for record in views:
        cloud = backproject_depth(record.camera, record.depth, stride=4,
                                  view_id=record.view_id)
        if len(cloud):
            mins.append(cloud.points.min(axis=0))
            maxs.append(cloud.points.max(axis=0))
    if not mins:
        raise InputError("no valid depth to derive a voxel size from")
    extent = float((np.max(maxs, axis=0) - np.min(mins, axis=0)).max())
    return max(extent / 48.0, 1e-6)


# ---------------------------------------------------------------------------
# Synthetic workspace generation

def build_synth_scene(config: PipelineConfig) -> SceneSpec:
    sc = config.synth
    if sc is None:
        raise InputError("config has no [synth] section")
    ex, ey, ez = sc.extents
    faces = box_room_faces(sc.extents)
    next_inst = 7
    for box in sc.boxes:
        center, size = tuple(box[:3]), tuple(box[3:6])
        faces += box_faces(center, size, next_inst)
        next_inst += 6
    prims = []
    for sphere in sc.spheres:
        prims.append(Sphere(tuple(sphere[:3]), float(sphere[3]), next_inst))
        next_inst += 1
    center = np.array([ex / 2, ey / 2, ez / 2])
    cameras = []
    arc = np.radians(sc.camera_arc_deg)
    full = abs(arc - 2 * np.pi) < 1e-9
    denom = sc.n_views if full else max(sc.n_views - 1, 1)
    for i in range(sc.n_views):
        ang = arc * i / denom
        # alternate the pitch so floor and ceiling are both seen steeply
        lift = sc.camera_pitch_frac * ey * (1 if i % 2 == 0 else -1)
        pos = center + np.array([0.3 * ex * np.cos(ang), lift,
                                 0.3 * ez * np.sin(ang)])
        target = center - (pos - center)
        cameras.append(make_camera(pos, target, width=sc.width,
                                   height=sc.height, fov_deg=sc.fov_deg))
    return SceneSpec(seed=config.seed, extents=sc.extents, faces=tuple(faces),
                     primitives=tuple(prims), cameras=tuple(cameras))


def synthesize_views(ws: Workspace, config: PipelineConfig,
                     spec: SceneSpec | None = None) -> None:
    """Generate the synthetic scene (or use a prebuilt one) and write all
    input views."""
    if spec is None:
        spec = build_synth_scene(config)
    ws.root.mkdir(parents=True, exist_ok=True)
    io.save_json(ws.scene_path, spec_to_dict(spec))
    sc = config.synth or SynthSceneConfig()
    views = []
    for v, camera in enumerate(spec.cameras):
        bundle = raycast_view(spec, camera)
        mono = corrupt_mono(bundle.depth, sc.mono_scale, sc.mono_shift,
                            sc.mono_noise, seed=config.seed + 1000 + v)
        record = ViewRecord(view_id=v, kind="input", camera=camera,
                            color=bundle.color, depth=bundle.depth,
                            normals=bundle.normals,
                            instances=bundle.instances, mono=mono)
        ws.write_view(record)
        views.append({"id": v, "kind": "input"})
    ws.write_state({"synthetic": True, "loop_completed": -1, "views": views})
    io.save_json(ws.root / "config.json", config.to_dict())
    logger.info("synthesized %d views into %s", len(views), ws.root)


def import_views(ws: Workspace, config: PipelineConfig) -> None:
    """Adopt an input directory laid out like a workspace views/ tree."""
    src = Path(config.input_dir or "")
    view_dirs = sorted((src / "views").glob("view_*")) if src.exists() else []
    if not view_dirs:
        raise InputError(f"no input views under {src}/views")
    ws.root.mkdir(parents=True, exist_ok=True)
    views = []
    for v, d in enumerate(view_dirs):
        target = ws.view_dir(v)
        target.mkdir(parents=True, exist_ok=True)
        for name in ("camera.json", "color.png", "depth.pfm", "normal.pfm",
                     "instance.png", "mono.pfm"):
            src_file = d / name
            if src_file.exists():
                (target / name).write_bytes(src_file.read_bytes())
            elif name != "mono.pfm":
                raise InputError(f"input view {d} is missing {name}")
        views.append({"id": v, "kind": "input"})
    ws.write_state({"synthetic": False, "loop_completed": -1, "views": views})
    io.save_json(ws.root / "config.json", config.to_dict())


# ---------------------------------------------------------------------------
# Stages

def _write_geometry(ws: Workspace, directory: Path,
                    views: Sequence[ViewRecord], geometry: SceneGeometry
                    ) -> None:
    for record, view_masks in zip(views, geometry.masks):
        ws.write_masks(directory / "masks", record.view_id, view_masks)
    ws.write_planes(directory / "planes", geometry.planes)
    for record in views:
        ws.write_plane_aware(directory / "depth", record.view_id,
                             geometry.plane_aware[record.view_id])


def run_init(config: PipelineConfig,
             scene_spec: SceneSpec | None = None) -> Workspace:
    """Initialization: ingest or synthesize views, then produce global
    planes and plane-aware depths for all input views (loop_000).

    ``scene_spec`` bypasses the config's synth section with a prebuilt
    scene (library use)."""
    config.validate()
    ws = Workspace(config.out_dir)
    if scene_spec is not None or config.synth is not None:
        synthesize_views(ws, config, scene_spec)
    elif config.input_dir is not None:
        import_views(ws, config)
    else:
        raise InputError("need either an input_dir or a [synth] section")
    views = ws.load_views()
    geometry = compute_geometry(views, config)
    _write_geometry(ws, ws.loop_dir(0), views, geometry)
    state = ws.state()
    state["loop_completed"] = 0
    ws.write_state(state)
    logger.info("init: %d views, %d planes", len(views),
                len(geometry.planes))
    return ws


def _novel_depth_fn(ws: Workspace, geometry: SceneGeometry):
    """Rendered-depth stand-in for novel views: synthetic ray-cast when the
    scene is known, otherwise the fitted plane set."""
    scene = ws.scene()
    if scene is not None:
        return lambda camera: raycast_view(scene, camera).depth
    planes = geometry.planes
    return lambda camera: render_plane_set(planes, camera)[0]


def _pose_duplicates(camera: Camera, others: Sequence[Camera],
                     dist: float, angle_deg: float) -> bool:
    cos_thresh = np.cos(np.radians(angle_deg))
    for other in others:
        if np.linalg.norm(camera.center - other.center) <= dist and \
                float(camera.rotation[2] @ other.rotation[2]) >= cos_thresh:
            return True
    return False


def propose_views(ws: Workspace, config: PipelineConfig,
                  views: Sequence[ViewRecord], geometry: SceneGeometry,
                  grid: VisibilityGrid, loop: int) -> list[ViewProposal]:
    """Plane-aware proposals (score order), elliptical fill on loop 1,
    deduplicated against existing training poses."""
    reference = views[0].camera
    proposals = select_novel_views(
        geometry.planes, grid, reference, per_plane=config.per_plane,
        occluder_depth_fn=_novel_depth_fn(ws, geometry),
        stride=config.selection_stride,
        min_plane_clearance=config.min_plane_clearance,
        depth_tol_rel=config.depth_tol_rel,
        dedup_angle_deg=config.dedup_angle_deg)
    proposals.sort(key=lambda p: (-p.score, p.target_plane_id))
    if config.include_elliptical and loop == 1:
        lo, hi = grid.bounds
        try:
            ellipse = elliptical_trajectory(
                (lo, hi), max(config.views_per_loop - len(proposals), 1),
                [r.camera for r in views])
            # never place a camera in unobserved space (it would look at
            # wall backsides and hallucinate mirrored geometry)
            keep = sample_points_visibility(
                grid, np.array([p.camera.center for p in ellipse]))
            proposals += [p for p, ok in zip(ellipse, keep) if ok]
        except DegenerateGeometryError as exc:
            logger.warning("elliptical trajectory skipped: %s", exc)
    existing = [r.camera for r in views]
    kept: list[ViewProposal] = []
    for prop in proposals:
        if _pose_duplicates(prop.camera, existing, grid.voxel_size,
                            config.dedup_angle_deg):
            continue
        kept.append(prop)
        existing.append(prop.camera)
        if len(kept) >= config.views_per_loop:
            break
    return kept


def _generated_view(ws: Workspace, config: PipelineConfig, view_id: int,
                    proposal: ViewProposal, geometry: SceneGeometry,
                    grid: VisibilityGrid, views: Sequence[ViewRecord],
                    adapter: InpainterAdapter
                    ) -> tuple[ViewRecord, np.ndarray]:
    """Render, inpaint, and package one proposal as a new training view."""
    camera = proposal.camera
    scene = ws.scene()
    if scene is not None:
        bundle = raycast_view(scene, camera)
        rendered_depth = bundle.depth
        raw_color = bundle.color
        normals = bundle.normals
        instances = bundle.instances
        sc = config.synth or SynthSceneConfig()
        mono = corrupt_mono(bundle.depth, sc.mono_scale, sc.mono_shift,
                            sc.mono_noise, seed=config.seed + 1000 + view_id)
    else:
        rendered_depth, plane_idx = render_plane_set(geometry.planes, camera)
        raw_color = np.full((camera.height, camera.width, 3), 0.5)
        by_id = {p.id: p for p in geometry.planes}
        normal_values = np.zeros((camera.height, camera.width, 3))
        for pid in np.unique(plane_idx):
            if pid < 0:
                continue
            n_cam = camera.rotation @ by_id[int(pid)].normal
            normal_values[plane_idx == pid] = n_cam
        # front-facing convention: flip normals pointing away from the camera
        flip = normal_values[..., 2] > 0
        normal_values[flip] = -normal_values[flip]
        normals = NormalMap(normal_values, plane_idx >= 0)
        instances = InstanceMaskMap(np.where(plane_idx >= 0,
                                             plane_idx + 1, 0))
        mono = None

    visibility = render_visibility(grid, camera, rendered_depth,
                                   q_samples=config.q_samples)
    completed = adapter.inpaint([r.color for r in views], raw_color,
                                visibility, camera)
    if not np.array_equal(completed[visibility.values],
                          raw_color[visibility.values]):
        raise PlaneSceneError(
            "inpainter adapter modified visible pixels")
    record = ViewRecord(view_id=view_id, kind="generated", camera=camera,
                        color=completed, depth=rendered_depth,
                        normals=normals, instances=instances, mono=mono)
    return record, visibility.values


def run_loop(config: PipelineConfig, ws: Workspace,
             adapter: InpainterAdapter | None = None) -> Workspace:
    """One geometry-guided loop: grid, proposals, inpainting, merge, and
    recomputation of planes, plane-aware depths, and supervision maps."""
    config.validate()
    state = ws.state()
    if state["loop_completed"] < 0:
        raise DependencyError("run init before running loops")
    loop = state["loop_completed"] + 1
    views = ws.load_views()
    if adapter is None:
        adapter = StubInpainter(scene=ws.scene())

    geometry = compute_geometry(views, config)
    depths = [geometry.plane_aware[r.view_id].depth for r in views]
    usable = [i for i, d in enumerate(depths) if d.validity.any()]
    grid = build_grid([depths[i] for i in usable],
                      [views[i].camera for i in usable],
                      voxel_size=auto_voxel_size(views, config),
                      depth_margin_rel=config.depth_margin_rel,
                      max_voxels=config.max_voxels)
    loop_dir = ws.loop_dir(loop)
    loop_dir.mkdir(parents=True, exist_ok=True)
    save_grid(loop_dir / "grid.bin", grid)

    proposals = propose_views(ws, config, views, geometry, grid, loop)
    _write_proposals(loop_dir / "proposals.json", proposals)
    logger.info("loop %d: %d proposals", loop, len(proposals))

    new_records = []
    vis_dir = loop_dir / "visibility"
    vis_dir.mkdir(parents=True, exist_ok=True)
    next_id = max(r.view_id for r in views) + 1
    for prop in proposals:
        record, vis_values = _generated_view(
            ws, config, next_id, prop, geometry, grid, views, adapter)
        io.write_mask_png(vis_dir / f"view_{next_id:03d}.png", vis_values)
        new_records.append(record)
        next_id += 1

    merged = list(views) + new_records
    geometry = compute_geometry(merged, config)
    _write_geometry(ws, loop_dir, merged, geometry)

    cameras = {r.view_id: r.camera for r in merged}
    pads = {r.view_id: geometry.plane_aware[r.view_id] for r in merged}
    depth_by_view = {v: pads[v].depth for v in pads}
    winners = best_view_per_plane(geometry.planes, cameras, depth_by_view,
                                  depth_tol_rel=config.depth_tol_rel)
    order = [r.view_id for r in merged]
    for record in merged:
        smap = build_supervision_map(record.view_id, pads[record.view_id],
                                     record.camera, winners, cameras,
                                     depth_by_view, order,
                                     depth_tol_rel=config.depth_tol_rel)
        sup_dir = loop_dir / "supervision"
        sup_dir.mkdir(parents=True, exist_ok=True)
        io.write_png16(sup_dir / f"view_{record.view_id:03d}_source.png",
                       smap.source_view + 1)
        io.write_png16(sup_dir / f"view_{record.view_id:03d}_kind.png",
                       smap.region_kind)

    for record in new_records:
        ws.write_view(record)
    state["views"] += [{"id": r.view_id, "kind": "generated"}
                       for r in new_records]
    state["loop_completed"] = loop
    ws.write_state(state)
    return ws


def _write_proposals(path: Path, proposals: Sequence[ViewProposal]) -> None:
    records = []
    for p in proposals:
        rec = io.camera_to_dict(p.camera)
        rec.update({
            "target_plane_id": p.target_plane_id,
            "score": p.score,
            "R": None if p.components is None else p.components.coverage,
            "cos_theta": None if p.components is None
            else p.components.cos_theta,
            "D": None if p.components is None else p.components.distance,
            "voxel_linear_index": p.voxel_linear_index,
        })
        records.append(rec)
    io.save_json(path, records)


def export_scene(config: PipelineConfig, ws: Workspace
                 ) -> tuple[PointCloud, dict | None]:
    """Fuse plane-aware depths into a voxel-downsampled cloud with normals,
    compute metrics against synthetic ground truth when available, and
    render the report (CSV + figures)."""
    config.validate()
    state = ws.state()
    loop = state["loop_completed"]
    if loop < 0:
        raise DependencyError("nothing to export: run init first")
    depth_dir = ws.loop_dir(loop) / "depth"
    planes = ws.load_planes(ws.loop_dir(loop))
    by_id = {p.id: p for p in planes}

    views = ws.load_views()
    all_points, all_normals = [], []
    for record in views:
        pad = ws.load_plane_aware(depth_dir, record.view_id)
        cloud = backproject_depth(record.camera, pad.depth,
                                  stride=config.export_stride,
                                  view_id=record.view_id)
        if len(cloud) == 0:
            continue
        px = cloud.pixels
        src = pad.source[px[:, 1], px[:, 0]]
        normals = _estimate_normals(record.camera, pad, cloud, src, by_id)
        all_points.append(cloud.points)
        all_normals.append(normals)
    if not all_points:
        raise DependencyError("no valid plane-aware depth to export")
    points = np.concatenate(all_points)
    normals = np.concatenate(all_normals)
    points, normals = _voxel_downsample(points, normals, config.export_voxel)
    fused = PointCloud(points=points, normals=normals)

    ws.report_dir.mkdir(parents=True, exist_ok=True)
    io.write_ply(ws.report_dir / "fused.ply", fused)
    report.save_cloud_figure(ws.report_dir / "fused_cloud.png", fused)
    grid_path = ws.loop_dir(loop) / "grid.bin"
    if grid_path.exists():
        report.save_grid_slices_figure(ws.report_dir / "grid_slices.png",
                                       load_grid(grid_path))
    pad0 = ws.load_plane_aware(depth_dir, views[0].view_id)
    report.save_depth_figure(ws.report_dir / "plane_aware_depth_view000.png",
                             pad0.depth, title="plane-aware depth (view 0)")

    metrics_row: dict = {
        "n_views": len(views),
        "n_planes": len(planes),
        "n_points": len(fused),
        "loops_completed": loop,
    }
    metrics = None
    scene = ws.scene()
    if scene is not None:
        gt = sample_surface_points(scene, spacing=config.gt_sample_spacing)
        metrics = eval_reconstruction(fused, gt,
                                      fscore_thresh=config.fscore_thresh
                                      ).as_dict()
        metrics_row.update(metrics)
    report.save_metrics_csv(ws.report_dir / "metrics.csv", [metrics_row])
    logger.info("export: %d points, metrics=%s", len(fused), metrics)
    return fused, metrics


def _estimate_normals(camera: Camera, pad: PlaneAwareDepth, cloud: PointCloud,
                      source_tags: np.ndarray, planes_by_id: dict
                      ) -> np.ndarray:
    """Plane normals on PLANE pixels, depth-gradient normals elsewhere."""
    normals = np.zeros((len(cloud), 3))
    plane_px = source_tags >= SOURCE_PLANE_BASE
    for pid in np.unique(source_tags[plane_px] - SOURCE_PLANE_BASE):
        plane = planes_by_id.get(int(pid))
        if plane is None:
            continue
        normals[source_tags == SOURCE_PLANE_BASE + pid] = plane.normal
    mono_px = ~plane_px
    if mono_px.any():
        grad = _depth_gradient_normals(camera, pad.depth)
        px = cloud.pixels[mono_px]
        normals[mono_px] = grad[px[:, 1], px[:, 0]]
    lengths = np.linalg.norm(normals, axis=1)
    bad = lengths < 1e-9
    normals[bad] = [0.0, 1.0, 0.0]
    lengths[bad] = 1.0
    return normals / lengths[:, None]


def _depth_gradient_normals(camera: Camera, depth: DepthMap) -> np.ndarray:
    """World-frame normals from central differences of back-projection."""
    h, w = depth.values.shape
    vs, us = np.mgrid[0:h, 0:w]
    z = np.where(depth.validity, depth.values, np.nan)
    x = (us - camera.cx) / camera.fx * z
    y = (vs - camera.cy) / camera.fy * z
    pts = np.stack([x, y, z], axis=-1)
    du = np.gradient(pts, axis=1)
    dv = np.gradient(pts, axis=0)
    n_cam = np.cross(du.reshape(-1, 3), dv.reshape(-1, 3)).reshape(h, w, 3)
    with np.errstate(invalid="ignore"):
        lengths = np.linalg.norm(n_cam, axis=-1, keepdims=True)
        n_cam = np.where(lengths > 1e-12, n_cam / lengths, 0.0)
    n_cam = np.nan_to_num(n_cam)
    flip = n_cam[..., 2] > 0
    n_cam[flip] = -n_cam[flip]
    return n_cam @ camera.rotation  # rows: (R^T n)^T


def _voxel_downsample(points: np.ndarray, normals: np.ndarray,
                      voxel: float) -> tuple[np.ndarray, np.ndarray]:
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                   return_counts=True)
    n_cells = len(counts)
    sums = np.zeros((n_cells, 3))
    nsums = np.zeros((n_cells, 3))
    np.add.at(sums, inverse, points)
    np.add.at(nsums, inverse, normals)
    centers = sums / counts[:, None]
    lengths = np.linalg.norm(nsums, axis=1)
    bad = lengths < 1e-9
    nsums[bad] = [0.0, 1.0, 0.0]
    lengths[bad] = 1.0
    return centers, nsums / lengths[:, None]
