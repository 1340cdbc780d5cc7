"""Procedural object models, z-buffer point-splat RGB-D rendering and dataset I/O.

On-disk dataset layout (all paths relative to the dataset root)::

    manifest.json
    models/obj_<id>.xyz            M model points, "x y z r g b" per line (meters)
    models/obj_<id>_surface.xyz    dense surface sampling used for rendering
    frames/<frame_id>/color.png    8-bit RGB
    frames/<frame_id>/depth.png    16-bit depth in millimeters (0 = no reading)
    frames/<frame_id>/mask.png     8-bit object-id map (0 = background)
    frames/<frame_id>/poses.json   object-to-camera poses, rotation as a
                                   row-major 3x3 matrix, translation in meters
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .geometry import (
    DESK_CAMERA,
    CameraIntrinsics,
    Pose,
    UnitQuaternion,
    apply,
    quat_to_matrix,
    random_pose,
    random_rotation,
)
from .metrics import ObjectModel, Symmetry, adds_distance, nearest_neighbor_gaps

log = logging.getLogger(__name__)

DEFAULT_MODEL_POINTS = 500
DEFAULT_SURFACE_POINTS = 8000


class GenerationError(RuntimeError):
    pass


# -- surface sampling ---------------------------------------------------------------
# Jittered-lattice samplers: each point is uniform within its cell, cells tile the
# surface evenly, so the nearest-neighbour gaps stay close to the mean spacing.


def _ring_grid(n: int, circumference: float, height: float, rng, jitter: float):
    rows = max(1, int(round(np.sqrt(n * height / circumference))))
    counts = np.full(rows, n // rows)
    counts[: n % rows] += 1
    theta, z = [], []
    for i, c in enumerate(counts):
        phase = rng.random()
        theta.append(2 * np.pi * (np.arange(c) + phase + jitter * (rng.random(c) - 0.5)) / c)
        z.append(height * (i + 0.5 + jitter * (rng.random(c) - 0.5)) / rows)
    return np.concatenate(theta), np.concatenate(z)


def _sunflower_disk(n: int, radius: float, rng, jitter: float):
    k = np.arange(n) + 0.5 + jitter * (rng.random(n) - 0.5)
    rho = radius * np.sqrt(np.clip(k / n, 0.0, 1.0))
    theta = k * np.pi * (3 - np.sqrt(5)) + rng.random() * 2 * np.pi
    return rho * np.cos(theta), rho * np.sin(theta)


def _split_by_area(n: int, areas: Sequence[float]) -> list[int]:
    areas = np.asarray(areas, dtype=float)
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[np.argmax(areas)] += n - counts.sum()
    return counts.tolist()


def sample_cylinder(n: int, radius: float, height: float, rng, jitter: float = 0.3) -> np.ndarray:
    """Cylinder about the z axis, centered at the origin, caps included."""
    side, cap = 2 * np.pi * radius * height, np.pi * radius**2
    n_side, n_top, n_bot = _split_by_area(n, [side, cap, cap])
    th, z = _ring_grid(n_side, 2 * np.pi * radius, height, rng, jitter)
    parts = [np.stack([radius * np.cos(th), radius * np.sin(th), z - height / 2], 1)]
    for count, zc in ((n_top, height / 2), (n_bot, -height / 2)):
        x, y = _sunflower_disk(count, radius, rng, jitter)
        parts.append(np.stack([x, y, np.full(count, zc)], 1))
    return np.concatenate(parts)


def sample_square_box(n: int, side: float, height: float, rng, jitter: float = 0.3) -> np.ndarray:
    """Box with a square ``side x side`` cross-section about z, centered at the origin."""
    h = side / 2
    counts = _split_by_area(n, [side * height] * 4 + [side * side] * 2)
    parts = []
    for face, c in enumerate(counts):
        nu = max(1, int(round(np.sqrt(c))))
        cells = np.arange(c)
        u = ((cells % nu) + 0.5 + jitter * (rng.random(c) - 0.5)) / nu
        v = ((cells // nu) + 0.5 + jitter * (rng.random(c) - 0.5)) / int(np.ceil(c / nu))
        if face < 4:
            a, b = (u - 0.5) * side, (v - 0.5) * height
            p = np.stack([a, np.full(c, h), b], 1)
            ang = face * np.pi / 2
            Rz = np.array([[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]])
            parts.append(p @ Rz.T)
        else:
            sgn = 1 if face == 4 else -1
            parts.append(np.stack([(u - 0.5) * side, (v - 0.5) * side, np.full(c, sgn * height / 2)], 1))
    return np.concatenate(parts)


def sample_sphere(n: int, rng, jitter: float = 0.3) -> np.ndarray:
    """Quasi-uniform unit-sphere directions (Fibonacci lattice, random orientation)."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    th = np.pi * (1 + np.sqrt(5)) * k
    r = np.sqrt(1 - z * z)
    p = np.stack([r * np.cos(th), r * np.sin(th), z], 1)
    p += jitter * np.sqrt(4 * np.pi / n) * (rng.random((n, 3)) - 0.5)
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p @ quat_to_matrix(random_rotation(rng)).T


def _harmonic_basis(u: np.ndarray) -> np.ndarray:
    """Real polynomial harmonics of degree 1..3 evaluated on unit directions."""
    x, y, z = u.T
    return np.stack([
        x, y, z,
        x * y, y * z, x * z, x * x - y * y, 3 * z * z - 1,
        x**3, y**3, z**3, x * y * z, x * x * z, y * y * x, z * z * y,
    ], 1)


_ODD_TERMS = np.array([1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1], dtype=float)


@dataclass(frozen=True)
class BlobShape:
    """Radial function ``r(u) = radius * exp(coeffs . basis(u))`` plus albedo weights."""

    radius: float
    coeffs: np.ndarray
    albedo_weights: np.ndarray  # (15, 3)
    albedo_base: np.ndarray  # (3,)

    @classmethod
    def random(cls, rng, radius=0.05, odd_amp=0.5, even_amp=0.15, albedo_amp=0.3) -> BlobShape:
        c = rng.standard_normal(15) * (_ODD_TERMS * odd_amp + (1 - _ODD_TERMS) * even_amp)
        # each color channel ramps along its own object axis, plus faint higher-order detail,
        # so that no rotation maps the colored surface onto itself
        w = np.zeros((15, 3))
        w[:3] = albedo_amp * quat_to_matrix(random_rotation(rng)).T
        w[3:] = 0.05 * rng.standard_normal((12, 3))
        base = 0.45 + 0.1 * rng.random(3)
        return cls(radius, c, w, base)

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        u = sample_sphere(n, rng)
        basis = _harmonic_basis(u)
        pts = u * (self.radius * np.exp(basis @ self.coeffs))[:, None]
        # the linear part acts on the point position, so the ramps span the object's full extent
        albedo = self.albedo_base + np.tanh(pts / self.radius) @ self.albedo_weights[:3] \
            + basis[:, 3:] @ self.albedo_weights[3:]
        return pts, _to_uint8(albedo)


def _to_uint8(rgb01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(rgb01 * 255), 0, 255).astype(np.uint8)


def _cylinder_albedo(pts: np.ndarray, height: float, base: np.ndarray) -> np.ndarray:
    # bands along the axis keep the texture rotationally symmetric
    band = 0.5 + 0.5 * np.cos(2 * np.pi * 2.5 * pts[:, 2] / height)
    cap = np.abs(np.abs(pts[:, 2]) - height / 2) < 1e-9
    rgb = base[None, :] * (0.6 + 0.4 * band[:, None])
    rgb[cap] = base * 0.45
    return _to_uint8(rgb)


def _box_albedo(pts: np.ndarray, height: float, base: np.ndarray) -> np.ndarray:
    top = np.abs(np.abs(pts[:, 2]) - height / 2) < 1e-9
    rgb = np.tile(base, (len(pts), 1))
    rgb[top] = base[::-1]
    return _to_uint8(rgb)


# -- object model factories -------------------------------------------------------------


def sampling_floor(shape_sampler, points: np.ndarray, rng) -> float:
    """ADD-S between ``points`` and an independent resampling of the same surface.

    This is the residual a perfect alignment still shows because the two copies
    sample the surface at different spots.
    """
    other = shape_sampler(len(points), rng)
    d, _ = cKDTree(other).query(points)
    return float(d.mean())


def rotation_test_grid(min_angle_deg: float = 45.0, step_deg: float = 15.0, n_axes: int = 60) -> np.ndarray:
    """Rotation matrices on a fixed axis-angle grid, excluding a neighbourhood of identity."""
    axes = sample_sphere(n_axes, np.random.default_rng(0), jitter=0.0)
    mats = []
    for ang in np.arange(min_angle_deg, 180.0 + 1e-9, step_deg):
        for ax in axes:
            mats.append(quat_to_matrix(UnitQuaternion.from_axis_angle(ax, np.deg2rad(ang))))
    return np.array(mats)


def asymmetry_margin(points: np.ndarray, floor: float, grid: np.ndarray | None = None) -> float:
    """``min over grid of ADD-S(identity, rotation) / floor``."""
    import torch

    grid = rotation_test_grid() if grid is None else grid
    pts = torch.from_numpy(points)
    eye, zero = torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)
    R = torch.from_numpy(grid)
    vals = adds_distance(eye, zero, R, zero.expand(len(grid), 3), pts, cKDTree(points))
    return float(vals.min()) / floor


def make_symmetric_model(
    seed: int,
    kind: Literal["cylinder", "box"] = "cylinder",
    n_points: int = DEFAULT_MODEL_POINTS,
    object_id: int = 1,
    name: str | None = None,
    n_surface: int = DEFAULT_SURFACE_POINTS,
    size: float = 0.05,
    height: float = 0.08,
) -> ObjectModel:
    """Cylinder (continuous symmetry about z) or square box (4-fold about z).

    ``size`` is the cylinder radius or the box half-side.
    """
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    rng = np.random.default_rng([seed, 11])
    base = 0.3 + 0.6 * rng.random(3)
    if kind == "cylinder":
        sampler = lambda n, r: sample_cylinder(n, size, height, r)  # noqa: E731
        albedo = lambda p: _cylinder_albedo(p, height, base)  # noqa: E731
        sym = Symmetry((0.0, 0.0, 1.0), 0)
    elif kind == "box":
        sampler = lambda n, r: sample_square_box(n, 2 * size, height, r)  # noqa: E731
        albedo = lambda p: _box_albedo(p, height, base)  # noqa: E731
        sym = Symmetry((0.0, 0.0, 1.0), 4)
    else:
        raise ValueError(f"unknown symmetric kind {kind!r}")
    pts = sampler(n_points, rng)
    surf = sampler(n_surface, rng)
    return ObjectModel(
        object_id=object_id,
        name=name or kind,
        points=pts,
        symmetric=True,
        symmetry=sym,
        colors=albedo(pts),
        surface=surf,
        surface_colors=albedo(surf),
    )


def make_asymmetric_model(
    seed: int,
    n_points: int = DEFAULT_MODEL_POINTS,
    object_id: int = 2,
    name: str = "blob",
    n_surface: int = DEFAULT_SURFACE_POINTS,
    radius: float = 0.04,
    min_margin: float = 2.0,
    max_attempts: int = 10,
) -> ObjectModel:
    """Smooth random blob: sphere directions displaced by seeded low-order harmonics.

    A candidate is kept only if every rotation of the test grid (angles of 45
    degrees and more) moves it by an ADD-S of more than ``min_margin`` times its
    sampling floor; otherwise new harmonics are drawn.

    Raises:
        GenerationError: no candidate passed within ``max_attempts``.
    """
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    grid = rotation_test_grid()
    best = 0.0
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, 23, attempt])
        shape = BlobShape.random(rng, radius)
        pts, cols = shape.sample(n_points, rng)
        floor = sampling_floor(lambda n, r: shape.sample(n, r)[0], pts, rng)
        margin = asymmetry_margin(pts, floor, grid)
        best = max(best, margin)
        if margin > min_margin:
            surf, surf_cols = shape.sample(n_surface, rng)
            return ObjectModel(
                object_id=object_id,
                name=name,
                points=pts,
                symmetric=False,
                colors=cols,
                surface=surf,
                surface_colors=surf_cols,
            )
        log.debug("blob seed %d attempt %d rejected, margin %.2f", seed, attempt, margin)
    raise GenerationError(f"no asymmetric blob after {max_attempts} attempts (best margin {best:.2f})")


def max_nn_gap(model: ObjectModel) -> float:
    return float(nearest_neighbor_gaps(model.points).max())


# -- rendering ----------------------------------------------------------------------------


@dataclass
class Frame:
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64 meters, 0 = no reading
    mask: np.ndarray  # (H, W) uint8 object ids, 0 = background
    gt_poses: dict[int, Pose]
    intrinsics: CameraIntrinsics
    frame_id: str = ""
    lighting_gain: float = 1.0

    def object_ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.mask) if i != 0]


def _splat(
    pts_cam: np.ndarray, k: CameraIntrinsics, radius: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel index, depth and source index of every splat fragment in the image."""
    front = pts_cam[:, 2] > 1e-6
    src = np.nonzero(front)[0]
    p = pts_cam[front]
    u = np.rint(k.fx * p[:, 0] / p[:, 2] + k.cx).astype(np.int64)
    v = np.rint(k.fy * p[:, 1] / p[:, 2] + k.cy).astype(np.int64)
    offs = np.arange(-radius, radius + 1)
    du, dv = np.meshgrid(offs, offs)
    uu = (u[:, None] + du.ravel()[None, :]).ravel()
    vv = (v[:, None] + dv.ravel()[None, :]).ravel()
    zz = np.repeat(p[:, 2], du.size)
    ss = np.repeat(src, du.size)
    ok = (uu >= 0) & (uu < k.width) & (vv >= 0) & (vv < k.height)
    return vv[ok] * k.width + uu[ok], zz[ok], ss[ok]


def render(
    models: Mapping[int, ObjectModel],
    poses: Mapping[int, Pose],
    intrinsics: CameraIntrinsics = DESK_CAMERA,
    lighting: float = 1.0,
    rng: np.random.Generator | None = None,
    noise_sigma: float = 4.0 / 255.0,
    splat_radius: int = 1,
    background_depth: float | None = 1.2,
    background: np.ndarray | None = None,
    frame_id: str = "",
) -> Frame:
    """Z-buffer point-splat rendering of posed models.

    Every surface point covers the ``(2r+1)^2`` pixel square around its
    projection; the nearest fragment wins each pixel and sets color, depth and
    object id. Colors are albedo times ``lighting`` plus Gaussian noise.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    H, W = intrinsics.height, intrinsics.width
    pix_all, z_all, obj_all, col_all = [], [], [], []
    for oid, pose in poses.items():
        m = models[oid]
        surf = m.surface if m.surface is not None else m.points
        cols = m.surface_colors if m.surface_colors is not None else m.colors
        if cols is None:
            cols = np.full((len(surf), 3), 180, np.uint8)
        if pose.translation[2] <= 0:
            raise ValueError(f"object {oid} is behind the camera")
        pix, z, src = _splat(apply(pose, surf), intrinsics, splat_radius)
        if len(pix) == 0:
            log.warning("object %d lies outside the camera frustum; omitted from the mask", oid)
            continue
        pix_all.append(pix)
        z_all.append(z)
        obj_all.append(np.full(len(pix), oid, np.int64))
        col_all.append(cols[src])

    depth = np.zeros(H * W)
    mask = np.zeros(H * W, np.uint8)
    if background is None:
        color = np.zeros((H * W, 3))
    else:
        color = background.reshape(-1, 3).astype(np.float64) / 255.0
    if background_depth is not None:
        depth[:] = background_depth
    if pix_all:
        pix = np.concatenate(pix_all)
        z = np.concatenate(z_all)
        obj = np.concatenate(obj_all)
        col = np.concatenate(col_all)
        order = np.lexsort((z, pix))
        pix, z, obj, col = pix[order], z[order], obj[order], col[order]
        first = np.ones(len(pix), bool)
        first[1:] = pix[1:] != pix[:-1]
        win = pix[first]
        depth[win] = z[first]
        mask[win] = obj[first]
        color[win] = col[first] / 255.0 * lighting
    color = color + noise_sigma * rng.standard_normal(color.shape)
    color = np.clip(np.round(color * 255), 0, 255).astype(np.uint8)
    return Frame(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        mask=mask.reshape(H, W),
        gt_poses=dict(poses),
        intrinsics=intrinsics,
        frame_id=frame_id,
        lighting_gain=float(lighting),
    )


def smooth_background(intrinsics: CameraIntrinsics, rng) -> np.ndarray:
    """Low-frequency random texture standing in for a table / wall."""
    H, W = intrinsics.height, intrinsics.width
    coarse = rng.random((4, 5, 3))
    img = np.array(Image.fromarray(_to_uint8(coarse)).resize((W, H), Image.BILINEAR))
    return (img * 0.6).astype(np.uint8)


# -- file formats ---------------------------------------------------------------------------


def pose_to_json(p: Pose) -> dict:
    return {"R": [float(v) for v in p.R.ravel()], "t": [float(v) for v in p.t]}


def pose_from_json(d: Mapping) -> Pose:
    return Pose.from_matrix(np.array(d["R"], dtype=np.float64).reshape(3, 3), d["t"])


def write_points(path: Path, pts: np.ndarray, colors: np.ndarray | None) -> None:
    if colors is None:
        colors = np.full((len(pts), 3), 180, np.uint8)
    lines = [
        f"{x!r} {y!r} {z!r} {r} {g} {b}"
        for (x, y, z), (r, g, b) in zip(pts.tolist(), colors.astype(int).tolist())
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = np.loadtxt(path, ndmin=2)
    except OSError as e:
        raise FileNotFoundError(f"model point file missing: {path}") from e
    pts = data[:, :3].astype(np.float64)
    cols = data[:, 3:6].astype(np.uint8) if data.shape[1] >= 6 else None
    return pts, cols


def write_model(root: Path, model: ObjectModel) -> dict:
    """Write model files under ``root/models`` and return the manifest entry."""
    mdir = Path(root) / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    entry = {
        "object_id": model.object_id,
        "name": model.name,
        "symmetric": model.symmetric,
        "symmetry": model.symmetry.to_dict() if model.symmetry else None,
        "diameter": model.diameter,
        "n_points": model.n_points,
        "model_file": f"models/obj_{model.object_id:02d}.xyz",
    }
    write_points(Path(root) / entry["model_file"], model.points, model.colors)
    if model.surface is not None:
        entry["surface_file"] = f"models/obj_{model.object_id:02d}_surface.xyz"
        write_points(Path(root) / entry["surface_file"], model.surface, model.surface_colors)
    return entry


def read_model(root: Path, entry: Mapping) -> ObjectModel:
    pts, cols = read_points(Path(root) / entry["model_file"])
    surf = surf_cols = None
    if entry.get("surface_file"):
        surf, surf_cols = read_points(Path(root) / entry["surface_file"])
    sym = Symmetry.from_dict(entry["symmetry"]) if entry.get("symmetry") else None
    return ObjectModel(
        object_id=int(entry["object_id"]),
        name=entry["name"],
        points=pts,
        symmetric=bool(entry["symmetric"]),
        symmetry=sym,
        colors=cols,
        surface=surf,
        surface_colors=surf_cols,
    )


def _read_image(path: Path) -> np.ndarray:
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing image file: {path}")
    with Image.open(path) as im:
        return np.array(im)


@dataclass
class FrameEntry:
    frame_id: str
    split: str
    color: str
    depth: str
    mask: str
    poses: str | None = None  # JSON pose file
    gt_poses: dict[int, Pose] | None = None  # inline poses (LineMOD adapter)
    mask_object: int | None = None  # binary masks: nonzero pixels belong to this object

    def to_json(self) -> dict:
        d = {"frame_id": self.frame_id, "split": self.split, "color": self.color, "depth": self.depth,
             "mask": self.mask}
        if self.poses is not None:
            d["poses"] = self.poses
        if self.gt_poses is not None:
            d["gt_poses"] = {str(k): pose_to_json(p) for k, p in self.gt_poses.items()}
        if self.mask_object is not None:
            d["mask_object"] = self.mask_object
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> FrameEntry:
        gt = d.get("gt_poses")
        return cls(
            frame_id=d["frame_id"], split=d["split"], color=d["color"], depth=d["depth"], mask=d["mask"],
            poses=d.get("poses"),
            gt_poses={int(k): pose_from_json(v) for k, v in gt.items()} if gt is not None else None,
            mask_object=d.get("mask_object"),
        )

    def paths(self) -> list[str]:
        return [p for p in (self.color, self.depth, self.mask, self.poses) if p is not None]


@dataclass
class DatasetManifest:
    root: Path
    models: dict[int, ObjectModel]
    frames: list[FrameEntry]
    intrinsics: CameraIntrinsics
    seed: int | None = None
    config: dict = field(default_factory=dict)
    model_entries: dict[int, dict] = field(default_factory=dict)
    depth_scale: float = 1e-3  # meters per stored depth unit

    def __post_init__(self):
        self.root = Path(self.root)
        train = {f.frame_id for f in self.frames if f.split == "train"}
        test = {f.frame_id for f in self.frames if f.split == "test"}
        if train & test:
            raise ValueError(f"train/test splits overlap: {sorted(train & test)[:5]}")

    def split(self, name: str) -> list[FrameEntry]:
        return [f for f in self.frames if f.split == name]

    def load_frame(self, entry: FrameEntry) -> Frame:
        color = _read_image(self.root / entry.color)
        if color.ndim == 2:
            color = np.repeat(color[..., None], 3, axis=2)
        color = color[..., :3].astype(np.uint8)
        depth = _read_image(self.root / entry.depth).astype(np.float64) * self.depth_scale
        mask = _read_image(self.root / entry.mask)
        if mask.ndim == 3:
            mask = mask[..., 0]
        if entry.mask_object is not None:
            mask = np.where(mask > 0, entry.mask_object, 0).astype(np.uint8)
        mask = mask.astype(np.uint8)
        if entry.gt_poses is not None:
            poses = dict(entry.gt_poses)
            gain = 1.0
        else:
            path = self.root / entry.poses
            if not path.is_file():
                raise FileNotFoundError(f"missing pose file: {path}")
            data = json.loads(path.read_text())
            poses = {int(k): pose_from_json(v) for k, v in data["poses"].items()}
            gain = float(data.get("lighting_gain", 1.0))
        mask[depth <= 0] = 0
        return Frame(color, depth, mask, poses, self.intrinsics, entry.frame_id, gain)

    def to_json(self) -> dict:
        return {
            "format": "ctxpose-dataset/1",
            "seed": self.seed,
            "config": self.config,
            "intrinsics": self.intrinsics.to_dict(),
            "depth_scale": self.depth_scale,
            "objects": [self.model_entries[k] for k in sorted(self.model_entries)],
            "frames": [f.to_json() for f in self.frames],
        }

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root: str | os.PathLike) -> DatasetManifest:
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"dataset manifest missing: {path}")
        d = json.loads(path.read_text())
        entries = {int(o["object_id"]): o for o in d["objects"]}
        models = {k: read_model(root, e) for k, e in entries.items()}
        frames = [FrameEntry.from_json(f) for f in d["frames"]]
        for f in frames:
            for p in f.paths():
                if not (root / p).is_file():
                    raise FileNotFoundError(f"dataset file missing: {root / p}")
        return cls(root, models, frames, CameraIntrinsics.from_dict(d["intrinsics"]), d.get("seed"),
                   d.get("config", {}), entries, d.get("depth_scale", 1e-3))


# -- dataset generation ---------------------------------------------------------------------


@dataclass
class SceneConfig:
    n_train: int = 300
    n_test: int = 50
    seed: int = 0
    clutter: int = 2  # max objects per frame
    lighting: tuple[float, float] = (0.4, 1.3)
    noise_sigma: float = 4.0 / 255.0
    translation_bounds: tuple[tuple[float, float], ...] = ((-0.12, 0.12), (-0.08, 0.08), (0.45, 0.75))
    border_px: float = 24.0
    min_visible_fraction: float = 0.5
    splat_radius: int = 1
    n_model_points: int = DEFAULT_MODEL_POINTS
    n_surface_points: int = DEFAULT_SURFACE_POINTS
    intrinsics: CameraIntrinsics = DESK_CAMERA

    def to_json(self) -> dict:
        d = dict(vars(self))
        d["intrinsics"] = self.intrinsics.to_dict()
        d["lighting"] = list(self.lighting)
        d["translation_bounds"] = [list(b) for b in self.translation_bounds]
        return d


def default_models(seed: int = 0, n_points: int = DEFAULT_MODEL_POINTS,
                   n_surface: int = DEFAULT_SURFACE_POINTS) -> dict[int, ObjectModel]:
    """One symmetric cylinder (id 1) and one asymmetric blob (id 2)."""
    cyl = make_symmetric_model(seed, "cylinder", n_points, object_id=1, name="cylinder", n_surface=n_surface)
    blob = make_asymmetric_model(seed, n_points, object_id=2, name="blob", n_surface=n_surface)
    return {1: cyl, 2: blob}


def sample_scene(
    models: Mapping[int, ObjectModel], cfg: SceneConfig, rng: np.random.Generator, frame_id: str = ""
) -> Frame:
    """Random object subset and poses, re-drawn until every object keeps enough visible pixels."""
    ids = sorted(models)
    bg = smooth_background(cfg.intrinsics, rng)
    lighting = float(rng.uniform(*cfg.lighting))
    count = int(rng.integers(1, min(cfg.clutter, len(ids)) + 1))
    chosen = sorted(rng.choice(ids, size=count, replace=False).tolist())
    for _ in range(100):
        poses = {
            oid: random_pose(rng, cfg.translation_bounds, cfg.intrinsics, cfg.border_px) for oid in chosen
        }
        if len(chosen) == 1 or cfg.min_visible_fraction <= 0:
            break
        frame = render(models, poses, cfg.intrinsics, rng=np.random.default_rng(0), noise_sigma=0.0,
                       splat_radius=cfg.splat_radius)
        ok = True
        for oid in chosen:
            alone = render(models, {oid: poses[oid]}, cfg.intrinsics, rng=np.random.default_rng(0),
                           noise_sigma=0.0, splat_radius=cfg.splat_radius)
            if (frame.mask == oid).sum() < cfg.min_visible_fraction * (alone.mask == oid).sum():
                ok = False
                break
        if ok:
            break
    return render(models, poses, cfg.intrinsics, lighting, rng, cfg.noise_sigma, cfg.splat_radius,
                  background=bg, frame_id=frame_id)


def write_frame(root: Path, frame: Frame, depth_scale: float = 1e-3) -> FrameEntry:
    rel = Path("frames") / frame.frame_id
    fdir = Path(root) / rel
    fdir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.color).save(fdir / "color.png")
    depth_units = np.clip(np.rint(frame.depth / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(depth_units).save(fdir / "depth.png")
    Image.fromarray(frame.mask.astype(np.uint8)).save(fdir / "mask.png")
    poses = {str(k): pose_to_json(p) for k, p in sorted(frame.gt_poses.items())}
    (fdir / "poses.json").write_text(
        json.dumps({"frame_id": frame.frame_id, "lighting_gain": frame.lighting_gain, "poses": poses},
                   indent=1, sort_keys=True) + "\n"
    )
    return FrameEntry(frame.frame_id, "", str(rel / "color.png"), str(rel / "depth.png"),
                      str(rel / "mask.png"), poses=str(rel / "poses.json"))


def generate_dataset(
    root: str | os.PathLike,
    cfg: SceneConfig = SceneConfig(),
    models: Mapping[int, ObjectModel] | None = None,
) -> DatasetManifest:
    """Render ``n_train + n_test`` frames to ``root`` and write the manifest.

    Every frame draws from its own generator spawned from ``cfg.seed``, so the
    output is byte-identical for equal seeds and configs.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e
    models = dict(models) if models is not None else default_models(cfg.seed, cfg.n_model_points,
                                                                    cfg.n_surface_points)
    entries = {oid: write_model(root, m) for oid, m in sorted(models.items())}
    n = cfg.n_train + cfg.n_test
    frame_rngs = np.random.SeedSequence(cfg.seed).spawn(n)
    frames = []
    for i, ss in enumerate(frame_rngs):
        fid = f"{i:06d}"
        frame = sample_scene(models, cfg, np.random.default_rng(ss), fid)
        try:
            entry = write_frame(root, frame)
        except OSError as e:
            raise OSError(f"failed writing frame {fid} under {root}: {e}") from e
        entry.split = "train" if i < cfg.n_train else "test"
        frames.append(entry)
    manifest = DatasetManifest(root, models, frames, cfg.intrinsics, cfg.seed, cfg.to_json(), entries)
    manifest.save()
    return manifest


# -- LineMOD-layout adapter ----------------------------------------------------------------------

LINEMOD_OBJECTS = {
    1: "ape", 2: "benchvise", 4: "camera", 5: "can", 6: "cat", 8: "driller", 9: "duck",
    10: "eggbox", 11: "glue", 12: "holepuncher", 13: "iron", 14: "lamp", 15: "phone",
}
LINEMOD_SYMMETRIC = {10, 11}
LINEMOD_CAMERA = CameraIntrinsics(fx=572.4114, fy=573.57043, cx=325.2611, cy=242.04899, width=640, height=480)


def read_ply_vertices(path: Path) -> np.ndarray:
    """Vertex ``x y z`` of an ASCII PLY file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file missing: {path}")
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path} is not a PLY file")
        n_vertex, props, fmt = 0, [], None
        element = None
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                element = tok[1]
                if element == "vertex":
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and element == "vertex":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if fmt != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported, got {fmt}")
        rows = [fh.readline().split() for _ in range(n_vertex)]
    data = np.array(rows, dtype=np.float64)
    cols = [props.index(c) for c in ("x", "y", "z")]
    return data[:, cols]


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"LineMOD layout incomplete, missing: {path}")
    return path


def load_linemod_layout(
    root: str | os.PathLike,
    objects: Iterable[int] | None = None,
    n_points: int = DEFAULT_MODEL_POINTS,
    seed: int = 0,
) -> DatasetManifest:
    """Manifest over a preprocessed LineMOD tree.

    Expected layout, for object id ``NN`` (two digits)::

        models/obj_NN.ply          ASCII PLY, millimeters
        data/NN/gt.yml             {frame_index: [{obj_id, cam_R_m2c (9), cam_t_m2c (mm)}, ...]}
        data/NN/train.txt          frame indices of the training split, one per line
        data/NN/test.txt           frame indices of the test split
        data/NN/rgb/XXXX.png       color;  depth/XXXX.png (mm);  mask/XXXX.png (binary)

    Model points are downsampled to ``n_points`` with a fixed seed; eggbox and
    glue are flagged symmetric.
    """
    import yaml

    root = Path(root)
    ids = sorted(objects) if objects is not None else sorted(LINEMOD_OBJECTS)
    models, entries, frames = {}, {}, []
    rng = np.random.default_rng(seed)
    for oid in ids:
        nn = f"{oid:02d}"
        verts = read_ply_vertices(_require(root / "models" / f"obj_{nn}.ply")) * 1e-3
        if len(verts) > n_points:
            verts = verts[np.sort(rng.choice(len(verts), n_points, replace=False))]
        sym = oid in LINEMOD_SYMMETRIC
        models[oid] = ObjectModel(
            object_id=oid, name=LINEMOD_OBJECTS.get(oid, f"obj_{nn}"), points=verts, symmetric=sym,
            symmetry=Symmetry((0.0, 0.0, 1.0), 2) if sym else None,
        )
        entries[oid] = {"object_id": oid, "name": models[oid].name, "symmetric": sym,
                        "model_file": f"models/obj_{nn}.ply"}
        ddir = root / "data" / nn
        gt = yaml.safe_load(_require(ddir / "gt.yml").read_text()) or {}
        for split in ("train", "test"):
            idx = [ln.strip() for ln in _require(ddir / f"{split}.txt").read_text().splitlines() if ln.strip()]
            for s in idx:
                i = int(s)
                anns = [a for a in gt.get(i, []) if int(a.get("obj_id", oid)) == oid]
                if not anns:
                    raise ValueError(f"{ddir / 'gt.yml'}: no pose for frame {i}")
                a = anns[0]
                pose = Pose.from_matrix(np.array(a["cam_R_m2c"], dtype=np.float64).reshape(3, 3),
                                        np.array(a["cam_t_m2c"], dtype=np.float64) * 1e-3)
                rel = Path("data") / nn
                fe = FrameEntry(
                    frame_id=f"{nn}/{i:04d}", split=split,
                    color=str(rel / "rgb" / f"{i:04d}.png"), depth=str(rel / "depth" / f"{i:04d}.png"),
                    mask=str(rel / "mask" / f"{i:04d}.png"), gt_poses={oid: pose}, mask_object=oid,
                )
                for p in fe.paths():
                    _require(root / p)
                frames.append(fe)
    return DatasetManifest(root, models, frames, LINEMOD_CAMERA, seed, {"layout": "linemod"}, entries)
