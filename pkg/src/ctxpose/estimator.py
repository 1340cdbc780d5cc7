"""Context-aware per-pixel pose estimation.

Symmetric and non-symmetric objects get separate pose heads on top of the
shared dense-fusion features. Every sampled pixel predicts a rotation, a
translation (as an offset from its own back-projected point) and a positive
confidence; training minimizes the confidence-weighted per-pixel distance loss
and inference keeps the most confident pixel's pose.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from torch import nn

from .densefusion import DenseFusion, FusedFeatureSet, FusionConfig, gain_normalized, he_init
from .geometry import (
    CameraIntrinsics,
    Pose,
    UnitQuaternion,
    deproject,
    normalize_quat_torch,
    quat_to_matrix_torch,
)
from .metrics import ObjectModel, add_distance, add_metric, adds_distance, adds_metric
from .scenegen import Frame
from .segmentation import SegmentationMap, crop_and_mask, gt_segment

log = logging.getLogger(__name__)

Head = Literal["symmetric", "nonsymmetric"]
HEADS: tuple[Head, Head] = ("symmetric", "nonsymmetric")


class NonFiniteLossError(FloatingPointError):
    pass


def route(model: ObjectModel) -> Head:
    """Head selector: the object's symmetry flag decides."""
    return "symmetric" if model.symmetric else "nonsymmetric"


@dataclass(frozen=True)
class EstimatorConfig:
    depth_symmetric: int = 4
    depth_nonsymmetric: int = 6
    hidden: int = 128
    w: float = 0.015
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss_points: int | None = 100  # ADD-S query points per training loss evaluation
    optimizer: Literal["sgd", "adam"] = "adam"
    lr: float = 5e-4
    momentum: float = 0.9  # sgd only
    batch_size: int = 2
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    lr_milestones: tuple[int, ...] = (42, 54)  # lr *= lr_gamma after each of these epochs
    lr_gamma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.depth_nonsymmetric <= self.depth_symmetric:
            raise ValueError("the non-symmetric head must be deeper than the symmetric one")
        if self.w <= 0:
            raise ValueError("confidence regularization weight must be positive")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")

    @property
    def n_points(self) -> int:
        return self.fusion.n_points

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EstimatorConfig:
        d = dict(d)
        d["fusion"] = FusionConfig.from_dict(d["fusion"])
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x):
        return x + self.fc2(F.relu(self.fc1(F.relu(x))))


def _branch(width: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(width, 64), nn.ReLU(), nn.Linear(64, out))


class PoseHead(nn.Module):
    """Per-pixel residual MLP with rotation, translation-offset and confidence branches."""

    def __init__(self, d_in: int, hidden: int, depth: int):
        super().__init__()
        self.inp = nn.Linear(d_in, hidden)
        self.blocks = nn.Sequential(*[ResidualBlock(hidden) for _ in range(depth)])
        he_init(self.inp)
        he_init(self.blocks)
        self.rot = _branch(hidden, 4)
        self.trans = _branch(hidden, 3)
        self.conf = _branch(hidden, 1)
        self.depth = depth

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = F.relu(self.blocks(self.inp(feats)))
        return self.rot(h), self.trans(h), self.conf(h).squeeze(-1)


@dataclass(frozen=True)
class PerPixelPrediction:
    rotation: UnitQuaternion
    translation: tuple[float, float, float]
    confidence: float
    pixel_index: int

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation)


class Predictions(NamedTuple):
    """Batched per-pixel outputs; ``quat`` rows are unit norm with ``w >= 0``."""

    quat: torch.Tensor  # (N, 4)
    translation: torch.Tensor  # (N, 3) meters
    confidence: torch.Tensor  # (N,)
    pixel_index: np.ndarray  # (N,) index into the masked-pixel list

    def __len__(self):
        return len(self.pixel_index)

    def as_list(self) -> list[PerPixelPrediction]:
        q = self.quat.detach().double().numpy()
        t = self.translation.detach().double().numpy()
        c = self.confidence.detach().double().numpy()
        return [
            PerPixelPrediction(UnitQuaternion.from_vector(q[i]), tuple(t[i]), float(c[i]), int(self.pixel_index[i]))
            for i in range(len(self))
        ]


@dataclass
class Observation:
    """One object in one frame, ready for the networks."""

    object_id: int
    color: np.ndarray  # (h, w, 3) uint8 crop
    pixels: np.ndarray  # (n, 2) crop-local (row, col) of valid-depth object pixels
    points: np.ndarray  # (n, 3) back-projected camera-frame points, meters
    bbox: tuple[int, int, int, int]
    frame_id: str = ""
    gt_pose: Pose | None = None
    skipped: int = 0


def observe(
    frame: Frame,
    object_id: int,
    seg: SegmentationMap | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> Observation:
    """Segment, crop and back-project one object of a frame."""
    seg = seg if seg is not None else gt_segment(frame)
    k = intrinsics or frame.intrinsics
    crop = crop_and_mask(seg, object_id, frame)
    d = deproject(frame.depth, k, seg.channel(object_id))
    if len(d.points) == 0:
        raise ValueError(f"object {object_id} in frame {frame.frame_id!r} has no valid depth")
    return Observation(
        object_id=object_id,
        color=crop.color,
        pixels=d.pixels - np.array(crop.bbox[:2]),
        points=d.points,
        bbox=crop.bbox,
        frame_id=frame.frame_id,
        gt_pose=frame.gt_poses.get(object_id),
        skipped=d.skipped,
    )


@dataclass
class Encoding:
    """Features an estimator pass leaves behind for the refiner."""

    obs: Observation
    color_map: torch.Tensor  # (d_rgb, h, w)
    fused: FusedFeatureSet

    @property
    def sample(self) -> np.ndarray:
        return self.fused.sample


class PoseEstimator(nn.Module):
    def __init__(self, cfg: EstimatorConfig = EstimatorConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.fusion.d_fused
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.fusion = DenseFusion(cfg.fusion)
            self.heads = nn.ModuleDict({
                "symmetric": PoseHead(d, cfg.hidden, cfg.depth_symmetric),
                "nonsymmetric": PoseHead(d, cfg.hidden, cfg.depth_nonsymmetric),
            })

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, obs: Observation, rng: np.random.Generator, sample: np.ndarray | None = None) -> Encoding:
        L = self.cfg.fusion.length_scale
        crop = gain_normalized(obs.color, obs.pixels) if self.cfg.fusion.normalize_gain else obs.color
        color_map = self.fusion.embed_color(crop)
        pts = torch.from_numpy(obs.points).to(self.dtype)
        geo, _ = self.fusion.embed_geometry((pts - pts.mean(0)) / L)
        fused = self.fusion.fuse(color_map, geo, obs.pixels, self.cfg.n_points, rng, sample)
        return Encoding(obs, color_map, fused)

    def predict(self, enc: Encoding, head: Head) -> Predictions:
        raw_q, offset, raw_c = self.heads[head](enc.fused.features)
        pts = torch.from_numpy(enc.obs.points[enc.sample]).to(self.dtype)
        return Predictions(
            quat=normalize_quat_torch(raw_q),
            translation=pts + offset * self.cfg.fusion.length_scale,
            confidence=F.softplus(raw_c),
            pixel_index=enc.sample,
        )

    def forward(self, obs: Observation, head: Head, rng: np.random.Generator) -> tuple[Predictions, Encoding]:
        enc = self.encode(obs, rng)
        return self.predict(enc, head), enc


def predict(features: FusedFeatureSet, head: Head, est: PoseEstimator, points: np.ndarray) -> Predictions:
    """Head outputs for already fused features; ``points`` are the masked points the sample indexes."""
    obs = Observation(0, np.zeros((0, 0, 3), np.uint8), np.zeros((0, 2), int), points, (0, 0, 0, 0))
    return est.predict(Encoding(obs, torch.empty(0), features), head)


# -- losses -------------------------------------------------------------------------------


class LossModel:
    """Model points as tensors of one dtype, plus the ADD-S query subset.

    ``n_points`` caps how many ground-truth points query the KD-tree for ADD-S;
    they are matched against all model points, so the subset only thins the
    average and leaves the sampling floor of the metric unchanged. ADD always
    uses every point.
    """

    def __init__(self, model: ObjectModel, n_points: int | None = None, dtype=torch.float64, seed: int = 0):
        pts = model.points
        self.model = model
        self.symmetric = model.symmetric
        self.points = torch.from_numpy(np.ascontiguousarray(pts)).to(dtype)
        if n_points is not None and n_points < len(pts):
            idx = np.sort(np.random.default_rng(seed).choice(len(pts), n_points, replace=False))
            self.query_points = self.points[torch.from_numpy(idx)]
        else:
            self.query_points = self.points
        self.tree = model.tree

    def distances(self, gt: Pose, R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """ADD (non-symmetric) or ADD-S (symmetric) of each pose in the batch ``R``, ``t``."""
        dt = self.points.dtype
        gR = torch.from_numpy(gt.R).to(dt)
        gt_ = torch.from_numpy(gt.t).to(dt)
        if self.symmetric:
            return adds_distance(gR, gt_, R, t, self.query_points, self.tree, ref_pts=self.points)
        return add_distance(gR, gt_, R, t, self.points)


def per_pixel_loss(pred: PerPixelPrediction, gt: Pose, model: ObjectModel) -> float:
    """The metric of the object's type evaluated at this pixel's pose."""
    if model.symmetric:
        return adds_metric(gt, pred.pose, model)
    return add_metric(gt, pred.pose, model)


def pixel_distances(preds: Predictions, gt: Pose, lm: LossModel) -> torch.Tensor:
    R = quat_to_matrix_torch(preds.quat.to(lm.points.dtype))
    return lm.distances(gt, R, preds.translation.to(lm.points.dtype))


def total_loss(distances, confidences, w: float):
    """``mean_i (L_i c_i - w log c_i)`` over the sampled pixels.

    Accepts tensors (differentiable) or array-likes.
    """
    if isinstance(distances, torch.Tensor) or isinstance(confidences, torch.Tensor):
        d = torch.as_tensor(distances)
        c = torch.as_tensor(confidences, dtype=d.dtype)
        if bool((c <= 0).any()):
            raise ValueError("confidences must be positive")
        return (d * c - w * torch.log(c)).mean()
    d = np.asarray(distances, dtype=np.float64)
    c = np.asarray(confidences, dtype=np.float64)
    if np.any(c <= 0):
        raise ValueError("confidences must be positive")
    return float(np.mean(d * c - w * np.log(c)))


def optimal_confidence(distance, w: float):
    """Per-pixel minimizer ``c* = w / L`` of ``L c - w log c`` (for ``L > 0``)."""
    return w / distance


def select_best(preds: Sequence[PerPixelPrediction] | Predictions) -> Pose:
    """Pose of the most confident pixel; ties go to the lowest pixel index."""
    if len(preds) == 0:
        raise ValueError("no predictions to select from")
    if isinstance(preds, Predictions):
        c = preds.confidence.detach().double().numpy()
        cand = np.nonzero(c == c.max())[0]
        i = cand[np.argmin(preds.pixel_index[cand])]
        q = preds.quat[i].detach().double().numpy()
        t = preds.translation[i].detach().double().numpy()
        return Pose(UnitQuaternion.from_vector(q), tuple(t))
    best = max(preds, key=lambda p: (p.confidence, -p.pixel_index))
    return best.pose


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainSample:
    obs: Observation
    gt: Pose
    head: Head


def build_samples(frames: Iterable[Frame], models: Mapping[int, ObjectModel]) -> list[TrainSample]:
    out = []
    for fr in frames:
        seg = gt_segment(fr)
        for oid in fr.object_ids():
            if oid not in models:
                continue
            obs = observe(fr, oid, seg)
            out.append(TrainSample(obs, fr.gt_poses[oid], route(models[oid])))
    return out


@dataclass
class EpochStats:
    epoch: int
    n_samples: int
    mean_loss: float  # confidence-regularized objective
    mean_distance: float  # meters, distance of the most confident pixel's pose
    per_object: dict[int, float]
    per_head: dict[str, float]
    lr: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_object"] = {str(k): v for k, v in self.per_object.items()}
        return d


def make_optimizer(params, cfg) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def loss_models(models: Mapping[int, ObjectModel], n_points: int | None, dtype, seed: int = 0) -> dict[int, LossModel]:
    return {oid: LossModel(m, n_points, dtype, seed) for oid, m in models.items()}


def sample_loss(est: PoseEstimator, s: TrainSample, lm: LossModel, rng) -> tuple[torch.Tensor, float]:
    preds, _ = est(s.obs, s.head, rng)
    d = pixel_distances(preds, s.gt, lm)
    loss = total_loss(d, preds.confidence.to(d.dtype), est.cfg.w)
    best = int(torch.argmax(preds.confidence))
    return loss, float(d[best].detach())


def train_epoch(
    samples: Sequence[TrainSample],
    est: PoseEstimator,
    opt: torch.optim.Optimizer,
    lms: Mapping[int, LossModel],
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    """One pass over ``samples`` in random order, stepping every ``batch_size`` samples.

    Gradients are reset to ``None`` before each step, so an optimizer never moves
    the head a batch did not route to.
    """
    est.train()
    order = rng.permutation(len(samples))
    B = est.cfg.batch_size
    losses, dists = [], []
    per_obj: dict[int, list[float]] = {}
    per_head: dict[str, list[float]] = {}
    for start in range(0, len(order), B):
        opt.zero_grad(set_to_none=True)
        batch = [samples[i] for i in order[start:start + B]]
        total = 0.0
        for s in batch:
            loss, dist = sample_loss(est, s, lms[s.obs.object_id], rng)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss on frame {s.obs.frame_id!r}, object {s.obs.object_id}")
            total = total + loss / len(batch)
            losses.append(float(loss.detach()))
            dists.append(dist)
            per_obj.setdefault(s.obs.object_id, []).append(dist)
            per_head.setdefault(s.head, []).append(float(loss.detach()))
        total.backward()
        opt.step()
    return EpochStats(
        epoch=epoch,
        n_samples=len(samples),
        mean_loss=float(np.mean(losses)) if losses else math.nan,
        mean_distance=float(np.mean(dists)) if dists else math.nan,
        per_object={k: float(np.mean(v)) for k, v in sorted(per_obj.items())},
        per_head={k: float(np.mean(v)) for k, v in sorted(per_head.items())},
        lr=float(opt.param_groups[0]["lr"]),
    )


@torch.no_grad()
def estimate(est: PoseEstimator, obs: Observation, head: Head, rng) -> tuple[Pose, Predictions, Encoding]:
    est.eval()
    preds, enc = est(obs, head, rng)
    return select_best(preds), preds, enc
