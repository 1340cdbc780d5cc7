"""Iterative pose refinement with per-type refiner networks.

Each iteration moves the observed object points into the frame of the current
pose estimate (``invert(current)``), re-embeds their geometry, fuses it with
the estimator's color features into a global vector and regresses a residual
pose ``r``; the new estimate is ``compose(current, r)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .densefusion import FusionConfig, FusionMLP, GeometryEmbedder, fused_features, he_init
from .estimator import (
    Encoding,
    Head,
    LossModel,
    NonFiniteLossError,
    PoseEstimator,
    TrainSample,
    estimate,
)
from .geometry import (
    Pose,
    UnitQuaternion,
    compose,
    normalize_quat_torch,
    quat_to_matrix_torch,
)


class CurriculumNotReadyError(RuntimeError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 2  # K at inference
    train_iterations: int = 2  # refinement passes per training sample
    jitter_deg: float = 8.0  # std of a random rotation applied to training start poses
    jitter_m: float = 0.005  # std per axis of a random start-pose translation
    gt_start_fraction: float = 0.5  # share of training samples that start from jittered ground truth
    view_rays: bool = True  # also embed each point's camera ray, rotated into the canonical frame
    centroid_input: bool = True  # translation output also reads the canonical centroid
    color_moments: bool = True  # pooled color x canonical-position moments feed the fc stack
    curriculum_margin: float = 0.013  # meters
    hidden: int = 128
    fc_layers_symmetric: int = 3
    fc_layers_nonsymmetric: int = 4
    optimizer: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9  # sgd only
    batch_size: int = 4
    seed: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        # 0 keeps the gate shut and inf opens it at the first epoch
        if not self.curriculum_margin >= 0:
            raise ValueError("curriculum margin must be >= 0")
        if self.train_iterations < 1 or self.jitter_deg < 0 or self.jitter_m < 0:
            raise ValueError("train_iterations must be >= 1 and jitter must be >= 0")
        if not 0.0 <= self.gt_start_fraction <= 1.0:
            raise ValueError("gt_start_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RefineConfig:
        return cls(**d)


def color_position_correlation(color: torch.Tensor, xyz: torch.Tensor) -> torch.Tensor:
    """Correlation of every color channel with every canonical coordinate, flattened.

    A small rotation of the cloud changes these linearly, which gives the rotation
    output a signal it can read without a deep stack.
    """
    c = color - color.mean(dim=0)
    x = xyz - xyz.mean(dim=0)
    cov = c.T @ x / len(x)
    scale = c.pow(2).mean(dim=0).sqrt().clamp_min(1e-6)[:, None] * x.pow(2).mean(dim=0).sqrt().clamp_min(1e-6)[None]
    return (cov / scale).flatten()


class RefinerHead(nn.Module):
    """Own geometry embedder and fusion MLP, then a fully connected stack.

    With ``centroid_input`` the translation output layer also sees the mean of the
    embedder's input rows (canonical centroid and, with view rays, the mean ray).
    Its centroid weights start at the identity, so a shifted cloud shifts the
    predicted translation by the same amount before any training.
    """

    def __init__(self, fcfg: FusionConfig, hidden: int, n_fc: int, view_rays: bool = False,
                 centroid_input: bool = False, color_moments: bool = False):
        super().__init__()
        in_dim = 6 if view_rays else 3
        self.centroid_input = centroid_input
        self.color_moments = color_moments
        self.geometry = GeometryEmbedder(fcfg, in_dim)
        self.fusion = FusionMLP(fcfg)
        layers, d = [], fcfg.d_global + fcfg.geo_hidden
        for i in range(n_fc):
            out = hidden if i < n_fc - 1 else hidden // 2
            layers += [nn.Linear(d, out), nn.ReLU()]
            d = out
        self.fc = nn.Sequential(*layers)
        he_init(self.fc)
        n_mom = 3 * fcfg.d_rgb if color_moments else 0
        self.rot = nn.Linear(d + n_mom, 4)
        self.trans = nn.Linear(d + (in_dim if centroid_input else 0), 3)
        # start close to the identity residual
        with torch.no_grad():
            self.rot.weight.mul_(0.01)
            self.rot.weight[:, d:].zero_()
            self.rot.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))
            self.trans.weight.mul_(0.01)
            self.trans.bias.zero_()
            if centroid_input:
                self.trans.weight[:, d:].zero_()
                self.trans.weight[:, d:d + 3].copy_(torch.eye(3))

    def forward(self, canon: torch.Tensor, color: torch.Tensor, sample: np.ndarray):
        geo, pooled = self.geometry(canon)
        fused = fused_features(self.fusion, color, geo[torch.as_tensor(sample, dtype=torch.long)], sample)
        h = self.fc(torch.cat([fused.global_feature, pooled], dim=-1))
        rh = h
        if self.color_moments:
            rh = torch.cat([h, color_position_correlation(color, canon[torch.as_tensor(sample, dtype=torch.long), :3])], dim=-1)
        th = torch.cat([h, canon.mean(dim=-2)], dim=-1) if self.centroid_input else h
        return self.rot(rh), self.trans(th)


class Refiner(nn.Module):
    def __init__(self, fcfg: FusionConfig = FusionConfig(), cfg: RefineConfig = RefineConfig()):
        super().__init__()
        self.cfg = cfg
        self.fcfg = fcfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.heads = nn.ModuleDict({
                "symmetric": RefinerHead(fcfg, cfg.hidden, cfg.fc_layers_symmetric, cfg.view_rays,
                                          cfg.centroid_input, cfg.color_moments),
                "nonsymmetric": RefinerHead(fcfg, cfg.hidden, cfg.fc_layers_nonsymmetric, cfg.view_rays,
                                             cfg.centroid_input, cfg.color_moments),
            })

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def residual(self, enc: Encoding, R: torch.Tensor, t: torch.Tensor, head: Head):
        """Residual (unit quaternion, translation in meters) for the current pose ``R, t``."""
        L = self.fcfg.length_scale
        pts = torch.from_numpy(enc.obs.points).to(R.dtype)
        canon = (pts - t) @ R / L  # rows R^T (x - t)
        if self.cfg.view_rays:
            # without the viewing direction a shift along the line of sight is hard to tell apart
            # from seeing a different side of the object
            rays = pts / pts.norm(dim=1, keepdim=True).clamp_min(1e-9)
            canon = torch.cat([canon, rays @ R], dim=1)
        raw_q, raw_t = self.heads[head](
            canon.to(self.dtype), enc.fused.color.detach().to(self.dtype), enc.sample
        )
        return raw_q, raw_t * L


def jitter(pose: Pose, rng: np.random.Generator, deg: float, meters: float) -> Pose:
    """``pose`` followed by a random object-frame rotation and translation."""
    if deg == 0 and meters == 0:
        return pose
    axis = rng.normal(size=3)
    angle = math.radians(rng.normal(0.0, deg)) if deg > 0 else 0.0
    dt = rng.normal(0.0, meters, 3) if meters > 0 else np.zeros(3)
    return compose(pose, Pose(UnitQuaternion.from_axis_angle(axis, angle), tuple(dt)))


def refine_once(enc: Encoding, current: Pose, head: Head, refiner: Refiner) -> Pose:
    """One refinement step; the residual is applied in the current canonical frame."""
    with torch.no_grad():
        R = torch.from_numpy(current.R)
        t = torch.from_numpy(current.t)
        raw_q, dt = refiner.residual(enc, R, t, head)
    r = Pose(UnitQuaternion.from_vector(raw_q.double().numpy()), tuple(dt.double().numpy()))
    return compose(current, r)


def refine(enc: Encoding, initial: Pose, k: int, head: Head, refiner: Refiner) -> Pose:
    """``k`` successive :func:`refine_once` calls; ``k == 0`` returns ``initial``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    pose = initial
    for _ in range(k):
        pose = refine_once(enc, pose, head, refiner)
    return pose


def refine_step_torch(enc: Encoding, R: torch.Tensor, t: torch.Tensor, head: Head, refiner: Refiner):
    """Differentiable :func:`refine_once` on matrices: returns ``(R @ R_r, R @ t_r + t)``."""
    raw_q, dt = refiner.residual(enc, R, t, head)
    Rr = quat_to_matrix_torch(normalize_quat_torch(raw_q)).to(R.dtype)
    return R @ Rr, R @ dt.to(R.dtype) + t


def curriculum_gate(mean_loss: float, margin: float) -> bool:
    return mean_loss < margin


class CurriculumGate:
    """Opens once the estimator's mean distance (meters) drops below ``margin`` and stays open."""

    def __init__(self, margin: float, is_open: bool = False, opened_at: int | None = None):
        self.margin = margin
        self.is_open = is_open
        self.opened_at = opened_at

    def update(self, mean_distance: float, epoch: int) -> bool:
        if not self.is_open and curriculum_gate(mean_distance, self.margin):
            self.is_open = True
            self.opened_at = epoch
        return self.is_open


@dataclass
class RefinerStats:
    epoch: int
    n_samples: int
    mean_initial: float  # meters, estimator pose
    mean_refined: float  # meters, after the last training iteration
    per_head: dict[str, float]
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


def train_refiner_epoch(
    samples: Sequence[TrainSample],
    est: PoseEstimator,
    refiner: Refiner,
    opt: torch.optim.Optimizer,
    lms: Mapping[int, LossModel],
    gate: CurriculumGate,
    rng: np.random.Generator,
    epoch: int = 0,
) -> RefinerStats:
    """Train the refiners on jittered start poses from the frozen estimator or the ground truth.

    Each sample is refined ``train_iterations`` times; every iteration adds the
    routed distance between the ground truth and its refined pose to the loss,
    and the next iteration starts from the detached result.

    Raises:
        CurriculumNotReadyError: if the curriculum gate has not opened.
    """
    if not gate.is_open:
        raise CurriculumNotReadyError(
            f"refiner training refused: estimator mean distance has not dropped below {gate.margin} m yet"
        )
    refiner.train()
    cfg = refiner.cfg
    order = rng.permutation(len(samples))
    init, final = [], []
    per_head: dict[str, list[float]] = {}
    for start in range(0, len(order), cfg.batch_size):
        opt.zero_grad(set_to_none=True)
        batch = [samples[i] for i in order[start:start + cfg.batch_size]]
        total = 0.0
        for s in batch:
            pose, _, enc = estimate(est, s.obs, s.head, rng)
            if rng.random() < cfg.gt_start_fraction:
                # the estimator's own errors are partly predictable from the image on training
                # frames, so some starts must carry no information beyond the geometry
                pose = s.gt
            pose = jitter(pose, rng, cfg.jitter_deg, cfg.jitter_m)
            lm = lms[s.obs.object_id]
            dtype = lm.points.dtype
            R = torch.from_numpy(pose.R).to(dtype)
            t = torch.from_numpy(pose.t).to(dtype)
            with torch.no_grad():
                init.append(float(lm.distances(s.gt, R, t)))
            for _ in range(cfg.train_iterations):
                R, t = refine_step_torch(enc, R, t, s.head, refiner)
                d = lm.distances(s.gt, R, t)
                if not torch.isfinite(d):
                    raise NonFiniteLossError(f"non-finite refiner loss on frame {s.obs.frame_id!r}")
                total = total + d / (len(batch) * cfg.train_iterations)
                R, t = R.detach(), t.detach()
            final.append(float(d.detach()))
            per_head.setdefault(s.head, []).append(float(d.detach()))
        total.backward()
        opt.step()
    return RefinerStats(
        epoch=epoch,
        n_samples=len(samples),
        mean_initial=float(np.mean(init)) if init else math.nan,
        mean_refined=float(np.mean(final)) if final else math.nan,
        per_head={k: float(np.mean(v)) for k, v in sorted(per_head.items())},
        lr=float(opt.param_groups[0]["lr"]),
    )
