"""ADD / ADD-S pose errors, success-rate accuracy and LineMOD-style report tables.

The distance kernels are written against torch so the estimator and refiner
losses call exactly the same code as the evaluation metrics.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
import torch
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from .geometry import Pose

Direction = Literal["gt_to_pred", "pred_to_gt"]

# Per-frame seconds published for DenseFusion and for the two-head variant.
REFERENCE_SECONDS = {"densefusion": 0.06, "context_aware": 0.065}


def max_pairwise_distance(points: np.ndarray) -> float:
    """Exact diameter of a point set (the farthest pair lies on the convex hull)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    try:
        pts = pts[ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        pass
    return float(pdist(pts).max())


def nearest_neighbor_gaps(points: np.ndarray) -> np.ndarray:
    """Distance from every point to its nearest *other* point."""
    d, _ = cKDTree(points).query(points, k=2)
    return d[:, 1]


@dataclass(frozen=True)
class Symmetry:
    """Rotational symmetry about ``axis`` (object frame); ``order`` 0 means continuous."""

    axis: tuple[float, float, float]
    order: int = 0

    @property
    def kind(self) -> str:
        return "continuous" if self.order == 0 else f"discrete({self.order})"

    def to_dict(self) -> dict:
        return {"axis": list(self.axis), "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> Symmetry:
        kind = d["kind"]
        order = 0 if kind == "continuous" else int(kind[len("discrete("):-1])
        return cls(tuple(float(a) for a in d["axis"]), order)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """A known object: the M sampled model points used by losses and metrics.

    ``surface`` / ``surface_colors`` optionally hold a dense sampling of the same
    surface used only for rendering.
    """

    object_id: int
    name: str
    points: np.ndarray
    symmetric: bool
    symmetry: Symmetry | None = None
    diameter: float | None = None
    colors: np.ndarray | None = None  # (M, 3) uint8 albedo
    surface: np.ndarray | None = None
    surface_colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
            raise ValueError(f"object {self.object_id}: need at least 4 model points, shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"object {self.object_id}: non-finite model points")
        object.__setattr__(self, "points", pts)
        diam = max_pairwise_distance(pts)
        if self.diameter is None:
            object.__setattr__(self, "diameter", diam)
        elif abs(self.diameter - diam) > 1e-9:
            raise ValueError(f"object {self.object_id}: diameter {self.diameter} != max pairwise distance {diam}")
        if self.diameter <= 0:
            raise ValueError(f"object {self.object_id}: zero diameter")
        if (self.symmetry is not None) != bool(self.symmetric):
            raise ValueError(f"object {self.object_id}: symmetry descriptor present iff symmetric")

    @property
    def n_points(self) -> int:
        return len(self.points)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    @cached_property
    def points_torch(self) -> torch.Tensor:
        return torch.from_numpy(self.points)


# -- distance kernels -----------------------------------------------------------


def _transform(R: torch.Tensor, t: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    return pts @ R.transpose(-1, -2) + t.unsqueeze(-2)


def add_distance(gt_R, gt_t, pred_R, pred_t, pts: torch.Tensor) -> torch.Tensor:
    """Mean distance between corresponding transformed model points.

    ``pred_R`` / ``pred_t`` may carry a leading batch dimension; the result has
    that batch shape.
    """
    a = _transform(gt_R, gt_t, pts)
    b = _transform(pred_R, pred_t, pts)
    return torch.linalg.vector_norm(a - b, dim=-1).mean(-1)


def adds_distance(
    gt_R,
    gt_t,
    pred_R,
    pred_t,
    pts: torch.Tensor,
    tree: cKDTree | None = None,
    direction: Direction = "gt_to_pred",
    ref_pts: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean closest-point distance between the two transformed model copies.

    ``gt_to_pred`` matches every ground-truth point to its nearest predicted point;
    ``pred_to_gt`` is the transposed matching. Nearest neighbours are found by
    moving the query copy into the other copy's object frame, where a single
    KD-tree over the model points answers every query. The distances themselves
    are recomputed in the camera frame so gradients flow through the pose.

    ``ref_pts`` optionally gives a different (denser) point set for the matched
    copy; ``tree`` must then be built over ``ref_pts``.
    """
    ref_pts = pts if ref_pts is None else ref_pts
    if tree is None:
        tree = cKDTree(ref_pts.detach().cpu().numpy())
    if direction == "gt_to_pred":
        query, ref_R, ref_t = _transform(gt_R, gt_t, pts), pred_R, pred_t
    elif direction == "pred_to_gt":
        query, ref_R, ref_t = _transform(pred_R, pred_t, pts), gt_R, gt_t
    else:
        raise ValueError(f"unknown direction {direction!r}")
    with torch.no_grad():
        local = (query - ref_t.unsqueeze(-2)) @ ref_R
        q = local.detach().cpu().numpy()
        # non-finite poses still yield (non-finite) distances instead of a KD-tree error
        q = np.nan_to_num(q, nan=0.0, posinf=0.0, neginf=0.0)
        _, idx = tree.query(q.reshape(-1, 3))
        idx = torch.from_numpy(idx.reshape(q.shape[:-1]))
    matched = _transform(ref_R, ref_t, ref_pts[idx])
    return torch.linalg.vector_norm(query - matched, dim=-1).mean(-1)


def _pose_tensors(p: Pose) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(p.R), torch.from_numpy(p.t)


def _require_points(model: ObjectModel):
    if model.points is None or len(model.points) == 0:
        raise ValueError(f"object {model.object_id} has no model points")


def add_metric(gt: Pose, pred: Pose, model: ObjectModel) -> float:
    """Average distance of corresponding model points under the two poses (meters)."""
    _require_points(model)
    return float(add_distance(*_pose_tensors(gt), *_pose_tensors(pred), model.points_torch))


def adds_metric(gt: Pose, pred: Pose, model: ObjectModel, direction: Direction = "gt_to_pred") -> float:
    """Average closest-point distance (meters); see :func:`adds_distance`."""
    _require_points(model)
    return float(
        adds_distance(*_pose_tensors(gt), *_pose_tensors(pred), model.points_torch, model.tree, direction)
    )


def governing_metric(model: ObjectModel) -> str:
    return "adds" if model.symmetric else "add"


# -- evaluation records and accuracy ---------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    object_id: int
    gt_pose: Pose
    pred_pose: Pose
    add: float
    adds: float
    refinement_iterations: int = 0
    inference_seconds: float = float("nan")
    frame_id: str = ""

    def __post_init__(self):
        if self.add < 0 or self.adds < 0:
            raise ValueError("metric values must be non-negative")
        if self.adds > self.add + 1e-12:
            raise ValueError(f"ADD-S {self.adds} exceeds ADD {self.add}")
        if self.refinement_iterations < 0:
            raise ValueError("refinement_iterations must be >= 0")

    @classmethod
    def evaluate(cls, object_id, gt: Pose, pred: Pose, model: ObjectModel, **kw) -> EvalRecord:
        return cls(object_id, gt, pred, add_metric(gt, pred, model), adds_metric(gt, pred, model), **kw)


@dataclass(frozen=True)
class ThresholdRule:
    """Success threshold: a fraction of the model diameter or an absolute distance."""

    kind: Literal["relative", "absolute"] = "relative"
    value: float = 0.1

    def __post_init__(self):
        if self.kind == "relative":
            if not 0 < self.value <= 1:
                raise ValueError("relative threshold must lie in (0, 1]")
        elif self.kind == "absolute":
            if not self.value > 0:
                raise ValueError("absolute threshold must be positive")
        else:
            raise ValueError(f"unknown threshold kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> ThresholdRule:
        """Parse ``rel:0.1`` or ``abs:0.02``."""
        head, _, val = text.partition(":")
        kinds = {"rel": "relative", "relative": "relative", "abs": "absolute", "absolute": "absolute"}
        if head not in kinds or not val:
            raise ValueError(f"threshold must look like rel:0.1 or abs:0.02, got {text!r}")
        return cls(kinds[head], float(val))

    def __str__(self) -> str:
        return f"{'rel' if self.kind == 'relative' else 'abs'}:{self.value:g}"

    def threshold(self, model: ObjectModel) -> float:
        return self.value * model.diameter if self.kind == "relative" else self.value


@dataclass
class ObjectAccuracy:
    object_id: int
    name: str
    symmetric: bool
    n_frames: int
    accuracy: float  # fraction in [0, 1]
    mean_add: float
    mean_adds: float
    mean_seconds: float | None


@dataclass
class AccuracyResult:
    rule: ThresholdRule
    per_object: dict[int, ObjectAccuracy]

    @property
    def mean(self) -> float:
        """Unweighted mean over objects."""
        return float(np.mean([o.accuracy for o in self.per_object.values()]))


def accuracy(
    records: Iterable[EvalRecord],
    models: Mapping[int, ObjectModel],
    rule: ThresholdRule = ThresholdRule(),
) -> AccuracyResult:
    """Fraction of records per object whose governing metric is below threshold.

    Symmetric objects are scored by ADD-S, the others by ADD.
    """
    grouped: dict[int, list[EvalRecord]] = {}
    for r in records:
        if r.object_id not in models:
            raise KeyError(f"unknown object id {r.object_id}")
        grouped.setdefault(r.object_id, []).append(r)
    per_object = {}
    for oid in sorted(grouped):
        m, rs = models[oid], grouped[oid]
        thr = rule.threshold(m)
        metric = governing_metric(m)
        hits = sum(getattr(r, metric) < thr for r in rs)
        secs = [r.inference_seconds for r in rs if np.isfinite(r.inference_seconds)]
        per_object[oid] = ObjectAccuracy(
            object_id=oid,
            name=m.name,
            symmetric=m.symmetric,
            n_frames=len(rs),
            accuracy=float(hits) / len(rs),
            mean_add=float(np.mean([r.add for r in rs])),
            mean_adds=float(np.mean([r.adds for r in rs])),
            mean_seconds=float(np.mean(secs)) if secs else None,
        )
    return AccuracyResult(rule, per_object)


# -- report tables ------------------------------------------------------------------

CSV_COLUMNS = ("object", "symmetric", "n_frames", "accuracy_percent", "mean_add", "mean_adds", "mean_seconds")


@dataclass
class ReportRow:
    object: str
    symmetric: bool
    n_frames: int
    accuracy_percent: float
    mean_add: float
    mean_adds: float
    mean_seconds: float | None = None


@dataclass
class Report:
    rows: list[ReportRow]
    mean: ReportRow
    timing: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "meta": self.meta,
            "rows": [vars(r).copy() for r in self.rows],
            "mean": vars(self.mean).copy(),
        }
        if self.timing is not None:
            d["timing"] = self.timing
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Report:
        return cls(
            rows=[ReportRow(**r) for r in d["rows"]],
            mean=ReportRow(**d["mean"]),
            timing=d.get("timing"),
            meta=d.get("meta", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> Report:
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in [*self.rows, self.mean]:
            w.writerow([
                r.object, int(r.symmetric), r.n_frames, repr(float(r.accuracy_percent)), repr(float(r.mean_add)),
                repr(float(r.mean_adds)), "" if r.mean_seconds is None else repr(float(r.mean_seconds)),
            ])
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[ReportRow]:
        out = []
        for rec in csv.DictReader(io.StringIO(text)):
            out.append(ReportRow(
                object=rec["object"],
                symmetric=bool(int(rec["symmetric"])),
                n_frames=int(rec["n_frames"]),
                accuracy_percent=float(rec["accuracy_percent"]),
                mean_add=float(rec["mean_add"]),
                mean_adds=float(rec["mean_adds"]),
                mean_seconds=float(rec["mean_seconds"]) if rec["mean_seconds"] else None,
            ))
        return out

    def to_text(self) -> str:
        """Aligned table; symmetric objects are marked with ``*``."""
        lines = [f"{'object':<16}{'frames':>8}{'acc %':>9}{'ADD mm':>10}{'ADD-S mm':>10}{'s/frame':>10}"]
        for r in [*self.rows, self.mean]:
            name = f"*{r.object}*" if r.symmetric else r.object
            secs = "" if r.mean_seconds is None else f"{r.mean_seconds:.4f}"
            lines.append(
                f"{name:<16}{r.n_frames:>8d}{r.accuracy_percent:>9.2f}"
                f"{r.mean_add * 1e3:>10.2f}{r.mean_adds * 1e3:>10.2f}{secs:>10}"
            )
        if self.timing is not None:
            ref = self.timing.get("reference_seconds", {})
            lines.append(
                f"per-frame seconds: mean {self.timing['mean_seconds']:.4f}, "
                f"median {self.timing['median_seconds']:.4f} "
                + " ".join(f"({k} reference {v})" for k, v in ref.items())
            )
        lines.append("* symmetric object (scored by ADD-S)")
        return "\n".join(lines)


def timing_summary(seconds: Sequence[float]) -> dict | None:
    secs = [float(s) for s in seconds if np.isfinite(s)]
    if not secs:
        return None
    return {
        "n_frames": len(secs),
        "mean_seconds": float(np.mean(secs)),
        "median_seconds": float(statistics.median(secs)),
        "reference_seconds": dict(REFERENCE_SECONDS),
    }


def report_table(result: AccuracyResult, timing: dict | None = None, meta: dict | None = None) -> Report:
    if not result.per_object:
        raise ValueError("no evaluation results")
    rows = [
        ReportRow(o.name, bool(o.symmetric), o.n_frames, 100.0 * float(o.accuracy), o.mean_add, o.mean_adds, o.mean_seconds)
        for o in result.per_object.values()
    ]
    secs = [r.mean_seconds for r in rows if r.mean_seconds is not None]
    mean = ReportRow(
        object="MEAN",
        symmetric=False,
        n_frames=sum(r.n_frames for r in rows),
        accuracy_percent=float(np.mean([r.accuracy_percent for r in rows])),
        mean_add=float(np.mean([r.mean_add for r in rows])),
        mean_adds=float(np.mean([r.mean_adds for r in rows])),
        mean_seconds=float(np.mean(secs)) if secs else None,
    )
    meta = dict(meta or {})
    meta.setdefault("threshold", str(result.rule))
    return Report(rows, mean, timing, meta)
