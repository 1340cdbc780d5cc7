"""Command line driver: ``gen-data``, ``train``, ``eval`` and ``report``.

Every artifact written here (training log lines, checkpoints, reports, eval
records) carries the run seed and a hash of the run configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import DEFAULT_K, Checkpoint, config_hash, load_checkpoint
from .estimator import (
    EstimatorConfig,
    PoseEstimator,
    build_samples,
    estimate,
    loss_models,
    make_optimizer,
    observe,
    route,
    train_epoch,
)
from .geometry import CameraIntrinsics, Pose, project_points
from .metrics import EvalRecord, Report, ThresholdRule, accuracy, report_table, timing_summary
from .refiner import CurriculumGate, RefineConfig, Refiner, refine_once, train_refiner_epoch
from .scenegen import DatasetManifest, SceneConfig, generate_dataset, pose_from_json, pose_to_json
from .segmentation import gt_segment

log = logging.getLogger("ctxpose")


@dataclass
class RunConfig:
    dataset: str = "data"
    out: str = "run"
    seed: int = 0
    epochs: int = 60
    threshold: str = "rel:0.1"
    iterations: tuple[int, ...] = DEFAULT_K
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    refiner: RefineConfig = field(default_factory=RefineConfig)
    scene: dict = field(default_factory=dict)  # SceneConfig overrides for gen-data
    overlay: bool = False

    def __post_init__(self):
        ThresholdRule.parse(self.threshold)
        if any(k < 0 for k in self.iterations):
            raise ValueError("refinement iteration counts must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "out": self.out,
            "seed": self.seed,
            "epochs": self.epochs,
            "threshold": self.threshold,
            "iterations": list(self.iterations),
            "estimator": self.estimator.to_dict(),
            "refiner": self.refiner.to_dict(),
            "scene": dict(self.scene),
            "overlay": self.overlay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        if "estimator" in d:
            base = EstimatorConfig().to_dict()
            est = {**base, **d["estimator"]}
            est["fusion"] = {**base["fusion"], **d["estimator"].get("fusion", {})}
            d["estimator"] = EstimatorConfig.from_dict(est)
        if "refiner" in d:
            d["refiner"] = RefineConfig.from_dict({**RefineConfig().to_dict(), **d["refiner"]})
        if "iterations" in d:
            d["iterations"] = tuple(int(k) for k in d["iterations"])
        return cls(**d)

    def seeded(self) -> RunConfig:
        """Copy whose network seeds derive from the run seed."""
        return dataclasses.replace(
            self,
            estimator=dataclasses.replace(self.estimator, seed=self.seed),
            refiner=dataclasses.replace(self.refiner, seed=self.seed + 1),
        )

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("overlay")
        return config_hash(d)

    def stamp(self) -> dict:
        return {"seed": self.seed, "config_hash": self.hash()}

    def scene_config(self) -> SceneConfig:
        kw = dict(self.scene)
        for key in ("lighting",):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "translation_bounds" in kw:
            kw["translation_bounds"] = tuple(tuple(b) for b in kw["translation_bounds"])
        if "intrinsics" in kw:
            kw["intrinsics"] = CameraIntrinsics.from_dict(kw["intrinsics"])
        return SceneConfig(seed=self.seed, **kw)


# -- gen-data ---------------------------------------------------------------------------------


def cmd_gen_data(run: RunConfig) -> DatasetManifest:
    cfg = run.scene_config()
    log.info("rendering %d train + %d test frames to %s", cfg.n_train, cfg.n_test, run.dataset)
    return generate_dataset(run.dataset, cfg)


# -- train ------------------------------------------------------------------------------------


def _load_split(manifest: DatasetManifest, split: str):
    return [manifest.load_frame(e) for e in manifest.split(split)]


def _append_jsonl(path: Path, obj: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


def train_run(
    run: RunConfig,
    manifest: DatasetManifest | None = None,
    resume: str | Path | None = None,
    max_epochs: int | None = None,
) -> Checkpoint:
    """Train the estimator and, once the curriculum gate latches, the refiners.

    The estimator keeps training after the gate opens; each epoch with an open
    gate also runs one refiner epoch on poses from the (then frozen) estimator.
    ``max_epochs`` stops early without changing the configured total, so a later
    resume continues the same schedule.
    """
    stamp = run.stamp()  # same hash that eval writes for this run config
    run = run.seeded()
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or DatasetManifest.load(run.dataset)
    samples = build_samples(_load_split(manifest, "train"), manifest.models)
    if not samples:
        raise ValueError(f"no training samples in {run.dataset}")

    if resume is not None:
        ck = load_checkpoint(resume, run.estimator, run.refiner)
        ck.estimator.cfg = run.estimator
        ck.refiner.cfg = run.refiner
    else:
        ck = Checkpoint(
            PoseEstimator(run.estimator),
            Refiner(run.estimator.fusion, run.refiner),
            CurriculumGate(run.refiner.curriculum_margin),
            seed=run.seed,
            k_defaults=tuple(run.iterations),
        )
    est, ref = ck.estimator, ck.refiner
    est_opt = make_optimizer(est.parameters(), run.estimator)
    ref_opt = make_optimizer(ref.parameters(), run.refiner)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        est_opt, factor=run.estimator.plateau_factor, patience=run.estimator.plateau_patience
    )
    if ck.est_opt is not None:
        est_opt.load_state_dict(ck.est_opt["optimizer"])
        sched.load_state_dict(ck.est_opt["scheduler"])
    if ck.ref_opt is not None:
        ref_opt.load_state_dict(ck.ref_opt)
    lms = loss_models(manifest.models, run.estimator.loss_points, next(est.parameters()).dtype, run.seed)
    log_path = out / "train_log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()

    last = run.epochs if max_epochs is None else min(run.epochs, ck.epoch + max_epochs)
    for epoch in range(ck.epoch + 1, last + 1):
        t0 = time.perf_counter()
        # one generator per epoch keeps resumed runs on the same random stream
        rng = np.random.default_rng([run.seed, epoch])
        est_stats = train_epoch(samples, est, est_opt, lms, rng, epoch)
        steps = -(-len(samples) // run.estimator.batch_size)
        sched.step(est_stats.mean_loss)
        if epoch in run.estimator.lr_milestones:
            for g in est_opt.param_groups:
                g["lr"] *= run.estimator.lr_gamma
        was_open = ck.gate.is_open
        # the margin is a distance, so the gate watches the mean distance of the selected poses
        ck.gate.update(est_stats.mean_distance, epoch)
        entry = {
            "epoch": epoch,
            **stamp,
            "estimator": est_stats.to_dict(),
            "gate_open": ck.gate.is_open,
            "gate_epoch": ck.gate.opened_at,
        }
        if ck.gate.is_open:
            if not was_open:
                log.info("curriculum gate opened at epoch %d (distance %.4f m)", epoch, est_stats.mean_distance)
            ref_stats = train_refiner_epoch(samples, est, ref, ref_opt, lms, ck.gate, rng, epoch)
            steps += -(-len(samples) // run.refiner.batch_size)
            entry["refiner"] = ref_stats.to_dict()
        ck.epoch, ck.step = epoch, ck.step + steps
        entry["step"] = ck.step
        entry["seconds"] = time.perf_counter() - t0
        _append_jsonl(log_path, entry)
        log.info(
            "epoch %d loss %.4f dist %.4f%s (%.1fs)",
            epoch, est_stats.mean_loss, est_stats.mean_distance,
            f" refined {entry['refiner']['mean_refined']:.4f}" if "refiner" in entry else "",
            entry["seconds"],
        )
        ck.est_opt = {"optimizer": est_opt.state_dict(), "scheduler": sched.state_dict()}
        ck.ref_opt = ref_opt.state_dict()
        ck.extra = {"config_hash_run": stamp["config_hash"], "dataset": str(run.dataset)}
        ck.save(out / "checkpoints" / f"epoch_{epoch:03d}")
        ck.save(out / "checkpoints" / "last")
    return ck


# -- eval -------------------------------------------------------------------------------------


@dataclass
class FrameResult:
    frame_id: str
    object_id: int
    gt: Pose
    poses: dict[int, Pose]  # K -> pose
    seconds: dict[int, float]  # K -> wall clock, segmentation through K refinements


def evaluate_frames(
    manifest: DatasetManifest,
    est: PoseEstimator,
    ref: Refiner,
    ks: Sequence[int],
    seed: int = 0,
    split: str = "test",
) -> list[FrameResult]:
    """Estimate and refine every annotated, visible object of a split.

    Timing covers segmentation lookup, cropping, estimation and the first ``K``
    refinement steps, not image decoding. Refinement is run once up to
    ``max(ks)``; each ``K`` reads its pose and elapsed time off that chain.
    """
    ks = sorted(set(int(k) for k in ks))
    est.eval()
    ref.eval()
    out = []
    for i, entry in enumerate(manifest.split(split)):
        frame = manifest.load_frame(entry)
        for oid in sorted(frame.gt_poses):
            if oid not in manifest.models or not np.any(frame.mask == oid):
                continue
            rng = np.random.default_rng([seed, i, oid])
            t0 = time.perf_counter()
            seg = gt_segment(frame)
            obs = observe(frame, oid, seg)
            head = route(manifest.models[oid])
            pose, _, enc = estimate(est, obs, head, rng)
            poses, secs = {}, {}
            for k in range(max(ks) + 1):
                if k > 0:
                    pose = refine_once(enc, pose, head, ref)
                if k in ks:
                    poses[k], secs[k] = pose, time.perf_counter() - t0
            out.append(FrameResult(frame.frame_id, oid, frame.gt_poses[oid], poses, secs))
    return out


def records_for(results: Sequence[FrameResult], manifest: DatasetManifest, k: int) -> list[EvalRecord]:
    return [
        EvalRecord.evaluate(
            r.object_id, r.gt, r.poses[k], manifest.models[r.object_id],
            refinement_iterations=k, inference_seconds=r.seconds[k], frame_id=r.frame_id,
        )
        for r in results
    ]


def _record_json(r: EvalRecord) -> dict:
    return {
        "frame_id": r.frame_id,
        "object_id": r.object_id,
        "gt_pose": pose_to_json(r.gt_pose),
        "pred_pose": pose_to_json(r.pred_pose),
        "add": r.add,
        "adds": r.adds,
        "refinement_iterations": r.refinement_iterations,
        "inference_seconds": r.inference_seconds,
    }


def cmd_eval(run: RunConfig, checkpoint: str | Path | None = None) -> dict[int, Report]:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(checkpoint) if checkpoint else out / "checkpoints" / "last"
    ck = load_checkpoint(stem)
    manifest = DatasetManifest.load(run.dataset)
    rule = ThresholdRule.parse(run.threshold)
    results = evaluate_frames(manifest, ck.estimator, ck.refiner, run.iterations, run.seed)
    reports = {}
    for k in run.iterations:
        recs = records_for(results, manifest, k)
        meta = {
            **run.stamp(),
            "K": k,
            "checkpoint": str(stem),
            "checkpoint_epoch": ck.epoch,
            "checkpoint_config_hash": ck.manifest()["config_hash"],
            "dataset": str(run.dataset),
        }
        rep = report_table(accuracy(recs, manifest.models, rule), timing_summary([r.inference_seconds for r in recs]),
                           meta)
        (out / f"report_K{k}.csv").write_text(
            f"# seed={run.seed} config_hash={run.hash()} K={k} threshold={rule}\n" + rep.to_csv()
        )
        (out / f"report_K{k}.json").write_text(rep.to_json())
        (out / f"records_K{k}.json").write_text(
            json.dumps({"meta": meta, "records": [_record_json(r) for r in recs]}, indent=1)
        )
        reports[k] = rep
        log.info("K=%d mean accuracy %.2f%%", k, rep.mean.accuracy_percent)
    return reports


# -- report -----------------------------------------------------------------------------------


def read_report_csv(path: str | Path) -> list:
    lines = [ln for ln in Path(path).read_text().splitlines(keepends=True) if not ln.startswith("#")]
    return Report.rows_from_csv("".join(lines))


GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 255)


def overlay_image(color: np.ndarray, model_points: np.ndarray, gt: Pose, pred: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Color frame with the model projected under ``gt`` (green) and ``pred`` (magenta).

    Predicted points are drawn last, so where both land on a pixel it shows
    the prediction color.
    """
    img = np.array(color, dtype=np.uint8, copy=True)
    H, W = img.shape[:2]
    for pose, rgb in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        cam = model_points @ pose.R.T + pose.t
        front = cam[:, 2] > 0
        uv = project_points(cam[front], k)
        cols = np.rint(uv[:, 0]).astype(int)
        rows = np.rint(uv[:, 1]).astype(int)
        ok = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
        img[rows[ok], cols[ok]] = rgb
    return img


def overlay_pixels(model_points: np.ndarray, pose: Pose, k: CameraIntrinsics) -> set[tuple[int, int]]:
    cam = model_points @ pose.R.T + pose.t
    uv = project_points(cam[cam[:, 2] > 0], k)
    return {(int(r), int(c)) for c, r in np.rint(uv).astype(int)}


def write_overlays(run: RunConfig, k: int, limit: int | None = None) -> list[Path]:
    from PIL import Image

    out = Path(run.out)
    manifest = DatasetManifest.load(run.dataset)
    recs = json.loads((out / f"records_K{k}.json").read_text())["records"]
    entries = {e.frame_id: e for e in manifest.frames}
    by_frame: dict[str, list[dict]] = {}
    for r in recs:
        by_frame.setdefault(r["frame_id"], []).append(r)
    (out / "overlay").mkdir(exist_ok=True)
    paths = []
    for fid in sorted(by_frame)[:limit]:
        frame = manifest.load_frame(entries[fid])
        img = frame.color
        for r in by_frame[fid]:
            m = manifest.models[r["object_id"]]
            img = overlay_image(img, m.points, pose_from_json(r["gt_pose"]), pose_from_json(r["pred_pose"]),
                                manifest.intrinsics)
        p = out / "overlay" / f"{fid}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths


def cmd_report(run: RunConfig) -> str:
    out = Path(run.out)
    blocks = []
    for k in run.iterations:
        path = out / f"report_K{k}.json"
        if not path.is_file():
            raise FileNotFoundError(f"no eval output for K={k}: {path}")
        rep = Report.from_json(path.read_text())
        head = f"K={k}  threshold {rep.meta.get('threshold')}  seed {rep.meta.get('seed')}  config {rep.meta.get('config_hash')}"
        blocks.append(head + "\n" + rep.to_text())
    if run.overlay and run.iterations:
        write_overlays(run, max(run.iterations))
    text = "\n\n".join(blocks)
    (out / "report.txt").write_text(text + "\n")
    return text


# -- CLI --------------------------------------------------------------------------------------


def _parse_ks(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(" ", "").split(",") if s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxpose", description="context-aware 6D pose estimation experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "report"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config; flags override its values")
        s.add_argument("--seed", type=int)
        s.add_argument("--iterations", type=_parse_ks, help="comma-separated K list, e.g. 0,2,10")
        s.add_argument("--threshold", help="rel:0.1 or abs:0.02")
        s.add_argument("--out", help="dataset directory for gen-data, run directory otherwise")
        s.add_argument("--dataset", help="dataset directory (train/eval/report)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--epochs", type=int)
            s.add_argument("--resume", help="checkpoint stem to continue from")
        if name == "eval":
            s.add_argument("--checkpoint", help="checkpoint stem (default <out>/checkpoints/last)")
        if name in ("eval", "report"):
            s.add_argument("--overlay", action="store_true", help="write overlay/<frame>.png images")
    return p


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("seed", "iterations", "threshold", "epochs", "dataset"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if args.out is not None:
        d["dataset" if args.command == "gen-data" else "out"] = args.out
    if getattr(args, "overlay", False):
        d["overlay"] = True
    return RunConfig.from_dict(d)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    run = run_config_from_args(args)
    if args.command == "gen-data":
        man = cmd_gen_data(run)
        print(f"wrote {len(man.frames)} frames to {man.root}")
    elif args.command == "train":
        ck = train_run(run, resume=args.resume)
        print(f"trained {ck.epoch} epochs; gate opened at {ck.gate.opened_at}; checkpoints in {Path(run.out) / 'checkpoints'}")
    elif args.command == "eval":
        reports = cmd_eval(run, args.checkpoint)
        if run.overlay:
            write_overlays(run, max(run.iterations))
        for k, rep in reports.items():
            print(f"K={k}: mean accuracy {rep.mean.accuracy_percent:.2f}%")
    else:
        print(cmd_report(run))
    return 0


if __name__ == "__main__":
    sys.exit(main())
