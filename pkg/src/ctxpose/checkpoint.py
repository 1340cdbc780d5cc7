"""Checkpoints: a torch archive plus a JSON sidecar manifest.

``<stem>.pt`` holds parameter and optimizer state; ``<stem>.json`` holds the
configs, progress counters, curriculum-gate state and refinement defaults, so
a checkpoint can be inspected (and rejected) without unpickling tensors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .estimator import EstimatorConfig, PoseEstimator
from .refiner import CurriculumGate, RefineConfig, Refiner

FORMAT_VERSION = 1
DEFAULT_K = (0, 2, 10)


class CheckpointMismatchError(ValueError):
    """Stored architecture differs from the requested one; ``field`` names the first difference."""

    def __init__(self, field: str, stored, requested):
        self.field = field
        super().__init__(f"checkpoint mismatch in {field}: stored {stored!r}, requested {requested!r}")


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# Fields that change parameter shapes or routing; optimizer settings may differ on resume.
ARCH_FIELDS = {
    "estimator": ("depth_symmetric", "depth_nonsymmetric", "hidden"),
    "refiner": ("hidden", "fc_layers_symmetric", "fc_layers_nonsymmetric", "view_rays", "centroid_input", "color_moments"),
}


def check_architecture(manifest: dict, est_cfg: EstimatorConfig, ref_cfg: RefineConfig) -> None:
    req_e, req_r = est_cfg.to_dict(), ref_cfg.to_dict()
    pairs = [(f"estimator.fusion.{k}", manifest["estimator"]["fusion"].get(k), v) for k, v in req_e["fusion"].items()]
    pairs += [(f"estimator.{k}", manifest["estimator"].get(k), req_e[k]) for k in ARCH_FIELDS["estimator"]]
    pairs += [(f"refiner.{k}", manifest["refiner"].get(k), req_r[k]) for k in ARCH_FIELDS["refiner"]]
    for name, stored, requested in pairs:
        if stored != requested:
            raise CheckpointMismatchError(name, stored, requested)


@dataclass
class Checkpoint:
    estimator: PoseEstimator
    refiner: Refiner
    gate: CurriculumGate
    epoch: int = 0  # completed epochs
    step: int = 0  # optimizer steps taken (estimator + refiner)
    seed: int = 0
    k_defaults: tuple[int, ...] = DEFAULT_K
    est_opt: dict | None = None
    ref_opt: dict | None = None
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        est = self.estimator.cfg.to_dict()
        ref = self.refiner.cfg.to_dict()
        return {
            "format": FORMAT_VERSION,
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.seed,
            "config_hash": config_hash({"estimator": est, "refiner": ref}),
            "estimator": est,
            "refiner": ref,
            "gate": {"margin": self.gate.margin, "is_open": self.gate.is_open, "opened_at": self.gate.opened_at},
            "k_defaults": list(self.k_defaults),
            "margin": self.gate.margin,
            **self.extra,
        }

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        pt, js = stem.with_suffix(".pt"), stem.with_suffix(".json")
        torch.save(
            {
                "estimator": self.estimator.state_dict(),
                "refiner": self.refiner.state_dict(),
                "est_opt": self.est_opt,
                "ref_opt": self.ref_opt,
            },
            pt,
        )
        js.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return pt, js


def read_manifest(stem: str | Path) -> dict:
    return json.loads(Path(stem).with_suffix(".json").read_text())


def load_checkpoint(
    stem: str | Path,
    est_cfg: EstimatorConfig | None = None,
    ref_cfg: RefineConfig | None = None,
) -> Checkpoint:
    """Rebuild networks from a checkpoint.

    With ``est_cfg``/``ref_cfg`` given, their architecture must match the stored
    one; otherwise the stored configs are used.

    Raises:
        CheckpointMismatchError: naming the first differing architecture field.
        FileNotFoundError: if either file is missing.
    """
    stem = Path(stem)
    man = read_manifest(stem)
    stored_e = EstimatorConfig.from_dict(man["estimator"])
    stored_r = RefineConfig.from_dict(man["refiner"])
    est_cfg = est_cfg or stored_e
    ref_cfg = ref_cfg or stored_r
    check_architecture(man, est_cfg, ref_cfg)
    state = torch.load(stem.with_suffix(".pt"), weights_only=False)
    est = PoseEstimator(est_cfg)
    ref = Refiner(est_cfg.fusion, ref_cfg)
    est.load_state_dict(state["estimator"])
    ref.load_state_dict(state["refiner"])
    g = man["gate"]
    return Checkpoint(
        estimator=est,
        refiner=ref,
        gate=CurriculumGate(g["margin"], g["is_open"], g["opened_at"]),
        epoch=man["epoch"],
        step=man["step"],
        seed=man["seed"],
        k_defaults=tuple(man["k_defaults"]),
        est_opt=state.get("est_opt"),
        ref_opt=state.get("ref_opt"),
        extra={k: v for k, v in man.items() if k not in _CORE_KEYS},
    )


_CORE_KEYS = frozenset(
    {"format", "epoch", "step", "seed", "config_hash", "estimator", "refiner", "gate", "k_defaults", "margin"}
)
