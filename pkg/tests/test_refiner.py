import copy

import numpy as np
import pytest
import torch

from ctxpose.estimator import build_samples, estimate, loss_models
from ctxpose.geometry import Pose, UnitQuaternion, compose, invert, random_pose
from ctxpose.refiner import (
    CurriculumGate,
    CurriculumNotReadyError,
    RefineConfig,
    Refiner,
    curriculum_gate,
    refine,
    refine_once,
    color_position_correlation,
    jitter,
    refine_step_torch,
    train_refiner_epoch,
)
from ctxpose.estimator import PoseEstimator, make_optimizer

from test_estimator import SMALL

RCFG = RefineConfig(hidden=32, batch_size=4)


@pytest.fixture(scope="module")
def samples(tiny_dataset, tiny_frames):
    return build_samples(tiny_frames, tiny_dataset.models)


@pytest.fixture(scope="module")
def encoded(samples):
    est = PoseEstimator(SMALL)
    s = samples[0]
    pose, _, enc = estimate(est, s.obs, s.head, np.random.default_rng(0))
    return s, pose, enc


def _fixed_residual(refiner, head, quat, trans_m):
    h = refiner.heads[head]
    with torch.no_grad():
        h.rot.weight.zero_()
        h.rot.bias.copy_(torch.tensor(quat, dtype=h.rot.bias.dtype))
        h.trans.weight.zero_()
        h.trans.bias.copy_(torch.tensor(trans_m, dtype=h.trans.bias.dtype) / refiner.fcfg.length_scale)


def test_zero_iterations_is_identity(encoded):
    s, pose, enc = encoded
    ref = Refiner(SMALL.fusion, RCFG)
    assert refine(enc, pose, 0, s.head, ref) is pose
    with pytest.raises(ValueError):
        refine(enc, pose, -1, s.head, ref)


def test_identity_residual_is_fixpoint(encoded):
    s, pose, enc = encoded
    ref = Refiner(SMALL.fusion, RCFG)
    _fixed_residual(ref, s.head, [1.0, 0, 0, 0], [0, 0, 0])
    out = refine(enc, pose, 3, s.head, ref)
    assert np.allclose(out.homogeneous(), pose.homogeneous(), atol=1e-6)


def test_iterations_compose(encoded):
    s, pose, enc = encoded
    ref = Refiner(SMALL.fusion, RCFG)
    split = refine(enc, refine(enc, pose, 2, s.head, ref), 8, s.head, ref)
    whole = refine(enc, pose, 10, s.head, ref)
    assert np.allclose(split.homogeneous(), whole.homogeneous(), atol=1e-12)


def test_residual_is_applied_in_canonical_frame(encoded):
    s, _, enc = encoded
    ref = Refiner(SMALL.fusion, RCFG)
    current = random_pose(np.random.default_rng(3), ((-0.1, 0.1), (-0.1, 0.1), (0.5, 0.8)))
    q = UnitQuaternion.from_axis_angle([0.3, -0.2, 1.0], 0.4)
    dt = (0.01, -0.02, 0.005)
    _fixed_residual(ref, s.head, q.as_array(), dt)
    out = refine_once(enc, current, s.head, ref)
    expected = compose(current, Pose(q, dt))
    assert np.allclose(out.homogeneous(), expected.homogeneous(), atol=1e-5)
    # the translation residual rotates with the current estimate, not the camera
    assert np.allclose(out.t, current.t + current.R @ np.array(dt), atol=1e-5)


def test_torch_step_matches_pose_step(encoded):
    s, pose, enc = encoded
    ref = Refiner(SMALL.fusion, RCFG)
    out = refine_once(enc, pose, s.head, ref)
    with torch.no_grad():
        R, t = refine_step_torch(enc, torch.from_numpy(pose.R), torch.from_numpy(pose.t), s.head, ref)
    assert np.allclose(R.numpy(), out.R, atol=1e-5) and np.allclose(t.numpy(), out.t, atol=1e-6)


def test_gate_latches():
    assert curriculum_gate(0.012, 0.013) and not curriculum_gate(0.013, 0.013)
    gate = CurriculumGate(0.013)
    assert not gate.update(0.05, 1)
    assert gate.update(0.01, 2) and gate.opened_at == 2
    assert gate.update(0.5, 3) and gate.opened_at == 2


def test_refiner_training_refused_before_gate(samples, tiny_dataset):
    est, ref = PoseEstimator(SMALL), Refiner(SMALL.fusion, RCFG)
    opt = make_optimizer(ref.parameters(), RCFG)
    lms = loss_models(tiny_dataset.models, None, torch.float32)
    with pytest.raises(CurriculumNotReadyError):
        train_refiner_epoch(samples, est, ref, opt, lms, CurriculumGate(0.013), np.random.default_rng(0))


def test_refiner_training_touches_only_routed_head(samples, tiny_dataset):
    est, ref = PoseEstimator(SMALL), Refiner(SMALL.fusion, RCFG)
    est_before = copy.deepcopy(est.state_dict())
    before = copy.deepcopy(ref.state_dict())
    sym_only = [s for s in samples if s.head == "symmetric"]
    opt = make_optimizer(ref.parameters(), RCFG)
    lms = loss_models(tiny_dataset.models, None, torch.float32)
    gate = CurriculumGate(0.013, is_open=True, opened_at=0)
    stats = train_refiner_epoch(sym_only, est, ref, opt, lms, gate, np.random.default_rng(0), 4)
    assert stats.epoch == 4 and stats.n_samples == len(sym_only) and set(stats.per_head) == {"symmetric"}
    after = ref.state_dict()
    changed = {k.split(".")[1] for k in before if not torch.equal(before[k], after[k])}
    assert changed == {"symmetric"}
    assert all(torch.equal(v, est.state_dict()[k]) for k, v in est_before.items())


def test_refiner_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(iterations=-1)
    with pytest.raises(ValueError):
        RefineConfig(curriculum_margin=-0.01)
    for bad in ({"gt_start_fraction": 1.5}, {"jitter_deg": -1.0}, {"train_iterations": 0}):
        with pytest.raises(ValueError):
            RefineConfig(**bad)
    assert RefineConfig.from_dict(RCFG.to_dict()) == RCFG
    assert RefineConfig().curriculum_margin == 0.013


def test_untrained_translation_follows_cloud_shift(encoded):
    # with centroid input, shifting the start pose by d along its own axes yields a step of -d
    s, pose, enc = encoded
    ref = Refiner(SMALL.fusion, RCFG)
    d = np.array([0.004, -0.003, 0.006])
    a = pose
    b = compose(pose, Pose(UnitQuaternion.identity(), tuple(d)))
    ra = compose(invert(a), refine_once(enc, a, s.head, ref))
    rb = compose(invert(b), refine_once(enc, b, s.head, ref))
    assert np.allclose(np.asarray(rb.t) - np.asarray(ra.t), -d, atol=2e-4)


def test_correlation_features():
    rng = np.random.default_rng(0)
    color = torch.from_numpy(rng.normal(size=(200, 5)))
    xyz = torch.from_numpy(rng.normal(size=(200, 3)))
    c = color_position_correlation(color, xyz)
    assert c.shape == (15,) and torch.all(c.abs() <= 1 + 1e-12)
    ref = np.array([[np.corrcoef(color[:, i], xyz[:, j])[0, 1] for j in range(3)] for i in range(5)]).ravel()
    assert np.allclose(c.numpy(), ref, atol=1e-12)
    # invariant to shifting and scaling the cloud
    assert torch.allclose(color_position_correlation(color, 3.0 * xyz + 1.0), c, atol=1e-12)


def test_jitter():
    rng = np.random.default_rng(0)
    p = Pose(UnitQuaternion.from_axis_angle([0, 1, 0], 0.3), (0.1, 0.0, 0.6))
    assert jitter(p, rng, 0.0, 0.0) is p
    moved = [compose(invert(p), jitter(p, rng, 5.0, 0.004)) for _ in range(400)]
    ang = np.degrees([2 * np.arccos(min(1.0, m.rotation.w)) for m in moved])
    shift = np.array([m.t for m in moved])
    assert abs(np.sqrt(np.mean(ang ** 2)) - 5.0) < 0.6
    assert abs(shift.std() - 0.004) < 0.0005


def test_ground_truth_starts(samples, tiny_dataset):
    est = PoseEstimator(SMALL)
    cfg = RefineConfig(hidden=32, batch_size=4, gt_start_fraction=1.0, jitter_deg=0.0, jitter_m=0.0)
    ref = Refiner(SMALL.fusion, cfg)
    opt = make_optimizer(ref.parameters(), cfg)
    lms = loss_models(tiny_dataset.models, None, torch.float32)
    gate = CurriculumGate(0.013, is_open=True, opened_at=0)
    stats = train_refiner_epoch(samples[:6], est, ref, opt, lms, gate, np.random.default_rng(0))
    assert stats.mean_initial == pytest.approx(0.0, abs=1e-6)
