import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from ctxpose.geometry import (
    DESK_CAMERA,
    BehindCameraError,
    CameraIntrinsics,
    NormalizationRequiredError,
    Pose,
    UnitQuaternion,
    apply,
    compose,
    deproject,
    invert,
    matrix_to_quat,
    normalize_quat_torch,
    project,
    project_points,
    quat_multiply,
    quat_multiply_torch,
    quat_to_matrix,
    quat_to_matrix_torch,
    random_pose,
    random_rotation,
    rotation_angle,
)

finite = st.floats(-1.0, 1.0, allow_nan=False)
quat_vecs = st.tuples(finite, finite, finite, finite).filter(lambda v: np.linalg.norm(v) > 1e-3)
translations = st.tuples(*[st.floats(-0.5, 0.5, allow_nan=False)] * 3)


@st.composite
def poses(draw):
    return Pose(UnitQuaternion.from_vector(draw(quat_vecs)), draw(translations))


def test_identity_quaternion_is_identity_matrix():
    assert np.array_equal(quat_to_matrix(UnitQuaternion.identity()), np.eye(3))


@given(quat_vecs)
def test_from_vector_is_unit_and_canonical(v):
    q = UnitQuaternion.from_vector(v)
    assert abs(q.norm() - 1) < 1e-12
    assert q.w >= 0


@given(quat_vecs)
def test_rotation_matrix_orthonormal(v):
    R = quat_to_matrix(UnitQuaternion.from_vector(v))
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12


@given(quat_vecs)
def test_matrix_matches_scipy(v):
    q = UnitQuaternion.from_vector(v)
    ref = Rotation.from_quat([q.x, q.y, q.z, q.w]).as_matrix()
    assert np.allclose(quat_to_matrix(q), ref, atol=1e-12)


@given(quat_vecs)
def test_matrix_quat_round_trip(v):
    q = UnitQuaternion.from_vector(v)
    back = matrix_to_quat(quat_to_matrix(q))
    # same rotation; the sign is fixed by the w >= 0 convention except at w == 0
    assert np.allclose(quat_to_matrix(back), quat_to_matrix(q), atol=1e-12)
    if q.w > 1e-6:
        assert np.allclose(back.as_array(), q.as_array(), atol=1e-9)


def test_unnormalized_quaternion_rejected():
    with pytest.raises(NormalizationRequiredError):
        quat_to_matrix(UnitQuaternion(1.0, 1.0, 0.0, 0.0))
    with pytest.raises(NormalizationRequiredError):
        UnitQuaternion.from_vector([0, 0, 0, 0])


@given(quat_vecs, quat_vecs)
def test_hamilton_product_matches_matrix_product(a, b):
    qa, qb = UnitQuaternion.from_vector(a), UnitQuaternion.from_vector(b)
    prod = quat_multiply(qa, qb)
    assert prod.w >= 0
    assert np.allclose(quat_to_matrix(prod), quat_to_matrix(qa) @ quat_to_matrix(qb), atol=1e-12)


def test_axis_angle_quarter_turn():
    q = UnitQuaternion.from_axis_angle([0, 0, 1], np.pi / 2)
    assert np.allclose(quat_to_matrix(q) @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert rotation_angle(q) == pytest.approx(np.pi / 2)


@given(poses(), poses())
def test_compose_matches_homogeneous_product(a, b):
    assert np.allclose(compose(a, b).homogeneous(), a.homogeneous() @ b.homogeneous(), atol=1e-12)


@given(poses())
def test_compose_with_inverse_is_identity(p):
    for c in (compose(p, invert(p)), compose(invert(p), p)):
        assert np.abs(c.R - np.eye(3)).max() < 1e-9
        assert np.abs(c.t).max() < 1e-9


@given(poses(), poses(), poses())
@settings(max_examples=50)
def test_compose_associative(a, b, c):
    lhs, rhs = compose(compose(a, b), c), compose(a, compose(b, c))
    assert np.allclose(lhs.homogeneous(), rhs.homogeneous(), atol=1e-9)


@given(poses())
def test_apply_then_inverse(p):
    pts = np.random.default_rng(0).normal(size=(20, 3))
    assert np.allclose(apply(invert(p), apply(p, pts)), pts, atol=1e-9)


def test_project_deproject_full_frame():
    rng = np.random.default_rng(3)
    k = DESK_CAMERA
    depth = 0.4 + 0.5 * rng.random((k.height, k.width))
    d = deproject(depth, k, np.ones_like(depth, bool))
    assert len(d.points) == k.width * k.height and d.skipped == 0
    uv = project_points(d.points, k)
    assert np.abs(uv[:, 0] - d.pixels[:, 1]).max() < 0.5
    assert np.abs(uv[:, 1] - d.pixels[:, 0]).max() < 0.5


def test_principal_point_is_pixel_center():
    k = CameraIntrinsics(100, 100, 1.0, 1.0, 3, 3)
    depth = np.full((3, 3), 2.0)
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    d = deproject(depth, k, mask)
    assert np.allclose(d.points[0], [0, 0, 2])


def test_deproject_skips_missing_depth():
    k = DESK_CAMERA
    depth = np.ones((k.height, k.width))
    depth[0, :10] = 0
    depth[1, 0] = np.nan
    mask = np.zeros_like(depth, bool)
    mask[:2, :10] = True
    d = deproject(depth, k, mask)
    assert d.skipped == 11
    assert len(d.points) == 9
    # row-major order
    assert np.array_equal(d.pixels[:, 0], np.ones(9))
    assert np.array_equal(d.pixels[:, 1], np.arange(1, 10))


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], DESK_CAMERA)
    with pytest.raises(BehindCameraError):
        project_points(np.array([[0, 0, 1.0], [0, 0, 0]]), DESK_CAMERA)


def test_intrinsics_validation_and_round_trip():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1, 1, 0, 0, 10, 10)
    assert CameraIntrinsics.from_dict(DESK_CAMERA.to_dict()) == DESK_CAMERA


def test_random_rotation_is_uniform():
    # For Haar-distributed R: E[R] = 0, and the trace has mean 0 and variance 1.
    rng = np.random.default_rng(0)
    Rs = np.array([quat_to_matrix(random_rotation(rng)) for _ in range(20000)])
    assert np.abs(Rs.mean(0)).max() < 0.03
    tr = np.trace(Rs, axis1=1, axis2=2)
    assert abs(tr.mean()) < 0.03
    assert abs(tr.var() - 1) < 0.05


def test_random_pose_bounds_and_frustum():
    rng = np.random.default_rng(1)
    bounds = ((-0.1, 0.1), (-0.1, 0.1), (0.5, 0.7))
    for _ in range(200):
        p = random_pose(rng, bounds, DESK_CAMERA, margin_px=20)
        assert all(lo <= c <= hi for c, (lo, hi) in zip(p.translation, bounds))
        u, v = project(p.t, DESK_CAMERA)
        assert 20 <= u <= DESK_CAMERA.width - 21 and 20 <= v <= DESK_CAMERA.height - 21


def test_torch_helpers_match_numpy():
    rng = np.random.default_rng(2)
    raw = rng.normal(size=(50, 4))
    q = normalize_quat_torch(torch.from_numpy(raw))
    assert torch.all(q[:, 0] >= 0)
    for i in range(50):
        ref = UnitQuaternion.from_vector(raw[i])
        assert np.allclose(q[i].numpy(), ref.as_array(), atol=1e-12)
        assert np.allclose(quat_to_matrix_torch(q[i]).numpy(), quat_to_matrix(ref), atol=1e-12)
    prod = quat_multiply_torch(q[:25], q[25:])
    for i in range(25):
        a, b = UnitQuaternion(*q[i].tolist()), UnitQuaternion(*q[25 + i].tolist())
        assert np.allclose(quat_to_matrix_torch(prod[i]).numpy(), quat_to_matrix(quat_multiply(a, b)), atol=1e-12)
