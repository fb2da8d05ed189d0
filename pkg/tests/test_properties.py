"""Property-based checks of the invariants each module promises."""
import numpy as np
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pedgen.diffusion import build_schedule, ddim_loop, ddim_timesteps, goal_inpaint, loss_terms, q_sample
from pedgen.labels import apply_alignment, camera_alignment
from pedgen.metrics import displacement_errors, foot_floating_rates, flat_ground
from pedgen.motion import FRAME_DIM, Motion, decode_model_space, encode_model_space
from pedgen.rotations import matrix_from_rot6d, random_rotations, yaw_matrix
from pedgen.scene import (CELL_SIZE, Intrinsics, SemanticPointCloud, rotate_augment, voxelize)
from pedgen.skeleton import forward_kinematics, skeleton_from_shape
from pedgen.tensor import clip_gradients, global_norm

from conftest import random_motion
from oracles import brute_force_voxelize, double_loop_ade

SKEL = skeleton_from_shape(np.zeros(10))
SETTINGS = settings(max_examples=40, deadline=None)
seeds = st.integers(0, 2**32 - 1)
angles = st.floats(-np.pi, np.pi, allow_nan=False)


def _motion(seed, T=6, scale=1.0):
    return random_motion(T, np.random.default_rng(seed), scale)


@SETTINGS
@given(arrays(np.float64, (5, 4), elements=st.floats(-10, 10)), st.floats(0.01, 10))
def test_clipping_is_idempotent_and_bounded(g, max_norm):
    grads = {"a": torch.tensor(g[:3]), "b": torch.tensor(g[3:])}
    once = clip_gradients(grads, max_norm)
    twice = clip_gradients(once, max_norm)
    assert global_norm(once) <= max_norm or global_norm(once) == global_norm(grads)
    assert all(torch.equal(once[k], twice[k]) for k in once)


@SETTINGS
@given(arrays(np.float64, (7, 6), elements=st.floats(-5, 5)))
def test_rot6d_gives_rotations(r):
    a, b = r[:, :3], r[:, 3:]
    ok = (np.linalg.norm(a, axis=1) > 1e-3) & (np.linalg.norm(np.cross(a, b), axis=1) > 1e-3 * np.linalg.norm(b, axis=1) + 1e-6)
    R = np.asarray(matrix_from_rot6d(r[ok])) if ok.any() else np.zeros((0, 3, 3))
    assert np.allclose(R.transpose(0, 2, 1) @ R, np.eye(3), atol=1e-6)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-6)


@SETTINGS
@given(seeds, st.integers(2, 12))
def test_model_space_round_trip(seed, T):
    m = _motion(seed, T)
    back = decode_model_space(encode_model_space(m), m.trans[0])
    assert np.allclose(back.trans, m.trans, atol=1e-6)
    assert np.allclose(back.root_orient, m.root_orient, atol=1e-6)
    assert np.allclose(back.body_pose, m.body_pose, atol=1e-6)


@SETTINGS
@given(seeds, angles, arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_fk_is_rigidly_equivariant(seed, angle, shift):
    m = _motion(seed)
    R = random_rotations(1, np.random.default_rng(seed))[0]
    j0 = m.joints(SKEL)
    moved = Motion(m.trans @ R.T + shift, R @ m.root_orient, m.body_pose, m.mask)
    assert np.allclose(moved.joints(SKEL), j0 @ R.T + shift, atol=1e-6)


@SETTINGS
@given(seeds, st.integers(2, 4))
def test_fk_on_linear_chain(seed, n):
    rng = np.random.default_rng(seed)
    parents = tuple(range(-1, n - 1))
    offsets = rng.normal(size=(n, 3))
    rots = random_rotations(n, rng)
    got = forward_kinematics(rots[None, 1:], rots[None, 0], np.zeros((1, 3)), offsets, parents)
    got = np.asarray(got)[0]
    R, p = np.eye(3), np.zeros(3)
    for j in range(n):
        p = p + R @ offsets[j] if j else np.zeros(3)  # the root sits at the translation
        R = R @ rots[j]
        assert np.allclose(got[j], p, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 300))
def test_voxelize_matches_oracle_and_ignores_order(seed, n):
    rng = np.random.default_rng(seed)
    t1 = rng.uniform(-3, 3, 3)
    xyz = t1 + rng.uniform(-4.5, 4.5, (n, 3)) * [1, 0.5, 1]
    # snap some points onto cell faces to exercise the half-open rule
    snap = rng.random(n) < 0.3
    xyz[snap] = np.round(xyz[snap] / CELL_SIZE) * CELL_SIZE
    cls = rng.integers(0, 4, n)
    grid = voxelize(SemanticPointCloud(xyz, cls), t1)
    assert np.array_equal(grid.classes, brute_force_voxelize(xyz, cls, t1))
    perm = rng.permutation(n)
    assert np.array_equal(voxelize(SemanticPointCloud(xyz[perm], cls[perm]), t1).classes, grid.classes)


@SETTINGS
@given(arrays(np.float64, (10, 2), elements=st.floats(0, 1)), st.floats(0.5, 50), st.integers(8, 200))
def test_unprojection_inverts_projection(uv01, depth, size):
    K = Intrinsics(float(np.hypot(size, size)), size / 2, size / 2)
    uv = uv01 * size
    z = np.full(len(uv), depth)
    pts = np.stack(((uv[:, 0] - K.cx) * z / K.focal, (uv[:, 1] - K.cy) * z / K.focal, z), axis=1)
    assert np.allclose(K.project(pts), uv, atol=1e-6)


@SETTINGS
@given(seeds, angles)
def test_rotate_augment_is_rigid(seed, angle):
    rng = np.random.default_rng(seed)
    m = _motion(seed)
    pc = SemanticPointCloud(rng.normal(size=(20, 3)) * 3, rng.integers(0, 5, 20))
    m2, pc2 = rotate_augment(m, pc, angle)
    before = np.concatenate((m.trans, pc.xyz))
    after = np.concatenate((m2.trans, pc2.xyz))
    d0 = np.linalg.norm(before[:, None] - before[None], axis=-1)
    d1 = np.linalg.norm(after[:, None] - after[None], axis=-1)
    assert np.allclose(d0, d1, atol=1e-6) and np.array_equal(pc2.cls, pc.cls)


@SETTINGS
@given(seeds, arrays(np.float64, 3, elements=st.floats(-20, 20)), st.floats(0.0, 2.0))
def test_goal_inpaint_reaches_goal(seed, goal, vel_scale):
    m = _motion(seed, 10)
    mm = encode_model_space(m)
    mm.data[:, :3] *= vel_scale
    out = goal_inpaint(mm, m.trans[0], goal)
    assert np.abs(decode_model_space(out, m.trans[0]).trans[-1] - goal).max() < 1e-6


@settings(max_examples=15, deadline=None)
@given(seeds, st.integers(2, 20))
def test_perfect_denoiser_reproduces_input(seed, n_steps):
    g = torch.Generator().manual_seed(seed)
    sched = build_schedule(100)
    x0 = torch.randn(2, 6, FRAME_DIM, generator=g, dtype=torch.float64)
    steps = ddim_timesteps(100, n_steps)
    xk = q_sample(x0, torch.full((2,), steps[0]), torch.randn(x0.shape, generator=g, dtype=torch.float64), sched)
    out = ddim_loop(lambda x, k: x0, xk, steps, sched)
    assert torch.allclose(out, x0, atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(seeds, st.integers(3, 8))
def test_masked_frames_get_no_gradient(seed, T):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, T, FRAME_DIM, generator=g, dtype=torch.float64)
    x_hat = torch.randn(2, T, FRAME_DIM, generator=g, dtype=torch.float64, requires_grad=True)
    mask = torch.rand(2, T, generator=g) < 0.5
    mask[:, 0] = True
    offsets = torch.tensor(SKEL.offsets)[None].expand(2, -1, -1)
    for term in loss_terms(x, x_hat, offsets, mask).values():
        (grad,) = torch.autograd.grad(term.sum(), x_hat, allow_unused=True, retain_graph=True)
        if grad is not None:
            assert not grad[~mask].any()


@SETTINGS
@given(seeds, angles, arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_alignment_is_rigid_and_consistent(seed, angle, t):
    m = _motion(seed)
    cam = (yaw_matrix(angle), t)
    a = camera_alignment((m.root_orient[2], m.trans[2]), cam)
    out = apply_alignment(a, m)
    d0 = np.linalg.norm(m.trans[:, None] - m.trans[None], axis=-1)
    d1 = np.linalg.norm(out.trans[:, None] - out.trans[None], axis=-1)
    assert np.allclose(d0, d1, atol=1e-6)
    again = camera_alignment((out.root_orient[2], out.trans[2]), cam)
    assert np.allclose(again.rotation, np.eye(3), atol=1e-6) and np.allclose(again.translation, 0, atol=1e-6)


@SETTINGS
@given(seeds, st.integers(1, 4), angles, arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_metric_orderings_and_rigid_invariance(seed, n_preds, angle, shift):
    rng = np.random.default_rng(seed)
    gt = random_motion(6, rng, 0.3)
    preds = [random_motion(6, rng, 0.3) for _ in range(n_preds)]
    mA, aA, mF, aF = displacement_errors(gt, preds, SKEL)
    assert mA <= aA + 1e-12 and mF <= aF + 1e-12
    if n_preds == 1:
        assert mA == aA and mF == aF
        assert abs(mA - double_loop_ade(gt.joints(SKEL), preds[0].joints(SKEL))) < 1e-9
    R = yaw_matrix(angle)

    def move(m):
        return Motion(m.trans @ R.T + shift, R @ m.root_orient, m.body_pose, m.mask)

    assert np.allclose(displacement_errors(move(gt), [move(p) for p in preds], SKEL), (mA, aA, mF, aF), atol=1e-6)
    assert foot_floating_rates(preds, flat_ground(0.0), SKEL) == foot_floating_rates(
        [move(p) for p in preds], flat_ground(shift[1]), SKEL)
