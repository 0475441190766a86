import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from streamsplat.losses import (LossWeights, NonFiniteLossError, UndefinedLossError, bg_penalty, fd_check,
                                loss_record, masked_mse, normalized_depth, pixel_ray_directions, ray_alignment,
                                ray_alignment_grad, total_loss)
from streamsplat.types import CameraIntrinsics, CameraPose, GaussianField

INTR = CameraIntrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
seeds = st.integers(0, 2**31 - 1)


def random_pose(rng):
    return CameraPose(Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix(), rng.normal(size=3))


def ray_instance(rng, k=6):
    pose = random_pose(rng)
    pixels = rng.integers(0, INTR.width * INTR.height, k)
    mu = pose.center() + rng.normal(size=(k, 3)) * rng.uniform(0.5, 3.0)
    return mu, pose, pixels


def test_masked_mse_examples():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8, 3))
    mask = rng.random((8, 8)) > 0.3
    assert masked_mse(a, a, mask) == 0.0
    assert masked_mse(a, a + 0.1, mask) == pytest.approx(0.03, abs=1e-12)
    b = rng.random((8, 8, 3))
    total, n = 0.0, 0
    for y in range(8):
        for x in range(8):
            if mask[y, x]:
                total += sum((a[y, x, c] - b[y, x, c]) ** 2 for c in range(3))
                n += 1
    assert abs(masked_mse(a, b, mask) - total / n) < 1e-12
    with pytest.raises(UndefinedLossError):
        masked_mse(a, b, np.zeros((8, 8), bool))


def _field(mu, color, opacity):
    n = len(mu)
    return GaussianField(mu, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.1), color, opacity)


def test_bg_penalty_examples():
    eye = CameraPose.identity()
    full = np.ones((32, 32), bool)
    inside = _field([[0, 0, 3.0]], [[1, 1, 1]], [0.9])
    assert bg_penalty(inside, full, eye, full, eye, INTR) == 0.0
    mask = np.zeros((32, 32), bool)
    mask[14:18, 14:18] = True
    outside_dark = _field([[1.0, 1.0, 3.0]], [[0, 0, 0]], [0.0])
    assert bg_penalty(outside_dark, full, eye, mask, eye, INTR) == 0.0
    outside = _field([[1.0, 1.0, 3.0]], [[1, 1, 1]], [0.5])
    assert bg_penalty(outside, full, eye, mask, eye, INTR, alpha_bg=0.5) == pytest.approx(3.25)
    behind = _field([[0, 0, -3.0]], [[1, 1, 1]], [0.5])
    assert bg_penalty(behind, full, eye, full, eye, INTR) == pytest.approx(3.25)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0, 1), st.floats(0, 1))
def test_bg_penalty_monotone_in_opacity(seed, o1, o2):
    rng = np.random.default_rng(seed)
    eye = CameraPose.identity()
    mask = rng.random((32, 32)) > 0.5
    mu = np.column_stack([rng.uniform(-1, 1, (5, 2)), rng.uniform(2, 4, 5)])
    col = rng.random((5, 3))
    op = rng.random(5)
    lo, hi = sorted((o1, o2))
    vals = []
    for o in (lo, hi):
        op2 = op.copy()
        op2[0] = o
        vals.append(bg_penalty(_field(mu, col, op2), mask, eye, mask, eye, INTR))
    assert vals[1] >= vals[0] - 1e-7


def test_ray_alignment_examples():
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    pixels = np.array([0, 17, 500, 1023])
    rays = pixel_ray_directions(pose, INTR, pixels)
    on_ray = pose.center() + rays * np.array([[1.0], [2.0], [0.5], [7.0]])
    assert ray_alignment(on_ray, pose, INTR, pixels) < 1e-12
    perp = np.cross(rays[0], [0.3, -0.2, 0.9])
    assert ray_alignment([pose.center() + perp], pose, INTR, pixels[:1]) == pytest.approx(1.0)
    loss, flags = ray_alignment([pose.center()], pose, INTR, [3], return_flags=True)
    assert loss == 2.0 and flags.tolist() == [True]
    with pytest.raises(UndefinedLossError):
        ray_alignment_grad([pose.center()], pose, INTR, [3])


def test_ray_alignment_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    mu, pose, pixels = ray_instance(rng, 10)
    R, c = pose.rotation, pose.center()
    terms = []
    for m, p in zip(mu, pixels):
        row, col = divmod(int(p), INTR.width)
        d = [(col + 0.5 - INTR.cx) / INTR.fx, (row + 0.5 - INTR.cy) / INTR.fy, 1.0]
        w = [sum(R[j][i] * d[j] for j in range(3)) for i in range(3)]
        nw = math.sqrt(sum(x * x for x in w))
        v = [m[i] - c[i] for i in range(3)]
        nv = math.sqrt(sum(x * x for x in v))
        terms.append(1 - sum(w[i] * v[i] for i in range(3)) / (nw * nv))
    assert abs(ray_alignment(mu, pose, INTR, pixels) - sum(terms) / len(terms)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.1, 10.0))
def test_ray_alignment_scale_invariance(seed, s):
    rng = np.random.default_rng(seed)
    mu, pose, pixels = ray_instance(rng)
    c = pose.center()
    a = ray_alignment(mu, pose, INTR, pixels)
    b = ray_alignment(c + s * (mu - c), pose, INTR, pixels)
    assert abs(a - b) < 1e-9 and 0 <= a <= 2
    g = ray_alignment_grad(mu, pose, INTR, pixels)
    u = (mu - c) / np.linalg.norm(mu - c, axis=1, keepdims=True)
    np.testing.assert_allclose(np.einsum("ij,ij->i", g, u), 0.0, atol=1e-12)


def test_ray_gradient_fd():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mu, pose, pixels = ray_instance(rng)
        err = fd_check(lambda m: ray_alignment(m, pose, INTR, pixels),
                       lambda m: ray_alignment_grad(m, pose, INTR, pixels), mu)
        assert err < 1e-4


def test_fd_check_simple_functions():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert fd_check(lambda x: x @ A @ x, lambda x: 2 * A @ x, [0.3, -1.2]) < 1e-9
    assert fd_check(lambda x: 3 * x[0] - x[1], lambda x: np.array([3.0, -1.0]), [1.0, 2.0]) < 1e-8
    with pytest.raises(ValueError):
        fd_check(lambda x: 0, lambda x: x, [1.0], h=0)


def test_normalized_depth():
    rng = np.random.default_rng(4)
    z = rng.uniform(1, 3, (6, 6))
    mask = rng.random((6, 6)) > 0.2
    assert normalized_depth(z, z, mask) == 0.0
    assert normalized_depth(2 * z, z, mask) < 1e-28
    d = rng.uniform(1, 3, (6, 6))
    dm, zm = d[mask].mean(), z[mask].mean()
    ref = np.mean([(d[y, x] / dm - z[y, x] / zm) ** 2 for y in range(6) for x in range(6) if mask[y, x]])
    assert abs(normalized_depth(d, z, mask) - ref) < 1e-12
    with pytest.raises(UndefinedLossError):
        normalized_depth(np.zeros((6, 6)), z, mask)


def test_total_loss():
    parts = {"masked": 0.1, "bg": 0.2, "ray": 0.3, "depth": 0.4}
    assert total_loss(parts, LossWeights.warmup()) == pytest.approx(0.31, abs=1e-15)
    assert total_loss({k: 0.0 for k in parts}, LossWeights()) == 0.0
    assert total_loss(parts, LossWeights.main()) == pytest.approx(0.1 + 0.06 + 0.3 * 0.3)
    with pytest.raises(NonFiniteLossError, match="ray"):
        total_loss(dict(parts, ray=float("nan")), LossWeights())
    rec = json.loads(loss_record(3, parts, LossWeights.warmup()))
    assert rec["t"] == 3 and rec["L_total"] == pytest.approx(0.31)
    with pytest.raises(ValueError):
        LossWeights(lambda_g=-1)
