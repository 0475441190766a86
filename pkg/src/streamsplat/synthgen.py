"""Procedural objects, fly-around camera trajectories and frame rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .rasterizer import RenderSettings, mask_from_alpha, render
from .types import CameraIntrinsics, CameraPose, FrameObservation, GaussianField, transform_field

OBJECT_KINDS = ("sphere", "box", "torus", "composite")
MAX_ELEVATION_DEG = 70.0
# keeps radius keys off the shell boundary so spline undershoot stays inside
SHELL_MARGIN = 0.05
OPACITY_RANGE = (0.9, 1.0)


@dataclass(frozen=True)
class TrajectoryParams:
    k1_elevations: int = 4
    k2_radii: int = 8
    waypoints: int = 100
    radius_shell: tuple = (1.5, 3.0)
    jitter: float = 0.05
    focal_set_mm: tuple = (30, 35, 40, 45, 50)
    frames: int = 36
    image_size: tuple = (64, 64)
    sensor_width_mm: float = 36.0
    max_elevation_deg: float = MAX_ELEVATION_DEG
    shell_margin: float = SHELL_MARGIN
    seed: int = 0

    def __post_init__(self):
        d_min, d_max = self.radius_shell
        if not 0 < d_min < d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.waypoints < self.k1_elevations * self.k2_radii:
            raise ValueError("need waypoints >= k1 * k2")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if not 0 <= self.max_elevation_deg < 90:
            raise ValueError("elevation limit must lie in [0, 90) degrees")
        if not 0 <= self.shell_margin < 0.5:
            raise ValueError("shell margin must lie in [0, 0.5)")


def periodic_cubic_spline(waypoints, samples):
    """Closed C2 cubic spline through ``waypoints`` sampled at ``samples`` uniform parameters.

    Waypoint ``i`` sits at parameter ``i / len(waypoints)``; sample ``j`` at ``j / samples``.
    """
    pts = np.asarray(waypoints, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 3:
        raise ValueError("need at least 3 waypoints")
    spline = _closed_spline(pts)
    return spline(np.arange(samples) / samples)


def _closed_spline(pts):
    n = len(pts)
    u = np.arange(n + 1) / n
    return CubicSpline(u, np.vstack([pts, pts[:1]]), bc_type="periodic")


def look_at(position, target, world_up=(0.0, 0.0, 1.0)):
    """World-to-camera pose at ``position`` whose +z axis points at ``target`` (x right, y down)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    up = np.asarray(world_up, dtype=np.float64)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(f, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    return CameraPose(R, -R @ position)


def _waypoints(params: TrajectoryParams, rng):
    d_min, d_max = params.radius_shell
    span = d_max - d_min
    max_elev = math.radians(params.max_elevation_deg)
    margin = params.shell_margin * span
    elev_keys = rng.uniform(-max_elev, max_elev, params.k1_elevations)
    rad_keys = rng.uniform(d_min + margin, d_max - margin, params.k2_radii)
    n = params.waypoints
    s = np.arange(n) / n

    def periodic_lerp(keys):
        k = len(keys)
        x = s * k
        i = np.floor(x).astype(int)
        frac = x - i
        return keys[i % k] * (1 - frac) + keys[(i + 1) % k] * frac

    elev = periodic_lerp(elev_keys)
    rad = periodic_lerp(rad_keys)
    az = rng.uniform(0, 2 * math.pi) + 2 * math.pi * s
    return np.stack([rad * np.cos(elev) * np.cos(az), rad * np.cos(elev) * np.sin(az), rad * np.sin(elev)], axis=1)


def sample_trajectory(params: TrajectoryParams, lookat_center=(0.0, 0.0, 0.0)):
    """Seeded fly-around: list of (pose, intrinsics) for ``params.frames`` cameras."""
    rng = np.random.default_rng(params.seed)
    center = np.asarray(lookat_center, dtype=np.float64)
    wp = _waypoints(params, rng) + center
    positions = periodic_cubic_spline(wp, params.frames)
    focal = float(rng.choice(np.asarray(params.focal_set_mm, dtype=np.float64)))
    H, W = params.image_size
    intr = CameraIntrinsics.from_focal_mm(focal, W, H, params.sensor_width_mm)
    out = []
    for pos in positions:
        jitter = rng.uniform(-params.jitter, params.jitter, 3)
        out.append((look_at(pos, center + jitter), intr))
    return out


# -- objects -----------------------------------------------------------------

def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    theta = math.pi * (3 - math.sqrt(5)) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _box_surface(n, half, rng):
    """Stratified samples on the surface of an axis-aligned cube; returns points, normals."""
    per_face = np.full(6, n // 6)
    per_face[: n % 6] += 1
    pts, nrm = [], []
    for face, m in enumerate(per_face):
        if m == 0:
            continue
        g = math.ceil(math.sqrt(m))
        cells = rng.permutation(g * g)[:m]
        uv = (np.stack([cells % g, cells // g], axis=1) + rng.uniform(0.2, 0.8, (m, 2))) / g
        uv = (uv * 2 - 1) * half
        axis, sign = face // 2, 1.0 if face % 2 == 0 else -1.0
        p = np.zeros((m, 3))
        others = [a for a in range(3) if a != axis]
        p[:, axis] = sign * half
        p[:, others[0]] = uv[:, 0]
        p[:, others[1]] = uv[:, 1]
        nv = np.zeros((m, 3))
        nv[:, axis] = sign
        pts.append(p)
        nrm.append(nv)
    return np.vstack(pts), np.vstack(nrm)


def _torus_surface(n, R, r, rng):
    # area element ~ (R + r cos v); oversample a grid and keep a seeded subset
    m = int(math.ceil(math.sqrt(2 * n * R / r))) + 1
    k = int(math.ceil(2 * n / m)) + 1
    u = (np.arange(m)[:, None] + 0.5) / m * 2 * math.pi
    v = (np.arange(k)[None, :] + 0.5) / k * 2 * math.pi
    u, v = np.broadcast_arrays(u, v)
    u, v = u.ravel(), v.ravel()
    w = (R + r * np.cos(v))
    keep = rng.choice(len(u), size=n, replace=False, p=w / w.sum())
    keep.sort()
    u, v = u[keep], v[keep]
    p = np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)
    nv = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return p, nv


def surface_samples(kind, count, seed=0, radius=1.0):
    """(points, normals, area) on the analytic surface of a procedural object, float64."""
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        p = _fibonacci_sphere(count) @ _random_rotation(rng).T
        return p * radius, p.copy(), 4 * math.pi * radius ** 2
    if kind == "box":
        half = 0.6 * radius
        p, nv = _box_surface(count, half, rng)
        return p, nv, 24 * half ** 2
    if kind == "torus":
        R, r = 0.7 * radius, 0.3 * radius
        p, nv = _torus_surface(count, R, r, rng)
        return p, nv, 4 * math.pi ** 2 * R * r
    if kind == "composite":
        n1 = count // 2
        ps, ns, a1 = surface_samples("sphere", n1, seed, 0.55 * radius)
        pb, nb, a2 = surface_samples("box", count - n1, seed + 1, 0.7 * radius)
        ps = ps + np.array([0.0, 0.0, 0.35 * radius])
        pb = pb + np.array([0.0, 0.0, -0.3 * radius])
        return np.vstack([ps, pb]), np.vstack([ns, nb]), a1 + a2
    raise ValueError(f"unknown object kind {kind!r}")


def _normal_quats(normals):
    q = np.empty((len(normals), 4))
    z = np.array([0.0, 0.0, 1.0])
    for i, n in enumerate(normals):
        a = np.cross(z, n)
        s = np.linalg.norm(a)
        c = float(np.dot(z, n))
        if s < 1e-12:
            q[i] = (1, 0, 0, 0) if c > 0 else (0, 1, 0, 0)
            continue
        ang = math.atan2(s, c)
        q[i, 0] = math.cos(ang / 2)
        q[i, 1:] = a / s * math.sin(ang / 2)
    return q


def procedural_colors(points, rng):
    """Smooth colors in [0.05, 0.85]; kept well away from a white background."""
    freq = rng.uniform(1.0, 3.0, (3, 3))
    phase = rng.uniform(0, 2 * math.pi, 3)
    base = rng.uniform(0.3, 0.6, 3)
    c = base + 0.25 * np.sin(points @ freq.T + phase)
    return np.clip(c, 0.05, 0.85)


def make_object(kind, seed=0, count=2000, radius=1.0, opacity_range=OPACITY_RANGE):
    """Surface-sampled Gaussian object: flat surfels sized to the sample spacing.

    Opacities stay near 1 so the far side of a closed surface barely leaks
    into the expected depth of the near side.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = opacity_range
    if not 0 < lo <= hi <= 1:
        raise ValueError("opacity range must satisfy 0 < low <= high <= 1")
    pts, normals, area = surface_samples(kind, count, seed, radius)
    rng = np.random.default_rng(seed + 7919)
    spacing = math.sqrt(area / count)
    scale = np.tile([0.6 * spacing, 0.6 * spacing, 0.08 * spacing], (count, 1))
    return GaussianField(pts, _normal_quats(normals), scale, procedural_colors(pts, rng),
                         rng.uniform(lo, hi, count))


def render_sequence(obj: GaussianField, trajectory, settings=RenderSettings(), mask_threshold=0.5, backend=None):
    """Render every camera of ``trajectory``; frames carry rgb, alpha mask and expected depth."""
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    frames = []
    for t, (pose, intr) in enumerate(trajectory):
        out = render(obj, pose, intr, settings, backend=backend)
        mask = mask_from_alpha(out, mask_threshold)
        frames.append(FrameObservation(out.color, mask, np.where(mask, out.depth, 0.0), t=t))
    return frames


def curriculum_sampler(progress, sequence_len, views_needed, seed=0):
    """Strictly increasing frame indices whose gaps grow with training progress.

    The largest allowed gap is ``max(1, round(1 + progress * (sequence_len - 1)))``;
    once it spans the whole sequence the draw is a uniform random subset.
    """
    if views_needed > sequence_len or views_needed < 1:
        raise ValueError("need 1 <= views_needed <= sequence_len")
    progress = min(max(float(progress), 0.0), 1.0)
    rng = np.random.default_rng(seed)
    gap_max = max(1, int(round(1 + progress * (sequence_len - 1))))
    if views_needed == 1:
        return np.array([rng.integers(sequence_len)])
    if gap_max >= sequence_len - 1:
        return np.sort(rng.choice(sequence_len, size=views_needed, replace=False))
    # cap each gap so the whole span fits in the sequence
    g = min(gap_max, (sequence_len - 1) // (views_needed - 1))
    g = max(g, 1)
    gaps = rng.integers(1, g + 1, size=views_needed - 1)
    span = int(gaps.sum())
    start = int(rng.integers(0, sequence_len - span))
    return start + np.concatenate([[0], np.cumsum(gaps)])


def object_from_pose_frame(obj: GaussianField, pose0: CameraPose):
    """Object expressed in the canonical frame anchored at camera ``pose0``."""
    return transform_field(obj, pose0)


__all__ = [
    "TrajectoryParams", "periodic_cubic_spline", "look_at", "sample_trajectory", "make_object",
    "surface_samples", "render_sequence", "curriculum_sampler", "object_from_pose_frame", "OBJECT_KINDS",
]
