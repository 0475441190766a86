"""Weight-free stand-ins for the learned key, direction and value encoders.

Latent keys and values are low-dimensional patch descriptors lifted to the
feature dimension with a fixed, seeded orthonormal projection, so inner
products of descriptors survive the lift exactly and values can be decoded
back with the transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .memory import direction_key_from_angles
from .types import CameraIntrinsics, CameraPose, FrameObservation

KEY_DESCRIPTOR_DIM = 9
# mass, first moment (3), color moment (3), second moment (6)
VALUE_SUMMARY_DIM = 13
CANONICAL_AXIS = np.array([0.0, 0.0, 1.0])


class UnsupportedInputError(ValueError):
    pass


@lru_cache(maxsize=32)
def projection_matrix(in_dim, out_dim, seed):
    """(in_dim, out_dim) matrix with orthonormal rows, fixed by ``seed``."""
    if out_dim < in_dim:
        raise ValueError("feature dimension must be at least the descriptor dimension")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((out_dim, in_dim)))
    q = q * np.sign(np.diag(r))
    m = np.ascontiguousarray(q.T)
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class DirectionEstimate:
    theta: float
    phi: float
    gamma: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.phi <= math.pi + 1e-12:
            raise ValueError("polar angle must lie in [0, pi]")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def key(self):
        return direction_key_from_angles(self.theta, self.phi)


def _patch_grid(shape, patch_size):
    H, W = shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch_size}")
    return H // patch_size, W // patch_size


def _patchify(arr, patch_size):
    H, W = arr.shape[:2]
    gh, gw = H // patch_size, W // patch_size
    rest = arr.shape[2:]
    a = arr.reshape((gh, patch_size, gw, patch_size) + rest)
    a = np.moveaxis(a, 2, 1)
    return a.reshape((gh * gw, patch_size * patch_size) + rest)


def key_descriptors(frame: FrameObservation, patch_size):
    """(P, 9): mean RGB, RGB std, patch-center xy in [-1, 1], mask fraction.

    Computed on the masked frame (background painted white).
    """
    gh, gw = _patch_grid(frame.shape, patch_size)
    rgb = _patchify(frame.masked_rgb(), patch_size)
    mask = _patchify(frame.mask.astype(np.float64), patch_size)
    cy, cx = np.divmod(np.arange(gh * gw), gw)
    coords = np.stack([(cx + 0.5) / gw * 2 - 1, (cy + 0.5) / gh * 2 - 1], axis=1)
    return np.concatenate([rgb.mean(axis=1), rgb.std(axis=1), coords, mask.mean(axis=1)[:, None]], axis=1)


def latent_key_stub(frame: FrameObservation, patch_size=8, feature_dim=64, seed=0, gain=16.0):
    """Per-patch latent keys: unit-normalized descriptors, scaled by ``gain``, lifted to ``feature_dim``.

    Key inner products are ``gain**2`` times the descriptor cosine similarity.
    """
    d = key_descriptors(frame, patch_size)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return gain * d @ projection_matrix(KEY_DESCRIPTOR_DIM, feature_dim, seed)


def _angles(v):
    v = v / np.linalg.norm(v)
    return math.atan2(v[1], v[0]), math.acos(min(1.0, max(-1.0, v[2])))


def direction_oracle(relative_pose: CameraPose, noise_deg=0.0, seed=0):
    """Azimuth/polar angles of the canonical +Z axis seen from ``relative_pose``.

    The true axis is tilted by an angle drawn uniformly from [0, noise_deg]
    about a random perpendicular; confidence is ``1 - noise_deg / 90``.
    """
    d = relative_pose.rotation @ CANONICAL_AXIS
    if noise_deg > 0:
        rng = np.random.default_rng(seed)
        ang = math.radians(rng.uniform(0.0, noise_deg))
        a = rng.standard_normal(3)
        a -= a.dot(d) * d
        a /= np.linalg.norm(a)
        d = d * math.cos(ang) + a * math.sin(ang)
    theta, phi = _angles(d)
    sigma = min(1.0, max(0.0, 1.0 - noise_deg / 90.0))
    return DirectionEstimate(theta, phi, 0.0, sigma)


def backproject(frame: FrameObservation, pose: CameraPose, intr: CameraIntrinsics, depth=None):
    """Canonical-space points for every pixel (H, W, 3); meaningful where depth > 0."""
    depth = frame.depth if depth is None else depth
    if depth is None:
        raise UnsupportedInputError("back-projection needs a depth map")
    cam = intr.pixel_rays() * depth[..., None]
    return (cam - pose.translation) @ pose.rotation


def patch_summaries(points, rgb, mask, patch_size):
    """Mass-weighted moments per patch, shape (P, 13).

    Columns: mass (mask fraction), mass * centroid, mass * mean color,
    mass * second moment (xx, yy, zz, xy, xz, yz). Mixing rows linearly is
    the same as pooling their pixels.
    """
    pts = _patchify(points, patch_size)
    col = _patchify(rgb, patch_size)
    m = _patchify(mask.astype(np.float64), patch_size)
    n = m.shape[1]
    mass = m.sum(axis=1) / n
    w = m / n
    pts = np.where(m[..., None] > 0, pts, 0.0)
    first = np.einsum("pk,pki->pi", w, pts)
    color = np.einsum("pk,pki->pi", w, col)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    second = np.stack([np.einsum("pk,pk->p", w, a * b) for a, b in
                       ((x, x), (y, y), (z, z), (x, y), (x, z), (y, z))], axis=1)
    return np.concatenate([mass[:, None], first, color, second], axis=1)


def decode_summaries(summ, min_mass=1e-6):
    """Moments back to (mass, centroid, color, covariance) per row."""
    summ = np.atleast_2d(summ)
    mass = summ[:, 0]
    safe = np.where(mass > min_mass, mass, 1.0)[:, None]
    centroid = summ[:, 1:4] / safe
    color = np.clip(summ[:, 4:7] / safe, 0.0, 1.0)
    s = summ[:, 7:13] / safe
    cov = np.empty((len(summ), 3, 3))
    cov[:, 0, 0], cov[:, 1, 1], cov[:, 2, 2] = s[:, 0], s[:, 1], s[:, 2]
    cov[:, 0, 1] = cov[:, 1, 0] = s[:, 3]
    cov[:, 0, 2] = cov[:, 2, 0] = s[:, 4]
    cov[:, 1, 2] = cov[:, 2, 1] = s[:, 5]
    cov -= centroid[:, :, None] * centroid[:, None, :]
    empty = mass <= min_mass
    centroid[empty] = 0.0
    cov[empty] = 0.0
    return np.clip(mass, 0.0, 1.0), centroid, color, cov


def value_stub(frame: FrameObservation, pose: CameraPose, intr: CameraIntrinsics,
               patch_size=8, feature_dim=64, seed=1, depth=None):
    """(values (P, C), summaries (P, 13)) for the masked pixels of ``frame`` in canonical space."""
    if (frame.depth if depth is None else depth) is None:
        raise UnsupportedInputError("value encoding needs oracle depth")
    _patch_grid(frame.shape, patch_size)
    pts = backproject(frame, pose, intr, depth)
    summ = patch_summaries(pts, frame.rgb, frame.mask, patch_size)
    return summ @ projection_matrix(VALUE_SUMMARY_DIM, feature_dim, seed), summ


def values_to_summaries(values, feature_dim=64, seed=1):
    return np.asarray(values) @ projection_matrix(VALUE_SUMMARY_DIM, feature_dim, seed).T
