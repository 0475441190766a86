"""Core value types: Gaussian fields, cameras, frames."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

SUBGROUP_MEM = 0
SUBGROUP_REF = 1
SUBGROUP_SRC = 2
SUBGROUP_NAMES = {SUBGROUP_MEM: "mem", SUBGROUP_REF: "ref", SUBGROUP_SRC: "src"}
SUBGROUP_CODES = {v: k for k, v in SUBGROUP_NAMES.items()}

QUAT_TOL = 1e-6
POSE_TOL = 1e-6


class FieldValidationError(ValueError):
    """A Gaussian field violates one of its invariants."""


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat` for a single 3x3 matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        rot = np.asarray(self.rot, dtype=np.float64)
        n = np.linalg.norm(rot)
        if not np.isfinite(n) or n == 0:
            raise FieldValidationError("quaternion must be finite and nonzero")
        scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(~(scale > 0)):
            raise FieldValidationError("scale components must be strictly positive")
        mu = np.asarray(self.mu, dtype=np.float64)
        if not np.all(np.isfinite(mu)):
            raise FieldValidationError("position must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rot", rot / n)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "color", np.clip(np.asarray(self.color, dtype=np.float64), 0.0, 1.0))
        object.__setattr__(self, "opacity", float(np.clip(self.opacity, 0.0, 1.0)))


class GaussianField:
    """An ordered set of Gaussian primitives stored as float32 column arrays.

    Arrays are validated on construction and then frozen (read-only).
    ``subgroup`` holds one of ``SUBGROUP_MEM``, ``SUBGROUP_REF``, ``SUBGROUP_SRC``
    per primitive.
    """

    __slots__ = ("mu", "rot", "scale", "color", "opacity", "subgroup")

    def __init__(self, mu, rot, scale, color, opacity, subgroup=None):
        mu = np.asarray(mu, dtype=np.float32).reshape(-1, 3)
        k = mu.shape[0]
        rot = np.asarray(rot, dtype=np.float32).reshape(k, 4)
        scale = np.asarray(scale, dtype=np.float32).reshape(k, 3)
        color = np.asarray(color, dtype=np.float32).reshape(k, 3)
        opacity = np.asarray(opacity, dtype=np.float32).reshape(k)
        if subgroup is None:
            subgroup = np.full(k, SUBGROUP_SRC, dtype=np.uint8)
        subgroup = np.asarray(subgroup, dtype=np.uint8).reshape(k)

        for name, arr in (("position", mu), ("rotation", rot), ("scale", scale),
                          ("color", color), ("opacity", opacity)):
            if not np.all(np.isfinite(arr)):
                raise FieldValidationError(f"non-finite {name} in Gaussian field")
        if np.any(scale <= 0):
            raise FieldValidationError("scale components must be strictly positive")
        if np.any(subgroup > SUBGROUP_SRC):
            raise FieldValidationError("unknown subgroup tag")

        norms = np.linalg.norm(rot.astype(np.float64), axis=1)
        if np.any(norms == 0):
            raise FieldValidationError("zero quaternion")
        off = np.abs(norms - 1.0) > QUAT_TOL
        if np.any(off):
            # leave already-unit rows untouched so float32 round trips stay bit-exact
            rot = rot.copy()
            rot[off] = (rot[off].astype(np.float64) / norms[off, None]).astype(np.float32)
        if np.any((color < 0) | (color > 1)):
            color = np.clip(color, 0.0, 1.0)
        if np.any((opacity < 0) | (opacity > 1)):
            opacity = np.clip(opacity, 0.0, 1.0)

        for name, arr in (("mu", mu), ("rot", rot), ("scale", scale), ("color", color),
                          ("opacity", opacity), ("subgroup", subgroup)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __setattr__(self, name, value):
        raise AttributeError("GaussianField is immutable")

    def __len__(self):
        return self.mu.shape[0]

    def __repr__(self):
        counts = {n: int(np.sum(self.subgroup == c)) for c, n in SUBGROUP_NAMES.items()}
        return f"GaussianField(n={len(self)}, {counts})"

    def __eq__(self, other):
        if not isinstance(other, GaussianField):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in self.__slots__)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive], subgroup=None):
        if len(prims) == 0:
            return cls.empty()
        return cls(
            np.stack([p.mu for p in prims]),
            np.stack([p.rot for p in prims]),
            np.stack([p.scale for p in prims]),
            np.stack([p.color for p in prims]),
            np.array([p.opacity for p in prims]),
            subgroup,
        )

    @classmethod
    def concat(cls, fields: Iterable["GaussianField"]):
        fields = list(fields)
        if not fields:
            return cls.empty()
        return cls(*(np.concatenate([getattr(f, n) for f in fields]) for n in cls.__slots__))

    def primitive(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.rot[i], self.scale[i], self.color[i], float(self.opacity[i]))

    def select(self, index):
        """Sub-field for a boolean mask or integer index array (order preserved)."""
        return GaussianField(*(getattr(self, n)[index] for n in self.__slots__))

    def subgroup_counts(self):
        return {n: int(np.sum(self.subgroup == c)) for c, n in SUBGROUP_NAMES.items()}

    def covariances(self):
        """World-space 3x3 covariances, float64."""
        R = quat_to_rotmat(self.rot)
        M = R * self.scale.astype(np.float64)[:, None, :]
        return M @ np.swapaxes(M, 1, 2)


@dataclass(frozen=True)
class CameraPose:
    """Rigid world-to-camera transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > POSE_TOL or abs(np.linalg.det(R) - 1.0) > POSE_TOL:
            raise ValueError("rotation must be orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)

    def compose(self, other: "CameraPose"):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_focal_mm(cls, focal_mm, width, height, sensor_width_mm=36.0):
        f = focal_mm / sensor_width_mm * width
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def shape(self):
        return (self.height, self.width)

    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pixel_rays(self):
        """Camera-space ray directions (H, W, 3) with z = 1 through pixel centers."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class FrameObservation:
    rgb: np.ndarray
    mask: np.ndarray
    depth: Optional[np.ndarray] = None
    t: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be HxWx3")
        mask = np.asarray(self.mask).astype(bool)
        if mask.shape != rgb.shape[:2]:
            raise ValueError("mask shape must match rgb")
        if self.t < 0:
            raise ValueError("timestep must be >= 0")
        object.__setattr__(self, "rgb", np.clip(rgb, 0.0, 1.0))
        object.__setattr__(self, "mask", mask)
        if self.depth is not None:
            depth = np.asarray(self.depth, dtype=np.float64)
            if depth.shape != mask.shape:
                raise ValueError("depth shape must match rgb")
            inside = depth[mask]
            if not (np.all(np.isfinite(inside)) and np.all(inside > 0)):
                raise ValueError("depth must be finite and positive inside the mask")
            object.__setattr__(self, "depth", depth)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def is_valid(self):
        return bool(self.mask.any())

    def masked_rgb(self, bg=(1.0, 1.0, 1.0)):
        """The frame with background pixels replaced by ``bg``."""
        return np.where(self.mask[..., None], self.rgb, np.asarray(bg, dtype=np.float64))


def normalize_pose_sequence(poses: Sequence[CameraPose]):
    """Re-express poses relative to the first one, which becomes the identity."""
    if len(poses) == 0:
        raise ValueError("pose sequence must be nonempty")
    inv0 = poses[0].inverse()
    out = [CameraPose.identity()]
    out.extend(p.compose(inv0) for p in poses[1:])
    return out


def filter_renderable(field: GaussianField, bg_color=(1.0, 1.0, 1.0), opacity_eps=1e-4, bg_tol=0.02):
    """Drop near-transparent primitives and those colored like the background.

    Survivors keep their relative order.
    """
    if opacity_eps < 0:
        raise ValueError("opacity_eps must be >= 0")
    if len(field) == 0:
        return field
    bg = np.asarray(bg_color, dtype=np.float64)
    near_bg = np.max(np.abs(field.color.astype(np.float64) - bg), axis=1) <= bg_tol
    keep = (field.opacity >= opacity_eps) & ~near_bg
    if keep.all():
        return field
    return field.select(keep)


def transform_field(field: GaussianField, pose: CameraPose):
    """Rigidly move a field into the frame defined by ``pose`` (x -> R x + t)."""
    if len(field) == 0:
        return field
    R = pose.rotation
    mu = pose.apply(field.mu.astype(np.float64))
    # rotate each primitive's frame: q' = q_R * q
    qr = rotmat_to_quat(R)
    q = field.rot.astype(np.float64)
    w1, x1, y1, z1 = qr
    w2, x2, y2, z2 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)
    return GaussianField(mu, rot, field.scale, field.color, field.opacity, field.subgroup)
