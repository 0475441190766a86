"""Training losses (photometric + geometric) and a finite-difference checker."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .rasterizer import project_points
from .types import CameraIntrinsics, CameraPose, GaussianField

CENTER_EPS = 1e-9
DEPTH_MEAN_EPS = 1e-9


class UndefinedLossError(ValueError):
    pass


class NonFiniteLossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 0.3
    lambda_bg: float = 0.3
    lambda_d: float = 0.5
    alpha_bg: float = 0.5

    def __post_init__(self):
        if min(self.lambda_g, self.lambda_bg, self.lambda_d, self.alpha_bg) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def warmup(cls):
        return cls(0.3, 0.3, 0.5)

    @classmethod
    def main(cls):
        return cls(0.3, 0.3, 0.0)


def masked_mse(render, target, mask):
    """Mean over mask pixels of the squared RGB distance (channels summed)."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if render.shape != target.shape or render.shape[:2] != mask.shape:
        raise ValueError("shape mismatch")
    n = mask.sum()
    if n == 0:
        raise UndefinedLossError("empty mask")
    diff = render[mask] - target[mask]
    return float(np.sum(diff * diff) / n)


def outside_visual_hull(field: GaussianField, masks, poses, intr: CameraIntrinsics):
    """Primitives whose mean projects outside any of the given masks (or behind a camera)."""
    mu = field.mu.astype(np.float64)
    out = np.zeros(len(field), dtype=bool)
    for mask, pose in zip(masks, poses):
        cam = pose.apply(mu)
        behind = cam[:, 2] <= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = project_points(np.where(behind[:, None], 1.0, cam), intr)
        col = np.floor(uv[:, 0]).astype(np.int64)
        row = np.floor(uv[:, 1]).astype(np.int64)
        inb = (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height) & ~behind
        hit = np.zeros(len(field), dtype=bool)
        hit[inb] = np.asarray(mask, dtype=bool)[row[inb], col[inb]]
        out |= ~hit
    return out


def bg_penalty(field: GaussianField, mask_ref, pose_ref, mask_t, pose_t, intr: CameraIntrinsics, alpha_bg=0.5):
    """Mean of |color|^2 + alpha_bg * opacity over primitives outside the two-view hull."""
    out = outside_visual_hull(field, (mask_ref, mask_t), (pose_ref, pose_t), intr)
    if not out.any():
        return 0.0
    c = field.color[out].astype(np.float64)
    o = field.opacity[out].astype(np.float64)
    return float(np.mean(np.sum(c * c, axis=1) + alpha_bg * o))


def pixel_ray_directions(pose: CameraPose, intr: CameraIntrinsics, pixels):
    """World-space unit rays through the centers of flat pixel indices ``pixels``."""
    pixels = np.asarray(pixels, dtype=np.int64)
    row, col = np.divmod(pixels, intr.width)
    d_cam = np.stack([(col + 0.5 - intr.cx) / intr.fx, (row + 0.5 - intr.cy) / intr.fy,
                      np.ones(len(pixels))], axis=1)
    d = d_cam @ pose.rotation  # R^T applied row-wise
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _ray_terms(mu, pose, intr, pixels):
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    r = pixel_ray_directions(pose, intr, pixels)
    v = mu - pose.center()
    dist = np.linalg.norm(v, axis=1)
    return r, v, dist


def ray_alignment(mu, pose: CameraPose, intr: CameraIntrinsics, pixels, return_flags=False):
    """Mean (1 - cos) between each pixel ray and the ray toward its primitive.

    ``pixels[k]`` is the flat pixel index assigned to primitive ``k``. A mean
    coinciding with the camera center contributes the maximum 2 and is flagged.
    """
    r, v, dist = _ray_terms(mu, pose, intr, pixels)
    if len(dist) == 0:
        raise UndefinedLossError("no assigned primitives")
    flags = dist < CENTER_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.einsum("ij,ij->i", r, v) / dist
    terms = np.where(flags, 2.0, 1.0 - cos)
    loss = float(np.mean(terms))
    return (loss, flags) if return_flags else loss


def ray_alignment_grad(mu, pose: CameraPose, intr: CameraIntrinsics, pixels):
    """Analytic d(ray_alignment)/d(mu), shape (K, 3)."""
    r, v, dist = _ray_terms(mu, pose, intr, pixels)
    if np.any(dist < CENTER_EPS):
        raise UndefinedLossError("gradient undefined for a mean at the camera center")
    u = v / dist[:, None]
    proj = r - np.einsum("ij,ij->i", u, r)[:, None] * u
    return -proj / dist[:, None] / len(dist)


def normalized_depth(pred_depth, gt_depth, mask):
    """Mean over mask of (d / mean(d) - z / mean(z))^2."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UndefinedLossError("empty mask")
    d = np.asarray(pred_depth, dtype=np.float64)[mask]
    z = np.asarray(gt_depth, dtype=np.float64)[mask]
    dm, zm = d.mean(), z.mean()
    if dm < DEPTH_MEAN_EPS or zm < DEPTH_MEAN_EPS:
        raise UndefinedLossError("mean depth too small to normalize")
    return float(np.mean((d / dm - z / zm) ** 2))


def total_loss(parts, weights: LossWeights):
    """L_masked + lambda_bg L_bg + lambda_g (L_ray + lambda_d L_depth)."""
    for name in ("masked", "bg", "ray", "depth"):
        val = parts.get(name, 0.0)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"loss part {name!r} is not finite: {val!r}")
    photo = parts.get("masked", 0.0) + weights.lambda_bg * parts.get("bg", 0.0)
    geo = parts.get("ray", 0.0) + weights.lambda_d * parts.get("depth", 0.0)
    return photo + weights.lambda_g * geo


def loss_record(t, parts, weights):
    """One JSON line of the loss breakdown."""
    rec = {"t": int(t)}
    for name in ("masked", "bg", "ray", "depth"):
        rec[f"L_{name}"] = float(parts.get(name, 0.0))
    rec["L_total"] = total_loss(parts, weights)
    return json.dumps(rec)


def fd_check(loss_fn, grad_fn, point, h=1e-5, floor=1e-8):
    """Max relative error between ``grad_fn`` and central differences of ``loss_fn``."""
    if not h > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    g = np.asarray(grad_fn(x), dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    fd = np.empty_like(g)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn(x)
        flat[i] = old - h
        fm = loss_fn(x)
        flat[i] = old
        fd[i] = (fp - fm) / (2 * h)
    err = np.abs(fd - g) / np.maximum(np.maximum(np.abs(fd), np.abs(g)), floor)
    return float(err.max()) if err.size else 0.0
