"""Forward rasterizer for Gaussian fields (color, expected depth, alpha).

Primitives are projected with the local affine (EWA) approximation, sorted
front to back by camera depth and alpha-composited per pixel. Two fast
backends share one contract: a tiled numba kernel and a pure-numpy path that
loops over primitives and updates their screen-space bounding boxes.
:func:`render_bruteforce` is the slow per-pixel reference both are checked
against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import HAVE_NUMBA, default_backend, njit
from .types import CameraIntrinsics, CameraPose, GaussianField, GaussianPrimitive, quat_to_rotmat

SINGULAR_DET = 1e-12
TILE = 16


@dataclass(frozen=True)
class RenderSettings:
    near: float = 0.1
    far: float = 100.0
    bg_color: tuple = (1.0, 1.0, 1.0)
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    cov_lowpass: float = 0.3
    alpha_max: float = 0.999
    tile: int = TILE

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not (0 < self.alpha_cutoff < 1 and 0 < self.transmittance_floor < 1):
            raise ValueError("cutoffs must lie in (0, 1)")
        if self.tile < 1:
            raise ValueError("tile size must be >= 1")


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Projection:
    """Screen-space data for the primitives that survived culling (original order)."""

    index: np.ndarray   # indices into the source field
    mean2d: np.ndarray  # (K, 2) pixels
    cov2d: np.ndarray   # (K, 2, 2) pixels^2, low-pass included
    depth: np.ndarray   # (K,) camera z
    culled: int = 0
    singular: int = 0


def _jacobians(cam, intr):
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    J = np.zeros((cam.shape[0], 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / (z * z)
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / (z * z)
    return J


def project_points(cam, intr: CameraIntrinsics):
    """Pinhole projection of camera-space points to pixel coordinates."""
    cam = np.asarray(cam, dtype=np.float64)
    return np.stack([intr.fx * cam[..., 0] / cam[..., 2] + intr.cx,
                     intr.fy * cam[..., 1] / cam[..., 2] + intr.cy], axis=-1)


def project_field(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
                  settings: RenderSettings = RenderSettings()) -> Projection:
    mu = field.mu.astype(np.float64)
    cam = pose.apply(mu)
    z = cam[:, 2]
    inside = (z > settings.near) & (z < settings.far)
    idx = np.nonzero(inside)[0]
    cam = cam[idx]
    cov3 = field.select(idx).covariances() if len(idx) else np.zeros((0, 3, 3))
    M = _jacobians(cam, intr) @ pose.rotation
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    cov2[:, 0, 0] += settings.cov_lowpass
    cov2[:, 1, 1] += settings.cov_lowpass
    cov2[:, 0, 1] = cov2[:, 1, 0] = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    ok = det >= SINGULAR_DET
    proj = Projection(idx[ok], project_points(cam[ok], intr), cov2[ok], cam[ok, 2],
                      culled=int(len(field) - len(idx)), singular=int(np.sum(~ok)))
    return proj


def project_gaussian(prim: GaussianPrimitive, pose: CameraPose, intr: CameraIntrinsics,
                     settings: RenderSettings = RenderSettings()):
    """(mean2d, cov2d, depth) for one primitive, or None when culled."""
    f = GaussianField(prim.mu[None], prim.rot[None], prim.scale[None], prim.color[None], [prim.opacity])
    p = project_field(f, pose, intr, settings)
    if len(p.index) == 0:
        return None
    return p.mean2d[0], p.cov2d[0], float(p.depth[0])


def _sorted_inputs(field, proj):
    order = np.argsort(proj.depth, kind="stable")
    cov = proj.cov2d[order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    src = proj.index[order]
    return (np.ascontiguousarray(proj.mean2d[order]), np.ascontiguousarray(conic), cov,
            field.opacity[src].astype(np.float64), field.color[src].astype(np.float64),
            np.ascontiguousarray(proj.depth[order]))


def _bboxes(mean2d, cov, opacity, cutoff, H, W):
    """Inclusive pixel ranges (x0, x1, y0, y1) that can receive alpha >= cutoff."""
    K = len(opacity)
    box = np.zeros((K, 4), dtype=np.int64)
    ratio = np.where(opacity > 0, opacity / cutoff, 0.0)
    live = ratio >= 1.0
    k = np.where(live, 2.0 * np.log(np.maximum(ratio, 1.0)), 0.0)
    rx = np.sqrt(k * cov[:, 0, 0])
    ry = np.sqrt(k * cov[:, 1, 1])
    # one pixel of slack; the per-pixel cutoff test stays authoritative
    box[:, 0] = np.floor(mean2d[:, 0] - rx - 0.5) - 1
    box[:, 1] = np.ceil(mean2d[:, 0] + rx - 0.5) + 1
    box[:, 2] = np.floor(mean2d[:, 1] - ry - 0.5) - 1
    box[:, 3] = np.ceil(mean2d[:, 1] + ry - 0.5) + 1
    box[:, 0:2] = np.clip(box[:, 0:2], 0, W - 1)
    box[:, 2:4] = np.clip(box[:, 2:4], 0, H - 1)
    offscreen = ((mean2d[:, 0] + rx + 1.5 < 0) | (mean2d[:, 0] - rx - 1.5 > W)
                 | (mean2d[:, 1] + ry + 1.5 < 0) | (mean2d[:, 1] - ry - 1.5 > H))
    box[~live | offscreen] = (0, -1, 0, -1)
    return box


@njit
def _composite_tiles(mean2d, conic, opacity, color, depth, box, H, W, tile,
                     cutoff, floor, alpha_max, out_color, out_w, out_depth, out_T):
    K = mean2d.shape[0]
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    counts = np.zeros(ntx * nty, dtype=np.int64)
    for k in range(K):
        if box[k, 1] < box[k, 0]:
            continue
        for ty in range(box[k, 2] // tile, box[k, 3] // tile + 1):
            for tx in range(box[k, 0] // tile, box[k, 1] // tile + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    for i in range(ntx * nty):
        offsets[i + 1] = offsets[i] + counts[i]
    lists = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in range(K):
        if box[k, 1] < box[k, 0]:
            continue
        for ty in range(box[k, 2] // tile, box[k, 3] // tile + 1):
            for tx in range(box[k, 0] // tile, box[k, 1] // tile + 1):
                t = ty * ntx + tx
                lists[fill[t]] = k
                fill[t] += 1
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            for py in range(ty * tile, min(H, (ty + 1) * tile)):
                for px in range(tx * tile, min(W, (tx + 1) * tile)):
                    x = px + 0.5
                    y = py + 0.5
                    T = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    wsum = 0.0
                    dsum = 0.0
                    for j in range(offsets[t], offsets[t + 1]):
                        k = lists[j]
                        if px < box[k, 0] or px > box[k, 1] or py < box[k, 2] or py > box[k, 3]:
                            continue
                        dx = x - mean2d[k, 0]
                        dy = y - mean2d[k, 1]
                        q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                        a = opacity[k] * np.exp(-0.5 * q)
                        if a > alpha_max:
                            a = alpha_max
                        if a < cutoff:
                            continue
                        w = a * T
                        r += w * color[k, 0]
                        g += w * color[k, 1]
                        b += w * color[k, 2]
                        wsum += w
                        dsum += w * depth[k]
                        T *= 1.0 - a
                        if T < floor:
                            break
                    out_color[py, px, 0] = r
                    out_color[py, px, 1] = g
                    out_color[py, px, 2] = b
                    out_w[py, px] = wsum
                    out_depth[py, px] = dsum
                    out_T[py, px] = T


def _composite_numpy(mean2d, conic, opacity, color, depth, box, H, W, cutoff, floor, alpha_max):
    acc_c = np.zeros((H, W, 3))
    acc_w = np.zeros((H, W))
    acc_d = np.zeros((H, W))
    T = np.ones((H, W))
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    for k in range(len(opacity)):
        x0, x1, y0, y1 = box[k]
        if x1 < x0:
            continue
        dx = xs[x0:x1 + 1][None, :] - mean2d[k, 0]
        dy = ys[y0:y1 + 1][:, None] - mean2d[k, 1]
        q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
        a = np.minimum(opacity[k] * np.exp(-0.5 * q), alpha_max)
        Tv = T[y0:y1 + 1, x0:x1 + 1]
        hit = (a >= cutoff) & (Tv >= floor)
        if not hit.any():
            continue
        a = np.where(hit, a, 0.0)
        w = a * Tv
        acc_c[y0:y1 + 1, x0:x1 + 1] += w[..., None] * color[k]
        acc_w[y0:y1 + 1, x0:x1 + 1] += w
        acc_d[y0:y1 + 1, x0:x1 + 1] += w * depth[k]
        Tv *= 1.0 - a
    return acc_c, acc_w, acc_d, T


def _finish(acc_c, acc_w, acc_d, T, settings, diagnostics):
    bg = np.asarray(settings.bg_color, dtype=np.float64)
    color = acc_c + T[..., None] * bg
    alpha = 1.0 - T
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(acc_w > 0, acc_d / np.where(acc_w > 0, acc_w, 1.0), 0.0)
    return RenderOutput(color, depth, np.clip(alpha, 0.0, 1.0), diagnostics)


def render(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
           settings: RenderSettings = RenderSettings(), backend=None) -> RenderOutput:
    """Render ``field``; ``backend`` is "numba", "numpy" or None for the default."""
    backend = backend or default_backend()
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is disabled or missing")
    H, W = intr.height, intr.width
    proj = project_field(field, pose, intr, settings)
    diag = {"culled": proj.culled, "singular": proj.singular, "backend": backend}
    mean2d, conic, cov, opacity, color, depth = _sorted_inputs(field, proj)
    box = _bboxes(mean2d, cov, opacity, settings.alpha_cutoff, H, W)
    if backend == "numba":
        acc_c = np.zeros((H, W, 3))
        acc_w = np.zeros((H, W))
        acc_d = np.zeros((H, W))
        T = np.ones((H, W))
        _composite_tiles(mean2d, conic, opacity, color, depth, box, H, W, settings.tile,
                         settings.alpha_cutoff, settings.transmittance_floor, settings.alpha_max,
                         acc_c, acc_w, acc_d, T)
    elif backend == "numpy":
        acc_c, acc_w, acc_d, T = _composite_numpy(mean2d, conic, opacity, color, depth, box, H, W,
                                                  settings.alpha_cutoff, settings.transmittance_floor,
                                                  settings.alpha_max)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return _finish(acc_c, acc_w, acc_d, T, settings, diag)


def render_bruteforce(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
                      settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Reference renderer: every pixel walks every depth-sorted primitive.

    No tiles, no bounding boxes; only the alpha cutoff and transmittance
    floor shared with :func:`render`. Slow; meant for verification.
    """
    H, W = intr.height, intr.width
    proj = project_field(field, pose, intr, settings)
    order = np.argsort(proj.depth, kind="stable")
    mean2d = proj.mean2d[order]
    inv = np.linalg.inv(proj.cov2d[order]) if len(order) else np.zeros((0, 2, 2))
    src = proj.index[order]
    opac = field.opacity[src].astype(np.float64).tolist()
    cols = field.color[src].astype(np.float64).tolist()
    zs = proj.depth[order].tolist()
    K = len(order)
    acc_c = np.zeros((H, W, 3))
    acc_w = np.zeros((H, W))
    acc_d = np.zeros((H, W))
    T_img = np.ones((H, W))
    cutoff, floor, amax = settings.alpha_cutoff, settings.transmittance_floor, settings.alpha_max
    for py in range(H):
        for px in range(W):
            if K == 0:
                continue
            d = np.array([px + 0.5, py + 0.5]) - mean2d
            q = np.einsum("ki,kij,kj->k", d, inv, d)
            g = np.exp(-0.5 * q).tolist()
            T = 1.0
            r = gg = b = wsum = dsum = 0.0
            for k in range(K):
                a = min(amax, opac[k] * g[k])
                if a < cutoff:
                    continue
                w = a * T
                c = cols[k]
                r += w * c[0]
                gg += w * c[1]
                b += w * c[2]
                wsum += w
                dsum += w * zs[k]
                T *= 1.0 - a
                if T < floor:
                    break
            acc_c[py, px] = (r, gg, b)
            acc_w[py, px] = wsum
            acc_d[py, px] = dsum
            T_img[py, px] = T
    diag = {"culled": proj.culled, "singular": proj.singular, "backend": "bruteforce"}
    return _finish(acc_c, acc_w, acc_d, T_img, settings, diag)


def mask_from_alpha(output: RenderOutput, threshold=0.5):
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return output.alpha >= threshold


def camera_space_covariance(prim: GaussianPrimitive, pose: CameraPose):
    R = quat_to_rotmat(prim.rot)
    M = pose.rotation @ R * prim.scale
    return M @ M.T
