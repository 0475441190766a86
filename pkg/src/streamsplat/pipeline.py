"""Causal per-frame reconstruction loop around the dual-key memory.

Each step encodes the new frame, reads the memory twice, hands everything to
a fusion callable that emits the full Gaussian field (2N memory-decoded, N
reference, N source primitives) plus value tokens, and writes those tokens
back. Per-step cost is bounded because the memory is.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import encoders
from .config import PipelineConfig
from .memory import MemoryBank, ReadoutResult
from .types import (SUBGROUP_MEM, SUBGROUP_REF, SUBGROUP_SRC, CameraIntrinsics, CameraPose,
                    FrameObservation, GaussianField, rotmat_to_quat)

log = logging.getLogger(__name__)


class InitError(ValueError):
    pass


class StepError(RuntimeError):
    pass


@dataclass
class FusionInputs:
    ref_frame: FrameObservation
    ref_pose: CameraPose
    ref_keys: np.ndarray
    src_frame: FrameObservation
    src_pose: CameraPose
    src_keys: np.ndarray
    readout: Optional[ReadoutResult]
    intrinsics: CameraIntrinsics
    config: PipelineConfig


@dataclass
class FusionOutput:
    field: GaussianField
    values: np.ndarray      # (P, C) tokens written back for the source view
    summaries: np.ndarray   # (P, 13) raw patch moments behind ``values``


Fusion = Callable[[FusionInputs], FusionOutput]


def _pixel_gaussians(frame: FrameObservation, pose: CameraPose, intr: CameraIntrinsics, cfg: PipelineConfig, tag):
    """One primitive per pixel; masked pixels are back-projected, the rest are invisible padding."""
    H, W = frame.shape
    mask = frame.mask.ravel()
    depth = np.where(frame.mask, frame.depth, 0.0) if frame.depth is not None else None
    if depth is None:
        raise encoders.UnsupportedInputError("pixel fusion needs oracle depth")
    fill = float(frame.depth[frame.mask].mean()) if mask.any() else 1.0
    depth = np.where(frame.mask, depth, fill)
    pts = encoders.backproject(frame, pose, intr, depth).reshape(-1, 3)
    footprint = depth.ravel() / intr.fx * cfg.pixel_scale
    scale = np.repeat(footprint[:, None], 3, axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (H * W, 1))
    color = np.where(mask[:, None], frame.rgb.reshape(-1, 3), 0.0)
    opacity = np.where(mask, cfg.pixel_opacity, 0.0)
    return GaussianField(pts, rot, scale, color, opacity, np.full(H * W, tag, dtype=np.uint8))


def _grid_offsets(side):
    g = ((np.arange(side) + 0.5) / side) * 2.0 - 1.0
    a, b = np.meshgrid(g, g)
    return np.stack([a.ravel(), b.ravel()], axis=1) * np.sqrt(3.0)


def decode_readout(values, n_per_row, cfg: PipelineConfig):
    """Coarse primitives from memory readout rows: a planar grid per row, spread by the row's covariance."""
    summ = encoders.values_to_summaries(values, cfg.feature_dim, cfg.value_seed)
    mass, centroid, color, cov = encoders.decode_summaries(summ)
    side = int(round(np.sqrt(n_per_row)))
    if side * side != n_per_row:
        raise ValueError("primitives per readout row must be a perfect square")
    lam, vec = np.linalg.eigh(cov)  # ascending
    lam = np.clip(lam, 1e-12, None)
    sd = np.sqrt(lam)
    offs = _grid_offsets(side)  # (n, 2) in units of std
    # spread over the two dominant axes
    p = (centroid[:, None, :]
         + offs[None, :, 0:1] * (sd[:, None, 2:3] * vec[:, None, :, 2])
         + offs[None, :, 1:2] * (sd[:, None, 1:2] * vec[:, None, :, 1]))
    spacing = 2.0 * np.sqrt(3.0) * sd[:, 1:] / side
    floor = 1e-4
    s_major = np.maximum(spacing[:, 1], floor) * cfg.pixel_scale
    s_minor = np.maximum(spacing[:, 0], floor) * cfg.pixel_scale
    s_thin = np.maximum(sd[:, 0], floor)
    rows = len(mass)
    # principal frame (major, minor, normal) -> quaternion per row
    frames = np.stack([vec[:, :, 2], vec[:, :, 1], np.cross(vec[:, :, 2], vec[:, :, 1])], axis=2)
    quats = np.array([rotmat_to_quat(f) for f in frames]) if rows else np.zeros((0, 4))
    scale = np.stack([s_major, s_minor, s_thin], axis=1)
    return GaussianField(
        p.reshape(-1, 3),
        np.repeat(quats, n_per_row, axis=0),
        np.repeat(scale, n_per_row, axis=0),
        np.repeat(color, n_per_row, axis=0),
        np.repeat(np.minimum(mass, cfg.pixel_opacity), n_per_row, axis=0),
        np.full(rows * n_per_row, SUBGROUP_MEM, dtype=np.uint8),
    )


def baseline_fusion(inp: FusionInputs) -> FusionOutput:
    """Depth-oracle fusion: back-projects both input views and decodes both memory reads."""
    cfg = inp.config
    intr = inp.intrinsics
    H, W = inp.src_frame.shape
    N = H * W
    P = inp.src_keys.shape[0]
    n_per = N // P
    if inp.src_frame.depth is None or inp.ref_frame.depth is None:
        raise encoders.UnsupportedInputError("baseline fusion needs oracle depth")
    g_src = _pixel_gaussians(inp.src_frame, inp.src_pose, intr, cfg, SUBGROUP_SRC)
    g_ref = _pixel_gaussians(inp.ref_frame, inp.ref_pose, intr, cfg, SUBGROUP_REF)
    if inp.readout is not None:
        reads = np.vstack([inp.readout.aligned, inp.readout.complementary])
    else:
        reads = np.zeros((2 * P, cfg.feature_dim))
    g_mem = decode_readout(reads, n_per, cfg)
    values, summ = encoders.value_stub(inp.src_frame, inp.src_pose, intr, cfg.patch_size,
                                       cfg.feature_dim, cfg.value_seed)
    return FusionOutput(GaussianField.concat([g_mem, g_ref, g_src]), values, summ)


@dataclass
class StepDiagnostics:
    t: int
    bank_size: int
    read_entropy: float
    step_time: float
    pruned: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class Pipeline:
    """Online reconstruction state machine: ``init`` on the first frame, then ``step`` per frame.

    ``pose`` arguments are ground-truth world-to-camera poses; they feed the
    direction oracle and the depth-oracle fusion only.
    """

    def __init__(self, intrinsics: CameraIntrinsics, config: PipelineConfig = None, fusion: Fusion = baseline_fusion):
        self.intrinsics = intrinsics
        self.config = config or PipelineConfig()
        self.fusion = fusion
        self.bank = None
        self.t = -1
        self.field = None

    # -- helpers -----------------------------------------------------------

    def _relative(self, pose):
        return pose.compose(self._pose0_inv)

    def _direction(self, rel_pose, t):
        cfg = self.config
        return encoders.direction_oracle(rel_pose, cfg.noise_deg, seed=cfg.direction_seed * 100003 + t)

    def _keys(self, frame):
        cfg = self.config
        return encoders.latent_key_stub(frame, cfg.patch_size, cfg.feature_dim, cfg.key_seed, cfg.key_gain)

    # -- public API --------------------------------------------------------

    def init(self, reference: FrameObservation, pose: CameraPose = None):
        if not reference.is_valid:
            raise InitError("reference frame has an empty mask")
        cfg = self.config
        if reference.shape != self.intrinsics.shape:
            raise InitError("reference frame does not match the intrinsics image size")
        pose = pose or CameraPose.identity()
        self._pose0_inv = pose.inverse()
        P = cfg.tokens_per_view(reference.shape)
        self.bank = MemoryBank(cfg.feature_dim, P, cfg.capacity_views * P, cfg.use_direction,
                               cfg.dense_fraction, cfg.usage_percentile, cfg.drop_fraction)
        self.ref_frame = reference
        self.ref_pose = CameraPose.identity()
        self.ref_keys = self._keys(reference)
        est = self._direction(self.ref_pose, 0)
        self.ref_direction = est.key()
        values, _ = encoders.value_stub(reference, self.ref_pose, self.intrinsics, cfg.patch_size,
                                        cfg.feature_dim, cfg.value_seed)
        self.bank.write(self.ref_keys, self.ref_direction, values, 0)
        self.t = 0
        self.field = None
        return self

    def step(self, frame: FrameObservation, pose: CameraPose = None):
        """Advance one timestep; returns (field, diagnostics). Leaves state untouched on failure."""
        if self.bank is None:
            raise StepError("pipeline not initialized")
        start = time.perf_counter()
        cfg = self.config
        t = self.t + 1
        rel = self._relative(pose) if pose is not None else CameraPose.identity()
        bank = self.bank.copy()
        keys = self._keys(frame)
        est = self._direction(rel, t)
        kt = est.key()
        readout = None
        if len(bank):
            readout = bank.read(keys, self.ref_direction, kt, est.sigma)
        inputs = FusionInputs(self.ref_frame, self.ref_pose, self.ref_keys, frame, rel, keys, readout,
                              self.intrinsics, cfg)
        try:
            out = self.fusion(inputs)
        except Exception as exc:
            raise StepError(f"fusion failed at t={t}: {exc}") from exc
        removed = bank.write(keys, kt, out.values, t)
        self.bank = bank
        self.t = t
        self.field = out.field
        diag = StepDiagnostics(t, len(bank), readout.entropy() if readout is not None else 0.0,
                               time.perf_counter() - start, len(removed))
        return out.field, diag


def run_sequence(pipeline: Pipeline, frames, poses, callback=None):
    """Init on frame 0 and step through the rest; yields (t, field, diagnostics)."""
    pipeline.init(frames[0], poses[0])
    for i in range(1, len(frames)):
        fld, diag = pipeline.step(frames[i], poses[i])
        if callback is not None:
            callback(i, fld, diag)
        yield i, fld, diag


def bench(pipeline_factory, frames, poses, repetitions=1, early=(10, 30), late=None):
    """Per-frame step times and bank sizes; compares early and late median step time."""
    n = len(frames)
    if n < 50:
        raise ValueError("bench needs at least 50 frames")
    late = late or (max(early[1], n - 30), n)
    times = np.full((repetitions, n), np.nan)
    sizes = np.zeros(n, dtype=np.int64)
    for r in range(repetitions):
        pipe = pipeline_factory()
        pipe.init(frames[0], poses[0])
        sizes[0] = len(pipe.bank)
        for i in range(1, n):
            _, diag = pipe.step(frames[i], poses[i])
            times[r, i] = diag.step_time
            sizes[i] = diag.bank_size
    per_frame = np.full(n, np.nan)
    per_frame[1:] = times[:, 1:].min(axis=0)
    early_med = float(np.median(per_frame[early[0]:early[1]]))
    late_med = float(np.median(per_frame[late[0]:late[1]]))
    capacity = pipe.bank.capacity_tokens
    hit = np.nonzero(sizes >= capacity)[0]
    return {
        "frames": n,
        "repetitions": repetitions,
        "capacity_tokens": int(capacity),
        "bank_sizes": sizes.tolist(),
        "first_cap_frame": int(hit[0]) if len(hit) else None,
        "max_bank_size": int(sizes.max()),
        "step_times": [None if np.isnan(x) else float(x) for x in per_frame],
        "early_window": list(early),
        "late_window": list(late),
        "early_median_s": early_med,
        "late_median_s": late_med,
        "late_over_early": late_med / early_med if early_med > 0 else float("inf"),
    }
