"""Image metrics, the normalized mean score, and stage-wise novel-view evaluation."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rasterizer import render
from .types import GaussianField, filter_renderable

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EARLY_LAST = 4
MID_LAST = 10
STAGES = ("early", "mid", "late")


def psnr(a, b, sentinel=PSNR_SENTINEL):
    """Peak signal-to-noise ratio with peak 1.0; identical images give ``sentinel``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(sentinel)
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation restricted to positions where the window fits
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, data_range=1.0, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    """Mean structural similarity over valid window positions, averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def m_avg(psnr_db, ssim_val, lpips=None):
    """Normalized mean of the available metrics; without LPIPS only two terms are averaged."""
    terms = [min(max((psnr_db - 20.0) / 20.0, 0.0), 1.0), ssim_val]
    if lpips is not None:
        terms.append(1.0 - min(max(lpips / 0.6, 0.0), 1.0))
    return float(sum(terms) / len(terms))


def stage_of(t, early_last=EARLY_LAST, mid_last=MID_LAST):
    if t < 1:
        raise ValueError("stages start at t = 1")
    if t <= early_last:
        return "early"
    if t <= mid_last:
        return "mid"
    return "late"


def stage_sets(T, early_last=EARLY_LAST, mid_last=MID_LAST):
    sets = {s: [] for s in STAGES}
    for t in range(1, T + 1):
        sets[stage_of(t, early_last, mid_last)].append(t)
    return sets


def split_input_target(frame_count, seed=0):
    """Random disjoint split; inputs get ceil(n/2) ids. Both lists are sorted."""
    if frame_count < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(frame_count)
    k = (frame_count + 1) // 2
    return np.sort(perm[:k]), np.sort(perm[k:])


@dataclass
class StageReport:
    rows: list = field(default_factory=list)   # dicts: t, view, psnr, ssim, lpips
    stages: dict = field(default_factory=dict)
    error: Optional[dict] = None
    lpips_present: bool = False
    input_ids: list = field(default_factory=list)
    target_ids: list = field(default_factory=list)
    early_last: int = EARLY_LAST
    mid_last: int = MID_LAST

    def aggregate(self):
        self.stages = {}
        for name in STAGES:
            sel = [r for r in self.rows if stage_of(r["t"], self.early_last, self.mid_last) == name]
            if not sel:
                self.stages[name] = None
                continue
            p = float(np.mean([r["psnr"] for r in sel]))
            s = float(np.mean([r["ssim"] for r in sel]))
            lp = None
            if self.lpips_present:
                lp = float(np.mean([r["lpips"] for r in sel]))
            self.stages[name] = {"psnr": p, "ssim": s, "lpips": lp, "m_avg": m_avg(p, s, lp),
                                 "m_avg_terms": 3 if lp is not None else 2, "count": len(sel)}
        return self

    def per_t(self, key="psnr"):
        ts = sorted({r["t"] for r in self.rows})
        return ts, [float(np.mean([r[key] for r in self.rows if r["t"] == t])) for t in ts]

    def to_dict(self):
        return {"stages": self.stages, "rows": self.rows, "error": self.error,
                "lpips_present": self.lpips_present, "input_ids": self.input_ids,
                "target_ids": self.target_ids}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path=None):
        cols = ["t", "view", "psnr", "ssim"] + (["lpips"] if self.lpips_present else [])
        buf = _io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()

    def format_table(self):
        lines = [f"{'stage':<6} {'n':>4} {'PSNR':>8} {'SSIM':>7} {'LPIPS':>7} {'M_avg':>7}"]
        for name in STAGES:
            s = self.stages.get(name)
            if s is None:
                lines.append(f"{name:<6} {'-':>4} {'absent':>8}")
                continue
            lp = f"{s['lpips']:.3f}" if s["lpips"] is not None else "n/a"
            lines.append(f"{name:<6} {s['count']:>4} {s['psnr']:>8.3f} {s['ssim']:>7.4f} {lp:>7} {s['m_avg']:>7.4f}")
        if not self.lpips_present:
            lines.append("M_avg averaged over PSNR and SSIM terms only (no LPIPS supplied)")
        if self.error:
            lines.append(f"stopped early at t={self.error['t']}: {self.error['message']}")
        return "\n".join(lines)


def load_lpips(path):
    """Precomputed LPIPS values: JSON list of {t, view, lpips}."""
    with open(path) as fh:
        return {(int(r["t"]), int(r["view"])): float(r["lpips"]) for r in json.load(fh)}


def run_protocol(pipeline, frames, poses, seed=0, lpips=None, backend=None, split=None, settings=None):
    """Feed the input half causally and score every target view after each step.

    The first input frame initializes the pipeline (t = 0); the remaining
    inputs are steps t = 1..T. ``lpips`` maps (t, target id) to a value.
    ``settings`` is an optional ``EvalConfig`` overriding metric constants.
    """
    ev = settings
    inputs, targets = split if split is not None else split_input_target(len(frames), seed)
    inputs, targets = [int(i) for i in inputs], [int(i) for i in targets]
    report = StageReport(lpips_present=lpips is not None, input_ids=inputs, target_ids=targets)
    if ev is not None:
        report.early_last, report.mid_last = ev.early_last, ev.mid_last
    pkw = {} if ev is None else {"sentinel": ev.psnr_sentinel}
    skw = {} if ev is None else {"window": ev.ssim_window, "sigma": ev.ssim_sigma, "k1": ev.ssim_k1, "k2": ev.ssim_k2}
    intr = pipeline.intrinsics
    inv0 = poses[inputs[0]].inverse()
    pipeline.init(frames[inputs[0]], poses[inputs[0]])
    rs = pipeline.config.render
    for t, idx in enumerate(inputs[1:], start=1):
        try:
            fld, _ = pipeline.step(frames[idx], poses[idx])
        except Exception as exc:
            report.error = {"t": t, "message": str(exc)}
            break
        fld = filter_renderable(fld, rs.bg_color, pipeline.config.opacity_eps, pipeline.config.bg_tol)
        for v in targets:
            out = render(fld, poses[v].compose(inv0), intr, rs, backend=backend)
            row = {"t": t, "view": v, "psnr": psnr(out.color, frames[v].rgb, **pkw),
                   "ssim": ssim(out.color, frames[v].rgb, **skw)}
            if lpips is not None:
                row["lpips"] = lpips[(t, v)]
            report.rows.append(row)
    return report.aggregate()


def surface_coverage(surface_points, field: GaussianField, tolerance, opacity_eps=1e-4):
    """Fraction of surface points with a visible primitive mean within ``tolerance``."""
    from scipy.spatial import cKDTree

    pts = np.asarray(surface_points, dtype=np.float64)
    keep = field.opacity >= opacity_eps
    if not keep.any():
        return 0.0
    tree = cKDTree(field.mu[keep].astype(np.float64))
    dist, _ = tree.query(pts, k=1, distance_upper_bound=tolerance * (1 + 1e-12))
    return float(np.mean(dist <= tolerance))
