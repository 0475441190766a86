"""Run configuration; loadable from TOML or JSON with the same keys.

Every tunable constant lives here. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .memory import DENSE_FRACTION, DROP_FRACTION, USAGE_PERCENTILE
from .rasterizer import RenderSettings
from .synthgen import OPACITY_RANGE, TrajectoryParams


@dataclass
class PipelineConfig:
    patch_size: int = 8
    feature_dim: int = 64
    capacity_views: int = 20
    dense_fraction: float = DENSE_FRACTION
    usage_percentile: float = USAGE_PERCENTILE
    drop_fraction: float = DROP_FRACTION
    key_gain: float = 16.0
    key_seed: int = 0
    value_seed: int = 1
    noise_deg: float = 0.0
    direction_seed: int = 0
    use_direction: bool = True
    pixel_opacity: float = 0.99
    pixel_scale: float = 0.05
    opacity_eps: float = 1e-4
    bg_tol: float = 0.02
    render: RenderSettings = field(default_factory=RenderSettings)
    losses: LossWeights = field(default_factory=LossWeights)

    def tokens_per_view(self, image_shape):
        H, W = image_shape
        return (H // self.patch_size) * (W // self.patch_size)


@dataclass
class SceneConfig:
    kind: str = "sphere"
    count: int = 3000
    radius: float = 1.0
    seed: int = 0
    mask_threshold: float = 0.5
    opacity_range: tuple = OPACITY_RANGE


@dataclass
class EvalConfig:
    split_seed: int = 0
    psnr_sentinel: float = 99.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    early_last: int = 4
    mid_last: int = 10
    coverage_tolerance: float = 0.02


@dataclass
class Config:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryParams = field(default_factory=lambda: TrajectoryParams(radius_shell=(2.5, 3.5), frames=20))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        _reject_unknown(cls, d, "")
        return cls(
            pipeline=_pipeline_from_dict(d.get("pipeline", {})),
            scene=_build(SceneConfig, d.get("scene", {}), "scene."),
            trajectory=_build(TrajectoryParams, d.get("trajectory", {}), "trajectory.",
                              base=dataclasses.asdict(cls().trajectory)),
            eval=_build(EvalConfig, d.get("eval", {}), "eval."),
        )


def _tuples(d):
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


def _reject_unknown(cls, d, prefix):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")


def _build(cls, d, prefix, base=None):
    _reject_unknown(cls, d, prefix)
    merged = dict(base or {})
    merged.update(d)
    return cls(**_tuples(merged))


def _pipeline_from_dict(d):
    d = dict(d)
    render = _build(RenderSettings, d.pop("render", {}), "pipeline.render.")
    losses = _build(LossWeights, d.pop("losses", {}), "pipeline.losses.")
    _reject_unknown(PipelineConfig, d, "pipeline.")
    return PipelineConfig(render=render, losses=losses, **d)


def load_config(path=None) -> Config:
    """Read a config file (``.toml`` or ``.json``); None gives the defaults."""
    if path is None:
        return Config()
    path = Path(path)
    if path.suffix == ".toml":
        import tomli

        with open(path, "rb") as fh:
            data = tomli.load(fh)
    else:
        with open(path) as fh:
            data = json.load(fh)
    return Config.from_dict(data)


def dump_toml(cfg: Config) -> str:
    """Minimal TOML writer for the flat-section layout used here."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    def section(name, d, out):
        scalars = {k: v for k, v in d.items() if not isinstance(v, dict)}
        out.append(f"[{name}]")
        out.extend(f"{k} = {fmt(v)}" for k, v in scalars.items())
        out.append("")
        for k, v in d.items():
            if isinstance(v, dict):
                section(f"{name}.{k}", v, out)

    out = []
    for name, d in cfg.to_dict().items():
        section(name, d, out)
    return "\n".join(out)
