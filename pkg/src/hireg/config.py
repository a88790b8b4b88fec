"""Run configuration: one nested document covering every pipeline knob.

Configs round-trip exactly through dict/JSON (parse -> serialize -> parse is
identity). Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .descriptors import DescriptorParams
from .errors import ValidationError
from .matching import RansacParams
from .training import CircleLossParams, LossWeights, SamplingRadii, TargetScores


@dataclass(frozen=True)
class DetectorParams:
    """Saliency neighborhood size plus coarse/fine sampling budgets."""

    saliency_k: int = 24
    coarse_samples: int = 500
    fine_samples: int = 1000

    def __post_init__(self):
        if self.saliency_k < 2:
            raise ValidationError("saliency_k must be >= 2")
        if self.coarse_samples < 1 or self.fine_samples < 1:
            raise ValidationError("sample counts must be >= 1")


@dataclass(frozen=True)
class MatchingParams:
    cell_radius: float = 0.1
    top_fraction: float = 0.5
    mutual: bool = True
    per_cell_selection: bool = False

    def __post_init__(self):
        if not self.cell_radius > 0:
            raise ValidationError("cell_radius must be positive")
        if not 0 < self.top_fraction <= 1:
            raise ValidationError("top_fraction must be in (0, 1]")


@dataclass(frozen=True)
class MetricParams:
    rre_max_deg: float = 5.0
    rte_max_m: float = 2.0
    inlier_tau: float = 0.1
    fmr_threshold: float = 0.05
    repeatability_radius: float = 0.1

    def __post_init__(self):
        for name in ("rre_max_deg", "rte_max_m", "inlier_tau", "repeatability_radius"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 <= self.fmr_threshold < 1:
            raise ValidationError("fmr_threshold must lie in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of the pipeline, grouped by module."""

    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    sampling: SamplingRadii = field(default_factory=SamplingRadii)
    circle: CircleLossParams = field(default_factory=CircleLossParams)
    targets: TargetScores = field(default_factory=TargetScores)
    detector: DetectorParams = field(default_factory=DetectorParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    matching: MatchingParams = field(default_factory=MatchingParams)
    metrics: MetricParams = field(default_factory=MetricParams)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    anchors: int = 256
    positive_reduction: str = "min"
    seed: int = 0

    def __post_init__(self):
        if self.anchors < 1:
            raise ValidationError("anchors must be >= 1")
        if self.positive_reduction not in ("min", "mean"):
            raise ValidationError("positive_reduction must be 'min' or 'mean'")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        return _build(RunConfig, data, context="config")


_SECTION_TYPES = {
    "descriptor": DescriptorParams,
    "sampling": SamplingRadii,
    "circle": CircleLossParams,
    "targets": TargetScores,
    "detector": DetectorParams,
    "ransac": RansacParams,
    "matching": MatchingParams,
    "metrics": MetricParams,
    "loss_weights": LossWeights,
}


def _build(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{context}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        section = _SECTION_TYPES.get(key)
        if section is not None and cls is RunConfig:
            kwargs[key] = _build(section, value, context=f"{context}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{context}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
