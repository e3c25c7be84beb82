"""Pipeline configuration: one JSON-serializable document for a whole run.

Every tunable constant used by the stages lives here so that a config file plus
a seed fully determines the output (the pipeline is deterministic end to end).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import StitchError


class ConfigError(StitchError):
    """A configuration value violates its documented range."""


@dataclass
class MsacConfig:
    inlier_threshold: float = 2.0     # px, on the symmetric transfer error
    max_iterations: int = 1000
    confidence_target: float = 0.99
    min_inliers: int = 8

    def validate(self) -> None:
        if self.inlier_threshold <= 0:
            raise ConfigError("msac.inlier_threshold must be > 0")
        if self.max_iterations < 1:
            raise ConfigError("msac.max_iterations must be >= 1")
        if not 0.0 < self.confidence_target < 1.0:
            raise ConfigError("msac.confidence_target must lie in (0, 1)")
        if self.min_inliers < 4:
            raise ConfigError("msac.min_inliers must be >= 4")


@dataclass
class PoolConfig:
    colocate_radius: float = 3.0      # px, both endpoints must sit this close
    k_offset: float = 1.0             # scales the depth-center offset into tau
    tau_min: float = 2.0              # px, lower bound of the offset filter

    def validate(self) -> None:
        if self.colocate_radius <= 0:
            raise ConfigError("pool.colocate_radius must be > 0")
        if self.k_offset < 0:
            raise ConfigError("pool.k_offset must be >= 0")
        if self.tau_min < 0:
            raise ConfigError("pool.tau_min must be >= 0")


@dataclass
class FeatureConfig:
    fast_threshold: int = 20          # gray levels for the segment test
    nms_radius: float = 4.0           # px
    ratio_test: float = 0.8           # Lowe ratio, nearest/second-nearest
    max_keypoints: int = 500

    def validate(self) -> None:
        if self.fast_threshold < 1:
            raise ConfigError("features.fast_threshold must be >= 1")
        if self.nms_radius < 0:
            raise ConfigError("features.nms_radius must be >= 0")
        if not 0.0 < self.ratio_test <= 1.0:
            raise ConfigError("features.ratio_test must lie in (0, 1]")
        if self.max_keypoints < 1:
            raise ConfigError("features.max_keypoints must be >= 1")


@dataclass
class PipelineConfig:
    r_inner: int = 40                 # px, inner unwrap radius
    margin: int = 8                   # px, border excluded from center search
    unwrap_width: int = 512
    unwrap_height: int = 128
    focal_length: float = 1000.0      # px, cylindrical projection parameter
    horizontal_threshold: float = 64.0  # px, cumulative-drift compression bound
    epsilon: float = 4.0              # px, expected per-pair vertical drift
    dwho_gain: float = 3.0            # confidence gain in the offset target
    density_bins: int = 16            # histogram bins for density weights
    providers: list[str] = field(default_factory=lambda: ["orb", "dog"])
    seed: int = 42
    msac: MsacConfig = field(default_factory=MsacConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def validate(self) -> None:
        if self.r_inner < 1:
            raise ConfigError("r_inner must be >= 1")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.unwrap_width < 8 or self.unwrap_height < 8:
            raise ConfigError("unwrap dimensions must be >= 8")
        if self.focal_length <= 0:
            raise ConfigError("focal_length must be > 0")
        if self.horizontal_threshold <= 0:
            raise ConfigError("horizontal_threshold must be > 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.dwho_gain <= 0:
            raise ConfigError("dwho_gain must be > 0")
        if self.density_bins < 1:
            raise ConfigError("density_bins must be >= 1")
        if not self.providers:
            raise ConfigError("at least one feature provider is required")
        for tag in self.providers:
            base = tag.split(":", 1)[0]
            if base not in ("orb", "dog", "import", "importframe"):
                raise ConfigError(f"unknown provider '{tag}'")
        self.msac.validate()
        self.pool.validate()
        self.features.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for name, sub in (("msac", MsacConfig), ("pool", PoolConfig), ("features", FeatureConfig)):
            if name in payload and isinstance(payload[name], dict):
                sub_known = {f.name for f in fields(sub)}
                sub_unknown = set(payload[name]) - sub_known
                if sub_unknown:
                    raise ConfigError(f"unknown {name} config fields: {sorted(sub_unknown)}")
                payload[name] = sub(**payload[name])
        cfg = cls(**payload)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))
