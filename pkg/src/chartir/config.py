"""Run configuration: JSON config file plus flag overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import AggregationWeights

DEFAULT_WEIGHTS = {"ssim": 1.0, "psnr": 1.0, "hamming": 1.0}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = ""
    threshold: int = 3
    max_debug: int = 3
    iteration_cap: int = 15
    render_timeout_ms: int = 30000
    sandbox_parallelism: int = 4
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    judge_enabled: bool = False
    mock_playbook: str | None = None
    models: dict = field(default_factory=dict)  # optional per-role model overrides

    def validate(self) -> None:
        if not self.manifest:
            raise ConfigError("manifest path is required")
        if not self.out_dir:
            raise ConfigError("output directory is required")
        if self.threshold < 1:
            raise ConfigError("threshold must be >= 1")
        if self.max_debug < 0:
            raise ConfigError("max-debug must be >= 0")
        if self.iteration_cap < 1:
            raise ConfigError("iteration cap must be >= 1")
        if self.render_timeout_ms < 1000:
            raise ConfigError("render timeout must be >= 1000 ms")
        if self.sandbox_parallelism < 1:
            raise ConfigError("sandbox parallelism must be >= 1")
        for name, value in self.weights.items():
            if name not in ("ssim", "psnr", "hamming"):
                raise ConfigError(f"unknown weight '{name}'")
            if value < 0:
                raise ConfigError(f"weight '{name}' must be non-negative")

    def aggregation_weights(self) -> AggregationWeights:
        merged = dict(DEFAULT_WEIGHTS, **self.weights)
        return AggregationWeights(
            w_ssim=merged["ssim"], w_psnr=merged["psnr"], w_hamming=merged["hamming"]
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def apply_overrides(self, **overrides) -> "RunConfig":
        """Return a copy with non-None overrides applied (flags beat file values)."""
        updates = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **updates)


def parse_weights(spec: str) -> dict:
    """Parse ``ssim=0.2,psnr=0.2,hamming=0.6`` into a weight mapping."""
    weights: dict = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad weight component '{part}' (expected name=value)")
        name, _, raw = part.partition("=")
        try:
            weights[name.strip()] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"bad weight value in '{part}'") from exc
    if not weights:
        raise ConfigError("empty weight specification")
    return weights
