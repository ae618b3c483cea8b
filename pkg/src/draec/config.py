"""Configuration objects and the flat JSON config file format.

A config file is a single JSON object whose keys are namespaced with a
dot (``stft.*``, ``filter.*``, ``pipeline.*``, ``scene.*``, ``metrics.*``).
Absent keys take their defaults, unknown keys are rejected::

    {"filter.alpha": 0.9, "pipeline.variant": "kalman-joint"}
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

ESTIMATORS = ("kalman", "rls")
TOPOLOGIES = ("joint", "aec_then_dr", "dr_then_aec")


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    frame_len: int = 512
    hop: int = 256
    fft_size: int = 1024

    def __post_init__(self):
        _check(self.sample_rate > 0, "stft.sample_rate", "must be positive")
        _check(self.frame_len > 0, "stft.frame_len", "must be positive")
        _check(0 < self.hop <= self.frame_len and self.frame_len % self.hop == 0,
               "stft.hop", "must divide frame_len")
        _check(self.fft_size >= self.frame_len, "stft.fft_size", "must be >= frame_len")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class DraecConfig:
    """Hyperparameters of the per-bin adaptive filters.

    ``lx`` playback taps, ``ly`` taps per microphone for the late
    reverberation predictor, ``delta`` prediction delay in frames,
    ``transition`` the scalar state transition ``A``.  ``fixed_phi_s`` and
    ``fixed_phi_u`` pin the source PSD / process noise instead of
    estimating them (used by the equivalence checks).  ``init_cov`` scales
    the initial error covariance ``init_cov * I``.
    """

    lx: int = 5
    ly: int = 5
    delta: int = 2
    n_mics: int = 2
    transition: float = 1.0
    eta: float = 1e-4
    alpha: float = 0.8
    lam: float = 0.9995
    psd_floor: float = 1e-10
    init_cov: float = 1.0
    fixed_phi_s: float | None = None
    fixed_phi_u: float | None = None
    bulk_delay: int = 0

    def __post_init__(self):
        _check(self.lx >= 0, "filter.lx", "must be >= 0")
        _check(self.ly >= 0, "filter.ly", "must be >= 0")
        _check(self.n_mics >= 1, "filter.n_mics", "must be >= 1")
        _check(self.lx + self.n_mics * self.ly >= 1, "filter.lx",
               "lx + n_mics * ly must be >= 1")
        _check(self.delta >= 1, "filter.delta", "must be >= 1")
        _check(math.isfinite(self.transition), "filter.transition", "must be finite")
        _check(0 < self.alpha <= 1, "filter.alpha", "must lie in (0, 1]")
        _check(0 < self.lam <= 1, "filter.lam", "must lie in (0, 1]")
        _check(self.eta >= 0, "filter.eta", "must be >= 0")
        _check(self.psd_floor > 0, "filter.psd_floor", "must be > 0")
        _check(self.init_cov >= 0, "filter.init_cov", "must be >= 0")
        _check(self.fixed_phi_s is None or self.fixed_phi_s > 0,
               "filter.fixed_phi_s", "must be > 0 or null")
        _check(self.fixed_phi_u is None or self.fixed_phi_u >= 0,
               "filter.fixed_phi_u", "must be >= 0 or null")
        _check(self.bulk_delay >= 0, "filter.bulk_delay", "must be >= 0")

    @property
    def length(self) -> int:
        return self.lx + self.n_mics * self.ly


@dataclass(frozen=True)
class AlgorithmVariant:
    estimator: str = "kalman"
    topology: str = "joint"

    def __post_init__(self):
        _check(self.estimator in ESTIMATORS, "pipeline.variant",
               f"estimator must be one of {ESTIMATORS}")
        _check(self.topology in TOPOLOGIES, "pipeline.variant",
               f"topology must be one of {TOPOLOGIES}")

    @classmethod
    def parse(cls, text: str) -> "AlgorithmVariant":
        est, sep, topo = text.partition("-")
        if not sep:
            raise ConfigError("pipeline.variant", f"expected '<estimator>-<topology>', got {text!r}")
        return cls(est, topo)

    def __str__(self):
        return f"{self.estimator}-{self.topology}"

    @classmethod
    def all(cls) -> list["AlgorithmVariant"]:
        return [cls(e, t) for e in ESTIMATORS for t in TOPOLOGIES]


@dataclass(frozen=True)
class PipelineOptions:
    variant: AlgorithmVariant = AlgorithmVariant()
    trace_stride: int = 10
    workers: int = 1

    def __post_init__(self):
        _check(self.trace_stride >= 1, "pipeline.trace_stride", "must be >= 1")
        _check(self.workers >= 1, "pipeline.workers", "must be >= 1")


@dataclass(frozen=True)
class SceneOptions:
    rt60: float = 0.3
    ser_db: float = -10.0
    sir_db: float | None = 0.0
    snr_db: float = math.inf
    duration_s: float = 8.0
    clip_threshold: float | None = None
    seed: int = 0

    def __post_init__(self):
        _check(self.rt60 >= 0, "scene.rt60", "must be >= 0")
        _check(self.duration_s > 0, "scene.duration_s", "must be positive")
        _check(self.clip_threshold is None or self.clip_threshold > 0,
               "scene.clip_threshold", "must be > 0 or null")


@dataclass(frozen=True)
class MetricsOptions:
    erle_window_s: float = 1.0
    erle_hop_s: float = 0.25
    sdr_taps: int = 32

    def __post_init__(self):
        _check(self.erle_window_s > 0, "metrics.erle_window_s", "must be positive")
        _check(self.erle_hop_s > 0, "metrics.erle_hop_s", "must be positive")
        _check(self.sdr_taps >= 1, "metrics.sdr_taps", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    filter: DraecConfig = field(default_factory=DraecConfig)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    scene: SceneOptions = field(default_factory=SceneOptions)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for section in _SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                if isinstance(value, AlgorithmVariant):
                    value = str(value)
                elif isinstance(value, float) and math.isinf(value):
                    value = "inf" if value > 0 else "-inf"
                flat[f"{section}.{f.name}"] = value
        return flat

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        flat = self.to_flat()
        flat.update(overrides)
        return from_flat(flat)


_SECTIONS = ("stft", "filter", "pipeline", "scene", "metrics")
_SECTION_TYPES = {
    "stft": StftConfig,
    "filter": DraecConfig,
    "pipeline": PipelineOptions,
    "scene": SceneOptions,
    "metrics": MetricsOptions,
}


def _coerce(key: str, value: Any, default: Any, annotation: str) -> Any:
    if isinstance(default, AlgorithmVariant):
        if isinstance(value, AlgorithmVariant):
            return value
        if not isinstance(value, str):
            raise ConfigError(key, "expected a string like 'kalman-joint'")
        return AlgorithmVariant.parse(value)
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(key, "may not be null")
    if isinstance(value, bool):
        raise ConfigError(key, "expected a number")
    if "int" in annotation and "float" not in annotation:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if not isinstance(value, (int, float)) or math.isnan(value):
        raise ConfigError(key, f"expected a number, got {value!r}")
    return float(value)


def from_flat(flat: Mapping[str, Any]) -> RunConfig:
    """Build a validated :class:`RunConfig` from namespaced keys."""
    grouped: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        cls = _SECTION_TYPES.get(section)
        fields = {f.name: f for f in dataclasses.fields(cls)} if cls else {}
        if name not in fields:
            raise ConfigError(key, "unknown key")
        default = fields[name].default
        if default is dataclasses.MISSING:
            default = fields[name].default_factory()
        grouped[section][name] = _coerce(key, value, default, str(fields[name].type))
    return RunConfig(**{s: _SECTION_TYPES[s](**kw) for s, kw in grouped.items()})


def load_config(source: str | Path | Mapping[str, Any] | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Load a config from a JSON file path or a mapping, then apply overrides."""
    if source is None:
        flat: dict[str, Any] = {}
    elif isinstance(source, Mapping):
        flat = dict(source)
    else:
        try:
            flat = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError("<file>", "top level must be an object")
    if overrides:
        flat.update(overrides)
    return from_flat(flat)


def dump_config(cfg: RunConfig, path: str | Path | None = None) -> str:
    text = json.dumps(cfg.to_flat(), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
