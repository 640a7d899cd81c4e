"""Simulation scenario configuration, validation, and run fingerprints."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field


class ConfigError(ValueError):
    """A scenario field is missing, unknown, or out of range."""


TIER2_MODES = ("pull_mesh", "sub_snap", "sub_opst")
BASELINES = ("snap", "multi_opst", "pull_only")


@dataclass
class ScenarioConfig:
    seed: int = 0
    chunk_size: float = 300_000.0  # bits
    stream_rate: float = 300_000.0  # bits/second
    link_delay_range: tuple[float, float] = (0.05, 0.5)  # seconds
    session_length: float = 120.0  # seconds
    initial_peers: int = 20
    arrival_rate: float = 0.0  # peers/second
    max_peers: int = 100
    p1: float = 0.3  # fraction of arrivals labeled stable
    p2: float = 0.1  # labeled-stable peers that actually churn
    lifetime_model: dict = field(
        default_factory=lambda: {"alpha": 1.0, "mean": 100.0}
    )
    tier2_mode: str = "pull_mesh"
    baseline: str = "snap"
    # population and service parameters
    upload_bw_choices: tuple[float, ...] = (600_000.0, 1_200_000.0, 2_400_000.0)
    server_bw: float = 1_500_000.0
    # mesh-pull parameters
    mesh_neighbors: int = 8
    gossip_period: float = 5.0
    buffermap_period: float = 1.0
    playback_window: int = 30
    pull_pipeline: int = 4
    request_timeout: float = 2.0
    # attached sub-overlay parameters
    sub_group_size: int = 8
    sub_rate_factor: float = 0.5
    sub_packet_count: int = 8

    def __post_init__(self):
        self.link_delay_range = tuple(self.link_delay_range)  # type: ignore[assignment]
        self.upload_bw_choices = tuple(self.upload_bw_choices)  # type: ignore[assignment]
        self.validate()

    @property
    def chunk_period(self) -> float:
        return self.chunk_size / self.stream_rate

    @property
    def delay_mean(self) -> float:
        lo, hi = self.link_delay_range
        return 0.5 * (lo + hi)

    def validate(self) -> None:
        errs = []
        if self.chunk_size <= 0 or self.stream_rate <= 0:
            errs.append("chunk_size and stream_rate must be positive")
        if not 0 <= self.p1 <= 1:
            errs.append(f"p1 must lie in [0, 1], got {self.p1}")
        if not 0 <= self.p2 <= 1:
            errs.append(f"p2 must lie in [0, 1], got {self.p2}")
        lo, hi = self.link_delay_range
        if lo < 0 or hi < lo:
            errs.append(f"link_delay_range must be 0 <= min <= max, got [{lo}, {hi}]")
        if self.session_length <= 0:
            errs.append("session_length must be positive")
        if self.initial_peers < 0 or self.max_peers < self.initial_peers:
            errs.append("need 0 <= initial_peers <= max_peers")
        if self.arrival_rate < 0:
            errs.append("arrival_rate must be nonnegative")
        if self.baseline not in BASELINES:
            errs.append(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.tier2_mode not in TIER2_MODES:
            errs.append(
                f"tier2_mode must be one of {TIER2_MODES}, got {self.tier2_mode!r}"
            )
        if not self.upload_bw_choices or min(self.upload_bw_choices) <= 0:
            errs.append("upload_bw_choices must be nonempty positive rates")
        if not 0 < self.sub_rate_factor <= 1:
            errs.append("sub_rate_factor must lie in (0, 1]")
        if self.sub_packet_count < 1:
            errs.append("sub_packet_count must be >= 1")
        alpha = self.lifetime_model.get("alpha")
        mean = self.lifetime_model.get("mean")
        if alpha is None or mean is None or mean <= 0:
            errs.append("lifetime_model needs positive 'alpha' and 'mean'")
        if errs:
            raise ConfigError("; ".join(errs))

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["link_delay_range"] = list(self.link_delay_range)
        doc["upload_bw_choices"] = list(self.upload_bw_choices)
        return doc

    def digest(self) -> str:
        canon = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def config_from_doc(doc: dict) -> ScenarioConfig:
    known = {f for f in ScenarioConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown scenario field(s): {sorted(unknown)}")
    try:
        return ScenarioConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(text: str) -> ScenarioConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario file must hold a JSON object")
    return config_from_doc(doc)


def truncated_pareto_scale(mean: float, horizon: float) -> float:
    """Scale x_m for a unit-shape Pareto lifetime truncated at `horizon`.

    A shape-1 Pareto has no finite mean, so the scale is chosen to make the
    truncated mean E[min(X, horizon)] = x_m * (1 + ln(horizon/x_m)) hit the
    requested mean.  Solved by bisection; the truncated mean is increasing
    in the scale.
    """
    if horizon <= 0:
        raise ConfigError("lifetime horizon must be positive")
    if mean >= horizon:
        return horizon  # everyone effectively survives the session
    lo, hi = 1e-9, horizon
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * (1 + math.log(horizon / mid)) < mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


LIFETIME_NOTE = (
    "lifetime model: shape-1 Pareto has no finite mean; the scale is fitted "
    "so the session-truncated mean matches lifetime_model['mean']"
)
