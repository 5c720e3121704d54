"""Domain records passed between preprocessing, priors, models and IO."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

CHANNELS = ("GRF_ML", "GRF_AP", "GRF_V", "GRM_ML", "GRM_AP", "GRM_V")


@dataclass(frozen=True)
class SubjectMeta:
    id: str
    height_mm: float
    weight_kg: float
    age_years: float = 30.0

    def __post_init__(self):
        if not (self.height_mm > 0 and self.weight_kg > 0):
            raise ContractError(
                f"subject {self.id}: height_mm and weight_kg must be positive "
                f"(got {self.height_mm}, {self.weight_kg})"
            )


@dataclass
class PressureSequence:
    """Raw ``T x H x W`` insole frames on one clock."""

    frames: np.ndarray
    sample_rate_hz: float
    subject: SubjectMeta
    foot_side: str = "right"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 2:
            raise ContractError(f"pressure frames must be T x H x W with T >= 2, got {self.frames.shape}")
        if np.any(self.frames < 0):
            raise ContractError("pressure frames must be non-negative")
        if self.sample_rate_hz <= 0:
            raise ContractError("sample_rate_hz must be positive")
        if self.foot_side not in ("left", "right"):
            raise ContractError(f"foot_side must be 'left' or 'right', got {self.foot_side!r}")


@dataclass
class GaitEvents:
    """Heel strikes and toe-offs as frame indices; ``toe_offs[i]`` closes ``heel_strikes[i]``."""

    heel_strikes: list
    toe_offs: list

    def __post_init__(self):
        self.heel_strikes = [int(v) for v in self.heel_strikes]
        self.toe_offs = [int(v) for v in self.toe_offs]
        for name, seq in (("heel_strikes", self.heel_strikes), ("toe_offs", self.toe_offs)):
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise ContractError(f"{name} must be strictly increasing")
        hs, to = self.heel_strikes, self.toe_offs
        if not (len(hs) == len(to) or len(hs) == len(to) + 1):
            raise ContractError("events must alternate heel strike / toe-off starting with a heel strike")
        for i, t in enumerate(to):
            nxt = hs[i + 1] if i + 1 < len(hs) else None
            if t <= hs[i] or (nxt is not None and t >= nxt):
                raise ContractError(f"toe-off {t} does not lie between heel strikes {hs[i]} and {nxt}")

    @property
    def stances(self):
        return list(zip(self.heel_strikes, self.toe_offs))


@dataclass
class StanceSample:
    pressure: np.ndarray
    targets: np.ndarray
    speed_mps: float = 0.0
    subject_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pressure = np.asarray(self.pressure, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.pressure.ndim != 3:
            raise ContractError(f"stance pressure must be L x H x W, got {self.pressure.shape}")
        if self.targets.shape != (self.pressure.shape[0], 6):
            raise ContractError(
                f"targets must be L x 6 matching {self.pressure.shape[0]} frames, got {self.targets.shape}"
            )
        if np.any(self.pressure < 0):
            raise ContractError("stance pressure must be non-negative")
        if not np.all(np.isfinite(self.targets)):
            raise ContractError("stance targets must be finite")

    @property
    def length(self):
        return self.pressure.shape[0]

    @property
    def grid(self):
        return self.pressure.shape[1:]
