"""Synthetic plantar-pressure gait data with known kinetics.

Each stance is a pressure blob that travels from the heel to the toes while
its total load follows a double-bump vertical force curve. Shear forces and
moments are smooth functions of the blob's centre trajectory, so they are
recoverable from the pressure sequence.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .types import GaitEvents, PressureSequence, StanceSample, SubjectMeta

SPEEDS_MPS = (0.75, 1.0, 1.5, 2.0)


@dataclass
class SynthConfig:
    num_subjects: int = 4
    steps_per_subject: int = 50
    grid: tuple = (64, 16)
    stance_len: int = 40
    noise: float = 0.0
    seed: int = 0
    foot_side: str = "right"
    adversarial: bool = False
    sensor_lag: float = 0.0

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        if self.num_subjects < 1 or self.steps_per_subject < 1 or self.stance_len < 2:
            raise ValueError("synthetic counts must be positive")
        if self.noise < 0 or self.sensor_lag < 0:
            raise ValueError("noise and sensor_lag must be non-negative")
        if len(self.grid) != 2 or min(self.grid) < 4:
            raise ValueError(f"grid must be two sizes >= 4, got {self.grid}")


@dataclass
class StepParams:
    """Latent parameters of one stance."""

    speed: float
    peak: float
    dip: float
    shape: float
    lateral: float
    medial_push: float

    @classmethod
    def sample(cls, rng, speed, style=(0.0, 0.0)):
        return cls(
            speed=speed,
            peak=float(np.clip(1.02 + 0.08 * (speed - 1.0) + rng.normal(0, 0.03), 0.95, 1.22)),
            dip=float(rng.uniform(0.7, 1.1)),
            shape=float(np.clip(style[0] + rng.uniform(-0.35, 0.35), -0.6, 0.6)),
            lateral=float(np.clip(0.08 + style[1] + rng.normal(0, 0.02), 0.02, 0.16)),
            medial_push=float(rng.uniform(0.04, 0.10)),
        )


# -- geometry ----------------------------------------------------------------


def foot_outline(grid):
    """Boolean contact footprint: toes at row 0, heel at the bottom row."""
    h, w = grid
    u = (np.arange(h) + 0.5) / h
    half = np.interp(u, [0.0, 0.06, 0.2, 0.4, 0.55, 0.7, 0.85, 0.97, 1.0],
                     [0.0, 0.30, 0.44, 0.46, 0.34, 0.32, 0.36, 0.26, 0.0])
    centre = 0.5 + 0.04 * np.sin(np.pi * u)
    v = (np.arange(w) + 0.5) / w
    return np.abs(v[None, :] - centre[:, None]) <= half[:, None] * 0.98 + 1e-9


def _blob_centre(s, p):
    """Normalised (row, column) of the load centre at stance phase ``s``."""
    prog = s + p.shape * np.sin(2 * np.pi * s) / (2 * np.pi)
    row = 0.86 - 0.72 * prog
    col = 0.5 + p.lateral * np.sin(np.pi * s) - p.medial_push * s ** 3
    return row, col


def _double_bump(s, dip):
    env = np.sqrt(np.sin(np.pi * np.clip(s, 0.0, 1.0)))
    bumps = np.exp(-((s - 0.25) / 0.14) ** 2) + np.exp(-((s - 0.75) / 0.14) ** 2)
    return env * (bumps + dip)


_FINE = np.linspace(0.0, 1.0, 801)


def vertical_force(s, p):
    """Double-bump vertical force in body weights; zero at contact and lift-off, peak ``p.peak``."""
    s = np.asarray(s, dtype=np.float64)
    return p.peak * _double_bump(s, p.dip) / _double_bump(_FINE, p.dip).max()


def stance_targets(s, p):
    """``len(s) x 6`` normalised targets (ML, AP, V force; ML, AP, V moment).

    Shear amplitude grows with walking speed and with how fast the load
    centre travels along the foot, so both depend on the whole stance rather
    than on a single pressure frame.
    """
    s = np.asarray(s, dtype=np.float64)
    row, col = _blob_centre(s, p)
    v = vertical_force(s, p)
    velocity = 1.0 + p.shape * np.cos(2 * np.pi * s)
    env = np.sin(np.pi * s)
    gain = 0.12 + 0.08 * (p.speed - 1.0)
    ap = -gain * np.sin(2 * np.pi * s) + 0.1 * (velocity - 1.0) * env
    ml = 0.6 * (col - 0.5) * v + 0.25 * gain * np.sin(2 * np.pi * s)
    m_ml = 0.25 * (row - 0.5) * v
    m_ap = 0.35 * (col - 0.5) * v
    m_v = 0.04 * ap + 0.008 * p.shape * env
    return np.stack([ml, ap, v, m_ml, m_ap, m_v], axis=1)


# insole sensitivity by foot length (toes at row 0): forefoot reads low
def _row_sensitivity(h):
    u = (np.arange(h) + 0.5) / h
    return np.interp(u, [0.0, 0.4, 0.6, 1.0], [0.8, 0.85, 0.95, 1.0])


def lag_frames(frames, time_constant):
    """First-order sensor response along axis 0 with ``time_constant`` in frames (0 is instantaneous)."""
    if time_constant <= 0:
        return frames
    alpha = 1.0 - math.exp(-1.0 / time_constant)
    out = np.empty_like(frames)
    state = np.zeros(frames.shape[1:])
    for t, frame in enumerate(frames):
        state = state + alpha * (frame - state)
        out[t] = state
    return out


def stance_pressure(s, p, grid, outline=None, amplitude=1.0):
    """``len(s) x H x W`` pressure frames for stance phases ``s``."""
    h, w = grid
    if outline is None:
        outline = foot_outline(grid)
    s = np.asarray(s, dtype=np.float64)
    rr = ((np.arange(h) + 0.5) / h)[None, :, None]
    cc = ((np.arange(w) + 0.5) / w)[None, None, :]
    row, col = _blob_centre(s, p)
    blob = np.exp(-0.5 * (((rr - row[:, None, None]) / 0.11) ** 2 + ((cc - col[:, None, None]) / 0.22) ** 2))
    blob = blob * outline[None]
    mass = blob.reshape(len(s), -1).sum(axis=1)
    load = vertical_force(s, p)
    scale = np.where(mass > 0, load / np.maximum(mass, 1e-12), 0.0) * (h * w / 16.0) * amplitude
    return blob * scale[:, None, None] * _row_sensitivity(h)[None, :, None]


# -- datasets ----------------------------------------------------------------


def _subjects(rng, n):
    out = []
    for k in range(n):
        out.append(SubjectMeta(
            id=f"S{k + 1}",
            height_mm=float(rng.uniform(1600.0, 1830.0)),
            weight_kg=float(rng.uniform(70.0, 78.5)),
            age_years=float(rng.integers(26, 74)),
        ))
    return out


@dataclass
class SynthDataset:
    samples: list
    subjects: list
    params: list = field(default_factory=list)
    report: dict = field(default_factory=dict)


def generate_stances(config):
    """Stance samples evaluated directly on the normalised stance grid."""
    rng = np.random.default_rng(config.seed)
    subjects = _subjects(rng, config.num_subjects)
    outline = foot_outline(config.grid)
    s = np.linspace(0.0, 1.0, config.stance_len)
    samples, params = [], []
    for subj in subjects:
        style = (rng.uniform(-0.2, 0.2), rng.normal(0, 0.02))
        for _ in range(config.steps_per_subject):
            speed = float(rng.choice(SPEEDS_MPS))
            p = StepParams.sample(rng, speed, style)
            pressure = lag_frames(stance_pressure(s, p, config.grid, outline), config.sensor_lag)
            targets = stance_targets(s, p)
            if config.noise > 0:
                peak = pressure.max()
                pressure = np.maximum(pressure + rng.normal(0, config.noise * peak, pressure.shape), 0.0)
                targets = targets + rng.normal(0, config.noise * 0.01, targets.shape)
            samples.append(StanceSample(pressure, targets, speed_mps=speed, subject_id=subj.id))
            params.append(p)
    return SynthDataset(samples, subjects, params)


@dataclass
class RawTrial:
    pressure: PressureSequence
    plate: np.ndarray
    plate_rate_hz: float
    events: GaitEvents
    params: list
    offset_frames: int
    speed_mps: float
    contact: list


def stance_duration_s(speed):
    return 0.62 * (1.0 / max(speed, 0.3)) ** 0.45


def generate_raw_trial(subject, n_steps=6, speed=1.0, insole_rate_hz=40.0, plate_rate_hz=100.0,
                       grid=(64, 16), noise=0.0, seed=0, plate_lead_s=0.35, short_stances=(),
                       start_in_stance=False):
    """Continuous insole and force-plate recordings of ``n_steps`` steps.

    The plate starts ``plate_lead_s`` seconds before the insole, so its heel
    strikes appear later by that lag once both are on the insole clock. Stances
    listed in ``short_stances`` last only about two insole frames. Returns the
    insole ground-truth events (first and last contact frames) in ``events``.
    """
    rng = np.random.default_rng(seed)
    outline = foot_outline(grid)
    swing = 0.42 / max(speed, 0.3) ** 0.3
    t = 0.5 * swing
    contacts = []
    params = []
    for k in range(n_steps):
        dur = stance_duration_s(speed) * rng.uniform(0.95, 1.05)
        if k in short_stances:
            dur = 2.2 / insole_rate_hz
        contacts.append((t, dur))
        params.append(StepParams.sample(rng, speed))
        t += dur + swing * rng.uniform(0.95, 1.05)
    total = t + 0.5 * swing
    if start_in_stance:
        contacts.insert(0, (-0.3 * stance_duration_s(speed), stance_duration_s(speed)))
        params.insert(0, StepParams.sample(rng, speed))

    def render(times, want_pressure):
        frames = np.zeros((len(times),) + tuple(grid)) if want_pressure else None
        kin = np.zeros((len(times), 6))
        for (t0, dur), p in zip(contacts, params):
            s = (times - t0) / dur
            inside = np.nonzero((s >= 0.0) & (s <= 1.0))[0]
            if inside.size == 0:
                continue
            kin[inside] = stance_targets(s[inside], p)
            if want_pressure:
                frames[inside] = stance_pressure(s[inside], p, grid, outline)
        return frames, kin

    n_ins = int(math.floor(total * insole_rate_hz)) + 1
    t_ins = np.arange(n_ins) / insole_rate_hz
    frames, _ = render(t_ins, True)
    if noise > 0:
        peak = frames.max()
        frames = np.maximum(frames + rng.normal(0, noise * peak, frames.shape), 0.0)

    n_pl = int(math.floor((total + plate_lead_s) * plate_rate_hz)) + 1
    t_pl = np.arange(n_pl) / plate_rate_hz - plate_lead_s
    _, kin = render(t_pl, False)
    bw = subject.weight_kg * 9.81
    plate = np.concatenate([kin[:, :3] * bw, kin[:, 3:] * bw * subject.height_mm / 1000.0], axis=1)
    if noise > 0:
        plate = plate + rng.normal(0, noise * 0.02 * bw, plate.shape)

    heel, toe = [], []
    for t0, dur in contacts:
        if t0 < 0:
            continue
        on = np.nonzero((t_ins > t0) & (t_ins < t0 + dur))[0]
        if on.size:
            heel.append(int(on[0]))
            toe.append(int(on[-1]) + 1)
    seq = PressureSequence(frames, insole_rate_hz, subject)
    lag = int(round(plate_lead_s * insole_rate_hz))
    return RawTrial(seq, plate, plate_rate_hz, GaitEvents(heel, toe), params, lag, speed,
                    [c for c in contacts if c[0] >= 0])


def generate_synthetic_dataset(config):
    """Build a :class:`DatasetContainer` from ``config``.

    Normal mode samples stances directly on the normalised grid. Adversarial
    mode records continuous trials (including one too-short stance and a
    trial that starts mid-stance) and pushes them through the full
    preprocessing chain.
    """
    from .io import DatasetContainer

    if not config.adversarial:
        data = generate_stances(config)
        return DatasetContainer.build(data.samples, data.subjects, config.grid, config.stance_len,
                                      extra={"synth": _config_dict(config)})
    from .preprocess import preprocess_trial

    rng = np.random.default_rng(config.seed)
    subjects = _subjects(rng, config.num_subjects)
    samples = []
    skipped = intervals = 0
    for k, subj in enumerate(subjects):
        speed = float(SPEEDS_MPS[k % len(SPEEDS_MPS)])
        trial = generate_raw_trial(
            subj, n_steps=config.steps_per_subject + (1 if k == 0 else 0), speed=speed,
            grid=config.grid, noise=config.noise, seed=int(rng.integers(2**31)),
            short_stances=(1,) if k == 0 else (), start_in_stance=(k == 1),
        )
        got, report = preprocess_trial(trial.pressure, trial.plate, trial.plate_rate_hz,
                                       target_len=config.stance_len, speed_mps=speed)
        samples.extend(got)
        skipped += report.skipped
        intervals += report.intervals
    extra = {"synth": _config_dict(config), "preprocess": {"skipped": skipped, "intervals": intervals}}
    return DatasetContainer.build(samples, subjects, config.grid, config.stance_len, extra=extra)


def _config_dict(config):
    return {
        "num_subjects": config.num_subjects,
        "steps_per_subject": config.steps_per_subject,
        "grid": list(config.grid),
        "stance_len": config.stance_len,
        "noise": config.noise,
        "seed": config.seed,
        "foot_side": config.foot_side,
        "adversarial": config.adversarial,
        "sensor_lag": config.sensor_lag,
    }
