"""Raw insole/force-plate streams to fixed-length normalised stance samples."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .errors import ContractError, NoEventsError, ParameterError, SegmentTooShortError, SizeError
from .types import GaitEvents, PressureSequence, StanceSample, SubjectMeta

logger = logging.getLogger(__name__)

GRAVITY = 9.81
MIN_STANCE_FRAMES = 4


def mean_pressure(frames):
    """Mean over all sensors for every frame of a ``T x H x W`` array."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames.reshape(frames.shape[0], -1).mean(axis=1)


def _crossings(series, threshold, rising):
    s = series
    prev, cur = s[:-1], s[1:]
    if rising:
        hits = np.nonzero((prev < threshold) & (cur >= threshold))[0]
    else:
        hits = np.nonzero((prev >= threshold) & (cur < threshold))[0]
    out = []
    for k in hits:
        # sub-frame crossing position, reported at/after the crossing
        pos = k + (threshold - s[k]) / (s[k + 1] - s[k])
        out.append(int(math.ceil(pos - 1e-12)))
    return out


def detect_gait_events(mean_pressure_series, threshold_fraction=0.125):
    """Heel strikes and toe-offs from threshold crossings of the mean pressure.

    The threshold sits at ``threshold_fraction`` of the series' range above its
    minimum. Rising crossings are heel strikes, falling crossings toe-offs. A
    leading toe-off (recording starts mid-stance) is dropped so the lists
    alternate starting with a heel strike.
    """
    s = np.asarray(mean_pressure_series, dtype=np.float64).reshape(-1)
    if s.size < 2:
        raise ContractError("detect_gait_events needs at least 2 samples")
    if not 0.0 < threshold_fraction < 1.0:
        raise ParameterError(f"threshold_fraction must be in (0, 1), got {threshold_fraction}")
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= 0.0:
        raise NoEventsError("mean pressure has zero range; no gait events can be detected")
    threshold = lo + threshold_fraction * (hi - lo)
    rises = _crossings(s, threshold, rising=True)
    falls = _crossings(s, threshold, rising=False)

    heel, toe = [], []
    events = sorted([(i, 0) for i in rises] + [(i, 1) for i in falls])
    for idx, kind in events:
        if kind == 0:
            if len(heel) == len(toe):
                heel.append(idx)
        elif len(heel) == len(toe) + 1 and idx > heel[-1]:
            toe.append(idx)
    if not heel:
        raise NoEventsError("no rising threshold crossing found")
    return GaitEvents(heel, toe)


def _match_cost(insole, plate, offset):
    shifted = plate + offset
    pos = np.searchsorted(shifted, insole)
    left = np.clip(pos - 1, 0, len(shifted) - 1)
    right = np.clip(pos, 0, len(shifted) - 1)
    nearest = np.minimum(np.abs(insole - shifted[left]), np.abs(insole - shifted[right]))
    return float(nearest.mean())


def synchronize_streams(insole_events, plate_events):
    """Integer offset ``d`` such that ``plate_heel_strikes + d`` best matches the insole's.

    Both event sets must already be on the insole clock. The cost is the mean
    absolute distance from each insole heel strike to its nearest shifted plate
    heel strike (sorted lists, so the matching preserves order). Ties resolve
    to the smallest ``|d|``.
    """
    ins = np.asarray(insole_events.heel_strikes, dtype=np.float64)
    pla = np.asarray(plate_events.heel_strikes, dtype=np.float64)
    if ins.size == 0 or pla.size == 0:
        raise ContractError("synchronize_streams needs at least one heel strike in each stream")
    lo = int(ins.min() - pla.max())
    hi = int(ins.max() - pla.min())
    best, best_cost = 0, math.inf
    for d in sorted(range(lo, hi + 1), key=lambda v: (abs(v), v)):
        cost = _match_cost(ins, pla, d)
        if cost < best_cost - 1e-12:
            best, best_cost = d, cost
    return best


def shift_stream(stream, offset):
    """Delay a ``T x C`` stream by ``offset`` frames, holding edge values."""
    stream = np.asarray(stream, dtype=np.float64)
    idx = np.clip(np.arange(stream.shape[0]) - int(offset), 0, stream.shape[0] - 1)
    return stream[idx]


def butterworth_coefficients(sample_rate_hz, cutoff_hz):
    """Second-order low-pass Butterworth ``(b, a)`` via the prewarped bilinear transform."""
    if sample_rate_hz <= 0:
        raise ParameterError("sample_rate_hz must be positive")
    if not 0.0 < cutoff_hz < sample_rate_hz / 2.0:
        raise ParameterError(
            f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({sample_rate_hz / 2.0} Hz)"
        )
    k = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    root2 = math.sqrt(2.0)
    norm = 1.0 / (1.0 + root2 * k + k * k)
    b0 = k * k * norm
    b = np.array([b0, 2.0 * b0, b0])
    a = np.array([1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - root2 * k + k * k) * norm])
    return b, a


def butterworth_lowpass(series, sample_rate_hz, cutoff_hz, zero_phase=True):
    """Low-pass filter a 1-D series (or each column of a ``T x C`` array).

    ``zero_phase`` runs the filter forward and backward; otherwise a single
    causal pass starting from the steady state of the first sample.
    """
    b, a = butterworth_coefficients(sample_rate_hz, cutoff_hz)
    x = np.asarray(series, dtype=np.float64)
    if x.shape[0] < 2:
        raise ContractError("butterworth_lowpass needs at least 2 samples")
    if zero_phase:
        padlen = min(3 * len(a), x.shape[0] - 1)
        return signal.filtfilt(b, a, x, axis=0, padlen=padlen)
    zi = signal.lfilter_zi(b, a)
    zi = zi.reshape((-1,) + (1,) * (x.ndim - 1)) * x[0]
    y, _ = signal.lfilter(b, a, x, axis=0, zi=zi)
    return y


def normalize_targets(grf, grm, subject):
    """Forces over body weight (N), moments over body weight times height (N m)."""
    grf = np.asarray(grf, dtype=np.float64)
    grm = np.asarray(grm, dtype=np.float64)
    if grf.shape != grm.shape or grf.ndim != 2 or grf.shape[1] != 3:
        raise ContractError(f"grf and grm must both be L x 3, got {grf.shape} and {grm.shape}")
    if not (subject.weight_kg > 0 and subject.height_mm > 0):
        raise ContractError("subject weight and height must be positive")
    body_weight = subject.weight_kg * GRAVITY
    return np.concatenate([grf / body_weight, grm / (body_weight * subject.height_mm / 1000.0)], axis=1)


def denormalize_targets(targets, subject):
    """Inverse of :func:`normalize_targets`; returns ``(grf, grm)``."""
    targets = np.asarray(targets, dtype=np.float64)
    body_weight = subject.weight_kg * GRAVITY
    return targets[:, :3] * body_weight, targets[:, 3:] * (body_weight * subject.height_mm / 1000.0)


def resample_stance(segment, target_len=40):
    """Natural cubic spline resampling of a ``T_s x ...`` segment onto ``target_len`` frames.

    Time is normalised to [0, 1] on both grids, so the first and last frames
    are reproduced exactly. Trailing axes are interpolated independently.
    """
    seg = np.asarray(segment, dtype=np.float64)
    if seg.shape[0] < MIN_STANCE_FRAMES:
        raise SegmentTooShortError(
            f"segment has {seg.shape[0]} frames; at least {MIN_STANCE_FRAMES} are needed"
        )
    if target_len < 2:
        raise ContractError("target_len must be at least 2")
    t_src = np.linspace(0.0, 1.0, seg.shape[0])
    t_dst = np.linspace(0.0, 1.0, target_len)
    out = CubicSpline(t_src, seg, axis=0, bc_type="natural")(t_dst)
    out[0] = seg[0]
    out[-1] = seg[-1]
    return out


@dataclass
class SegmentationResult:
    samples: list
    skipped: int = 0
    intervals: int = 0
    spans: list = field(default_factory=list)


def segment_stances(pressure, targets, events, target_len=40, speed_mps=0.0, normalize=True):
    """Cut every heel-strike to toe-off interval into a :class:`StanceSample`.

    Args:
        pressure: :class:`PressureSequence` on the insole clock.
        targets: ``T x 6`` forces (N) then moments (N m), already filtered and
            synchronised to the pressure frames.
        events: :class:`GaitEvents` on the same clock.
        target_len: frames per stance after resampling.
        speed_mps: walking speed attached to every sample.
        normalize: divide targets by body weight (and height for moments).

    Stances with fewer than 4 frames are skipped and counted. The stance spans
    frames ``[heel_strike, toe_off)``.
    """
    frames = pressure.frames
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (frames.shape[0], 6):
        raise ContractError(f"targets must be {frames.shape[0]} x 6, got {targets.shape}")
    result = SegmentationResult(samples=[])
    for hs, to in events.stances:
        result.intervals += 1
        if to - hs < MIN_STANCE_FRAMES:
            logger.warning("skipping stance [%d, %d): only %d frames", hs, to, to - hs)
            result.skipped += 1
            continue
        seg_p = resample_stance(frames[hs:to], target_len)
        np.maximum(seg_p, 0.0, out=seg_p)
        seg_t = resample_stance(targets[hs:to], target_len)
        if normalize:
            seg_t = normalize_targets(seg_t[:, :3], seg_t[:, 3:], pressure.subject)
        result.samples.append(
            StanceSample(seg_p, seg_t, speed_mps=speed_mps, subject_id=pressure.subject.id,
                         meta={"heel_strike": hs, "toe_off": to})
        )
        result.spans.append((hs, to))
    return result


def resample_to_rate(stream, source_rate_hz, target_rate_hz, n_target=None):
    """Linearly interpolate a ``T x C`` stream onto another uniform clock."""
    stream = np.asarray(stream, dtype=np.float64)
    t_src = np.arange(stream.shape[0]) / source_rate_hz
    if n_target is None:
        n_target = int(math.floor(t_src[-1] * target_rate_hz)) + 1
    t_dst = np.arange(n_target) / target_rate_hz
    if stream.ndim == 1:
        return np.interp(t_dst, t_src, stream)
    return np.stack([np.interp(t_dst, t_src, stream[:, c]) for c in range(stream.shape[1])], axis=1)


@dataclass
class TrialReport:
    offset_frames: int
    insole_events: GaitEvents
    plate_events: GaitEvents
    skipped: int
    intervals: int


def preprocess_trial(pressure, plate_stream, plate_rate_hz, cutoff_hz=10.0, target_len=40,
                     speed_mps=0.0, threshold_fraction=0.125, vertical_channel=2):
    """Full chain for one trial: filter, resample, detect, synchronise, segment.

    ``plate_stream`` is ``T_p x 6`` (forces N then moments N m) at
    ``plate_rate_hz``. It is low-pass filtered at its own rate, interpolated
    onto the insole clock, aligned on heel strikes and cut into stances.
    """
    plate = np.asarray(plate_stream, dtype=np.float64)
    if plate.ndim != 2 or plate.shape[1] != 6:
        raise ContractError(f"plate stream must be T x 6, got {plate.shape}")
    filtered = butterworth_lowpass(plate, plate_rate_hz, cutoff_hz)
    n = pressure.frames.shape[0]
    on_insole = resample_to_rate(filtered, plate_rate_hz, pressure.sample_rate_hz, n_target=n)
    insole_events = detect_gait_events(mean_pressure(pressure.frames), threshold_fraction)
    plate_events = detect_gait_events(np.abs(on_insole[:, vertical_channel]), threshold_fraction)
    offset = synchronize_streams(insole_events, plate_events)
    aligned = shift_stream(on_insole, offset)
    seg = segment_stances(pressure, aligned, insole_events, target_len, speed_mps=speed_mps)
    report = TrialReport(offset, insole_events, plate_events, seg.skipped, seg.intervals)
    return seg.samples, report


# -- footstep standardisation (pressure-walkway data) -------------------------

CANVAS_SHAPE = (75, 40)
FOOTSTEP_FRAMES = 101


def nearest_indices(n_src, n_dst):
    """Nearest source frame for each of ``n_dst`` uniformly spaced output frames (ties round up)."""
    if n_dst == 1:
        return np.zeros(1, dtype=int)
    return np.floor(np.arange(n_dst) * (n_src - 1) / (n_dst - 1) + 0.5).astype(int)


def standardize_footstep(frames, canvas_shape=CANVAS_SHAPE, n_frames=FOOTSTEP_FRAMES):
    """Centre a footstep crop on a fixed canvas and resample it to ``n_frames``.

    The bounding box of the nonzero pixels in the peak-pressure frame is
    centred on cell ``(H // 2, W // 2)`` of the canvas by an integer shift.
    Time is resampled by nearest neighbour; values are otherwise unchanged.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ContractError(f"footstep must be T x H x W, got {frames.shape}")
    peak = frames[int(np.argmax(frames.reshape(frames.shape[0], -1).sum(axis=1)))]
    rows, cols = np.nonzero(peak)
    if rows.size == 0:
        raise ContractError("footstep peak frame has no nonzero pixel")
    ch, cw = canvas_shape
    dr = ch // 2 - (int(rows.min()) + int(rows.max())) // 2
    dc = cw // 2 - (int(cols.min()) + int(cols.max())) // 2

    any_rows, any_cols = np.nonzero(frames.any(axis=0))
    if (any_rows.min() + dr < 0 or any_rows.max() + dr >= ch
            or any_cols.min() + dc < 0 or any_cols.max() + dc >= cw):
        raise SizeError(f"footstep content does not fit a {ch}x{cw} canvas after centring")

    canvas = np.zeros((frames.shape[0], ch, cw))
    r0, r1 = any_rows.min(), any_rows.max() + 1
    c0, c1 = any_cols.min(), any_cols.max() + 1
    canvas[:, r0 + dr:r1 + dr, c0 + dc:c1 + dc] = frames[:, r0:r1, c0:c1]
    return canvas[nearest_indices(frames.shape[0], n_frames)]


def pad_and_pool(frames, pooled_shape=(40, 20), factor=2):
    """Zero-pad a ``T x H x W`` canvas to ``pooled_shape * factor`` and average-pool by ``factor``."""
    frames = np.asarray(frames, dtype=np.float64)
    th, tw = pooled_shape[0] * factor, pooled_shape[1] * factor
    t, h, w = frames.shape
    if h > th or w > tw:
        raise SizeError(f"cannot pad {h}x{w} down to {th}x{tw}")
    top, left = (th - h) // 2, (tw - w) // 2
    padded = np.zeros((t, th, tw))
    padded[:, top:top + h, left:left + w] = frames
    return padded.reshape(t, pooled_shape[0], factor, pooled_shape[1], factor).mean(axis=(2, 4))


__all__ = [
    "GRAVITY",
    "PressureSequence",
    "SegmentationResult",
    "StanceSample",
    "SubjectMeta",
    "TrialReport",
    "butterworth_coefficients",
    "butterworth_lowpass",
    "denormalize_targets",
    "detect_gait_events",
    "mean_pressure",
    "nearest_indices",
    "normalize_targets",
    "pad_and_pool",
    "preprocess_trial",
    "resample_stance",
    "resample_to_rate",
    "segment_stances",
    "shift_stream",
    "standardize_footstep",
    "synchronize_streams",
]
