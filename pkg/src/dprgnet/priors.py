"""Anatomical partition map and temporal prototype-activation prior."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateHistogramError

logger = logging.getLogger(__name__)

NUM_REGIONS = 6
BACKGROUND = -1
BANDS = ("forefoot", "midfoot", "hindfoot")
SIDES = ("medial", "lateral")
REGION_NAMES = tuple(f"{b}_{s}" for b in BANDS for s in SIDES)


def region_label(band, side):
    """Label for ``band`` in {0 fore, 1 mid, 2 hind} and ``side`` in {0 medial, 1 lateral}."""
    return 2 * band + side


def compute_mean_pressure_map(samples):
    """Elementwise mean over every frame of every sample."""
    if not samples:
        raise ContractError("compute_mean_pressure_map needs at least one sample")
    grid = samples[0].pressure.shape[1:]
    total = np.zeros(grid)
    count = 0
    for smp in samples:
        if smp.pressure.shape[1:] != grid:
            raise ContractError(f"mixed grid shapes: {grid} and {smp.pressure.shape[1:]}")
        total += smp.pressure.sum(axis=0)
        count += smp.pressure.shape[0]
    return total / count


def otsu_threshold(values, bins=256):
    """Otsu threshold of ``values`` and the mask ``values > threshold``.

    The histogram spans ``[min, max]`` in ``bins`` equal bins; the threshold is
    the upper edge of the bin split that maximises the between-class variance.

    Returns:
        ``(threshold, mask)``.
    """
    x = np.asarray(values, dtype=np.float64)
    if bins < 16:
        raise ContractError(f"bins must be at least 16, got {bins}")
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateHistogramError("map is constant; Otsu threshold is undefined")
    hist, edges = np.histogram(x, bins=bins, range=(lo, hi))
    centres = 0.5 * (edges[:-1] + edges[1:])
    p = hist / hist.sum()
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    m0 = np.cumsum(p * centres)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[(w0 <= 0) | (w1 <= 1e-15)] = -1.0
    k = int(np.argmax(between))
    threshold = float(edges[k + 1])
    return threshold, x > threshold


@dataclass
class PartitionMap:
    """Per-cell region labels (``-1`` background, ``0..5`` regions).

    Labels encode ``2 * band + side`` with bands forefoot, midfoot, hindfoot
    and sides medial, lateral.
    """

    labels: np.ndarray
    midline: np.ndarray = None
    band_rows: dict = field(default_factory=dict)
    empty_regions: list = field(default_factory=list)
    foot_side: str = "right"

    @property
    def shape(self):
        return self.labels.shape

    def region(self, k):
        return self.labels == k

    def sizes(self):
        return np.array([(self.labels == k).sum() for k in range(NUM_REGIONS)])

    def to_text(self):
        """Plain-text label grid, one row per line, ``.`` for background."""
        return "\n".join(
            " ".join("." if v < 0 else str(int(v)) for v in row) for row in self.labels
        ) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = [line.split() for line in text.strip().splitlines()]
        labels = np.array([[-1 if tok == "." else int(tok) for tok in row] for row in rows], dtype=np.int64)
        return cls(labels)


def row_midlines(mask, mean_map):
    """Pressure-weighted centroid column of the active cells in each row (NaN for empty rows)."""
    cols = np.arange(mask.shape[1], dtype=np.float64)
    weights = np.where(mask, mean_map, 0.0)
    mass = weights.sum(axis=1)
    out = np.full(mask.shape[0], np.nan)
    ok = mass > 0
    out[ok] = (weights[ok] * cols).sum(axis=1) / mass[ok]
    # active rows with zero pressure fall back to the geometric centre of their cells
    geo = mask.any(axis=1) & ~ok
    for r in np.nonzero(geo)[0]:
        out[r] = cols[mask[r]].mean()
    return out


def build_partition_map(active_mask, mean_map, forefoot_fraction=0.54, hindfoot_fraction=0.29,
                        foot_side="right"):
    """Split the contact area into six anatomical regions.

    Rows between the first and last active row form the foot extent (toes at
    row 0). The top ``forefoot_fraction`` of that extent is forefoot, the
    bottom ``hindfoot_fraction`` hindfoot, the rest midfoot. Each active row is
    cut at its pressure-weighted centroid column: cells strictly left of it
    are medial on a right foot (lateral on a left foot), cells strictly right
    the opposite, and a cell sitting exactly on the midline is medial.
    """
    mask = np.asarray(active_mask, dtype=bool)
    mean_map = np.asarray(mean_map, dtype=np.float64)
    if mask.shape != mean_map.shape:
        raise ContractError(f"mask {mask.shape} and mean map {mean_map.shape} differ in shape")
    if not mask.any():
        raise ContractError("active mask is empty")
    if not forefoot_fraction + hindfoot_fraction < 1.0 or min(forefoot_fraction, hindfoot_fraction) < 0:
        raise ContractError("forefoot and hindfoot fractions must be non-negative and sum below 1")
    if foot_side not in ("left", "right"):
        raise ContractError(f"foot_side must be 'left' or 'right', got {foot_side!r}")

    active_rows = np.nonzero(mask.any(axis=1))[0]
    first, last = int(active_rows[0]), int(active_rows[-1])
    extent = last - first + 1
    fore_end = first + int(round(forefoot_fraction * extent))
    hind_start = last + 1 - int(round(hindfoot_fraction * extent))
    hind_start = max(hind_start, fore_end)

    rows = np.arange(mask.shape[0])
    band = np.where(rows < fore_end, 0, np.where(rows >= hind_start, 2, 1))
    midline = row_midlines(mask, mean_map)
    cols = np.arange(mask.shape[1], dtype=np.float64)[None, :]
    left = cols < midline[:, None]
    right = cols > midline[:, None]
    if foot_side == "right":
        side = np.where(right, 1, 0)
    else:
        side = np.where(left, 1, 0)
    labels = np.where(mask, 2 * band[:, None] + side, BACKGROUND).astype(np.int64)

    band_rows = {name: [int(r) for r in active_rows if band[r] == b] for b, name in enumerate(BANDS)}
    empty = [k for k in range(NUM_REGIONS) if not (labels == k).any()]
    if empty:
        logger.info("partition has empty regions: %s", [REGION_NAMES[k] for k in empty])
    return PartitionMap(labels, midline, band_rows, empty, foot_side)


@dataclass
class TemporalPrior:
    """``L x K`` row-stochastic expected prototype activation."""

    P: np.ndarray
    epsilon: float = 1e-6
    activation: np.ndarray = None


def region_means(frames, partition):
    """``T x K`` mean pressure of each region's cells per frame (0 for empty regions)."""
    frames = np.asarray(frames, dtype=np.float64)
    flat = frames.reshape(frames.shape[0], -1)
    labels = partition.labels.reshape(-1)
    out = np.zeros((frames.shape[0], NUM_REGIONS))
    for k in range(NUM_REGIONS):
        sel = labels == k
        if sel.any():
            out[:, k] = flat[:, sel].mean(axis=1)
    return out


def normalize_activation(activation, epsilon):
    a = np.asarray(activation, dtype=np.float64) + epsilon
    return a / a.sum(axis=-1, keepdims=True)


def compute_temporal_prior(samples, partition, epsilon=1e-6):
    """Average regional activation per stance time, smoothed and row-normalised."""
    if not samples:
        raise ContractError("compute_temporal_prior needs at least one sample")
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    if all(not (partition.labels == k).any() for k in range(NUM_REGIONS)):
        raise ContractError("partition has no non-empty region")
    length = samples[0].pressure.shape[0]
    total = np.zeros((length, NUM_REGIONS))
    for smp in samples:
        if smp.pressure.shape[0] != length:
            raise ContractError("samples must share the same stance length")
        if smp.pressure.shape[1:] != partition.shape:
            raise ContractError(f"sample grid {smp.pressure.shape[1:]} does not match partition {partition.shape}")
        total += region_means(smp.pressure, partition)
    activation = total / len(samples)
    return TemporalPrior(normalize_activation(activation, epsilon), epsilon, activation)


@dataclass
class PriorArtifacts:
    partition: PartitionMap
    prior: TemporalPrior
    mean_map: np.ndarray
    threshold: float


def build_priors(samples, forefoot_fraction=0.54, hindfoot_fraction=0.29, epsilon=1e-6, bins=256,
                 foot_side="right"):
    """Mean map, Otsu mask, partition and temporal prior from ``samples`` in one call."""
    mean_map = compute_mean_pressure_map(samples)
    threshold, mask = otsu_threshold(mean_map, bins)
    partition = build_partition_map(mask, mean_map, forefoot_fraction, hindfoot_fraction, foot_side)
    prior = compute_temporal_prior(samples, partition, epsilon)
    return PriorArtifacts(partition, prior, mean_map, threshold)


def band_of(label):
    return label // 2 if label >= 0 else None


def downsample_labels(labels, factor):
    """Majority region label of each ``factor x factor`` block; background only if no region cell.

    Ties go to the lowest region index.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    if h % factor or w % factor:
        raise ContractError(f"label grid {labels.shape} is not divisible by {factor}")
    blocks = labels.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, -1)
    out = np.full((h // factor, w // factor), BACKGROUND, dtype=np.int64)
    counts = np.stack([(blocks == k).sum(axis=-1) for k in range(NUM_REGIONS)], axis=-1)
    has = counts.max(axis=-1) > 0
    out[has] = np.argmax(counts, axis=-1)[has]
    return out


__all__ = [
    "BACKGROUND",
    "NUM_REGIONS",
    "PartitionMap",
    "PriorArtifacts",
    "REGION_NAMES",
    "TemporalPrior",
    "band_of",
    "build_partition_map",
    "build_priors",
    "compute_mean_pressure_map",
    "compute_temporal_prior",
    "downsample_labels",
    "normalize_activation",
    "otsu_threshold",
    "region_label",
    "region_means",
    "row_midlines",
]
