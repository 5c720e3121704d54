"""Fourier positional encodings for sensor cells and the centre-of-pressure track."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class FourierConfig:
    num_bands: int

    def __post_init__(self):
        if self.num_bands < 1:
            raise ContractError(f"num_bands must be at least 1, got {self.num_bands}")

    @property
    def output_dim(self):
        return 4 * self.num_bands

    @classmethod
    def for_width(cls, dim):
        """Bands chosen so the raw feature width equals ``dim`` (rounded down to a multiple of 4)."""
        return cls(max(1, dim // 4))


def axis_positions(n):
    """Indices ``0..n-1`` mapped linearly onto [-1, 1] (a single index maps to 0)."""
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def grid_coordinates(grid_h, grid_w):
    """``H x W x 2`` normalised ``(x, y)`` = (column, row) position of every sensor."""
    ys = axis_positions(grid_h)
    xs = axis_positions(grid_w)
    return np.stack(np.meshgrid(xs, ys), axis=-1)


def sensor_coordinates(grid_h, grid_w, factor=4):
    """``N x 2`` coordinates of encoder cells after ``factor``-fold downsampling.

    Each cell sits at the mean position of the ``factor x factor`` sensors it
    covers; cells are ordered row-major, matching the flattened feature map.
    """
    if grid_h % factor or grid_w % factor:
        raise ContractError(f"grid {grid_h}x{grid_w} is not divisible by {factor}")
    full = grid_coordinates(grid_h, grid_w)
    h, w = grid_h // factor, grid_w // factor
    cells = full.reshape(h, factor, w, factor, 2).mean(axis=(1, 3))
    return cells.reshape(h * w, 2)


def compute_cop(frame, coords_grid=None):
    """Pressure-weighted centroid of one ``H x W`` frame.

    Returns:
        ``((x, y), True)`` or ``(None, False)`` when the frame carries no load.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if np.any(frame < 0):
        raise ContractError("compute_cop: pressure must be non-negative")
    if coords_grid is None:
        coords_grid = grid_coordinates(*frame.shape)
    total = frame.sum()
    if total <= 0:
        return None, False
    x = float((frame * coords_grid[..., 0]).sum() / total)
    y = float((frame * coords_grid[..., 1]).sum() / total)
    return (x, y), True


@dataclass
class CoPTrajectory:
    cop: np.ndarray
    valid: np.ndarray


def cop_trajectory(frames):
    """CoP for every frame of an ``L x H x W`` stance; unloaded frames repeat the last valid point.

    Frames before the first loaded one sit at the grid centre.
    """
    frames = np.asarray(frames, dtype=np.float64)
    coords = grid_coordinates(*frames.shape[1:])
    centre = coords.reshape(-1, 2).mean(axis=0)
    cop = np.empty((frames.shape[0], 2))
    valid = np.zeros(frames.shape[0], dtype=bool)
    last = centre
    for t, frame in enumerate(frames):
        point, ok = compute_cop(frame, coords)
        if ok:
            last = np.array(point)
        cop[t] = last
        valid[t] = ok
    return CoPTrajectory(cop, valid)


def batch_cop(pressure):
    """``B x L x 2`` CoP trajectories for a ``B x L x H x W`` batch."""
    return np.stack([cop_trajectory(p).cop for p in np.asarray(pressure)])


def fourier_features(points, config):
    """Per-axis ``[sin(2^k pi c), cos(2^k pi c)]`` for ``k < num_bands``, x block then y block.

    ``points`` has shape ``(..., 2)``; the result has ``4 * num_bands`` columns.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise DimensionError(f"fourier_features: points need 2 coordinates, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ContractError("fourier_features: points must be finite")
    freqs = np.pi * 2.0 ** np.arange(config.num_bands)
    blocks = []
    for axis in range(2):
        arg = pts[..., axis:axis + 1] * freqs
        pair = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
        blocks.append(pair.reshape(pts.shape[:-1] + (2 * config.num_bands,)))
    return np.concatenate(blocks, axis=-1)


def linear(x, weight, bias=None):
    x = ad.as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(f"linear: input width {x.shape[-1]} does not match weight rows {weight.shape[0]}")
    out = ops.matmul(x, weight)
    return out if bias is None else ops.add(out, bias)


def encode_coordinates(coords, config, weight, bias=None):
    """``N x d_pos`` learned projection of the cells' Fourier features."""
    feats = fourier_features(coords, config)
    if weight.shape[0] != config.output_dim:
        raise ContractError(f"projection expects {weight.shape[0]} inputs, Fourier width is {config.output_dim}")
    return linear(feats, weight, bias)


def encode_cop(cop, config, w1, b1, w2, b2):
    """Two-layer ReLU MLP over the Fourier features of each CoP point.

    ``cop`` is a :class:`CoPTrajectory` or an array ``(..., 2)``.
    """
    points = cop.cop if isinstance(cop, CoPTrajectory) else cop
    feats = fourier_features(points, config)
    if w1.shape[0] != config.output_dim:
        raise ContractError(f"CoP MLP expects {w1.shape[0]} inputs, Fourier width is {config.output_dim}")
    hidden = ops.relu(linear(feats, w1, b1))
    return linear(hidden, w2, b2)
