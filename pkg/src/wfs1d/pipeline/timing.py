"""Frame-schedule arithmetic and per-frame sample averaging."""

import math
from dataclasses import dataclass

import numpy as np

DISPLAY_PERIOD = 2.8e-6
TRANSFER_COMPUTE_BUDGET = 200e-6
COMPUTE_TARGET = 150e-6
HOLD_TIME = 5e-3
DEFAULT_SETTLE_FRACTION = 300e-9 / DISPLAY_PERIOD


@dataclass(frozen=True)
class TimingBudget:
    frame_period: float
    n_frames: int
    tm_time: float
    transfer_compute_time: float
    compute_target: float
    cycle_time: float
    hold_time: float

    @property
    def frame_rate(self):
        return 1.0 / self.frame_period


def schedule(n_modes, cfg=None, transfer_compute_time=TRANSFER_COMPUTE_BUDGET,
             hold_time=HOLD_TIME, compute_target=COMPUTE_TARGET):
    """Timing of one measure-compute-display cycle for ``n_modes`` modes.

    Three reference phases per mode give ``3 N`` frames; the cycle adds the
    transfer/compute budget and one display frame for the focusing mask.
    """
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    period = DISPLAY_PERIOD if cfg is None else cfg.frame_period
    n_frames = 3 * n_modes
    tm_time = n_frames * period
    return TimingBudget(
        frame_period=period,
        n_frames=n_frames,
        tm_time=tm_time,
        transfer_compute_time=transfer_compute_time,
        compute_target=compute_target,
        cycle_time=tm_time + transfer_compute_time + period,
        hold_time=hold_time,
    )


def settle_skip(n_samples, settle_fraction):
    """Number of leading samples discarded as switching transient."""
    if not 0 <= settle_fraction < 0.5:
        raise ValueError(f"settle_fraction must lie in [0, 0.5), got {settle_fraction}")
    return math.ceil(settle_fraction * n_samples - 1e-12)


def frame_average(samples, settle_fraction=DEFAULT_SETTLE_FRACTION):
    """Mean of one frame's ADC samples after dropping the settling transient."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("frame has no samples")
    skip = settle_skip(samples.size, settle_fraction)
    if skip >= samples.size:
        raise ValueError(f"settle exclusion discards all {samples.size} samples")
    return float(np.mean(samples[skip:]))


def frame_average_block(block, settle_fraction=DEFAULT_SETTLE_FRACTION):
    """Row-wise ``frame_average`` over a ``(frames, samples)`` block."""
    block = np.asarray(block, dtype=float)
    skip = settle_skip(block.shape[1], settle_fraction)
    if skip >= block.shape[1]:
        raise ValueError(f"settle exclusion discards all {block.shape[1]} samples")
    return np.mean(block[:, skip:], axis=1)
