"""Model of the 1D grating light valve (GLV) phase modulator.

The pixel array is split into a central signal region, where basis modes
are displayed on contiguous pixel groups, and two outer reference regions
carrying a common reference phase. Device non-idealities are the limited
phase stroke (with a nearest-endpoint clipping rule) and a coherent,
phase-independent residual reflection from the back surface.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * np.pi

GLV_CONFIG_KEYS = ("n_pixels", "frame_rate_hz", "settle_time_ns", "stroke_max_over_pi",
                   "residual_fraction", "signal_fraction")


@dataclass(frozen=True)
class GlvConfig:
    """Device parameters.

    ``frame_period`` defaults to the 2.8 us effective display time per mask,
    which is shorter than ``1 / frame_rate``; use ``with_nominal_period`` to
    clock frames at exactly the device rate.
    """

    n_pixels: int = 1088
    frame_rate: float = 350_000.0
    frame_period: float = 2.8e-6
    settle_time: float = 300e-9
    stroke_max: float = 1.5 * np.pi
    residual_fraction: float = 0.075
    signal_fraction: float = 0.70
    illumination: tuple = None

    def __post_init__(self):
        if self.n_pixels < 1:
            raise ValueError("n_pixels must be >= 1")
        if not self.settle_time < self.frame_period:
            raise ValueError(f"settle_time {self.settle_time} must be shorter than frame_period {self.frame_period}")
        if not 0 < self.stroke_max <= TWO_PI + 1e-12:
            raise ValueError(f"stroke_max must lie in (0, 2pi], got {self.stroke_max}")
        if not 0 <= self.residual_fraction <= 0.2:
            raise ValueError(f"residual_fraction must lie in [0, 0.2], got {self.residual_fraction}")
        if not 0 < self.signal_fraction <= 1:
            raise ValueError(f"signal_fraction must lie in (0, 1], got {self.signal_fraction}")
        if self.illumination is not None and len(self.illumination) != self.n_pixels:
            raise ValueError("illumination profile must have one amplitude per pixel")

    @property
    def nominal_period(self):
        return 1.0 / self.frame_rate

    @property
    def signal_capacity(self):
        return int(np.floor(self.signal_fraction * self.n_pixels + 1e-9))

    def with_nominal_period(self):
        return replace(self, frame_period=self.nominal_period)

    @classmethod
    def ideal(cls, n_modes=256, **kw):
        """Full 2pi stroke and no residual grating."""
        kw.setdefault("signal_fraction", default_signal_fraction(n_modes))
        return cls(stroke_max=TWO_PI, residual_fraction=0.0, **kw)

    @classmethod
    def glv(cls, n_modes=256, **kw):
        """Measured device: 3pi/2 stroke, 7.5 % residual, signal ratio per mode count."""
        kw.setdefault("signal_fraction", default_signal_fraction(n_modes))
        return cls(**kw)


def default_signal_fraction(n_modes):
    """Signal-to-total pixel ratio used for 256 (70 %) and 512 (95 %) modes."""
    return 0.95 if n_modes >= 512 else 0.70


@dataclass(frozen=True)
class SlmPattern:
    phases: np.ndarray
    signal_range: tuple
    reference_ranges: tuple
    group_size: int = 1

    @property
    def n_pixels(self):
        return self.phases.size

    @property
    def n_modes(self):
        start, stop = self.signal_range
        return (stop - start) // self.group_size

    def reference_mask(self):
        mask = np.zeros(self.n_pixels, dtype=bool)
        for a, b in self.reference_ranges:
            mask[a:b] = True
        return mask

    def signal_mask(self):
        mask = np.zeros(self.n_pixels, dtype=bool)
        mask[slice(*self.signal_range)] = True
        return mask

    def with_phases(self, phases):
        return replace(self, phases=np.asarray(phases, dtype=float))


def layout_pattern(signal_phases, reference_phase, cfg):
    """Place mode phases in the center of the array, reference on both sides.

    Each mode occupies ``capacity // N`` contiguous pixels, where the
    capacity is ``floor(signal_fraction * n_pixels)``. Pixels left over by
    the integer division go to the reference.
    """
    signal_phases = np.asarray(signal_phases, dtype=float)
    n = signal_phases.size
    capacity = cfg.signal_capacity
    if n < 1:
        raise ValueError("need at least one signal mode")
    if n > capacity:
        raise ValueError(f"{n} modes exceed the signal capacity of {capacity} pixels "
                         f"(signal_fraction={cfg.signal_fraction}, n_pixels={cfg.n_pixels})")
    group = capacity // n
    used = group * n
    start = (cfg.n_pixels - used) // 2
    stop = start + used
    phases = np.full(cfg.n_pixels, float(reference_phase) % TWO_PI)
    phases[start:stop] = np.repeat(np.mod(signal_phases, TWO_PI), group)
    return SlmPattern(phases, (start, stop), ((0, start), (stop, cfg.n_pixels)), group)


def clip_phases(phases, stroke_max):
    """Map phases into the reachable stroke by snapping to the nearer endpoint.

    Phases in ``(stroke_max, mid]`` go to ``stroke_max`` and phases in
    ``(mid, 2pi)`` go to ``0`` (equivalent to 2pi), with
    ``mid = (stroke_max + 2pi) / 2``.
    """
    phi = np.mod(np.asarray(phases, dtype=float), TWO_PI)
    if stroke_max >= TWO_PI:
        return phi
    mid = 0.5 * (stroke_max + TWO_PI)
    out = phi.copy()
    out[(phi > stroke_max) & (phi <= mid)] = stroke_max
    out[phi > mid] = 0.0
    return out


def apply_stroke_limit(pattern, stroke_max):
    return pattern.with_phases(clip_phases(pattern.phases, stroke_max))


def pixel_field(pattern, cfg, residual_fraction=None, block_reference=False):
    """Complex reflected field of each pixel.

    ``sqrt(1 - r) exp(i phi) + sqrt(r)``: the second term is the coherent
    back-surface reflection, which does not follow the ribbon deflection.
    ``block_reference`` zeroes the reference pixels, as when a fine grating
    on them steers their light out of the Fourier aperture.
    """
    r = cfg.residual_fraction if residual_fraction is None else residual_fraction
    if not 0 <= r <= 1:
        raise ValueError(f"residual fraction must lie in [0, 1], got {r}")
    field = np.sqrt(1.0 - r) * np.exp(1j * pattern.phases) + np.sqrt(r)
    if cfg.illumination is not None:
        field = field * np.asarray(cfg.illumination, dtype=float)
    if block_reference:
        field[pattern.reference_mask()] = 0.0
    return field


class CalibrationCurve:
    """Monotone voltage-to-phase samples of the device response."""

    def __init__(self, voltages, phases):
        v = np.asarray(voltages, dtype=float)
        p = np.asarray(phases, dtype=float)
        if v.shape != p.shape or v.ndim != 1 or v.size < 2:
            raise ValueError("calibration needs at least two (voltage, phase) pairs")
        if np.any(np.diff(v) <= 0):
            raise ValueError("calibration voltages must be strictly increasing")
        if np.any(np.diff(p) <= 0):
            raise ValueError("calibration phases must be strictly increasing")
        self.voltages = v
        self.phases = p

    @property
    def samples(self):
        return list(zip(self.voltages.tolist(), self.phases.tolist()))

    def covers(self, stroke_max):
        return self.phases[0] <= 0.0 and self.phases[-1] >= stroke_max

    def phase(self, voltage):
        return np.interp(voltage, self.voltages, self.phases)


def calibrate_inverse(curve, target_phase):
    """Voltage producing ``target_phase``, by piecewise-linear inversion."""
    target = np.asarray(target_phase, dtype=float)
    lo, hi = curve.phases[0], curve.phases[-1]
    if np.any(target < lo - 1e-12) or np.any(target > hi + 1e-12):
        raise ValueError(f"target phase outside calibrated range [{lo:.6g}, {hi:.6g}] rad")
    v = np.interp(target, curve.phases, curve.voltages)
    return float(v) if v.ndim == 0 else v


def load_calibration_csv(path):
    """Read ``voltage, phase_rad`` rows; a non-numeric header line is skipped."""
    volts, phases = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            try:
                v, p = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: expected two numeric columns, got {row}")
            volts.append(v)
            phases.append(p)
    return CalibrationCurve(volts, phases)


def load_glv_config(path):
    """Read a ``key = value`` config; unknown keys are rejected."""
    from .formats import read_keyvalue

    kv = read_keyvalue(path)
    unknown = set(kv) - set(GLV_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown GLV config keys {sorted(unknown)}")
    kw = {}
    if "n_pixels" in kv:
        kw["n_pixels"] = int(kv["n_pixels"])
    if "frame_rate_hz" in kv:
        kw["frame_rate"] = float(kv["frame_rate_hz"])
    if "settle_time_ns" in kv:
        kw["settle_time"] = float(kv["settle_time_ns"]) / 1e9
    if "stroke_max_over_pi" in kv:
        kw["stroke_max"] = float(kv["stroke_max_over_pi"]) * np.pi
    if "residual_fraction" in kv:
        kw["residual_fraction"] = float(kv["residual_fraction"])
    if "signal_fraction" in kv:
        kw["signal_fraction"] = float(kv["signal_fraction"])
    return GlvConfig(**kw)


def dump_glv_config(cfg, path):
    from .formats import write_keyvalue

    write_keyvalue(path, {
        "n_pixels": cfg.n_pixels,
        "frame_rate_hz": repr(cfg.frame_rate),
        "settle_time_ns": repr(round(cfg.settle_time * 1e9, 6)),
        "stroke_max_over_pi": repr(cfg.stroke_max / np.pi),
        "residual_fraction": repr(cfg.residual_fraction),
        "signal_fraction": repr(cfg.signal_fraction),
    })
