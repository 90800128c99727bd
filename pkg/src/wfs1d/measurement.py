"""Three-reference interferometric measurement of one transmission-matrix row.

Each basis mode is displayed in the signal region while the outer
reference pixels step through the phases 0, pi/2 and pi. With the
reference phase added on the reference arm, the detected intensities

    I_theta = |E_ref exp(i theta) + E_m|^2

give the complex coefficient ``c = conj(E_ref) * E_m`` in closed form
(see ``recover_field``).
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from . import slm
from .medium import DynamicMediumState, as_matrix, far_field_rows, window_indices
from .pipeline.timing import frame_average

REFERENCE_PHASES = (0.0, 0.5 * np.pi, np.pi)


class ConfigurationError(ValueError):
    """Device, basis and medium dimensions do not fit together."""


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def _kron_factors(n):
    # few, balanced factors of at most 32 x 32 keep the matmul count low
    k = n.bit_length() - 1
    n_f = -(-k // 5)
    sizes = [k // n_f + (i < k % n_f) for i in range(n_f)]
    return [hadamard(2 ** b).astype(float) for b in sizes]


def walsh_hadamard(x, factors=None):
    """Multiply by the Sylvester Hadamard matrix in ``O(N log N)``.

    The Sylvester matrix is a Kronecker power, so the product is applied as
    a few small dense factors (up to 32 x 32) along reshaped axes. Complex
    input is transformed as a real ``(N, 2)`` view.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if not _is_power_of_two(n):
        raise ValueError(f"Walsh-Hadamard transform needs a power-of-2 length, got {n}")
    if n == 1:
        return x.copy()
    is_complex = np.iscomplexobj(x)
    y = np.ascontiguousarray(x, dtype=np.complex128 if is_complex else float)
    y = y.view(float).reshape(n, -1) if is_complex else y.reshape(n, -1)
    width = y.shape[1]
    b = 1
    for h in reversed(factors or _kron_factors(n)):
        m = h.shape[0]
        y = np.matmul(h, y.reshape(n // (m * b), m, b * width))
        b *= m
    y = y.reshape(n, width)
    if is_complex:
        return np.ascontiguousarray(y).view(np.complex128).reshape(x.shape)
    return y.reshape(x.shape)


@dataclass(frozen=True, eq=False)
class Basis:
    """Orthogonal set of phase-only input modes (row ``m`` is mode ``m``)."""

    kind: str
    n_modes: int
    phases: np.ndarray

    def mode(self, m):
        return self.phases[m]

    def fields(self):
        return np.exp(1j * self.phases)

    def synthesize(self, weights):
        """Pixel-domain field ``sum_m weights[m] * exp(i mode_m)``."""
        weights = np.asarray(weights, dtype=np.complex128)
        if weights.shape != (self.n_modes,):
            raise ValueError(f"need {self.n_modes} weights, got shape {weights.shape}")
        if self.kind == "hadamard":
            # Sylvester matrices are symmetric, so rows and columns agree
            return walsh_hadamard(weights, self._factors)
        if self.kind == "fourier":
            return self.n_modes * np.fft.ifft(weights)
        return weights @ self.fields()

    @property
    def _factors(self):
        f = self.__dict__.get("_hadamard_factors")
        if f is None:
            f = _kron_factors(self.n_modes)
            object.__setattr__(self, "_hadamard_factors", f)
        return f


def hadamard_basis(n_modes):
    """Sylvester Hadamard modes as {0, pi} phase patterns; row 0 is flat."""
    if not _is_power_of_two(n_modes):
        raise ValueError(f"Hadamard basis requires a power-of-2 mode count, got {n_modes}")
    h = hadamard(n_modes)
    return Basis("hadamard", n_modes, np.where(h < 0, np.pi, 0.0))


def fourier_basis(n_modes):
    """Plane-wave modes with phase ``2 pi m n / N`` (wrapped to [0, 2 pi))."""
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    m = np.arange(n_modes)
    return Basis("fourier", n_modes, 2.0 * np.pi * (np.outer(m, m) % n_modes) / n_modes)


def make_basis(kind, n_modes):
    if kind == "hadamard":
        return hadamard_basis(n_modes)
    if kind == "fourier":
        return fourier_basis(n_modes)
    raise ValueError(f"unknown basis kind {kind!r}")


@dataclass(frozen=True)
class DetectorModel:
    """Pinhole + APD + digitizer.

    Shot noise is drawn once per frame on the integrated photon count;
    read noise is independent on each of the ``adc_samples_per_frame``
    digitizer samples. A nonzero ``settle_tau`` adds an exponential
    transient from the previous frame's intensity, which
    ``settle_fraction`` then excludes from the average.
    """

    read_noise_sigma: float = 0.0
    shot_noise: bool = False
    photons_per_unit_intensity: float = 1e6
    adc_samples_per_frame: int = 64
    pinhole: int = 1
    settle_fraction: float = 0.0
    settle_tau: float = 0.0
    frame_period: float = 2.8e-6

    def __post_init__(self):
        if self.read_noise_sigma < 0 or self.photons_per_unit_intensity < 0 or self.settle_tau < 0:
            raise ValueError("detector parameters must be non-negative")
        if self.adc_samples_per_frame < 1 or self.pinhole < 1:
            raise ValueError("need at least one ADC sample and a pinhole of at least one sample")

    @property
    def noiseless(self):
        return self.read_noise_sigma == 0 and not self.shot_noise


@dataclass(frozen=True)
class MeasurementRecord:
    mode_index: int
    intensities: tuple
    coefficient: complex


@dataclass(frozen=True)
class FrameSample:
    frame_index: int
    mode_index: int
    ref_index: int
    samples: np.ndarray


def recover_field(I0, I_half, I_pi):
    """Complex coefficient ``conj(E_ref) * E_m`` from three reference phases.

    ``Re c = (I0 - I_pi) / 4``, ``Im c = (2 I_half - I0 - I_pi) / 4``.
    Works elementwise on arrays.
    """
    I0 = np.asarray(I0, dtype=float)
    I_half = np.asarray(I_half, dtype=float)
    I_pi = np.asarray(I_pi, dtype=float)
    c = np.empty(np.broadcast_shapes(I0.shape, I_half.shape, I_pi.shape), dtype=np.complex128)
    c.real = I0 - I_pi
    c.imag = 2.0 * I_half - I0 - I_pi
    c *= 0.25
    return complex(c) if c.ndim == 0 else c


def frame_reads(intensity, det, rng, previous=None):
    """Digitizer samples of one frame whose true intensity is ``intensity``."""
    n = det.adc_samples_per_frame
    level = float(intensity)
    if det.shot_noise and det.photons_per_unit_intensity > 0:
        ppu = det.photons_per_unit_intensity
        level = rng.poisson(level * ppu) / ppu
    reads = np.full(n, level)
    if det.settle_tau > 0 and previous is not None:
        t = np.arange(n) * (det.frame_period / n)
        reads += (float(previous) - level) * np.exp(-t / det.settle_tau)
    if det.read_noise_sigma > 0:
        reads += rng.normal(0.0, det.read_noise_sigma, n)
    return reads


def _average(reads, det):
    return max(0.0, frame_average(reads, det.settle_fraction))


def detect(far, target, det, rng=None, previous=None):
    """Averaged detector intensity behind a pinhole on the far field."""
    far = np.asarray(far)
    ys, xs = window_indices(far.shape, target, det.pinhole)
    intensity = float(np.sum(np.abs(far[ys, xs]) ** 2))
    if det.noiseless and not (det.settle_tau > 0 and previous is not None):
        return intensity
    if rng is None:
        raise ValueError("a random generator is required for a noisy detector")
    return _average(frame_reads(intensity, det, rng, previous), det)


def mode_fields(glv_cfg, basis):
    """Pixel fields of all ``3 N`` measurement frames, mode-major order."""
    fields = np.empty((3 * basis.n_modes, glv_cfg.n_pixels), dtype=np.complex128)
    for m in range(basis.n_modes):
        for r, theta in enumerate(REFERENCE_PHASES):
            pattern = slm.layout_pattern(basis.mode(m), theta, glv_cfg)
            pattern = slm.apply_stroke_limit(pattern, glv_cfg.stroke_max)
            fields[3 * m + r] = slm.pixel_field(pattern, glv_cfg)
    return fields


def _check_fit(medium, glv_cfg, basis):
    tm = as_matrix(medium)
    if tm.n_in != glv_cfg.n_pixels:
        raise ConfigurationError(f"medium takes {tm.n_in} inputs but the modulator has {glv_cfg.n_pixels} pixels")
    if tm.out_grid is None:
        raise ConfigurationError("medium needs an output grid to form the far field")
    if basis.n_modes > glv_cfg.signal_capacity:
        raise ConfigurationError(f"{basis.n_modes} modes exceed the signal capacity of {glv_cfg.signal_capacity} pixels")
    return tm


def detector_rows(medium, target, det):
    """Rows mapping modulator pixels to the pinhole samples of the far field."""
    tm = as_matrix(medium)
    probe = far_field_rows(tm.out_grid, target, det.pinhole)
    return probe @ tm.entries


def tm_frames(medium, glv_cfg, basis, target, det, rng, start_index=0):
    """Generate the ``3 N`` frames of one TM measurement.

    Frames are mode-major: for each mode the reference steps 0, pi/2, pi.
    A dynamic medium advances by one frame period between frames.
    """
    tm = _check_fit(medium, glv_cfg, basis)
    fields = mode_fields(glv_cfg, basis)
    n_frames = fields.shape[0]
    if isinstance(medium, DynamicMediumState):
        probe = far_field_rows(tm.out_grid, target, det.pinhole)
        rows = medium.evolve_probed(probe, n_frames - 1, glv_cfg.frame_period)
        values = np.einsum("fkp,fp->fk", rows, fields)
    else:
        values = fields @ detector_rows(tm, target, det).T
    intensities = np.sum(np.abs(values) ** 2, axis=1)
    previous = None
    for j in range(n_frames):
        if det.noiseless and det.settle_tau == 0:
            reads = np.full(det.adc_samples_per_frame, intensities[j])
        else:
            reads = frame_reads(intensities[j], det, rng, previous)
        previous = intensities[j]
        m, r = divmod(j, 3)
        yield FrameSample(start_index + j, m, r, reads)


def measure_tm_column(medium, glv_cfg, basis, target, det, rng=None):
    """Measure the TM row at ``target`` for every basis mode.

    Returns one ``MeasurementRecord`` per mode, in mode order.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = basis.n_modes
    levels = np.empty((n, 3))
    for frame in tm_frames(medium, glv_cfg, basis, target, det, rng):
        levels[frame.mode_index, frame.ref_index] = _average(frame.samples, det)
    coeffs = recover_field(levels[:, 0], levels[:, 1], levels[:, 2])
    return [MeasurementRecord(m, tuple(levels[m]), complex(coeffs[m])) for m in range(n)]


def coefficients(records):
    return np.array([r.coefficient for r in records], dtype=np.complex128)


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode_index", "I0", "I_half", "I_pi", "re_c", "im_c"])
        for r in records:
            w.writerow([r.mode_index, *[repr(float(v)) for v in r.intensities],
                        repr(r.coefficient.real), repr(r.coefficient.imag)])


def read_records_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MeasurementRecord(int(row["mode_index"]),
                                         (float(row["I0"]), float(row["I_half"]), float(row["I_pi"])),
                                         complex(float(row["re_c"]), float(row["im_c"]))))
    return out
