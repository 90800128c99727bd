"""Speckle statistics: autocorrelation, grain axes and the elongation law."""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from . import _rng
from .formats import write_csv, write_pgm16
from .medium import Grid2D, MemoryEffectConfig, far_field, line_input, make_memory_tm, propagate

GrainAxes = namedtuple("GrainAxes", "major minor elongation orientation")
SpeckleStats = namedtuple("SpeckleStats", "contrast exponential_fit_pvalue")


def autocorrelate(image, kind="intensity"):
    """Normalized, centered autocorrelation via the power spectrum.

    ``kind="intensity"`` takes a real image and returns the autocovariance
    of its mean-subtracted values. ``kind="field"`` takes a complex field
    and returns the modulus of its (non mean-subtracted) autocorrelation.
    Either way the zero-lag value, at ``(ny // 2, nx // 2)``, is 1.
    """
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 8:
        raise ValueError(f"autocorrelation needs at least an 8x8 image, got shape {image.shape}")
    if kind == "intensity":
        d = np.asarray(image, dtype=float)
        d = d - d.mean()
        if not np.any(d):
            raise ValueError("image is constant; autocorrelation undefined")
        c = np.fft.ifft2(np.abs(np.fft.fft2(d)) ** 2).real
    elif kind == "field":
        e = np.asarray(image, dtype=np.complex128)
        if not np.any(e):
            raise ValueError("field is zero; autocorrelation undefined")
        c = np.abs(np.fft.ifft2(np.abs(np.fft.fft2(e)) ** 2))
    else:
        raise ValueError(f"unknown autocorrelation kind {kind!r}")
    c = np.fft.fftshift(c)
    return c / c[image.shape[0] // 2, image.shape[1] // 2]


def _lobe_design(corr, region, cy, cx):
    yy, xx = np.nonzero(region)
    dy = (yy - cy).astype(float)
    dx = (xx - cx).astype(float)
    return np.stack([dx * dx, 2.0 * dx * dy, dy * dy], axis=1), corr[region]


def grain_axes(corr, threshold=0.5):
    """Axis lengths, elongation and orientation of the central lobe.

    The lobe is the connected region around zero lag above ``threshold``.
    Its second-moment matrix is taken from a weighted least-squares fit of
    ``log C = -q^T M^-1 q / 2`` over the lobe samples, which is exact for a
    Gaussian lobe and stays stable when the lobe spans only a few samples.
    Axes are the square roots of the eigenvalues of ``M`` (in samples);
    ``orientation`` is the angle of the major axis from +x in ``[0, pi)``.
    """
    corr = np.asarray(corr, dtype=float)
    ny, nx = corr.shape
    cy, cx = ny // 2, nx // 2
    if not np.isclose(corr[cy, cx], 1.0):
        raise ValueError("correlation image must peak at 1 at its center")
    labels, _ = ndimage.label(corr > threshold)
    lobe = labels == labels[cy, cx]
    yy, xx = np.nonzero(lobe)
    if yy.min() == 0 or xx.min() == 0 or yy.max() == ny - 1 or xx.max() == nx - 1:
        raise ValueError("central lobe touches the image border; speckle is undersampled "
                         "or the image is too small")
    design, w = _lobe_design(corr, lobe, cy, cx)
    if np.linalg.matrix_rank(design) < 3:
        # a lobe only a sample or two wide (e.g. plus-shaped) cannot fix the
        # cross term; add its one-sample ring where the correlation is still clear
        ring = ndimage.binary_dilation(lobe) & (corr > 0.1)
        design, w = _lobe_design(corr, ring, cy, cx)
    if np.linalg.matrix_rank(design) < 3:
        raise ValueError("central lobe spans too few samples to resolve its axes")
    sol, *_ = np.linalg.lstsq(design * w[:, None], -2.0 * np.log(w) * w, rcond=None)
    curvature = np.array([[sol[0], sol[1]], [sol[1], sol[2]]])
    evals, evecs = np.linalg.eigh(curvature)
    if evals[0] <= 0:
        raise ValueError("central lobe is not peaked; cannot fit grain axes")
    minor, major = 1.0 / np.sqrt(evals[1]), 1.0 / np.sqrt(evals[0])
    vx, vy = evecs[:, 0]
    orientation = float(np.mod(np.arctan2(vy, vx), np.pi))
    return GrainAxes(float(major), float(minor), float(major / minor), orientation)


def speckle_elongation(near_fields, oversample=4):
    """Grain axes of the far-field speckle of one or more near fields.

    The intensity autocorrelations of all fields are averaged before the
    lobe is measured.
    """
    if isinstance(near_fields, np.ndarray) and near_fields.ndim == 2:
        near_fields = [near_fields]
    acc = None
    for near in near_fields:
        c = autocorrelate(np.abs(far_field(near, oversample)) ** 2)
        acc = c if acc is None else acc + c
    return grain_axes(acc / len(near_fields))


def alternating_phases(n):
    """The line pattern 0, pi, 0, pi, ... (a +-1 field)."""
    return np.pi * (np.arange(n) % 2)


def line_speckle(grid, cfg, seed, row=None, oversample=4, phases=None):
    """Far-field intensity of a thin scatterer under line illumination."""
    row = grid.ny // 2 if row is None else row
    phases = alternating_phases(grid.nx) if phases is None else phases
    tm = make_memory_tm(grid, grid, cfg, seed)
    near = propagate(tm, line_input(grid, phases, row).ravel()).reshape(grid.shape)
    return np.abs(far_field(near, oversample)) ** 2


@dataclass
class ElongationCurve:
    sigmas: np.ndarray
    elongation_mean: np.ndarray
    elongation_std: np.ndarray
    n_realizations: int
    fit: tuple

    @property
    def exponent(self):
        return self.fit[1]

    def is_monotone(self):
        return bool(np.all(np.diff(self.elongation_mean) <= 0))

    def to_csv(self, path):
        rows = [(s, m, sd, self.n_realizations)
                for s, m, sd in zip(self.sigmas, self.elongation_mean, self.elongation_std)]
        write_csv(path, ["sigma", "mean", "std", "n"], rows)

    def plot(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.errorbar(self.sigmas, self.elongation_mean, yerr=self.elongation_std, fmt="o", label="simulated")
        a, p = self.fit
        if np.isfinite(p):
            s = np.linspace(min(self.sigmas), max(self.sigmas), 200)
            ax.plot(s, a * s ** p, "-", label=f"fit: {a:.3g} sigma^{p:.2f}")
        ax.set_xlabel("sigma (pixels)")
        ax.set_ylabel("elongation (major / minor)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def fit_power_law(sigmas, elongation, min_elongation=1.3):
    """Least-squares ``elongation = a * sigma^p`` on log-log axes.

    Points at or below ``min_elongation`` (saturated near 1) are left out.
    Returns ``(nan, nan)`` when fewer than two points remain.
    """
    s = np.asarray(sigmas, dtype=float)
    e = np.asarray(elongation, dtype=float)
    keep = e > min_elongation
    if keep.sum() < 2:
        return (float("nan"), float("nan"))
    p, log_a = np.polyfit(np.log(s[keep]), np.log(e[keep]), 1)
    return (float(np.exp(log_a)), float(p))


def elongation_sweep(sigmas, grid=None, n_realizations=100, seed=0, oversample=4, cutoff=4.0,
                     min_elongation=1.3):
    """Mean speckle elongation versus memory-effect width.

    Each realization draws a memory TM, illuminates the central row with
    the alternating-phase line, and measures the grain axes of the
    far-field speckle. Realization ``r`` uses the same seed for every sigma.
    """
    grid = grid or Grid2D(64, 64)
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0):
        raise ValueError("sigma values must be > 0")
    if n_realizations < 1:
        raise ValueError("need at least one realization")
    seeds = [_rng.derive_seed(seed, _rng.REALIZATION, r) for r in range(n_realizations)]
    means, stds = [], []
    for sigma in sigmas:
        cfg = MemoryEffectConfig(float(sigma), cutoff)
        values = [grain_axes(autocorrelate(line_speckle(grid, cfg, s, oversample=oversample))).elongation
                  for s in seeds]
        means.append(np.mean(values))
        stds.append(np.std(values, ddof=1) if n_realizations > 1 else 0.0)
    means = np.array(means)
    return ElongationCurve(sigmas, means, np.array(stds), n_realizations,
                           fit_power_law(sigmas, means, min_elongation))


def speckle_stats(intensity_image):
    """Speckle contrast ``std / mean`` and a KS test against the exponential law."""
    values = np.asarray(intensity_image, dtype=float).ravel()
    if values.size < 10_000:
        raise ValueError(f"speckle statistics need at least 1e4 samples, got {values.size}")
    mean = values.mean()
    sd = values.std()
    if mean <= 0 or sd == 0:
        return SpeckleStats(0.0, 0.0)
    p = stats.kstest(values, "expon", args=(0.0, mean)).pvalue
    return SpeckleStats(float(sd / mean), float(p))


def write_autocorrelation_pgm(corr, path):
    write_pgm16(path, np.clip(corr, 0.0, 1.0), vmax=1.0)
