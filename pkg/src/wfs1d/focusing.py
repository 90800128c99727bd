"""Phase-conjugation focusing from measured TM coefficients.

The optimal pixel field for a target is the conjugate-weighted sum of the
basis modes; a phase-only modulator displays its argument. During the
focus frame the reference pixels are blocked.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng, analysis, slm
from .measurement import DetectorModel, coefficients, hadamard_basis, measure_tm_column
from .medium import (DynamicMediumState, Grid2D, as_matrix, far_field, make_fiber_tm,
                     make_iid_tm, propagate)
from .formats import write_csv, write_keyvalue, write_pgm16
from .pipeline.timing import schedule


@dataclass
class FocusReport:
    mask: slm.SlmPattern
    enhancement: float
    target: tuple
    n_modes: int
    timing: object
    intensity_image: np.ndarray
    coefficients: np.ndarray = None
    records: list = None
    timeseries: np.ndarray = None
    elongation: float = None
    metadata: dict = field(default_factory=dict)


def device_preset(name, n_modes, n_pixels=1088):
    """``(GlvConfig, DetectorModel)`` for the ``ideal`` or ``glv`` device.

    ``glv`` combines the 3pi/2 stroke, 7.5 % residual grating, the signal
    ratio for ``n_modes``, shot and read noise, and a 100 ns settling
    transient masked by the 300 ns settle window.
    """
    if name == "ideal":
        return slm.GlvConfig.ideal(n_modes, n_pixels=n_pixels), DetectorModel()
    if name == "glv":
        cfg = slm.GlvConfig.glv(n_modes, n_pixels=n_pixels)
        det = DetectorModel(read_noise_sigma=0.05, shot_noise=True, photons_per_unit_intensity=1e5,
                            settle_fraction=cfg.settle_time / cfg.frame_period, settle_tau=100e-9,
                            frame_period=cfg.frame_period)
        return cfg, det
    raise ValueError(f"unknown preset {name!r}; expected 'ideal' or 'glv'")


def conjugate_mask(coeffs, basis):
    """Phases (in [0, 2pi)) of ``sum_m conj(c_m) exp(i mode_m)``."""
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    if coeffs.shape != (basis.n_modes,):
        raise ValueError(f"need {basis.n_modes} coefficients, got shape {coeffs.shape}")
    e_opt = basis.synthesize(np.conj(coeffs))
    phases = np.arctan2(e_opt.imag, e_opt.real)
    phases[phases < 0] += 2.0 * np.pi
    phases[phases >= 2.0 * np.pi] = 0.0
    return phases


def focus_pattern(phases, glv_cfg):
    """Lay out mask phases on the modulator and apply the stroke limit."""
    pattern = slm.layout_pattern(phases, 0.0, glv_cfg)
    return slm.apply_stroke_limit(pattern, glv_cfg.stroke_max)


def output_image(medium, glv_cfg, pattern, block_reference=True):
    """Far-field intensity produced by displaying ``pattern``."""
    tm = as_matrix(medium)
    near = propagate(tm, slm.pixel_field(pattern, glv_cfg, block_reference=block_reference))
    return np.abs(far_field(near.reshape(tm.out_grid.shape))) ** 2


def enhancement(intensity_image, target, exclusion_radius=3):
    """Target intensity over the mean intensity outside a disk around it."""
    image = np.asarray(intensity_image, dtype=float)
    ny, nx = image.shape
    y0, x0 = target
    if not (0 <= y0 < ny and 0 <= x0 < nx):
        raise ValueError(f"target {target} outside the {ny}x{nx} image")
    y, x = np.mgrid[0:ny, 0:nx]
    background = (y - y0) ** 2 + (x - x0) ** 2 > exclusion_radius ** 2
    if not background.any():
        raise ValueError("exclusion disk covers the whole image; no background left")
    return float(image[y0, x0] / image[background].mean())


def default_target(grid):
    return (grid.ny // 2, grid.nx // 2)


def run_focus_cycle(medium, glv_cfg, basis, target, det, budget=None, rng=None, exclusion_radius=3):
    """Measure, compute the conjugate mask, display it and score the focus.

    A dynamic medium keeps evolving: frame by frame during the measurement,
    then for the transfer/compute time and one last frame before display.
    """
    budget = budget or schedule(basis.n_modes, glv_cfg)
    rng = rng if rng is not None else _rng.stream(0, _rng.DETECTOR)
    records = measure_tm_column(medium, glv_cfg, basis, target, det, rng)
    coeffs = coefficients(records)
    mask = focus_pattern(conjugate_mask(coeffs, basis), glv_cfg)
    if isinstance(medium, DynamicMediumState):
        medium.evolve(budget.transfer_compute_time + glv_cfg.frame_period)
    image = output_image(medium, glv_cfg, mask)
    return FocusReport(mask=mask, enhancement=enhancement(image, target, exclusion_radius),
                       target=tuple(target), n_modes=basis.n_modes, timing=budget,
                       intensity_image=image, coefficients=coeffs, records=records)


def ideal_enhancement(n_modes):
    """Expected phase-only enhancement ``pi/4 (N - 1) + 1`` for Rayleigh fields."""
    return np.pi / 4.0 * (n_modes - 1) + 1.0


@dataclass
class DecorrelationTrace:
    tau: float
    times: np.ndarray
    eta: np.ndarray

    @property
    def mean_eta(self):
        return float(np.mean(self.eta))


def decorrelation_sweep(taus, n_modes=256, hold_time=5e-3, n_cycles=2, sample_dt=0.25e-3,
                        preset="ideal", seed=0, out_grid=None, target=None, basis=None):
    """Enhancement over time for dynamic media of several decorrelation times.

    Each cycle measures the TM (``3 N`` frames), computes and displays the
    mask, then holds it for ``hold_time`` while the medium evolves,
    sampling the enhancement every ``sample_dt``. Every tau starts from the
    same medium and consumes the same random streams, so the traces are
    paired realizations.
    """
    glv_cfg, det = device_preset(preset, n_modes)
    basis = basis or hadamard_basis(n_modes)
    out_grid = out_grid or Grid2D(16, 16)
    target = target or default_target(out_grid)
    budget = schedule(n_modes, glv_cfg, hold_time=hold_time)
    n_hold = int(round(hold_time / sample_dt))
    traces = []
    for tau in taus:
        if not tau > 0:
            raise ValueError(f"decorrelation times must be > 0, got {tau}")
        start = make_iid_tm(glv_cfg.n_pixels, out_grid.size, seed, out_grid=out_grid)
        state = DynamicMediumState(start, tau, seed=seed)
        rng = _rng.stream(seed, _rng.DETECTOR)
        times, etas = [], []
        for _ in range(n_cycles):
            report = run_focus_cycle(state, glv_cfg, basis, target, det, budget, rng)
            times.append(state.t)
            etas.append(report.enhancement)
            for _ in range(n_hold):
                state.evolve(sample_dt)
                times.append(state.t)
                etas.append(enhancement(output_image(state, glv_cfg, report.mask), target))
            state.evolve(glv_cfg.frame_period)
        traces.append(DecorrelationTrace(float(tau), np.array(times), np.array(etas)))
    return traces


def fiber_focus(n_modes, basis, target=None, glv_cfg=None, det=None, seed=0, n_probe=8,
                oversample=4, out_grid=None):
    """Focus at the output of a multimode fiber with ``n_modes`` modes.

    Also reports the elongation of the unfocused output speckle, averaged
    over ``n_probe`` random input masks.
    """
    if n_modes < basis.n_modes:
        raise ValueError(f"cannot control {basis.n_modes} modes of a {n_modes}-mode fiber")
    glv_cfg = glv_cfg or slm.GlvConfig.ideal(basis.n_modes)
    det = det or DetectorModel()
    tm = make_fiber_tm(n_modes, glv_cfg.n_pixels, seed, out_grid=out_grid)
    target = target or default_target(tm.out_grid)
    report = run_focus_cycle(tm, glv_cfg, basis, target, det, rng=_rng.stream(seed, _rng.DETECTOR))
    probe_rng = _rng.stream(seed, _rng.PROBE)
    nears = []
    for _ in range(n_probe):
        phases = probe_rng.uniform(0.0, 2.0 * np.pi, glv_cfg.n_pixels)
        nears.append(propagate(tm, np.exp(1j * phases)).reshape(tm.out_grid.shape))
    report.elongation = analysis.speckle_elongation(nears, oversample).elongation
    report.metadata["fiber_modes"] = n_modes
    return report



def write_focus_report(report, directory):
    """Export a report: ``report.txt``, ``intensity.pgm``, ``intensity.csv``
    and, when present, ``timeseries.csv`` (t_seconds, eta)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    t = report.timing
    meta = {
        "enhancement": repr(report.enhancement),
        "target_y": report.target[0],
        "target_x": report.target[1],
        "n_modes": report.n_modes,
        "ideal_enhancement": repr(ideal_enhancement(report.n_modes)),
        "tm_time_s": repr(t.tm_time),
        "cycle_time_s": repr(t.cycle_time),
        "n_frames": t.n_frames,
        "frame_period_s": repr(t.frame_period),
        "transfer_compute_time_s": repr(t.transfer_compute_time),
    }
    if report.elongation is not None:
        meta["elongation"] = repr(report.elongation)
    meta.update(report.metadata)
    write_keyvalue(out / "report.txt", meta)
    write_pgm16(out / "intensity.pgm", report.intensity_image)
    np.savetxt(out / "intensity.csv", report.intensity_image, delimiter=",", fmt="%.17g")
    np.savetxt(out / "mask_phases.csv", report.mask.phases, delimiter=",", fmt="%.17g")
    if report.timeseries is not None:
        write_csv(out / "timeseries.csv", ["t_seconds", "eta"], report.timeseries)
    return out
