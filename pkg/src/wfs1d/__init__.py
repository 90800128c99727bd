"""Simulation of transmission-matrix wavefront shaping with a fast 1D phase modulator."""

from . import medium, slm, pipeline, measurement, focusing, analysis
from .medium import (DynamicMediumState, Grid2D, MemoryEffectConfig, TransmissionMatrix, far_field,
                     make_fiber_tm, make_iid_tm, make_memory_tm, make_unitary_tm, propagate)
from .slm import GlvConfig
from .measurement import DetectorModel, fourier_basis, hadamard_basis, measure_tm_column, recover_field
from .focusing import FocusReport, enhancement, run_focus_cycle
from .analysis import autocorrelate, elongation_sweep, grain_axes, speckle_stats
from .pipeline import run_stream, replay_trace, schedule

__version__ = "0.1.0"
