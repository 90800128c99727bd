"""Enhancement over time when the medium decorrelates.

Each cycle measures for ~2.15 ms, then holds the mask for 5 ms while the
focus fades. Slower media keep more of the focus.
"""
import numpy as np

from wfs1d.focusing import decorrelation_sweep

taus = [5e-3, 20e-3, 100e-3]
for tr in decorrelation_sweep(taus, n_modes=256, hold_time=5e-3, n_cycles=2):
    eta = np.round(tr.eta[::4], 1)
    print(f"tau {tr.tau * 1e3:5.0f} ms  mean {tr.mean_eta:6.1f}  trace {eta}")
