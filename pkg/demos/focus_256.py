"""Focus through an i.i.d. scattering medium with 256 Hadamard modes.

Runs the ideal device and the GLV preset on the same medium and prints
both enhancements next to the phase-only theory value.
"""
import numpy as np

from wfs1d import _rng
from wfs1d.focusing import device_preset, ideal_enhancement, run_focus_cycle
from wfs1d.measurement import hadamard_basis
from wfs1d.medium import Grid2D, make_iid_tm

N = 256
grid = Grid2D(16, 16)
target = (8, 8)

for preset in ("ideal", "glv"):
    cfg, det = device_preset(preset, N)
    tm = make_iid_tm(cfg.n_pixels, grid.size, seed=1, out_grid=grid)
    r = run_focus_cycle(tm, cfg, hadamard_basis(N), target, det, rng=_rng.stream(1, _rng.DETECTOR))
    print(f"{preset:5s}  enhancement {r.enhancement:7.1f}  peak/mean {r.intensity_image[target] / r.intensity_image.mean():.1f}")

print(f"theory {ideal_enhancement(N):.1f}")
print(f"one cycle: {r.timing.n_frames} frames, {r.timing.cycle_time * 1e3:.3f} ms")

img = r.intensity_image
print(f"fraction of output power in the target pixel: {img[target] / img.sum():.3f}")
print("brightest pixel:", tuple(int(i) for i in np.unravel_index(np.argmax(img), img.shape)))
