"""Stream frames through the producer/consumer engine.

Simulated time checks the schedule against the 350 kHz frame cadence;
throughput mode measures how fast this machine can actually consume frames.
"""
from wfs1d import hadamard_basis, make_iid_tm, run_stream
from wfs1d.focusing import device_preset
from wfs1d.medium import Grid2D

N = 512
grid = Grid2D(16, 16)
cfg, det = device_preset("glv", N)
tm = make_iid_tm(cfg.n_pixels, grid.size, seed=0, out_grid=grid)
basis = hadamard_basis(N)

report, m = run_stream(tm, cfg, basis, (8, 8), det, mode="simtime", cycles=3)
print("simtime   ", m.summary()["deadline_misses"], "deadline misses,", f"enhancement {report.enhancement:.1f}")

_, m = run_stream(tm, cfg, basis, (8, 8), det, mode="throughput", duration=1.0)
print(f"throughput {m.frames_per_second / 1e6:.2f} M frames/s, compute p50 {m.compute_p50 * 1e6:.0f} us, "
      f"p99 {m.compute_p99 * 1e6:.0f} us")
