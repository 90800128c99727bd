"""Command-line front end: ``wfs1d {focus,elongation,bench,decorrelate}``.

Every command resolves its parameters from built-in defaults, then an
optional ``--config-file`` (``key = value`` text), then ``--config
key=value`` overrides, then explicit flags. The resolved set is written to
``config.txt`` in the output directory; passing that file back with
``--config-file`` reproduces the run. Timestamps go to ``meta.txt`` only.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, _rng, analysis, focusing
from .formats import read_keyvalue, write_csv, write_keyvalue
from .measurement import make_basis
from .medium import Grid2D, MemoryEffectConfig, make_fiber_tm, make_iid_tm, make_line_medium
from .pipeline.stream import run_stream
from .pipeline.timing import schedule


class UsageError(Exception):
    pass


def _int(text):
    return int(str(text))


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}


def parse_duration(text):
    """``"5ms"``, ``"250us"``, ``"0.1s"`` or a bare number of seconds."""
    m = re.fullmatch(r"\s*([-+0-9.eE]+)\s*(s|ms|us|ns)?\s*", str(text))
    if not m:
        raise ValueError(f"cannot parse duration {text!r}")
    value = float(m.group(1)) * _UNITS[m.group(2) or "s"]
    if value < 0:
        raise ValueError(f"negative duration {text!r}")
    return value


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _duration_list(text):
    return [parse_duration(v) for v in str(text).split(",") if v.strip()]


# (converter, default); a default of None means "required" unless noted
COMMANDS = {
    "focus": {
        "modes": (_int, 256),
        "medium": (str, "iid"),
        "preset": (str, "ideal"),
        "basis": (str, "hadamard"),
        "grid": (str, "auto"),
        "seed": (_int, 0),
        "exclusion_radius": (_int, 3),
        "out": (str, "out/focus"),
    },
    "elongation": {
        "sigmas": (str, "1,2,3,4,6,8"),
        "grid": (str, "64x64"),
        "realizations": (_int, 100),
        "oversample": (_int, 4),
        "seed": (_int, 0),
        "plot": (_bool, False),
        "out": (str, "out/elongation"),
    },
    "bench": {
        "modes": (_int, 512),
        "mode": (str, "throughput"),
        "duration": (str, "1.0"),
        "preset": (str, "glv"),
        "capacity": (_int, 4096),
        "block_frames": (_int, 512),
        "compute_target_us": (float, 150.0),
        "seed": (_int, 0),
        "out": (str, "out/bench"),
    },
    "decorrelate": {
        "taus": (str, None),
        "cycles": (_int, 2),
        "modes": (_int, 256),
        "hold": (str, "5ms"),
        "sample_dt": (str, "0.25ms"),
        "preset": (str, "ideal"),
        "seed": (_int, 0),
        "out": (str, "out/decorrelate"),
    },
}


def build_parser():
    parser = argparse.ArgumentParser(prog="wfs1d", description="Wavefront-shaping simulations with a 1D phase modulator.")
    parser.add_argument("--version", action="version", version=f"wfs1d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", action="append", default=[], metavar="KEY=VALUE",
                       help="override one parameter (repeatable)")
        p.add_argument("--config-file", default=None, help="key = value file, e.g. a previous config.txt")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--out", default=S, help="output directory")

    p = sub.add_parser("focus", help="measure a TM row, focus, and report the enhancement")
    p.add_argument("--modes", type=int, default=S)
    p.add_argument("--medium", default=S, help="iid | memory:SIGMA | unitary:M")
    p.add_argument("--preset", choices=["ideal", "glv"], default=S)
    p.add_argument("--basis", choices=["hadamard", "fourier"], default=S)
    p.add_argument("--grid", default=S, help="output grid NXxNY, or 'auto'")
    p.add_argument("--exclusion-radius", dest="exclusion_radius", type=int, default=S)
    common(p)

    p = sub.add_parser("elongation", help="speckle elongation versus memory-effect width")
    p.add_argument("--sigmas", default=S, help="comma-separated, e.g. 1,2,3,4,6,8")
    p.add_argument("--grid", default=S)
    p.add_argument("--realizations", type=int, default=S)
    p.add_argument("--oversample", type=int, default=S)
    p.add_argument("--plot", action="store_const", const="true", default=S, help="also render elongation.png")
    common(p)

    p = sub.add_parser("bench", help="streaming-engine benchmark")
    p.add_argument("--modes", type=int, default=S)
    p.add_argument("--mode", choices=["throughput", "simtime"], default=S)
    p.add_argument("--duration", default=S, help="seconds (throughput) or simulated seconds (simtime)")
    p.add_argument("--preset", choices=["ideal", "glv"], default=S)
    p.add_argument("--capacity", type=int, default=S)
    p.add_argument("--block-frames", dest="block_frames", type=int, default=S)
    p.add_argument("--compute-target-us", dest="compute_target_us", type=float, default=S)
    common(p)

    p = sub.add_parser("decorrelate", help="enhancement over time in dynamic media")
    p.add_argument("--taus", default=S, help="comma-separated with units, e.g. 5ms,20ms,100ms")
    p.add_argument("--cycles", type=int, default=S)
    p.add_argument("--modes", type=int, default=S)
    p.add_argument("--hold", default=S)
    p.add_argument("--sample-dt", dest="sample_dt", default=S)
    p.add_argument("--preset", choices=["ideal", "glv"], default=S)
    common(p)
    return parser


def resolve(command, args):
    """Merge defaults, config file, ``--config`` pairs and flags into one dict."""
    spec = COMMANDS[command]
    raw = {k: d for k, (_, d) in spec.items()}
    layers = []
    if args.config_file:
        try:
            kv = read_keyvalue(args.config_file)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        if kv.pop("command", command) != command:
            raise UsageError(f"{args.config_file} was written for a different command")
        layers.append(kv)
    pairs = {}
    for item in args.config:
        if "=" not in item:
            raise UsageError(f"--config expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip().replace("-", "_")] = v.strip()
    layers.append(pairs)
    layers.append({k: v for k, v in vars(args).items() if k in spec})
    for layer in layers:
        unknown = set(layer) - set(spec)
        if unknown:
            raise UsageError(f"unknown parameter(s) for {command}: {', '.join(sorted(unknown))}")
        raw.update(layer)
    out = {}
    for k, (conv, _) in spec.items():
        if raw[k] is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")
        try:
            out[k] = conv(raw[k])
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {exc}") from exc
    return out


def _write_run_files(command, cfg, out, started):
    out.mkdir(parents=True, exist_ok=True)
    write_keyvalue(out / "config.txt", {"command": command, **cfg})
    write_keyvalue(out / "meta.txt", {
        "command": command,
        "version": __version__,
        "started_utc": started.isoformat(),
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "argv": " ".join(sys.argv[1:]),
    })


def _usage(fn):
    """Run ``fn`` turning ValueError into UsageError (validation stage)."""
    try:
        return fn()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _build_medium(cfg, glv_cfg):
    kind, _, arg = cfg["medium"].partition(":")
    grid = None if cfg["grid"] == "auto" else Grid2D.parse(cfg["grid"])
    seed = cfg["seed"]
    if kind == "iid" and not arg:
        grid = grid or Grid2D(16, 16)
        return make_iid_tm(glv_cfg.n_pixels, grid.size, seed, out_grid=grid)
    if kind == "memory":
        grid = grid or Grid2D(64, 64)
        return make_line_medium(grid, MemoryEffectConfig(float(arg)), glv_cfg.n_pixels, seed)
    if kind == "unitary":
        m = int(arg)
        if m < 1:
            raise ValueError("unitary:M needs M >= 1 fiber modes")
        if grid is not None and grid.size != m:
            raise ValueError(f"grid {grid.nx}x{grid.ny} does not hold {m} fiber modes")
        return make_fiber_tm(m, glv_cfg.n_pixels, seed, out_grid=grid)
    raise ValueError(f"unknown medium {cfg['medium']!r}; expected iid, memory:SIGMA or unitary:M")


def cmd_focus(cfg, out):
    def setup():
        basis = make_basis(cfg["basis"], cfg["modes"])
        glv_cfg, det = focusing.device_preset(cfg["preset"], cfg["modes"])
        if basis.n_modes > glv_cfg.signal_capacity:
            raise ValueError(f"{basis.n_modes} modes exceed the {glv_cfg.signal_capacity}-pixel signal region")
        return basis, glv_cfg, det, _build_medium(cfg, glv_cfg)

    basis, glv_cfg, det, medium = _usage(setup)
    target = focusing.default_target(medium.out_grid)
    report = focusing.run_focus_cycle(medium, glv_cfg, basis, target, det,
                                      rng=_rng.stream(cfg["seed"], _rng.DETECTOR),
                                      exclusion_radius=cfg["exclusion_radius"])
    report.metadata.update(medium=cfg["medium"], preset=cfg["preset"], seed=cfg["seed"])
    focusing.write_focus_report(report, out)
    t = report.timing
    print(f"enhancement {report.enhancement:.2f} (ideal phase-only {focusing.ideal_enhancement(basis.n_modes):.1f})")
    print(f"frames {t.n_frames}, TM time {t.tm_time * 1e3:.4f} ms, cycle {t.cycle_time * 1e3:.4f} ms")
    return 0


def cmd_elongation(cfg, out):
    sigmas = _usage(lambda: _float_list(cfg["sigmas"]))
    grid = _usage(lambda: Grid2D.parse(cfg["grid"]))
    if not sigmas or any(s <= 0 for s in sigmas):
        raise UsageError("--sigmas must be a list of values > 0")
    if cfg["realizations"] < 1:
        raise UsageError("--realizations must be >= 1")
    if cfg["oversample"] < 1:
        raise UsageError("--oversample must be >= 1")
    curve = analysis.elongation_sweep(sigmas, grid, cfg["realizations"], cfg["seed"], cfg["oversample"])
    out.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out / "elongation.csv")
    a, p = curve.fit
    write_keyvalue(out / "fit.txt", {"a": repr(a), "exponent": repr(p), "monotone": int(curve.is_monotone())})
    if cfg["plot"]:
        curve.plot(out / "elongation.png")
    for s, m in zip(curve.sigmas, curve.elongation_mean):
        print(f"sigma {s:g}: elongation {m:.3f}")
    print(f"fitted exponent {p:.3f}")
    return 0


def cmd_bench(cfg, out):
    duration = _usage(lambda: parse_duration(cfg["duration"]))
    if not duration > 0:
        raise UsageError("--duration must be > 0")

    def setup():
        basis = make_basis("hadamard", cfg["modes"])
        glv_cfg, det = focusing.device_preset(cfg["preset"], cfg["modes"])
        grid = Grid2D(16, 16)
        medium = make_iid_tm(glv_cfg.n_pixels, grid.size, cfg["seed"], out_grid=grid)
        if cfg["capacity"] < 16:
            raise ValueError("--capacity must be >= 16 frames")
        return basis, glv_cfg, det, medium

    basis, glv_cfg, det, medium = _usage(setup)
    budget = schedule(cfg["modes"], glv_cfg, compute_target=cfg["compute_target_us"] * 1e-6)
    report, metrics = run_stream(medium, glv_cfg, basis, focusing.default_target(medium.out_grid), det, budget,
                                 mode=cfg["mode"], seed=cfg["seed"], capacity=cfg["capacity"],
                                 block_frames=cfg["block_frames"], duration=duration)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write(out / "metrics.txt")
    metrics.write_histogram(out / "latency_histogram.csv")
    write_keyvalue(out / "wallclock.txt", metrics.wallclock())
    p99 = metrics.compute_p99
    verdict = "PASS" if p99 <= budget.compute_target else "FAIL"
    print(f"frames/s {metrics.frames_per_second:.0f} ({metrics.frames} frames, {metrics.cycles} cycles)")
    print(f"compute p99 {p99 * 1e6:.1f} us vs target {budget.compute_target * 1e6:.0f} us: {verdict}")
    print(f"deadline misses {metrics.deadline_misses}, queue high-watermark {metrics.queue_high_watermark}")
    if report is not None:
        print(f"enhancement {report.enhancement:.2f}")
    return 0


def cmd_decorrelate(cfg, out):
    taus = _usage(lambda: _duration_list(cfg["taus"]))
    hold = _usage(lambda: parse_duration(cfg["hold"]))
    sample_dt = _usage(lambda: parse_duration(cfg["sample_dt"]))
    if not taus or any(t <= 0 for t in taus):
        raise UsageError("--taus must be a list of durations > 0")
    if cfg["cycles"] < 1 or not hold > 0 or not sample_dt > 0:
        raise UsageError("--cycles, --hold and --sample-dt must be positive")
    _usage(lambda: make_basis("hadamard", cfg["modes"]))
    traces = focusing.decorrelation_sweep(taus, n_modes=cfg["modes"], hold_time=hold, n_cycles=cfg["cycles"],
                                          sample_dt=sample_dt, preset=cfg["preset"], seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, tr in enumerate(traces):
        write_csv(out / f"timeseries_{i}.csv", ["t_seconds", "eta"], zip(tr.times, tr.eta))
        rows.append((tr.tau, tr.mean_eta, f"timeseries_{i}.csv"))
        print(f"tau {tr.tau * 1e3:g} ms: mean enhancement {tr.mean_eta:.2f}")
    write_csv(out / "summary.csv", ["tau_seconds", "mean_eta", "file"], rows)
    return 0


HANDLERS = {"focus": cmd_focus, "elongation": cmd_elongation, "bench": cmd_bench, "decorrelate": cmd_decorrelate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = datetime.now(timezone.utc)
    try:
        cfg = resolve(args.command, args)
        out = Path(cfg["out"])
        t0 = time.perf_counter()
        code = HANDLERS[args.command](cfg, out)
        _write_run_files(args.command, cfg, out, started)
        print(f"wrote {out} ({time.perf_counter() - t0:.1f} s)")
        return code
    except UsageError as exc:
        print(f"wfs1d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"wfs1d {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
