"""Two-stage streaming engine: frame producer -> bounded queue -> consumer.

The producer emits measurement frames (ADC samples per frame) into a
single-producer/single-consumer ring buffer. The consumer averages each
frame, slots it by (mode, reference), and once a cycle's ``3 N`` frames
are in, recovers the coefficients and computes the conjugate mask.

Two clock domains are supported. ``simtime`` derives every timestamp from
the frame schedule and modeled per-frame costs, so its metrics are
deterministic. ``throughput`` replays pre-synthesized frames as fast as
possible and measures the wall clock.
"""

import bisect
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .. import _rng
from ..focusing import FocusReport, conjugate_mask, enhancement, focus_pattern, output_image
from ..formats import write_csv, write_keyvalue
from ..measurement import DetectorModel, recover_field, tm_frames
from ..medium import DynamicMediumState
from .timing import schedule, settle_skip


class QueueClosed(Exception):
    """The other side of the queue has shut down."""


class StreamAborted(RuntimeError):
    """The consumer failed; ``metrics`` holds what was measured so far."""

    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


class FrameQueue:
    """Bounded SPSC ring of frame records.

    ``put`` blocks while the ring is full, so frames are never dropped.
    ``get`` hands out read-only views of the oldest contiguous run of
    frames; the consumer calls ``release`` once it is done with them.
    While the consumer holds ``gate`` the producer does not copy frames in,
    so the mask computation is not interleaved with producer work.
    """

    def __init__(self, capacity, adc_samples):
        if capacity < 16:
            raise ValueError(f"queue capacity must be >= 16 frames, got {capacity}")
        self.capacity = int(capacity)
        self.frame_index = np.zeros(capacity, dtype=np.uint64)
        self.mode_index = np.zeros(capacity, dtype=np.uint32)
        self.ref_index = np.zeros(capacity, dtype=np.uint8)
        self.samples = np.zeros((capacity, adc_samples), dtype=float)
        self._head = 0  # total frames written
        self._tail = 0  # total frames released
        self._closed = False
        self._aborted = False
        self._last_index = -1
        self.high_watermark = 0
        self.producer_waits = 0
        self._cv = threading.Condition()
        self.gate = threading.Lock()

    def __len__(self):
        return self._head - self._tail

    def put(self, frame_index, mode_index, ref_index, samples):
        """Enqueue a block of frames (blocking while full)."""
        frame_index = np.asarray(frame_index, dtype=np.uint64)
        n = frame_index.shape[0]
        if n == 0:
            return
        if int(frame_index[0]) <= self._last_index or (n > 1 and np.any(np.diff(frame_index.astype(np.int64)) <= 0)):
            raise ValueError("frame indices must be strictly increasing")
        done = 0
        while done < n:
            with self._cv:
                while self._head - self._tail >= self.capacity and not self._aborted:
                    self.producer_waits += 1
                    self._cv.wait()
                if self._aborted:
                    raise QueueClosed("consumer aborted")
                free = self.capacity - (self._head - self._tail)
                start = self._head % self.capacity
            k = min(n - done, free, self.capacity - start)
            sl = slice(start, start + k)
            with self.gate:
                self.frame_index[sl] = frame_index[done:done + k]
                self.mode_index[sl] = mode_index[done:done + k]
                self.ref_index[sl] = ref_index[done:done + k]
                self.samples[sl] = samples[done:done + k]
            with self._cv:
                self._head += k
                self.high_watermark = max(self.high_watermark, self._head - self._tail)
                self._cv.notify()
            done += k
        self._last_index = int(frame_index[-1])

    def get(self, max_frames):
        """Views of up to ``max_frames`` queued frames, or ``None`` once closed and drained."""
        with self._cv:
            while self._head == self._tail and not self._closed:
                self._cv.wait()
            if self._head == self._tail:
                return None
            start = self._tail % self.capacity
            k = min(self._head - self._tail, max_frames, self.capacity - start)
        sl = slice(start, start + k)
        views = (self.frame_index[sl], self.mode_index[sl], self.ref_index[sl], self.samples[sl])
        for v in views:
            v.flags.writeable = False
        return views

    def release(self, n):
        with self._cv:
            self._tail += n
            self._cv.notify()

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def abort(self):
        with self._cv:
            self._aborted = True
            self._closed = True
            self._cv.notify_all()


def _percentiles(values):
    if len(values) == 0:
        return float("nan"), float("nan")
    p50, p99 = np.percentile(values, [50, 99])
    return float(p50), float(p99)


@dataclass
class StreamMetrics:
    mode: str
    n_modes: int
    capacity: int
    frames: int = 0
    cycles: int = 0
    elapsed: float = 0.0
    queue_high_watermark: int = 0
    deadline_misses: int = 0
    mask_deadline_misses: int = 0
    producer_stalls: int = 0
    aborted: bool = False
    error: str = ""
    latencies: dict = field(default_factory=dict)
    compute_times: list = field(default_factory=list)
    coefficients: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def frames_per_second(self):
        return self.frames / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def compute_p50(self):
        return _percentiles(self.compute_times)[0]

    @property
    def compute_p99(self):
        return _percentiles(self.compute_times)[1]

    def latency_percentiles(self, stage):
        return _percentiles(self.latencies.get(stage, ()))

    @property
    def deterministic(self):
        """Simulated-time and replay metrics never depend on the wall clock."""
        return self.mode != "throughput"

    def wallclock(self):
        """Measured compute-stage timing (always wall clock)."""
        return {"compute_p50_s": repr(self.compute_p50), "compute_p99_s": repr(self.compute_p99),
                "compute_max_s": repr(max(self.compute_times, default=float("nan")))}

    def summary(self):
        """Key-value export; wall-clock compute timings only outside simulated time."""
        out = {
            "mode": self.mode,
            "n_modes": self.n_modes,
            "capacity": self.capacity,
            "frames": self.frames,
            "cycles": self.cycles,
            "elapsed_s": repr(self.elapsed),
            "frames_per_second": repr(self.frames_per_second),
            "queue_high_watermark": self.queue_high_watermark,
            "deadline_misses": self.deadline_misses,
            "mask_deadline_misses": self.mask_deadline_misses,
            "producer_stalls": self.producer_stalls,
            "aborted": int(self.aborted),
        }
        if not self.deterministic:
            out.update(self.wallclock())
        for stage in sorted(self.latencies):
            p50, p99 = self.latency_percentiles(stage)
            out[f"{stage}_latency_p50_s"] = repr(p50)
            out[f"{stage}_latency_p99_s"] = repr(p99)
        if self.error:
            out["error"] = self.error
        return out

    def write(self, path):
        write_keyvalue(path, self.summary())

    def write_histogram(self, path, n_bins=50):
        """CSV latency histogram: stage, bin_lo_s, bin_hi_s, count."""
        rows = []
        stages = dict(self.latencies)
        if self.compute_times and not self.deterministic:
            stages["compute"] = self.compute_times
        for stage in sorted(stages):
            values = np.asarray(stages[stage], dtype=float)
            if values.size == 0:
                continue
            counts, edges = np.histogram(values, bins=n_bins)
            rows += [(stage, float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
        write_csv(path, ["stage", "bin_lo_s", "bin_hi_s", "count"], rows)


class Consumer:
    """Frame averaging, coefficient recovery and mask computation.

    Shared by the live engine and trace replay so both follow the same
    arithmetic.
    """

    def __init__(self, basis, adc_samples, settle_fraction, metrics, on_cycle=None, gate=None):
        self.basis = basis
        self.skip = settle_skip(adc_samples, settle_fraction)
        if self.skip >= adc_samples:
            raise ValueError(f"settle exclusion discards all {adc_samples} samples")
        self.n_frames = 3 * basis.n_modes
        self.levels = np.empty((3, basis.n_modes))  # [ref, mode], rows contiguous
        self.filled = 0
        self.metrics = metrics
        self.on_cycle = on_cycle
        self.gate = gate

    def process(self, mode_index, ref_index, samples):
        """Consume a block of frames; returns the number of cycles completed."""
        avg = np.maximum(np.ascontiguousarray(samples[:, self.skip:]).mean(axis=1), 0.0)
        n = avg.shape[0]
        done = 0
        pos = 0
        while pos < n:
            k = min(n - pos, self.n_frames - self.filled)
            self.levels[ref_index[pos:pos + k], mode_index[pos:pos + k]] = avg[pos:pos + k]
            self.filled += k
            pos += k
            if self.filled == self.n_frames:
                self._finish_cycle()
                done += 1
        self.metrics.frames += n
        return done

    def _finish_cycle(self):
        if self.gate is not None:
            self.gate.acquire()
        try:
            t0 = time.perf_counter()
            coeffs = recover_field(self.levels[0], self.levels[1], self.levels[2])
            phases = conjugate_mask(coeffs, self.basis)
            self.metrics.compute_times.append(time.perf_counter() - t0)
        finally:
            if self.gate is not None:
                self.gate.release()
        self.metrics.coefficients.append(coeffs)
        self.metrics.masks.append(phases)
        self.metrics.cycles += 1
        self.filled = 0
        if self.on_cycle is not None:
            self.on_cycle(coeffs, phases)


class SimClock:
    """Deterministic event model of the two stages.

    Frame ``k`` (``j``-th of its cycle) is ready at ``r = T_c + (j + 1) P``
    and must be processed by ``r + P``. The producer enqueues it at
    ``e = max(r, e_prev, s_{k - C})`` (it blocks while ``C`` frames wait);
    the consumer starts it at ``s = max(e, f_prev)`` and finishes at
    ``f = s + cost``. Consumer start times do not depend on ``C``.
    """

    def __init__(self, budget, capacity, consumer_cost, compute_cost, injected_delays=None):
        self.P = budget.frame_period
        self.cycle_time = budget.cycle_time
        self.transfer = budget.transfer_compute_time
        self.n_frames = budget.n_frames
        self.capacity = capacity
        self.consumer_cost = consumer_cost
        self.compute_cost = compute_cost
        self.injected = dict(injected_delays or {})
        self.starts = []
        self.e_prev = 0.0
        self.f_prev = 0.0
        self.end = 0.0
        self.misses = 0
        self.mask_misses = 0
        self.stalls = 0
        self.high_watermark = 0
        self.stage = {"producer": [], "queue": [], "consumer": [], "end_to_end": []}

    def frame(self, k):
        c, j = divmod(k, self.n_frames)
        r = c * self.cycle_time + (j + 1) * self.P
        e = max(r, self.e_prev)
        if k >= self.capacity:
            e = max(e, self.starts[k - self.capacity])
        s = max(e, self.f_prev)
        f = s + self.consumer_cost + self.injected.get(k, 0.0)
        if e > r:
            self.stalls += 1
        if f > r + self.P:
            self.misses += 1
        # frames enqueued but not yet started when frame k arrives
        waiting = len(self.starts) - bisect.bisect_right(self.starts, e) + 1
        self.high_watermark = max(self.high_watermark, min(waiting, self.capacity))
        self.starts.append(s)
        self.stage["producer"].append(e - r)
        self.stage["queue"].append(s - e)
        self.stage["consumer"].append(f - s)
        self.stage["end_to_end"].append(f - r)
        self.e_prev, self.f_prev = e, f
        self.end = max(self.end, f)
        if j == self.n_frames - 1:
            done = f + self.compute_cost
            if done > r + self.transfer:
                self.mask_misses += 1
            self.f_prev = done
            self.end = max(self.end, done)


def _cycle_frames(medium, glv_cfg, basis, target, det, rng, start_index):
    frames = list(tm_frames(medium, glv_cfg, basis, target, det, rng, start_index))
    idx = np.array([f.frame_index for f in frames], dtype=np.uint64)
    modes = np.array([f.mode_index for f in frames], dtype=np.uint32)
    refs = np.array([f.ref_index for f in frames], dtype=np.uint8)
    samples = np.stack([f.samples for f in frames])
    return idx, modes, refs, samples


def run_stream(medium, glv_cfg, basis, target, det=None, budget=None, *, mode="simtime", seed=0,
               rng=None, capacity=4096, block_frames=512, cycles=1, duration=None,
               consumer_cost=0.5e-6, compute_cost=None, injected_delays=None,
               record_trace=None, consumer_hook=None, exclusion_radius=3):
    """Stream ``cycles`` TM measurements through the two-stage engine.

    ``simtime`` synthesizes each cycle's frames with the detector model and
    times them with ``SimClock`` (per-frame ``consumer_cost`` plus any
    ``injected_delays`` keyed by frame index, mask ``compute_cost``,
    defaulting to the compute target). ``throughput`` synthesizes one cycle
    and replays it until ``cycles`` or ``duration`` seconds are done.
    With ``duration`` set in simtime, the cycle count is
    ``max(1, floor(duration / cycle_time))``.

    Returns ``(FocusReport, StreamMetrics)`` for the last completed cycle.
    A consumer exception raises ``StreamAborted`` carrying partial metrics.
    ``record_trace`` names a trace file receiving every consumed frame.
    """
    if mode not in ("simtime", "throughput"):
        raise ValueError(f"unknown stream mode {mode!r}")
    if duration is not None and not duration > 0:
        raise ValueError(f"duration must be > 0, got {duration}")
    if block_frames < 1:
        raise ValueError("block_frames must be >= 1")
    det = det or DetectorModel()
    budget = budget or schedule(basis.n_modes, glv_cfg)
    rng = rng if rng is not None else _rng.stream(seed, _rng.DETECTOR)
    if mode == "simtime" and duration is not None:
        cycles = max(1, int(duration // budget.cycle_time))
    queue = FrameQueue(capacity, det.adc_samples_per_frame)
    metrics = StreamMetrics(mode, basis.n_modes, capacity)
    consumer = Consumer(basis, det.adc_samples_per_frame, det.settle_fraction, metrics, gate=queue.gate)
    clock = None
    if mode == "simtime":
        clock = SimClock(budget, capacity, consumer_cost,
                         budget.compute_target if compute_cost is None else compute_cost, injected_delays)
    writer = None
    if record_trace is not None:
        from .trace import TraceWriter

        writer = TraceWriter(record_trace, basis.n_modes, det.adc_samples_per_frame, budget.frame_period)
    failure = []
    producer_error = []
    block_log = []  # (n, t_enqueued) per block in throughput mode
    done_log = []

    def produce():
        try:
            if mode == "simtime":
                for c in range(cycles):
                    idx, modes, refs, samples = _cycle_frames(medium, glv_cfg, basis, target, det, rng,
                                                              c * budget.n_frames)
                    for a in range(0, len(idx), block_frames):
                        b = a + block_frames
                        queue.put(idx[a:b], modes[a:b], refs[a:b], samples[a:b])
                    if isinstance(medium, DynamicMediumState) and c < cycles - 1:
                        medium.evolve(budget.transfer_compute_time + glv_cfg.frame_period)
            else:
                idx, modes, refs, samples = _cycle_frames(medium, glv_cfg, basis, target, det, rng, 0)
                n = len(idx)
                t_stop = None if duration is None else time.perf_counter() + duration
                c = 0
                while True:
                    if t_stop is None and c >= cycles:
                        break
                    if t_stop is not None and c > 0 and time.perf_counter() >= t_stop:
                        break
                    base = np.uint64(c * n)
                    for a in range(0, n, block_frames):
                        b = min(a + block_frames, n)
                        queue.put(idx[a:b] + base, modes[a:b], refs[a:b], samples[a:b])
                        block_log.append((b - a, time.perf_counter()))
                    c += 1
        except QueueClosed:
            pass
        except BaseException as exc:  # surfaced after join
            producer_error.append(exc)
        finally:
            queue.close()

    def consume():
        try:
            while True:
                got = queue.get(block_frames)
                if got is None:
                    break
                idx, modes, refs, samples = got
                if consumer_hook is not None:
                    consumer_hook(idx, modes, refs, samples)
                if writer is not None:
                    writer.write_block(idx, modes, refs, samples)
                if clock is not None:
                    for k in idx:
                        clock.frame(int(k))
                consumer.process(modes, refs, samples)
                queue.release(len(idx))
                if mode == "throughput":
                    done_log.append(time.perf_counter())
        except BaseException as exc:
            failure.append(exc)
            queue.abort()

    t0 = time.perf_counter()
    threads = [threading.Thread(target=produce, name="wfs-producer"),
               threading.Thread(target=consume, name="wfs-consumer")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    if writer is not None:
        writer.close()

    if clock is not None:
        metrics.elapsed = clock.end
        metrics.deadline_misses = clock.misses
        metrics.mask_deadline_misses = clock.mask_misses
        metrics.producer_stalls = clock.stalls
        metrics.queue_high_watermark = clock.high_watermark
        metrics.latencies = {k: np.asarray(v) for k, v in clock.stage.items()}
    else:
        metrics.elapsed = wall
        metrics.queue_high_watermark = queue.high_watermark
        metrics.producer_stalls = queue.producer_waits
        m = min(len(block_log), len(done_log))
        if m:
            counts = np.array([n for n, _ in block_log[:m]])
            lat = np.array(done_log[:m]) - np.array([t for _, t in block_log[:m]])
            metrics.latencies = {"end_to_end": np.repeat(lat, counts)}

    if failure:
        metrics.aborted = True
        metrics.error = f"{type(failure[0]).__name__}: {failure[0]}"
        raise StreamAborted(f"consumer failed: {metrics.error}", metrics) from failure[0]
    if producer_error:
        raise producer_error[0]
    if not metrics.masks:
        return None, metrics

    mask = focus_pattern(metrics.masks[-1], glv_cfg)
    if isinstance(medium, DynamicMediumState):
        medium.evolve(budget.transfer_compute_time + glv_cfg.frame_period)
    image = output_image(medium, glv_cfg, mask)
    report = FocusReport(mask=mask, enhancement=enhancement(image, target, exclusion_radius),
                         target=tuple(target), n_modes=basis.n_modes, timing=budget,
                         intensity_image=image, coefficients=metrics.coefficients[-1])
    report.metadata["stream_mode"] = mode
    report.metadata["cycles"] = metrics.cycles
    return report, metrics
