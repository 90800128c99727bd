import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wfs1d import _rng
from wfs1d.focusing import device_preset, run_focus_cycle
from wfs1d.measurement import DetectorModel, coefficients, hadamard_basis, measure_tm_column
from wfs1d.medium import DynamicMediumState, Grid2D, make_iid_tm
from wfs1d.pipeline import (FrameQueue, StreamAborted, TraceFormatError, frame_average, frame_average_block,
                            read_trace, replay_trace, run_stream, schedule, settle_skip, write_trace)
from wfs1d.pipeline.trace import HEADER, record_dtype
from wfs1d.slm import GlvConfig

GRID = Grid2D(8, 8)
TARGET = (4, 4)


def _setup(n=32, preset="ideal", seed=0):
    cfg, det = device_preset(preset, n)
    tm = make_iid_tm(cfg.n_pixels, GRID.size, seed, out_grid=GRID)
    return tm, cfg, hadamard_basis(n), det


class TestSchedule:
    def test_256(self):
        b = schedule(256)
        assert b.n_frames == 768
        assert b.tm_time == pytest.approx(2.1504e-3, abs=1e-15)
        assert abs(b.cycle_time - 2.4e-3) < 0.05e-3

    def test_one_mode(self):
        b = schedule(1)
        assert b.n_frames == 3 and b.tm_time == pytest.approx(8.4e-6)

    def test_invariants(self):
        cfg = GlvConfig().with_nominal_period()
        b = schedule(100, cfg)
        assert b.tm_time == b.n_frames * cfg.frame_period
        assert b.cycle_time == b.tm_time + b.transfer_compute_time + cfg.frame_period

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            schedule(0)


class TestFrameAverage:
    def test_examples(self):
        assert frame_average([9, 1, 1, 1], 0.25) == 1.0
        assert frame_average([1, 2, 3, 6], 0.0) == 3.0

    def test_default_fraction(self):
        assert settle_skip(64, 300e-9 / 2.8e-6) == 7

    def test_errors(self):
        with pytest.raises(ValueError):
            frame_average([], 0.1)
        with pytest.raises(ValueError):
            frame_average([1.0], 0.6)
        with pytest.raises(ValueError):
            frame_average([1.0], 0.4)

    def test_transient_oracle(self):
        # ribbons settle within 300 ns: exponential with a time constant of one fifth of that
        t = np.arange(64) * 2.8e-6 / 64
        frame = 1.0 + 5.0 * np.exp(-t / 60e-9)  # previous level 6, steady state 1
        assert abs(frame_average(frame, 0.0) - 1.0) > 0.03
        assert abs(frame_average(frame) - 1.0) < 0.01

    def test_block_matches_rows(self):
        blk = np.random.default_rng(0).random((10, 64))
        assert np.allclose(frame_average_block(blk), [frame_average(r) for r in blk], rtol=1e-15)


class TestQueue:
    def test_capacity_minimum(self):
        with pytest.raises(ValueError):
            FrameQueue(8, 4)

    def test_fifo_and_backpressure(self):
        q = FrameQueue(16, 2)
        n = 1000
        idx = np.arange(n, dtype=np.uint64)
        got = []

        def consume():
            while True:
                v = q.get(7)
                if v is None:
                    break
                got.extend(v[0].tolist())
                assert not v[3].flags.writeable
                q.release(len(v[0]))

        t = threading.Thread(target=consume)
        t.start()
        for a in range(0, n, 50):
            q.put(idx[a:a + 50], idx[a:a + 50] % 7, idx[a:a + 50] % 3, np.zeros((50, 2)))
        q.close()
        t.join()
        assert got == list(range(n))
        assert q.high_watermark <= 16

    def test_strictly_increasing(self):
        q = FrameQueue(16, 1)
        q.put([3], [0], [0], np.zeros((1, 1)))
        with pytest.raises(ValueError):
            q.put([3], [0], [0], np.zeros((1, 1)))
        with pytest.raises(ValueError):
            q.put([5, 4], [0, 0], [0, 0], np.zeros((2, 1)))


class TestStream:
    @pytest.mark.parametrize("preset", ["ideal", "glv"])
    def test_equivalent_to_batch(self, preset):
        tm, cfg, b, det = _setup(64, preset)
        batch = coefficients(measure_tm_column(tm, cfg, b, TARGET, det, _rng.stream(3, _rng.DETECTOR)))
        report, m = run_stream(tm, cfg, b, TARGET, det, seed=3, capacity=64, block_frames=40)
        assert np.max(np.abs(m.coefficients[0] - batch)) <= 1e-12
        ref = run_focus_cycle(tm, cfg, b, TARGET, det, rng=_rng.stream(3, _rng.DETECTOR))
        assert report.enhancement == pytest.approx(ref.enhancement, rel=1e-12)

    def test_dynamic_equivalent(self):
        tm, cfg, b, det = _setup(32)
        s1 = DynamicMediumState(tm, 5e-3, seed=1)
        s2 = DynamicMediumState(tm, 5e-3, seed=1)
        batch = run_focus_cycle(s1, cfg, b, TARGET, det, rng=_rng.stream(0, _rng.DETECTOR))
        report, m = run_stream(s2, cfg, b, TARGET, det, seed=0)
        assert np.max(np.abs(m.coefficients[0] - batch.coefficients)) <= 1e-12
        assert report.enhancement == pytest.approx(batch.enhancement, rel=1e-12)

    def test_simtime_deterministic(self):
        tm, cfg, b, det = _setup(32, "glv")
        runs = [run_stream(tm, cfg, b, TARGET, det, seed=1, cycles=2, capacity=16)[1] for _ in range(2)]
        assert runs[0].summary() == runs[1].summary()
        assert runs[0].frames == 2 * 96 and runs[0].cycles == 2

    def test_default_no_misses(self):
        tm, cfg, b, det = _setup(64)
        _, m = run_stream(tm, cfg, b, TARGET, det)
        assert m.deadline_misses == 0 and m.mask_deadline_misses == 0
        # sustained rate includes the transfer/compute gap of each cycle
        timing = schedule(64, cfg)
        assert m.frames_per_second == pytest.approx(timing.n_frames / m.elapsed)
        assert m.frames_per_second < 1 / cfg.frame_period

    def test_injected_delay_oracle(self):
        tm, cfg, b, det = _setup(32)
        P = cfg.frame_period
        # frame 10 takes 3 periods: it misses, and the backlog makes frames 11 and 12 miss too
        _, m = run_stream(tm, cfg, b, TARGET, det, consumer_cost=0.5e-6, injected_delays={10: 3 * P})
        backlog = 0.5e-6 + 3 * P
        expected = 0
        for k in range(10, 96):
            if backlog > P:
                expected += 1
            backlog = max(0.0, backlog - P) + 0.5e-6
        assert m.deadline_misses == expected
        assert m.deadline_misses >= 2

    def test_slow_consumer_misses(self):
        tm, cfg, b, det = _setup(32)
        _, m = run_stream(tm, cfg, b, TARGET, det, consumer_cost=1.5 * cfg.frame_period)
        assert m.deadline_misses > 0
        assert m.latency_percentiles("end_to_end")[1] > cfg.frame_period

    @settings(max_examples=15, deadline=None)
    @given(st.integers(16, 200), st.integers(1, 200), st.dictionaries(st.integers(0, 95), st.floats(0, 50e-6),
                                                                      max_size=5))
    def test_capacity_monotone(self, small, extra, delays):
        tm, cfg, b, det = _setup(32)
        kw = dict(consumer_cost=2.0e-6, injected_delays=delays, cycles=2)
        m_small = run_stream(tm, cfg, b, TARGET, det, capacity=small, **kw)[1]
        m_big = run_stream(tm, cfg, b, TARGET, det, capacity=small + extra, **kw)[1]
        assert m_big.deadline_misses <= m_small.deadline_misses
        assert m_big.producer_stalls <= m_small.producer_stalls

    def test_small_queue_stalls_producer(self):
        tm, cfg, b, det = _setup(32)
        _, m = run_stream(tm, cfg, b, TARGET, det, capacity=16, consumer_cost=4 * cfg.frame_period)
        assert m.producer_stalls > 0
        assert m.queue_high_watermark == 16

    def test_throughput_mode(self):
        tm, cfg, b, det = _setup(64, "glv")
        report, m = run_stream(tm, cfg, b, TARGET, det, mode="throughput", cycles=20)
        assert m.frames == 20 * 192 and m.cycles == 20
        assert len(m.compute_times) == 20
        assert all(np.array_equal(c, m.coefficients[0]) for c in m.coefficients)
        assert m.frames_per_second > 0
        assert "compute_p99_s" in m.summary()

    def test_consumer_exception_aborts(self):
        tm, cfg, b, det = _setup(32)
        seen = []

        def hook(idx, *_):
            seen.append(int(idx[0]))
            if len(seen) == 3:
                raise RuntimeError("boom")

        with pytest.raises(StreamAborted) as exc:
            run_stream(tm, cfg, b, TARGET, det, capacity=16, block_frames=8, consumer_hook=hook)
        m = exc.value.metrics
        assert m.aborted and "boom" in m.error
        assert m.frames == 16 and m.cycles == 0

    def test_bad_args(self):
        tm, cfg, b, det = _setup(32)
        with pytest.raises(ValueError):
            run_stream(tm, cfg, b, TARGET, det, capacity=8)
        with pytest.raises(ValueError):
            run_stream(tm, cfg, b, TARGET, det, mode="realtime")
        with pytest.raises(ValueError):
            run_stream(tm, cfg, b, TARGET, det, duration=0)

    def test_metrics_export(self, tmp_path):
        tm, cfg, b, det = _setup(32)
        _, m = run_stream(tm, cfg, b, TARGET, det, consumer_cost=1e-6)
        m.write(tmp_path / "m.txt")
        m.write_histogram(tmp_path / "h.csv")
        text = (tmp_path / "m.txt").read_text()
        assert "deadline_misses = 0" in text and "compute_p99_s" not in text
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "stage,bin_lo_s,bin_hi_s,count"


class TestTrace:
    def test_replay_bit_exact(self, tmp_path):
        tm, cfg, b, det = _setup(64, "glv")
        _, live = run_stream(tm, cfg, b, TARGET, det, seed=2, cycles=2, record_trace=tmp_path / "t.wftr")
        rep = replay_trace(tmp_path / "t.wftr", b, det.settle_fraction)
        assert rep.cycles == 2
        for a, c in zip(live.coefficients, rep.coefficients):
            assert np.array_equal(a, c)
        assert all(np.array_equal(a, c) for a, c in zip(live.masks, rep.masks))

    def test_layout(self, tmp_path):
        tm, cfg, b, det = _setup(4)
        run_stream(tm, cfg, b, TARGET, det, record_trace=tmp_path / "t.wftr")
        raw = (tmp_path / "t.wftr").read_bytes()
        assert raw[:4] == b"WFTR"
        magic, version, n_modes, adc, period_ns = HEADER.unpack_from(raw)
        assert (version, n_modes, adc, period_ns) == (1, 4, 64, 2800)
        assert len(raw) == 24 + 12 * (8 + 4 + 1 + 8 * 64)
        assert raw[24 + 8 + 4] == 0 and raw[24 + 525 + 8 + 4] == 1  # ref_index of frames 0 and 1

    def test_empty(self, tmp_path):
        write_trace(tmp_path / "e.wftr", 8, 16, 2.8e-6, [])
        m = replay_trace(tmp_path / "e.wftr")
        assert m.frames == 0 and m.cycles == 0 and m.coefficients == []

    def test_truncated(self, tmp_path):
        tm, cfg, b, det = _setup(4)
        p = tmp_path / "t.wftr"
        run_stream(tm, cfg, b, TARGET, det, record_trace=p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(TraceFormatError) as exc:
            read_trace(p)
        assert exc.value.record_index == 11
        assert "record 11" in str(exc.value)

    def test_malformed_record(self, tmp_path):
        p = tmp_path / "t.wftr"
        tm, cfg, b, det = _setup(4)
        run_stream(tm, cfg, b, TARGET, det, record_trace=p)
        raw = bytearray(p.read_bytes())
        rec = record_dtype(64)
        arr = np.frombuffer(bytes(raw[24:]), dtype=rec).copy()
        arr["ref_index"][5] = 7
        p.write_bytes(bytes(raw[:24]) + arr.tobytes())
        with pytest.raises(TraceFormatError) as exc:
            read_trace(p)
        assert exc.value.record_index == 5

    def test_non_increasing(self, tmp_path):
        p = tmp_path / "t.wftr"
        tm, cfg, b, det = _setup(4)
        run_stream(tm, cfg, b, TARGET, det, record_trace=p)
        raw = p.read_bytes()
        arr = np.frombuffer(raw[24:], dtype=record_dtype(64)).copy()
        arr["frame_index"][7] = 2
        p.write_bytes(raw[:24] + arr.tobytes())
        with pytest.raises(TraceFormatError) as exc:
            read_trace(p)
        assert exc.value.record_index == 7

    def test_bad_header(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(TraceFormatError, match="magic"):
            read_trace(tmp_path / "x")
        (tmp_path / "y").write_bytes(b"WFTR")
        with pytest.raises(TraceFormatError):
            read_trace(tmp_path / "y")

    def test_partial_cycle_no_mask(self, tmp_path):
        tm, cfg, b, det = _setup(4)
        p = tmp_path / "t.wftr"
        run_stream(tm, cfg, b, TARGET, det, record_trace=p)
        size = record_dtype(64).itemsize
        p.write_bytes(p.read_bytes()[:24 + 5 * size])
        m = replay_trace(p, b)
        assert m.frames == 5 and m.cycles == 0
