"""Binary frame-trace files and offline replay.

Little-endian layout: a header (magic ``WFTR``, version u32, n_modes u32,
adc_samples_per_frame u32, frame_period_ns u64) followed by one record per
frame: frame_index u64, mode_index u32, ref_index u8 (0, 1, 2 for the
reference phases 0, pi/2, pi), then adc_samples_per_frame float64 reads.
"""

import struct

import numpy as np

from ..measurement import hadamard_basis
from .stream import Consumer, StreamMetrics

MAGIC = b"WFTR"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")


class TraceFormatError(ValueError):
    """Malformed trace; ``record_index`` is the first bad record (None for the header)."""

    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


def record_dtype(adc_samples):
    return np.dtype([("frame_index", "<u8"), ("mode_index", "<u4"), ("ref_index", "u1"),
                     ("samples", "<f8", (adc_samples,))])


class TraceWriter:
    def __init__(self, path, n_modes, adc_samples, frame_period):
        self.dtype = record_dtype(adc_samples)
        self.fh = open(path, "wb")
        self.fh.write(HEADER.pack(MAGIC, VERSION, n_modes, adc_samples, int(round(frame_period * 1e9))))

    def write_block(self, frame_index, mode_index, ref_index, samples):
        rec = np.empty(len(frame_index), dtype=self.dtype)
        rec["frame_index"] = frame_index
        rec["mode_index"] = mode_index
        rec["ref_index"] = ref_index
        rec["samples"] = samples
        self.fh.write(rec.tobytes())

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trace(path, n_modes, adc_samples, frame_period, frames):
    """Write ``FrameSample``-like records (attributes frame_index, mode_index,
    ref_index, samples) to ``path``."""
    frames = list(frames)
    with TraceWriter(path, n_modes, adc_samples, frame_period) as w:
        if frames:
            w.write_block([f.frame_index for f in frames], [f.mode_index for f in frames],
                          [f.ref_index for f in frames], np.stack([f.samples for f in frames]))


def read_trace(path):
    """``(header dict, record array)``, validating every record."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise TraceFormatError(f"{path}: file shorter than the trace header")
    magic, version, n_modes, adc, period_ns = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {version}")
    if n_modes < 1 or adc < 1:
        raise TraceFormatError(f"{path}: header has n_modes={n_modes}, adc_samples_per_frame={adc}")
    dtype = record_dtype(adc)
    body = len(raw) - HEADER.size
    n_full, extra = divmod(body, dtype.itemsize)
    if extra:
        raise TraceFormatError(f"{path}: record {n_full} is truncated ({extra} of {dtype.itemsize} bytes)",
                               n_full)
    rec = np.frombuffer(raw, dtype=dtype, offset=HEADER.size, count=n_full)
    header = {"n_modes": n_modes, "adc_samples_per_frame": adc, "frame_period": period_ns * 1e-9}
    if n_full:
        fi = rec["frame_index"].astype(np.int64)
        bad = np.flatnonzero(np.diff(fi) <= 0)
        checks = [
            (bad + 1, "frame_index not strictly increasing"),
            (np.flatnonzero(rec["mode_index"] >= n_modes), f"mode_index out of range for {n_modes} modes"),
            (np.flatnonzero(rec["ref_index"] > 2), "ref_index must be 0, 1 or 2"),
            (np.flatnonzero(~np.all(np.isfinite(rec["samples"]), axis=1)), "non-finite sample"),
        ]
        firsts = [(int(ix[0]), msg) for ix, msg in checks if ix.size]
        if firsts:
            i, msg = min(firsts)
            raise TraceFormatError(f"{path}: record {i}: {msg}", i)
    return header, rec


def replay_trace(path, basis=None, settle_fraction=0.0, block_frames=256):
    """Run a recorded trace through the streaming consumer.

    Returns ``StreamMetrics`` with the recovered coefficients and masks of
    every complete cycle. An empty trace yields empty metrics.
    """
    header, rec = read_trace(path)
    n_modes = header["n_modes"]
    basis = basis or hadamard_basis(n_modes)
    if basis.n_modes != n_modes:
        raise ValueError(f"trace has {n_modes} modes but the basis has {basis.n_modes}")
    metrics = StreamMetrics("replay", n_modes, capacity=0)
    if len(rec) == 0:
        return metrics
    consumer = Consumer(basis, header["adc_samples_per_frame"], settle_fraction, metrics)
    for a in range(0, len(rec), block_frames):
        blk = rec[a:a + block_frames]
        consumer.process(blk["mode_index"], blk["ref_index"], blk["samples"])
    metrics.elapsed = len(rec) * header["frame_period"]
    return metrics
