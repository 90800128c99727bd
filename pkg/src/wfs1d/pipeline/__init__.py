"""Frame timing, the streaming engine and trace files."""

from .timing import (DISPLAY_PERIOD, TimingBudget, frame_average, frame_average_block, schedule,
                     settle_skip)
from .stream import FrameQueue, StreamAborted, StreamMetrics, run_stream
from .trace import TraceFormatError, read_trace, replay_trace, write_trace
