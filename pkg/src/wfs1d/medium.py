"""Complex media: transmission-matrix generators, propagation and far fields.

The medium maps samples of an input plane to samples of an output plane by a
complex matrix ``T`` of shape ``(n_out, n_in)``. Four families are provided:

* ``iid``      uncorrelated circular Gaussian entries (thick scatterer)
* ``memory``   i.i.d. entries under a Gaussian position envelope of width
                sigma, the banded model of a thin scatterer with memory effect
* ``unitary``  Haar-random unitary (lossless multimode fiber)
* ``composed`` products of the above, e.g. fiber with input coupling

Memory matrices are lazy: columns are drawn on demand from per-column
random streams, so a line illumination of a 64 x 64 plane only ever
touches 64 columns instead of the full 4096 x 4096 matrix.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _rng

KINDS = ("iid", "memory", "unitary", "composed", "coupling")
_KIND_CODES = {k: i for i, k in enumerate(KINDS)}
_TM_MAGIC = b"WFTM"
_TM_VERSION = 1
_TM_HEADER = struct.Struct("<4sIBQQQ")


@dataclass(frozen=True)
class Grid2D:
    """Sampling grid of a plane; flat index is ``y * nx + x``."""

    nx: int
    ny: int
    pitch: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.nx}x{self.ny}")

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def shape(self):
        """Array shape ``(ny, nx)``."""
        return (self.ny, self.nx)

    def index(self, x, y):
        return y * self.nx + x

    def position(self, index):
        y, x = divmod(index, self.nx)
        return x, y

    @classmethod
    def parse(cls, text):
        """Parse ``"64x32"`` (nx by ny) or ``"64"`` (square)."""
        parts = str(text).lower().split("x")
        if len(parts) == 1:
            n = int(parts[0])
            return cls(n, n)
        if len(parts) == 2:
            return cls(int(parts[0]), int(parts[1]))
        raise ValueError(f"cannot parse grid {text!r}; expected e.g. 64x64")

    @classmethod
    def near_square(cls, n):
        """Most nearly square grid holding exactly ``n`` samples."""
        ny = int(np.floor(np.sqrt(n)))
        while n % ny:
            ny -= 1
        return cls(n // ny, ny)


@dataclass(frozen=True)
class MemoryEffectConfig:
    sigma: float
    cutoff: float = 4.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.cutoff < 3:
            raise ValueError(f"cutoff must be >= 3 sigma, got {self.cutoff}")


class TransmissionMatrix:
    """Complex matrix from input-plane samples to output-plane samples.

    Dense matrices hold ``entries`` directly. Lazy (memory-effect) matrices
    produce columns from ``column(i)`` and only materialize ``entries`` on
    first access.
    """

    def __init__(self, entries=None, *, n_in=None, n_out=None, kind="iid", seed=0,
                 in_grid=None, out_grid=None, memory=None, column_fn=None):
        if kind not in KINDS:
            raise ValueError(f"unknown TM kind {kind!r}")
        if entries is not None:
            entries = np.asarray(entries, dtype=np.complex128)
            if entries.ndim != 2:
                raise ValueError("entries must be a 2D matrix")
            entries.setflags(write=False)
            n_out, n_in = entries.shape
        elif column_fn is None:
            raise ValueError("either entries or column_fn is required")
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.kind = kind
        self.seed = int(seed)
        self.in_grid = in_grid
        self.out_grid = out_grid
        self.memory = memory
        self._entries = entries
        self._column_fn = column_fn
        for grid, n, name in ((in_grid, self.n_in, "in_grid"), (out_grid, self.n_out, "out_grid")):
            if grid is not None and grid.size != n:
                raise ValueError(f"{name} has {grid.size} samples but matrix dimension is {n}")

    def __repr__(self):
        extra = f", sigma={self.memory.sigma}" if self.memory else ""
        return f"TransmissionMatrix(kind={self.kind!r}, n_out={self.n_out}, n_in={self.n_in}, seed={self.seed}{extra})"

    @property
    def is_lazy(self):
        return self._entries is None

    @property
    def shape(self):
        return (self.n_out, self.n_in)

    @property
    def entries(self):
        if self._entries is None:
            dense = np.zeros((self.n_out, self.n_in), dtype=np.complex128)
            for i in range(self.n_in):
                rows, values = self._column_fn(i)
                dense[rows, i] = values
            dense.setflags(write=False)
            self._entries = dense
        return self._entries

    def column_window(self, i):
        """Nonzero rows and values of column ``i``."""
        if self._column_fn is not None:
            return self._column_fn(i)
        return np.arange(self.n_out), self._entries[:, i]

    def column(self, i):
        if self._entries is not None:
            return self._entries[:, i].copy()
        out = np.zeros(self.n_out, dtype=np.complex128)
        rows, values = self._column_fn(i)
        out[rows] = values
        return out


def make_iid_tm(n_in, n_out, seed, in_grid=None, out_grid=None):
    """I.i.d. circular Gaussian TM with entry variance ``1 / n_in``."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"TM dimensions must be >= 1, got n_in={n_in}, n_out={n_out}")
    rng = _rng.stream(seed, _rng.IID, n_in, n_out)
    entries = _rng.complex_normal(rng, (n_out, n_in), 1.0 / n_in)
    return TransmissionMatrix(entries, kind="iid", seed=seed, in_grid=in_grid, out_grid=out_grid)


def _disk_offsets(radius):
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= radius * radius
    return dx[keep], dy[keep]


def make_memory_tm(in_grid, out_grid, cfg, seed):
    """Banded TM of a thin scatterer.

    Entry ``(j, i)`` is an i.i.d. circular Gaussian times
    ``exp(-|r_j - r_i|^2 / (2 sigma^2))``, with positions on registered
    input/output grids. Entries beyond ``cutoff * sigma`` are exactly zero
    and every column is rescaled to unit energy.
    """
    if (in_grid.nx, in_grid.ny) != (out_grid.nx, out_grid.ny):
        raise ValueError("memory-effect TM needs registered input and output grids of equal shape")
    sigma = float(cfg.sigma)
    offx, offy = _disk_offsets(cfg.cutoff * sigma)
    weights = np.exp(-(offx * offx + offy * offy) / (2.0 * sigma * sigma))
    nx, ny = out_grid.nx, out_grid.ny

    def column_fn(i):
        x0, y0 = in_grid.position(i)
        x = x0 + offx
        y = y0 + offy
        inside = (x >= 0) & (x < nx) & (y >= 0) & (y < ny)
        rows = y[inside] * nx + x[inside]
        rng = _rng.stream(seed, _rng.MEMORY, i)
        values = _rng.complex_normal(rng, rows.size) * weights[inside]
        values /= np.linalg.norm(values)
        return rows, values

    return TransmissionMatrix(n_in=in_grid.size, n_out=out_grid.size, kind="memory", seed=seed,
                              in_grid=in_grid, out_grid=out_grid, memory=cfg, column_fn=column_fn)


def make_unitary_tm(n_modes, seed, grid=None):
    """Haar-random unitary from the QR decomposition of a Ginibre matrix.

    The phases of ``diag(R)`` are folded into ``Q`` so the distribution is
    Haar and the result is a deterministic function of the seed.
    """
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    rng = _rng.stream(seed, _rng.UNITARY, n_modes)
    z = _rng.complex_normal(rng, (n_modes, n_modes))
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    q = q * (d / np.abs(d))
    return TransmissionMatrix(q, kind="unitary", seed=seed, in_grid=grid, out_grid=grid)


def compose(outer, inner):
    """The medium ``outer @ inner`` (light passes ``inner`` first)."""
    if outer.n_in != inner.n_out:
        raise ValueError(f"cannot compose: outer takes {outer.n_in} inputs, inner gives {inner.n_out}")
    if outer.is_lazy and not inner.is_lazy:
        # accumulate only the outer columns that inner actually feeds
        inner_e = inner.entries
        out = np.zeros((outer.n_out, inner.n_in), dtype=np.complex128)
        for i in np.flatnonzero(np.any(inner_e != 0, axis=1)):
            rows, values = outer.column_window(i)
            out[rows] += values[:, None] * inner_e[i][None, :]
        entries = out
    else:
        entries = outer.entries @ inner.entries
    return TransmissionMatrix(entries, kind="composed", seed=outer.seed,
                              in_grid=inner.in_grid, out_grid=outer.out_grid)


def line_coupling(grid, n_pixels, row=None):
    """Image a 1D modulator of ``n_pixels`` onto one row of ``grid``.

    Pixel ``p`` lands on sample ``x = p * nx // n_pixels`` of the row, so
    neighbouring pixels bin onto shared samples when ``n_pixels > nx``.
    """
    row = grid.ny // 2 if row is None else row
    if not 0 <= row < grid.ny:
        raise ValueError(f"row {row} outside grid with ny={grid.ny}")
    entries = np.zeros((grid.size, n_pixels), dtype=np.complex128)
    p = np.arange(n_pixels)
    entries[row * grid.nx + p * grid.nx // n_pixels, p] = 1.0
    return TransmissionMatrix(entries, kind="coupling", seed=0, out_grid=grid)


def make_line_medium(grid, cfg, n_pixels, seed, row=None):
    """Modulator line imaged onto a thin (memory-effect) scatterer."""
    mem = make_memory_tm(grid, grid, cfg, seed)
    return compose(mem, line_coupling(grid, n_pixels, row))


def make_fiber_tm(n_modes, n_pixels, seed, out_grid=None):
    """Multimode fiber: random pixel-to-mode coupling followed by a Haar unitary."""
    out_grid = out_grid or Grid2D.near_square(n_modes)
    fiber = make_unitary_tm(n_modes, seed, grid=out_grid)
    coupling = make_iid_tm(n_pixels, n_modes, _rng.derive_seed(seed, _rng.COUPLING))
    return compose(fiber, coupling)


def propagate(tm, field):
    """Apply the TM to an input field vector."""
    field = np.asarray(field)
    if field.shape != (tm.n_in,):
        raise ValueError(f"input field has shape {field.shape}, TM expects ({tm.n_in},)")
    if not tm.is_lazy:
        return tm.entries @ field
    out = np.zeros(tm.n_out, dtype=np.complex128)
    for i in np.flatnonzero(field):
        rows, values = tm.column_window(i)
        out[rows] += values * field[i]
    return out


def far_field(near, oversample=1):
    """Centered, unitary 2D DFT of the near field (last two axes).

    With ``oversample > 1`` the near field is zero-padded to
    ``oversample`` times its size first, which samples each speckle grain
    more finely while keeping Parseval's identity.
    """
    near = np.asarray(near)
    if near.ndim < 2 or near.shape[-1] < 2 or near.shape[-2] < 2:
        raise ValueError(f"far field needs a grid of at least 2x2, got shape {near.shape}")
    if oversample != 1:
        ny, nx = near.shape[-2:]
        padded = np.zeros(near.shape[:-2] + (ny * oversample, nx * oversample), dtype=np.complex128)
        padded[..., :ny, :nx] = near
        near = padded
    return np.fft.fftshift(np.fft.fft2(near, norm="ortho"), axes=(-2, -1))


def near_field(far):
    """Inverse of ``far_field`` (no oversampling)."""
    far = np.asarray(far)
    return np.fft.ifft2(np.fft.ifftshift(far, axes=(-2, -1)), norm="ortho")


def far_field_rows(grid, target, window=1):
    """Linear functionals giving far-field samples of a near field on ``grid``.

    Returns a ``(window**2, grid.size)`` matrix ``D`` with orthonormal rows,
    so ``D @ near.ravel()`` equals the far-field samples in the square
    window centered on ``target = (y, x)``.
    """
    ys, xs = window_indices(grid.shape, target, window)
    rows = np.empty((ys.size, grid.size), dtype=np.complex128)
    for k, (y, x) in enumerate(zip(ys, xs)):
        delta = np.zeros(grid.shape, dtype=np.complex128)
        delta[y, x] = 1.0
        rows[k] = np.conj(near_field(delta)).ravel()
    return rows


def window_indices(shape, target, window=1):
    """Row/column indices of a square pinhole window centered on ``target``."""
    y0, x0 = target
    h = window // 2
    ys, xs = np.mgrid[y0 - h:y0 - h + window, x0 - h:x0 - h + window]
    ny, nx = shape
    if ys.min() < 0 or xs.min() < 0 or ys.max() >= ny or xs.max() >= nx:
        raise ValueError(f"pinhole window of size {window} at {target} leaves the {ny}x{nx} grid")
    return ys.ravel(), xs.ravel()


def line_input(grid, phases, row):
    """Constant-amplitude line of phases on one row of the input plane."""
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (grid.nx,):
        raise ValueError(f"need {grid.nx} phases, got {phases.shape}")
    if not 0 <= row < grid.ny:
        raise ValueError(f"row {row} outside grid with ny={grid.ny}")
    field = np.zeros(grid.shape, dtype=np.complex128)
    field[row] = np.exp(1j * phases)
    return field


class DynamicMediumState:
    """A medium decorrelating in time as a complex Ornstein-Uhlenbeck process.

    ``evolve`` maps ``T -> a T + sqrt(1 - a^2) F`` with ``a = exp(-dt / tau)``
    and ``F`` a fresh i.i.d. matrix with the entry variance of the initial
    matrix, so ``<T(t) T(0)*>`` decays as ``exp(-t / tau)``.
    """

    def __init__(self, current, tau, seed=0, t=0.0):
        if not tau > 0:
            raise ValueError(f"decorrelation time must be > 0, got {tau}")
        self.current = current
        self.tau = float(tau)
        self.t = float(t)
        self.seed = int(seed)
        self.seed_stream = _rng.stream(seed, _rng.EVOLVE)
        e = current.entries
        self.variance = float(np.mean(np.abs(e) ** 2))

    @property
    def n_in(self):
        return self.current.n_in

    @property
    def n_out(self):
        return self.current.n_out

    @property
    def out_grid(self):
        return self.current.out_grid

    def _replace(self, entries):
        old = self.current
        self.current = TransmissionMatrix(entries, kind=old.kind, seed=old.seed,
                                          in_grid=old.in_grid, out_grid=old.out_grid)

    def evolve(self, dt):
        if dt < 0:
            raise ValueError(f"dt must be >= 0, got {dt}")
        if dt == 0:
            return self
        a = np.exp(-dt / self.tau)
        fresh = _rng.complex_normal(self.seed_stream, self.current.shape, self.variance)
        self._replace(a * self.current.entries + np.sqrt(1.0 - a * a) * fresh)
        self.t += dt
        return self

    def evolve_probed(self, probe, n_steps, dt):
        """Evolve ``n_steps`` times by ``dt`` observing only ``probe @ T``.

        ``probe`` must have orthonormal rows (e.g. ``far_field_rows``). The
        observed rows follow their own OU recursion step by step; the full
        matrix is then drawn once from its exact conditional distribution
        given the final observed rows. Distributionally identical to calling
        ``evolve`` ``n_steps`` times, at the cost of one full draw.

        Returns the observed rows after 0, 1, ..., n_steps steps, shape
        ``(n_steps + 1, n_probe, n_in)``.
        """
        if n_steps < 0 or dt < 0:
            raise ValueError("n_steps and dt must be non-negative")
        t0 = self.current.entries
        r0 = probe @ t0
        rows = np.empty((n_steps + 1,) + r0.shape, dtype=np.complex128)
        rows[0] = r0
        if n_steps == 0 or dt == 0:
            rows[1:] = r0
            return rows
        a = np.exp(-dt / self.tau)
        b = np.sqrt(1.0 - a * a)
        for s in range(1, n_steps + 1):
            rows[s] = a * rows[s - 1] + b * _rng.complex_normal(self.seed_stream, r0.shape, self.variance)
        an = a ** n_steps
        z = _rng.complex_normal(self.seed_stream, t0.shape, self.variance * (1.0 - an * an))
        z -= probe.conj().T @ (probe @ z)
        z += probe.conj().T @ (rows[-1] - an * r0)
        self._replace(an * t0 + z)
        self.t += n_steps * dt
        return rows


def evolve(state, dt):
    """Advance a dynamic medium by ``dt`` seconds (mutates and returns it)."""
    return state.evolve(dt)


def as_matrix(medium):
    """The current ``TransmissionMatrix`` of a static or dynamic medium."""
    return medium.current if isinstance(medium, DynamicMediumState) else medium


def save_tm(tm, path):
    """Write the TM as a little-endian ``WFTM`` blob."""
    header = _TM_HEADER.pack(_TM_MAGIC, _TM_VERSION, _KIND_CODES[tm.kind], tm.n_in, tm.n_out,
                             tm.seed & 0xFFFFFFFFFFFFFFFF)
    body = np.ascontiguousarray(tm.entries).astype("<c16")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load_tm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _TM_HEADER.size:
        raise ValueError(f"{path}: file shorter than the WFTM header")
    magic, version, kind, n_in, n_out, seed = _TM_HEADER.unpack_from(raw)
    if magic != _TM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _TM_VERSION:
        raise ValueError(f"{path}: unsupported WFTM version {version}")
    if kind >= len(KINDS):
        raise ValueError(f"{path}: unknown kind code {kind}")
    expected = _TM_HEADER.size + 16 * n_in * n_out
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for a {n_out}x{n_in} matrix, found {len(raw)}")
    entries = np.frombuffer(raw, dtype="<c16", offset=_TM_HEADER.size).reshape(n_out, n_in)
    return TransmissionMatrix(entries.astype(np.complex128), kind=KINDS[kind], seed=seed)
