"""Delay-Doppler frame construction and the OTFS modulation chain.

Grid convention used throughout the package: a delay-Doppler grid is a complex
ndarray of shape (N, M).  Row r stores Doppler index k = r - N/2 (so k runs
over [-N/2, N/2-1]), column l is the delay index in [0, M-1].  Time-frequency
grids are (N, M) indexed by (slot n, subcarrier m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

PATTERN_VARIANTS = (
    "proposed",
    "full-guard",
    "one-column-noguard",
    "one-column-doppler-guard",
)

# Fixed seed for the known pilot symbols; transmitter and receiver both
# reconstruct the same values from the pattern alone.
_PILOT_SEED = 0x0715

DATA, PILOT, GUARD = 0, 1, 2


class FramingError(ValueError):
    """Inconsistent grid/bit dimensions."""


class PatternError(ValueError):
    """Pilot/guard layout does not fit the grid."""


@dataclass(frozen=True)
class OtfsConfig:
    """Frame geometry: M subcarriers x N time slots with spacing delta_f."""

    m: int
    n: int
    delta_f: float

    def __post_init__(self):
        if self.m < 2 or self.m % 2:
            raise ValueError(f"m must be even and >= 2, got {self.m}")
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be even and >= 2, got {self.n}")
        if self.delta_f <= 0:
            raise ValueError("delta_f must be positive")

    @property
    def t_slot(self) -> float:
        """Slot duration T with T * delta_f = 1."""
        return 1.0 / self.delta_f

    @property
    def ts(self) -> float:
        """Sample period, 1 / (M * delta_f).  Also the delay resolution."""
        return 1.0 / (self.m * self.delta_f)

    @property
    def doppler_res(self) -> float:
        """Doppler bin width 1 / (N * T)."""
        return 1.0 / (self.n * self.t_slot)

    @property
    def sample_rate(self) -> float:
        return self.m * self.delta_f

    @property
    def grid_size(self) -> int:
        return self.m * self.n


@dataclass(frozen=True)
class Constellation:
    """Gray-mapped constellation; symbol index is its bit pattern (MSB first)."""

    name: str
    points: tuple
    bits_per_symbol: int

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=complex)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def mean_power(self) -> float:
        return float(np.mean(np.abs(self.array) ** 2))

    def bits_to_indices(self, bits: np.ndarray) -> np.ndarray:
        b = np.asarray(bits, dtype=np.int64).reshape(-1, self.bits_per_symbol)
        weights = 1 << np.arange(self.bits_per_symbol - 1, -1, -1)
        return b @ weights

    def indices_to_bits(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        shifts = np.arange(self.bits_per_symbol - 1, -1, -1)
        return ((idx[:, None] >> shifts) & 1).reshape(-1)

    def nearest(self, values: np.ndarray) -> np.ndarray:
        """Hard decision: index of the closest point (ties -> lowest index)."""
        d = np.abs(np.asarray(values).reshape(-1, 1) - self.array[None, :])
        return np.argmin(d, axis=1)


def _gray_levels(n_bits: int) -> np.ndarray:
    """Axis amplitudes ordered by bit pattern so neighbours differ in one bit."""
    size = 1 << n_bits
    levels = np.empty(size)
    for pos in range(size):
        gray = pos ^ (pos >> 1)
        levels[gray] = 2 * pos - (size - 1)
    return levels


def make_constellation(name: str, sigma_d2: float = 1.0) -> Constellation:
    """Build bpsk / 4qam / 16qam with mean power sigma_d2."""
    name = name.lower()
    if name == "bpsk":
        pts = np.array([1.0, -1.0]) * np.sqrt(sigma_d2)
        return Constellation("bpsk", tuple(pts.astype(complex)), 1)
    if name in ("4qam", "qpsk", "16qam", "64qam"):
        order = {"4qam": 4, "qpsk": 4, "16qam": 16, "64qam": 64}[name]
        bits = int(np.log2(order))
        half = bits // 2
        lev = _gray_levels(half)
        idx = np.arange(order)
        i_part = lev[idx >> half]
        q_part = lev[idx & ((1 << half) - 1)]
        pts = i_part + 1j * q_part
        pts *= np.sqrt(sigma_d2 / np.mean(np.abs(pts) ** 2))
        return Constellation(name, tuple(pts), bits)
    raise ValueError(f"unknown constellation {name!r}")


@dataclass(frozen=True)
class SymbolPattern:
    """Partition of the (N, M) grid into pilot, guard and data positions.

    Positions are (k, l) tuples with the centred Doppler index k.  Pilot
    symbols are fixed QPSK-phase points of power sigma_p2, shared knowledge of
    transmitter and receiver.
    """

    m: int
    n: int
    n_p: int
    m_p: int
    variant: str
    power_gap_db: float
    sigma_d2: float
    pilot_set: frozenset
    guard_set: frozenset
    data_set: frozenset

    @property
    def sigma_p2(self) -> float:
        return float(np.sqrt(10.0 ** (self.power_gap_db / 10.0)) * self.sigma_d2)

    @cached_property
    def class_grid(self) -> np.ndarray:
        """(N, M) int grid of DATA / PILOT / GUARD markers."""
        g = np.full((self.n, self.m), DATA, dtype=np.int8)
        for k, l in self.pilot_set:
            g[k + self.n // 2, l] = PILOT
        for k, l in self.guard_set:
            g[k + self.n // 2, l] = GUARD
        return g

    @cached_property
    def pilot_positions(self) -> list:
        return sorted(self.pilot_set)

    @cached_property
    def data_positions(self) -> list:
        return sorted(self.data_set)

    @cached_property
    def pilot_grid(self) -> np.ndarray:
        """(N, M) grid holding the known pilot values, zero elsewhere."""
        rng = np.random.default_rng(_PILOT_SEED)
        phases = rng.integers(4, size=len(self.pilot_positions))
        vals = np.sqrt(self.sigma_p2) * np.exp(1j * (np.pi / 4) * (2 * phases + 1))
        g = np.zeros((self.n, self.m), dtype=complex)
        for (k, l), v in zip(self.pilot_positions, vals):
            g[k + self.n // 2, l] = v
        return g

    def receive_window_mask(self, l_tau_max: int) -> np.ndarray:
        """(N, M) mask of grids that can carry pilot energy after delay spread.

        Covers delay columns [0, m_p + l_tau_max - 1] over all Doppler rows.
        """
        mask = np.zeros((self.n, self.m), dtype=bool)
        cols = np.arange(self.m_p + l_tau_max) % self.m
        mask[:, cols] = True
        return mask

    def counts(self) -> tuple:
        return len(self.pilot_set), len(self.guard_set), len(self.data_set)


def build_pattern(
    cfg: OtfsConfig,
    n_p: int,
    m_p: int,
    variant: str = "proposed",
    delta_db: float = 0.0,
    sigma_d2: float = 1.0,
    l_tau_max: int | None = None,
    k_nu_max: int = 2,
) -> SymbolPattern:
    """Lay out pilots/guards/data on the grid for the requested variant.

    `proposed` fills the first m_p delay columns with an n_p-row pilot block
    plus Doppler-domain guards; `full-guard` additionally blanks the delay
    columns that pilot energy can spread into; the `one-column-*` variants are
    the minimal-overhead layouts (m_p columns of pilots with no guards, or
    with k_nu_max guard rows on each Doppler side).
    """
    if variant not in PATTERN_VARIANTS:
        raise PatternError(f"unknown pattern variant {variant!r}")
    if not (1 <= n_p <= cfg.n) or not (1 <= m_p < cfg.m):
        raise PatternError(f"pilot extent {n_p}x{m_p} does not fit {cfg.n}x{cfg.m}")
    if delta_db < 0:
        raise PatternError("power gap must be non-negative")
    n, m = cfg.n, cfg.m
    if l_tau_max is None:
        l_tau_max = m_p

    pilot_rows = range(-n // 2, n_p - n // 2)
    pilots = {(k, l) for k in pilot_rows for l in range(m_p)}
    guards: set = set()

    if variant in ("proposed", "full-guard"):
        guards = {
            (k, l)
            for k in range(n_p - n // 2, n // 2)
            for l in range(m_p)
        }
        if variant == "full-guard":
            band = list(range(m_p, min(m_p + l_tau_max, m))) + list(
                range(max(m - l_tau_max, m_p), m)
            )
            guards |= {(k, l) for k in range(-n // 2, n // 2) for l in band}
    elif variant == "one-column-doppler-guard":
        top = [n_p - n // 2 + i for i in range(k_nu_max)]
        bottom = [n // 2 - 1 - i for i in range(k_nu_max)]
        rows = {k for k in top + bottom if k not in pilot_rows}
        guards = {(k, l) for k in rows for l in range(m_p)}
    # one-column-noguard: no guards at all

    guards -= pilots
    everything = {(k, l) for k in range(-n // 2, n // 2) for l in range(m)}
    data = everything - pilots - guards
    return SymbolPattern(
        m=m,
        n=n,
        n_p=n_p,
        m_p=m_p,
        variant=variant,
        power_gap_db=delta_db,
        sigma_d2=sigma_d2,
        pilot_set=frozenset(pilots),
        guard_set=frozenset(guards),
        data_set=frozenset(data),
    )


@dataclass
class FrameTruth:
    """What was actually sent: bits, symbol indices and the data positions."""

    pattern: SymbolPattern
    bits: np.ndarray
    symbol_indices: np.ndarray  # per data position, sorted order
    constellation: Constellation = field(repr=False)


def map_frame(
    pattern: SymbolPattern,
    constellation: Constellation,
    bits: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple:
    """Fill a transmit grid: Gray-mapped data, known pilots, zero guards.

    Bits may be supplied explicitly or drawn from `rng`.  Returns the (N, M)
    grid and a truth record for later scoring.
    """
    positions = pattern.data_positions
    n_bits = len(positions) * constellation.bits_per_symbol
    if bits is None:
        if rng is None:
            raise FramingError("either bits or rng must be given")
        bits = rng.integers(0, 2, size=n_bits)
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size != n_bits:
        raise FramingError(f"expected {n_bits} bits, got {bits.size}")

    idx = constellation.bits_to_indices(bits)
    grid = pattern.pilot_grid.copy()
    half = pattern.n // 2
    for (k, l), s in zip(positions, idx):
        grid[k + half, l] = constellation.array[s]
    return grid, FrameTruth(pattern, bits, idx, constellation)


def score(truth: FrameTruth, detected_indices: np.ndarray) -> dict:
    """Bit/symbol error fractions over the data grids."""
    detected_indices = np.asarray(detected_indices, dtype=np.int64)
    if detected_indices.shape != truth.symbol_indices.shape:
        raise FramingError("detected symbol count does not match the frame")
    ser = float(np.mean(detected_indices != truth.symbol_indices))
    det_bits = truth.constellation.indices_to_bits(detected_indices)
    ber = float(np.mean(det_bits != truth.bits))
    return {"ber": ber, "ser": ser}


# --- OTFS modulation chain ---------------------------------------------------


def isfft(x: np.ndarray) -> np.ndarray:
    """Inverse symplectic FFT: delay-Doppler -> time-frequency (unitary)."""
    n, m = x.shape
    sign = (-1.0) ** np.arange(n)
    tf = np.fft.fft(np.fft.ifft(x, axis=0), axis=1)
    return tf * np.sqrt(n / m) * sign[:, None]


def sfft(tf: np.ndarray) -> np.ndarray:
    """Symplectic FFT: time-frequency -> delay-Doppler (inverse of isfft)."""
    n, m = tf.shape
    sign = (-1.0) ** np.arange(n)
    y = tf * sign[:, None] * np.sqrt(m / n)
    return np.fft.fft(np.fft.ifft(y, axis=1), axis=0)


def heisenberg(x_tf: np.ndarray, cfg: OtfsConfig, cp_len: int = 0) -> np.ndarray:
    """Rectangular-pulse Heisenberg transform, sampled at rate 1/Ts.

    Per-slot unitary inverse DFT across subcarriers; a single cyclic prefix of
    cp_len samples is prepended to the whole MN-sample block.
    """
    if x_tf.shape != (cfg.n, cfg.m):
        raise FramingError(f"expected grid {(cfg.n, cfg.m)}, got {x_tf.shape}")
    if cp_len < 0 or cp_len >= cfg.grid_size:
        raise ValueError(f"cyclic prefix length {cp_len} out of range")
    s = (np.fft.ifft(x_tf, axis=1) * np.sqrt(cfg.m)).reshape(-1)
    if cp_len:
        s = np.concatenate([s[-cp_len:], s])
    return s


def wigner(r: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Matched-filter sampling back to time-frequency (CP already removed)."""
    if r.size != cfg.grid_size:
        raise FramingError(f"expected {cfg.grid_size} samples, got {r.size}")
    return np.fft.fft(r.reshape(cfg.n, cfg.m), axis=1) / np.sqrt(cfg.m)


def wigner_sfft(r: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Received time samples -> delay-Doppler grid."""
    return sfft(wigner(r, cfg))


def modulate(x_dd: np.ndarray, cfg: OtfsConfig, cp_len: int = 0) -> np.ndarray:
    """Full transmit chain: ISFFT then Heisenberg with one block CP."""
    return heisenberg(isfft(x_dd), cfg, cp_len)
