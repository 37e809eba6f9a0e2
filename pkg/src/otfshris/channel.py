"""Geometry, array responses, random channel realisation and the exact
delay-Doppler spreading kernel with fractional Doppler.

A cascaded user->surface->station channel is reduced to per-delay-tap
equivalent complex gains; the grid-domain input/output relation is

    Y[k, l] = sum_p sum_q h_p * kernel(k, l, l_tau_p, q, k_nu_p, beta_p)
              * X[(k - k_nu_p + q) wrapped, (l - l_tau_p) mod M]

where each Doppler shift nu is split as nu = (k_nu + beta) / (N T) with
integer tap k_nu and fractional bias beta in [-0.5, 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ddframe import OtfsConfig

C_LIGHT = 3.0e8  # propagation speed used for Doppler bounds


class GeometryError(ValueError):
    """Degenerate placement (angles undefined)."""


class SamplingError(ValueError):
    """Requested more paths than available delay taps."""


# --- array responses ---------------------------------------------------------


def array_response_ula(theta: float, nb: int, d_over_lambda: float = 0.5) -> np.ndarray:
    """Uniform linear array steering vector, entries exp(-j2pi(n-1)(d/l)cos)."""
    n = np.arange(nb)
    return np.exp(-2j * np.pi * n * d_over_lambda * np.cos(theta))


def array_response_upa(
    phi: float, psi: float, nx: int, ny: int, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Planar array response a_x kron a_y.

    The x-axis exponent uses sin(phi)sin(psi), the y-axis one
    sin(phi)cos(psi), both with per-element index (n-1).
    """
    u = np.sin(phi) * np.sin(psi)
    w = np.sin(phi) * np.cos(psi)
    ax = np.exp(-2j * np.pi * np.arange(nx) * d_over_lambda * u)
    ay = np.exp(-2j * np.pi * np.arange(ny) * d_over_lambda * w)
    return np.kron(ax, ay)


def upa_element_phase(
    rows: np.ndarray, cols: np.ndarray, u: float, w: float, d_over_lambda: float = 0.5
) -> np.ndarray:
    """Phase argument of selected UPA elements for direction cosines (u, w).

    rows/cols are 0-based (n_x-1, n_y-1) element coordinates; the response is
    exp(1j * returned phase).
    """
    return -2.0 * np.pi * d_over_lambda * (rows * u + cols * w)


# --- geometry ----------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    """Coordinate frame anchored at a surface corner; axes along the elements.

    p_b is the station position, s_b the direction of its linear array.
    Element spacing is half a wavelength.
    """

    p_b: tuple
    s_b: tuple
    wavelength: float = C_LIGHT / 28e9

    @property
    def spacing(self) -> float:
        return self.wavelength / 2.0


def geometry_angles(g: Geometry) -> dict:
    """Departure/arrival angles and range from the surface corner frame."""
    p_b = np.asarray(g.p_b, dtype=float)
    s_b = np.asarray(g.s_b, dtype=float)
    d_br = float(np.linalg.norm(p_b))
    if d_br == 0.0:
        raise GeometryError("station at the origin")
    e_x = np.array([1.0, 0.0, 0.0])
    e_z = np.array([0.0, 0.0, 1.0])
    theta_b = float(np.arccos(np.clip(s_b @ p_b / (np.linalg.norm(s_b) * d_br), -1, 1)))
    proj = p_b - (p_b @ e_z) * e_z
    nproj = np.linalg.norm(proj)
    if nproj < 1e-12 * d_br:
        raise GeometryError("station on the surface normal; azimuth undefined")
    phi_r = float(np.arccos(np.clip(proj @ e_x / nproj, -1, 1)))
    psi_r = float(np.pi - np.arccos(np.clip(p_b @ e_z / d_br, -1, 1)))
    return {"theta_b": theta_b, "phi_r": phi_r, "psi_r": psi_r, "d_br": d_br}


# --- channel draws -----------------------------------------------------------


@dataclass
class UrPath:
    """One user->surface scattering path."""

    gain: complex
    delay: float
    doppler: float
    phi: float
    psi: float
    prior_var: float


@dataclass
class RbLink:
    """Single line-of-sight surface->station tap."""

    gain: complex
    delay: float
    theta_b: float
    phi_r: float
    psi_r: float
    prior_var: float = 1.0


def max_doppler(velocity_kmh: float, carrier_hz: float) -> float:
    return velocity_kmh / 3.6 * carrier_hz / C_LIGHT


_PDP_NORM_CACHE: dict = {}


def _pdp_normalisation(n_paths: int, n_taps: int) -> float:
    """Scale factor making the mean total path power unity.

    The exponential profile exp(-tap / tap_max) is averaged over random
    distinct tap placements (Monte-Carlo, cached per configuration).
    """
    key = (n_paths, n_taps)
    if key not in _PDP_NORM_CACHE:
        rng = np.random.default_rng(20220806)
        draws = 100_000
        order = np.argsort(rng.random((draws, n_taps)), axis=1)[:, :n_paths]
        total = np.exp(-order / max(n_taps - 1, 1)).sum(axis=1)
        _PDP_NORM_CACHE[key] = 1.0 / float(total.mean())
    return _PDP_NORM_CACHE[key]


def sample_ur_paths(
    rng: np.random.Generator,
    n_paths: int,
    tau_max_taps: int,
    ts: float,
    nu_max: float,
) -> list:
    """Draw scattering paths: distinct integer delay taps, exponentially
    decaying power profile (normalised to unit mean total power), uniform
    Doppler in [-nu_max, nu_max], angles uniform over the front hemisphere."""
    n_taps = tau_max_taps + 1
    if n_paths < 1 or n_paths > n_taps:
        raise SamplingError(f"cannot place {n_paths} paths on {n_taps} taps")
    taps = rng.choice(n_taps, size=n_paths, replace=False)
    taps.sort()
    sigma_c2 = _pdp_normalisation(n_paths, n_taps)
    paths = []
    for tap in taps:
        var = sigma_c2 * np.exp(-tap / max(n_taps - 1, 1))
        g = np.sqrt(var / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
        paths.append(
            UrPath(
                gain=complex(g),
                delay=float(tap * ts),
                doppler=float(rng.uniform(-nu_max, nu_max)),
                phi=float(rng.uniform(0.0, np.pi / 2)),
                psi=float(rng.uniform(0.0, np.pi)),
                prior_var=float(var),
            )
        )
    return paths


def draw_rb_link(rng: np.random.Generator, geom: Geometry, prior_var: float = 1.0) -> RbLink:
    ang = geometry_angles(geom)
    g = np.sqrt(prior_var / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
    return RbLink(
        gain=complex(g),
        delay=0.0,
        theta_b=ang["theta_b"],
        phi_r=ang["phi_r"],
        psi_r=ang["psi_r"],
        prior_var=prior_var,
    )


# --- cascaded channel --------------------------------------------------------


def split_doppler(nu: float, cfg: OtfsConfig) -> tuple:
    """nu -> (integer tap, fractional bias in [-0.5, 0.5))."""
    x = nu * cfg.n * cfg.t_slot
    k = int(np.floor(x + 0.5))
    return k, float(x - k)


@dataclass
class CascadedChannel:
    """Equivalent per-delay-tap channel: one entry per tap in [0, p_max-1].

    Unoccupied taps carry zero gain.  Doppler per tap is (k_nu + beta)/(N T).
    """

    gains: np.ndarray
    k_nu: np.ndarray
    beta: np.ndarray
    sigma_n2: float = 0.0

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=complex)
        self.k_nu = np.asarray(self.k_nu, dtype=int)
        self.beta = np.asarray(self.beta, dtype=float)
        if not (len(self.gains) == len(self.k_nu) == len(self.beta)):
            raise ValueError("per-tap arrays must have equal length")
        if np.any(self.beta < -0.5) or np.any(self.beta >= 0.5):
            raise ValueError("fractional Doppler must lie in [-0.5, 0.5)")

    @property
    def p_max(self) -> int:
        return len(self.gains)

    @property
    def occupied(self) -> np.ndarray:
        return np.abs(self.gains) > 0


def combining_gain(omega: np.ndarray, rb: RbLink, path: UrPath, nx: int, ny: int) -> complex:
    """a_R(departure)^H diag(omega) a_R(arrival) for one path."""
    a_out = array_response_upa(rb.phi_r, rb.psi_r, nx, ny)
    a_in = array_response_upa(path.phi, path.psi, nx, ny)
    return complex(np.sum(np.conj(a_out) * omega * a_in))


def cascade(
    paths: list,
    rb: RbLink,
    omega: np.ndarray,
    cfg: OtfsConfig,
    nx: int,
    ny: int,
    p_max: int | None = None,
) -> CascadedChannel:
    """Fold surface phase shifts and both hops into per-tap equivalent gains."""
    rb_tap = int(round(rb.delay / cfg.ts))
    taps = [int(round(p.delay / cfg.ts)) + rb_tap for p in paths]
    if p_max is None:
        p_max = max(taps) + 1
    gains = np.zeros(p_max, dtype=complex)
    k_nu = np.zeros(p_max, dtype=int)
    beta = np.zeros(p_max, dtype=float)
    for tap, p in zip(taps, paths):
        if tap >= p_max:
            raise ValueError(f"delay tap {tap} exceeds p_max={p_max}")
        gains[tap] += rb.gain * p.gain * combining_gain(omega, rb, p, nx, ny)
        k, b = split_doppler(p.doppler, cfg)
        k_nu[tap], beta[tap] = k, b
    return CascadedChannel(gains=gains, k_nu=k_nu, beta=beta)


# --- spreading kernel --------------------------------------------------------


def _sinc_ratio(x: np.ndarray, n: int) -> np.ndarray:
    """sin(pi x) / sin(pi x / n), smooth through x = 0 (value n there)."""
    return n * np.sinc(x) / np.sinc(np.asarray(x) / n)


def _dsinc(x: np.ndarray) -> np.ndarray:
    """Derivative of np.sinc, series-stabilised near zero."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-6
    xs = np.where(small, 1.0, x)
    out = (np.cos(np.pi * xs) - np.sinc(xs)) / xs
    series = -(np.pi**2) * x / 3.0 + (np.pi**4) * x**3 / 30.0
    return np.where(small, series, out)


def doppler_spread(q, beta, n: int):
    """Inter-Doppler leakage factor for offset bin q at fractional bias beta.

    Dirichlet-type ratio with |value| = sin(pi beta)/sin(pi beta / N); the
    removable singularity at integer alignment takes its limit N.
    """
    x = n / 2 - np.asarray(q) - beta
    return np.exp(-1j * np.pi * x * (n - 1) / n) * _sinc_ratio(x, n)


def doppler_spread_derivative(q, beta, n: int):
    """d/d(beta) of doppler_spread, exact at the integer-alignment point."""
    x = n / 2 - np.asarray(q) - beta
    ratio = _sinc_ratio(x, n)
    dratio = n * (_dsinc(x) * np.sinc(x / n) - np.sinc(x) * _dsinc(x / n) / n) / np.sinc(x / n) ** 2
    phase = np.exp(-1j * np.pi * x * (n - 1) / n)
    d_dx = phase * (-1j * np.pi * (n - 1) / n * ratio + dratio)
    return -d_dx  # x decreases with beta


def dd_kernel_coeff(
    k: int, l: int, l_tau: int, q: int, k_nu: int, beta: float, cfg: OtfsConfig
) -> complex:
    """Single spreading coefficient of the grid-domain channel relation.

    Piecewise: (1/N) * delay_phase * doppler_spread for l >= l_tau, with an
    extra wrap phase exp(-j2pi k'/N) when the delayed symbol wraps around the
    block edge (l < l_tau); k' is the centred Doppler index of the referenced
    symbol.
    """
    n, m = cfg.n, cfg.m
    xi = np.exp(2j * np.pi * ((l - l_tau) / m) * ((k_nu + beta) / n))
    val = xi * doppler_spread(q, beta, n) / n
    if l < l_tau:
        k_sym = (k - k_nu + q) % n - n // 2
        val *= np.exp(-2j * np.pi * k_sym / n)
    return complex(val)


class DdKernel:
    """Cached spreading tensor for a full set of delay taps.

    tensor[r, l, p, q] multiplies the transmitted symbol whose storage row is
    sym_rows[r, p, q] and column sym_cols[l, p]; sym_flat gives the flattened
    symbol index for gather/scatter message passing.
    """

    def __init__(self, cfg: OtfsConfig, k_nu: np.ndarray, beta: np.ndarray, l_tau=None):
        n, m = cfg.n, cfg.m
        self.cfg = cfg
        self.k_nu = np.asarray(k_nu, dtype=int)
        self.beta = np.asarray(beta, dtype=float)
        p_max = len(self.k_nu)
        if l_tau is None:
            l_tau = np.arange(p_max)
        self.l_tau = np.asarray(l_tau, dtype=int)

        q = np.arange(n)
        rows = np.arange(n)
        cols = np.arange(m)
        # spread[p, q], delay phase xi[p, l]
        spread = doppler_spread(q[None, :], self.beta[:, None], n)
        dl = cols[None, :] - self.l_tau[:, None]
        xi = np.exp(2j * np.pi * (dl / m) * ((self.k_nu + self.beta)[:, None] / n))
        tensor = (xi[None, :, :, None].transpose(0, 2, 1, 3) * spread[None, None, :, :]) / n
        tensor = np.broadcast_to(tensor, (n, m, p_max, n)).copy()

        # storage row of the referenced symbol and its wrap phase
        sym_rows = (rows[:, None, None] - n // 2 - self.k_nu[None, :, None] + q[None, None, :]) % n
        wrap = np.exp(-2j * np.pi * (sym_rows - n // 2) / n)
        wrapped_cols = cols[None, :] < self.l_tau[:, None]  # (p, l)
        mask = wrapped_cols.T[None, :, :, None]  # (1, l, p, 1)
        tensor *= np.where(mask, wrap[:, None, :, :], 1.0)

        sym_cols = (cols[:, None] - self.l_tau[None, :]) % m  # (l, p)
        self.tensor = tensor
        self.abs2 = np.abs(tensor) ** 2
        self.sym_rows = sym_rows
        self.sym_cols = sym_cols
        self.sym_flat = (
            sym_rows[:, None, :, :] * m + sym_cols[None, :, :, None]
        ).astype(np.int64)

    @property
    def p_max(self) -> int:
        return len(self.k_nu)

    def gather(self, grid: np.ndarray) -> np.ndarray:
        """Per-(observation, tap, offset) view of the referenced symbols."""
        return grid.reshape(-1)[self.sym_flat]

    def tap_response(self, grid: np.ndarray, p: int) -> np.ndarray:
        """(N, M) response of tap p to a transmit grid, unit gain."""
        return np.einsum("rlq,rlq->rl", self.tensor[:, :, p, :], self.gather(grid)[:, :, p, :])

    def responses(self, grid: np.ndarray) -> np.ndarray:
        """(P, N, M) per-tap responses."""
        g = self.gather(grid)
        return np.einsum("rlpq,rlpq->prl", self.tensor, g)


def tap_kernel(
    cfg: OtfsConfig, l_tau: int, k_nu: int, beta: float, with_derivative: bool = False
):
    """(N, M, Q) kernel slab for a single tap, optionally with d/d(beta).

    Row wrap phases are applied exactly as in DdKernel.
    """
    n, m = cfg.n, cfg.m
    q = np.arange(n)
    cols = np.arange(m)
    rows = np.arange(n)
    spread = doppler_spread(q, beta, n)  # (Q,)
    dl = cols - l_tau
    xi = np.exp(2j * np.pi * (dl / m) * ((k_nu + beta) / n))  # (M,)
    sym_rows = (rows[:, None] - n // 2 - k_nu + q[None, :]) % n  # (N, Q)
    wrap = np.exp(-2j * np.pi * (sym_rows - n // 2) / n)
    wrapmat = np.where((cols < l_tau)[None, :, None], wrap[:, None, :], 1.0)
    ker = xi[None, :, None] * spread[None, None, :] / n * wrapmat
    if not with_derivative:
        return ker
    dspread = doppler_spread_derivative(q, beta, n)
    dxi = 2j * np.pi * (dl / (m * n)) * xi
    dker = (dxi[None, :, None] * spread[None, None, :] + xi[None, :, None] * dspread[None, None, :]) / n
    dker = dker * wrapmat
    return ker, dker


def tap_response_grid(
    grid: np.ndarray, cfg: OtfsConfig, l_tau: int, k_nu: int, beta: float,
    with_derivative: bool = False,
):
    """Response of one tap (unit gain) to `grid`, optionally with its beta
    derivative.  Used by the receiver's Doppler refinement."""
    n, m = cfg.n, cfg.m
    out = tap_kernel(cfg, l_tau, k_nu, beta, with_derivative)
    ker, dker = out if with_derivative else (out, None)
    shifted = np.empty((n, n, m), dtype=complex)  # stacked over q
    base = np.roll(grid, l_tau, axis=1)
    for q in range(n):
        a = (q - k_nu - n // 2) % n
        shifted[q] = np.roll(base, -a, axis=0)
    z = np.einsum("rlq,qrl->rl", ker, shifted)
    if not with_derivative:
        return z
    dz = np.einsum("rlq,qrl->rl", dker, shifted)
    return z, dz


# --- channel application -----------------------------------------------------


def _complex_noise(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    return np.sqrt(var / 2) * (
        rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    )


def apply_channel_dd(
    x: np.ndarray,
    ch: CascadedChannel,
    cfg: OtfsConfig,
    rng: np.random.Generator | None = None,
    noiseless: bool = False,
) -> np.ndarray:
    """Grid-domain channel: spreading-kernel sum plus white noise."""
    kernel = DdKernel(cfg, ch.k_nu, ch.beta)
    y = np.zeros((cfg.n, cfg.m), dtype=complex)
    for p in np.flatnonzero(ch.occupied):
        y += ch.gains[p] * kernel.tap_response(x, p)
    if not noiseless:
        if rng is None:
            raise ValueError("rng required for noisy application")
        y += _complex_noise(rng, y.shape, ch.sigma_n2)
    return y


def apply_channel_time(
    s_cp: np.ndarray,
    paths: list,
    rb: RbLink,
    omega: np.ndarray,
    combiner: np.ndarray,
    cfg: OtfsConfig,
    nx: int,
    ny: int,
    cp_len: int,
    rng: np.random.Generator | None = None,
    noiseless: bool = False,
    sigma_n2: float = 0.0,
) -> np.ndarray:
    """Sample-level reference channel through the surface and the combiner.

    Takes the CP-extended transmit samples; emits the MN block samples after
    CP removal.  Sample i sits at time i*Ts (the CP occupies negative time),
    so each path contributes
        coeff * exp(j2pi nu (i - l_tot) Ts) * s[i - l_tot]
    with l_tot the total integer delay.  Serves as the brute-force oracle for
    apply_channel_dd.
    """
    mn = cfg.grid_size
    if s_cp.size != mn + cp_len:
        raise ValueError("expected CP-extended input block")
    rb_tap = int(round(rb.delay / cfg.ts))
    a_b = array_response_ula(rb.theta_b, combiner.size)
    station_gain = complex(np.vdot(combiner, a_b))
    i = np.arange(mn)
    y = np.zeros(mn, dtype=complex)
    for p in paths:
        l_tot = int(round(p.delay / cfg.ts)) + rb_tap
        if l_tot > cp_len:
            raise ValueError(f"cyclic prefix {cp_len} shorter than delay tap {l_tot}")
        coeff = station_gain * rb.gain * p.gain * combining_gain(omega, rb, p, nx, ny)
        phase = np.exp(2j * np.pi * p.doppler * (i - l_tot) * cfg.ts)
        y += coeff * phase * s_cp[cp_len + i - l_tot]
    if not noiseless:
        if rng is None:
            raise ValueError("rng required for noisy application")
        y += _complex_noise(rng, y.shape, sigma_n2)
    return y
