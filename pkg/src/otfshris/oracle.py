"""Independent brute-force references used by the test suite.

Everything here favours directness over speed: sample-level channel
simulation, exhaustive maximum-likelihood detection on tiny frames, literal
loop transcriptions of the message-passing formulas, two-dimensional
quadrature for the spike-and-slab posterior, and central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel as ch
from . import ddframe as dd


def fd_gradient(f, x: float, h: float) -> float:
    """Central finite difference (f(x+h) - f(x-h)) / 2h."""
    if h <= 0:
        raise ValueError("step must be positive")
    return (f(x + h) - f(x - h)) / (2.0 * h)


def time_domain_reference(
    x_dd: np.ndarray,
    paths: list,
    rb: ch.RbLink,
    omega: np.ndarray,
    combiner: np.ndarray,
    cfg: dd.OtfsConfig,
    nx: int,
    ny: int,
    cp_len: int | None = None,
) -> np.ndarray:
    """Noiseless received grid via the sample-level chain.

    ISFFT -> Heisenberg with one block CP -> per-sample delayed/rotated sums
    through the surface and the station combiner -> Wigner/SFFT.
    """
    rb_tap = int(round(rb.delay / cfg.ts))
    taps = [int(round(p.delay / cfg.ts)) + rb_tap for p in paths]
    if cp_len is None:
        cp_len = max(taps, default=0)
    s = dd.modulate(x_dd, cfg, cp_len)
    r = ch.apply_channel_time(
        s, paths, rb, omega, combiner, cfg, nx, ny, cp_len, noiseless=True
    )
    return dd.wigner_sfft(r, cfg)


def oracle_dd_vs_time(
    x_dd: np.ndarray,
    paths: list,
    rb: ch.RbLink,
    omega: np.ndarray,
    combiner: np.ndarray,
    cfg: dd.OtfsConfig,
    nx: int,
    ny: int,
    p_max: int | None = None,
) -> float:
    """Max relative grid error between the kernel-based channel and the
    sample-level reference, noiseless."""
    casc = ch.cascade(paths, rb, omega, cfg, nx, ny, p_max=p_max)
    station = complex(np.vdot(combiner, ch.array_response_ula(rb.theta_b, combiner.size)))
    casc.gains *= station
    y_kernel = ch.apply_channel_dd(x_dd, casc, cfg, noiseless=True)
    y_ref = time_domain_reference(x_dd, paths, rb, omega, combiner, cfg, nx, ny)
    scale = float(np.max(np.abs(y_ref))) or 1.0
    return float(np.max(np.abs(y_kernel - y_ref)) / scale)


# --- exhaustive detection ------------------------------------------------------


@dataclass
class TinyInstance:
    """A frame small enough to enumerate every data hypothesis."""

    cfg: dd.OtfsConfig
    pattern: dd.SymbolPattern
    constellation: dd.Constellation
    chan: ch.CascadedChannel
    x_grid: np.ndarray
    truth: dd.FrameTruth

    MAX_HYPOTHESES = 4**8

    def __post_init__(self):
        n_hyp = self.constellation.size ** len(self.pattern.data_positions)
        if n_hyp > self.MAX_HYPOTHESES:
            raise ValueError(f"{n_hyp} hypotheses exceed the enumeration bound")


def make_tiny_instance(
    rng: np.random.Generator,
    m: int = 8,
    n: int = 2,
    n_data_cols: int = 4,
    p_taps: int = 2,
    constellation_name: str = "4qam",
    doppler_bins: float = 0.3,
) -> TinyInstance:
    """Random tiny frame: data confined to a few delay columns, the rest
    pilots, so the hypothesis space stays enumerable."""
    cfg = dd.OtfsConfig(m=m, n=n, delta_f=15e3)
    cons = dd.make_constellation(constellation_name)
    everything = {(k, l) for k in range(-n // 2, n // 2) for l in range(m)}
    data = {(k, l) for k in range(-n // 2, n // 2) for l in range(m - n_data_cols, m)}
    pilots = everything - data
    pattern = dd.SymbolPattern(
        m=m, n=n, n_p=n, m_p=m - n_data_cols, variant="proposed",
        power_gap_db=0.0, sigma_d2=1.0,
        pilot_set=frozenset(pilots), guard_set=frozenset(), data_set=frozenset(data),
    )
    x_grid, truth = dd.map_frame(pattern, cons, rng=rng)
    gains = np.zeros(p_taps, dtype=complex)
    occupied = rng.choice(p_taps, size=p_taps, replace=False)
    for t in occupied:
        gains[t] = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2 * p_taps)
    nu = rng.uniform(-doppler_bins, doppler_bins, size=p_taps) * cfg.doppler_res
    k_nu = np.zeros(p_taps, dtype=int)
    beta = np.zeros(p_taps)
    for i, f in enumerate(nu):
        k_nu[i], beta[i] = ch.split_doppler(float(f), cfg)
    chan = ch.CascadedChannel(gains=gains, k_nu=k_nu, beta=beta)
    return TinyInstance(cfg=cfg, pattern=pattern, constellation=cons, chan=chan,
                        x_grid=x_grid, truth=truth)


def ml_detect(instance: TinyInstance, y: np.ndarray) -> np.ndarray:
    """Exhaustive maximum likelihood over every data-symbol combination."""
    cfg, pattern, cons = instance.cfg, instance.pattern, instance.constellation
    positions = pattern.data_positions
    n_d = len(positions)
    n_hyp = cons.size**n_d
    if n_hyp > TinyInstance.MAX_HYPOTHESES:
        raise ValueError("hypothesis space too large")
    half = pattern.n // 2

    base_grid = pattern.pilot_grid
    base = ch.apply_channel_dd(base_grid, instance.chan, cfg, noiseless=True).reshape(-1)
    cols = []
    for k, l in positions:
        unit = np.zeros((cfg.n, cfg.m), dtype=complex)
        unit[k + half, l] = 1.0
        cols.append(ch.apply_channel_dd(unit, instance.chan, cfg, noiseless=True).reshape(-1))
    a_mat = np.stack(cols, axis=1)  # (NM, n_d)

    digits = np.empty((n_hyp, n_d), dtype=np.int64)
    idx = np.arange(n_hyp)
    for j in range(n_d - 1, -1, -1):
        digits[:, j] = idx % cons.size
        idx //= cons.size
    symbols = cons.array[digits]  # (n_hyp, n_d)
    models = base[None, :] + symbols @ a_mat.T
    err = np.sum(np.abs(y.reshape(-1)[None, :] - models) ** 2, axis=1)
    return digits[int(np.argmin(err))]


# --- spike-and-slab posterior by quadrature -------------------------------------


def quad_posterior(alpha: float, lam: float, messages: list, grid_pts: int = 401, span: float = 8.0):
    """Numerically integrated Bernoulli-Gaussian posterior moments.

    `messages` is a list of (mean, variance) Gaussian likelihood factors.  The
    point mass at zero is handled analytically; the slab is integrated on a
    (grid_pts x grid_pts) complex grid spanning `span` posterior standard
    deviations around the slab-product centre.
    """
    if alpha <= 0.0:
        return 0.0 + 0.0j, 0.0, 0.0
    mus = np.array([m for m, _ in messages], dtype=complex)
    etas = np.array([v for _, v in messages], dtype=float)

    def loglik(h):
        return sum(
            -np.log(np.pi * e) - np.abs(h - m) ** 2 / e for m, e in zip(mus, etas)
        )

    prec = 1.0 / lam + np.sum(1.0 / etas)
    centre = np.sum(mus / etas) / prec
    sd = np.sqrt(1.0 / prec)
    ax = np.linspace(-span * sd, span * sd, grid_pts)
    cell = (ax[1] - ax[0]) ** 2
    hr, hi = np.meshgrid(ax, ax, indexing="ij")
    h = centre + hr + 1j * hi

    logw = np.log(alpha) - np.log(np.pi * lam) - np.abs(h) ** 2 / lam + loglik(h)
    log_spike = np.log1p(-alpha) + loglik(0.0) if alpha < 1.0 else -np.inf
    peak = max(float(np.max(logw)), log_spike if np.isfinite(log_spike) else -np.inf)
    w = np.exp(logw - peak)
    slab_mass = float(w.sum() * cell)
    spike_mass = float(np.exp(log_spike - peak)) if np.isfinite(log_spike) else 0.0
    z = slab_mass + spike_mass
    mean = complex((w * h).sum() * cell / z)
    second = float((w * np.abs(h) ** 2).sum() * cell / z)
    var = second - abs(mean) ** 2
    activation = slab_mass / z
    return mean, var, activation


# --- literal message-passing transcriptions --------------------------------------


def mp_reference_y_to_x(y, kernel, mu_h, eta_h, mu_x, eta_x, sigma_n2):
    """Loop transcription of the observation -> symbol-copy messages.

    kernel, mu_x, eta_x are (N, M, P, Q); mu_h, eta_h are (N, M, P).  Returns
    (mean, variance) arrays without any flooring.
    """
    n, m, p_max, qn = kernel.shape
    mu = np.zeros_like(mu_x)
    eta = np.zeros(mu_x.shape)
    for r in range(n):
        for l in range(m):
            for p in range(p_max):
                for q in range(qn):
                    u_hat = 0.0 + 0.0j
                    v = 0.0
                    for pp in range(p_max):
                        for qq in range(qn):
                            if (pp, qq) == (p, q):
                                continue
                            g = kernel[r, l, pp, qq]
                            u_hat += mu_h[r, l, pp] * g * mu_x[r, l, pp, qq]
                            v += abs(g) ** 2 * (
                                abs(mu_h[r, l, pp]) ** 2 * eta_x[r, l, pp, qq]
                                + eta_h[r, l, pp]
                                * (eta_x[r, l, pp, qq] + abs(mu_x[r, l, pp, qq]) ** 2)
                            )
                    g = kernel[r, l, p, q]
                    den = g * mu_h[r, l, p]
                    mu[r, l, p, q] = (y[r, l] - u_hat) / den
                    eta[r, l, p, q] = (
                        v
                        + sigma_n2
                        - abs(g) ** 2 * abs(mu[r, l, p, q]) ** 2 * eta_h[r, l, p]
                    ) / (abs(g) ** 2 * (abs(mu_h[r, l, p]) ** 2 + eta_h[r, l, p]))
    return mu, eta


def mp_reference_y_to_h(y, kernel, mu_h, eta_h, xbar, vbar, sigma_n2, cells):
    """Loop transcription of the observation -> gain messages on `cells`."""
    n, m, p_max, qn = kernel.shape
    mu = np.zeros((len(cells), p_max), dtype=complex)
    eta = np.zeros((len(cells), p_max))
    for i, (r, l) in enumerate(cells):
        mu_gx = np.zeros(p_max, dtype=complex)
        eta_gx = np.zeros(p_max)
        for p in range(p_max):
            for q in range(qn):
                mu_gx[p] += kernel[r, l, p, q] * xbar[r, l, p, q]
                eta_gx[p] += abs(kernel[r, l, p, q]) ** 2 * vbar[r, l, p, q]
        for p in range(p_max):
            u_hat = 0.0 + 0.0j
            v = 0.0
            for pp in range(p_max):
                if pp == p:
                    continue
                u_hat += mu_gx[pp] * mu_h[r, l, pp]
                v += eta_h[r, l, pp] * (eta_gx[pp] + abs(mu_gx[pp]) ** 2)
                v += abs(mu_h[r, l, pp]) ** 2 * eta_gx[pp]
            mu[i, p] = (y[r, l] - u_hat) / mu_gx[p]
            eta[i, p] = (v + sigma_n2 - abs(mu[i, p]) ** 2 * eta_gx[p]) / (
                eta_gx[p] + abs(mu_gx[p]) ** 2
            )
    return mu, eta


def bg_two_hypothesis(mu_sum: complex, eta_sum: float, alpha: float, lam: float):
    """Direct two-hypothesis enumeration of the Bernoulli-Gaussian update."""
    def cn0(var):
        return np.exp(-abs(mu_sum) ** 2 / var) / (np.pi * var)

    active = alpha * cn0(lam + eta_sum)
    inactive = (1 - alpha) * cn0(eta_sum)
    k = active / (active + inactive)
    gamma_ = lam * mu_sum / (lam + eta_sum)
    theta_ = lam * eta_sum / (lam + eta_sum)
    mean = gamma_ * k
    var = theta_ * k + abs(gamma_) ** 2 * (k - k**2)
    return mean, var, k
