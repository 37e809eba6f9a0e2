"""Hybrid-surface side processing: sparse element activation during the
preamble, greedy parameter extraction over a continuous dictionary, the
closed-form phase-shift design, and least-squares gain recalibration between
frames.

The preamble observation is stacked as (pilot slot) x (block, RF chain):
index n_T * (N_B * N_RF) + (n_B * N_RF + j).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .channel import upa_element_phase
from .ddframe import OtfsConfig

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Activation request outside the schedule."""


def activation_indices(n_b: int, n_x: int, n_rf: int) -> np.ndarray:
    """1-based element ids activated in preamble block n_b (1-based).

    The first N_x/N_RF blocks walk the first row of the surface, the
    remainder walk the first column with stride N_x.
    """
    n_blocks = 2 * n_x // n_rf
    if not 1 <= n_b <= n_blocks:
        raise ScheduleError(f"block {n_b} outside 1..{n_blocks}")
    n_rf_idx = np.arange(1, n_rf + 1)
    if n_b <= n_x // n_rf:
        return (n_b - 1) * n_rf + n_rf_idx
    return ((n_b - 1) * n_rf - n_x + n_rf_idx - 1) * n_x + 1


@dataclass(frozen=True)
class ActivationSchedule:
    """Which elements listen in each preamble block (0-based positions)."""

    n_x: int
    n_y: int
    n_rf: int
    blocks: tuple  # tuple of tuples of 0-based element ids

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def element_coords(self) -> tuple:
        """(rows, cols) 0-based UPA coordinates of every activation slot."""
        ids = np.concatenate([np.asarray(b) for b in self.blocks])
        return ids // self.n_y, ids % self.n_y


def build_schedule(n_x: int, n_y: int, n_rf: int) -> ActivationSchedule:
    if (2 * n_x) % n_rf or n_x % n_rf:
        raise ScheduleError("n_rf must divide n_x")
    blocks = tuple(
        tuple(int(e) - 1 for e in activation_indices(b, n_x, n_rf))
        for b in range(1, 2 * n_x // n_rf + 1)
    )
    return ActivationSchedule(n_x=n_x, n_y=n_y, n_rf=n_rf, blocks=blocks)


def calibration_schedule(n_x: int, n_y: int, n_rf: int) -> ActivationSchedule:
    """Single-block schedule: the first n_rf elements of the first column."""
    ids = tuple(r * n_y for r in range(n_rf))
    return ActivationSchedule(n_x=n_x, n_y=n_y, n_rf=n_rf, blocks=(ids,))


@dataclass(frozen=True)
class Preamble:
    """Constant-modulus pilot sequence reused in every preamble block."""

    seq: np.ndarray
    ts: float

    @property
    def n_t(self) -> int:
        return self.seq.size


def zadoff_chu(n_t: int, ts: float, root: int = 1) -> Preamble:
    i = np.arange(n_t)
    if n_t % 2 == 0:
        seq = np.exp(-1j * np.pi * root * i**2 / n_t)
    else:
        seq = np.exp(-1j * np.pi * root * i * (i + 1) / n_t)
    return Preamble(seq=seq, ts=ts)


@dataclass
class HrisObservation:
    """Stacked preamble samples absorbed by the activated elements."""

    y: np.ndarray
    sigma2: float
    n_t: int
    schedule: ActivationSchedule


@dataclass
class PathEstimate:
    """One extracted path: gain is referenced to the sequence start."""

    gain: complex
    tau: float
    nu: float
    phi: float
    psi: float

    @property
    def gain_at_origin(self) -> complex:
        """Gain with the delay-induced Doppler phase removed."""
        return self.gain * np.exp(2j * np.pi * self.nu * self.tau)


def _atom_phase_tables(preamble: Preamble, schedule: ActivationSchedule):
    """Per-sample coefficient tables for the dictionary atoms.

    Returns (time_idx, rows, cols, seq, n_t, n_slots) where the atom for
    (tau_tap, nu, u, w) is
        seq[(slot - tau_tap) mod n_t] * exp(j2pi nu Ts time_idx)
        * exp(j upa_element_phase(rows, cols, u, w))
    flattened over slot-major (slot, block, rf) order.
    """
    n_t = preamble.n_t
    rows, cols = schedule.element_coords()
    n_act = rows.size
    block_of_slot = np.repeat(np.arange(schedule.n_blocks), schedule.n_rf)
    slot = np.arange(n_t)
    time_idx = slot[:, None] + block_of_slot[None, :] * n_t  # (n_t, n_act)
    return time_idx, rows, cols, n_act


def _atom(preamble, schedule, tables, tau_tap: int, nu: float, u: float, w: float):
    time_idx, rows, cols, n_act = tables
    n_t = preamble.n_t
    seq_shift = preamble.seq[(np.arange(n_t) - tau_tap) % n_t]
    elem = np.exp(1j * upa_element_phase(rows, cols, u, w))
    a = seq_shift[:, None] * np.exp(2j * np.pi * nu * preamble.ts * time_idx) * elem[None, :]
    return a.reshape(-1)


def simulate_preamble(
    paths: list,
    preamble: Preamble,
    schedule: ActivationSchedule,
    sigma2: float,
    rng: np.random.Generator | None = None,
    noiseless: bool = False,
) -> HrisObservation:
    """Superpose the delayed/rotated/steered pilot copies of every path."""
    ts = preamble.ts
    n_t = preamble.n_t
    max_tap = max((int(round(p.delay / ts)) for p in paths), default=0)
    if n_t < max_tap:
        raise ValueError(f"preamble length {n_t} shorter than delay spread {max_tap}")
    tables = _atom_phase_tables(preamble, schedule)
    y = np.zeros(n_t * tables[3], dtype=complex)
    for p in paths:
        tap = int(round(p.delay / ts))
        h_bar = p.gain * np.exp(-2j * np.pi * p.doppler * p.delay)
        u = np.sin(p.phi) * np.sin(p.psi)
        w = np.sin(p.phi) * np.cos(p.psi)
        y += h_bar * _atom(preamble, schedule, tables, tap, p.doppler, u, w)
    if not noiseless:
        if rng is None:
            raise ValueError("rng required for noisy preamble")
        y += np.sqrt(sigma2 / 2) * (
            rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        )
    return HrisObservation(y=y, sigma2=sigma2, n_t=n_t, schedule=schedule)


# --- greedy extraction over the continuous dictionary ------------------------


def _coarse_grids(preamble, schedule, nu_max: float, angle_priors, angle_window):
    n_x = schedule.n_x
    duration = schedule.n_blocks * preamble.n_t * preamble.ts
    nu_step = 1.0 / (4.0 * duration)
    n_half = max(int(np.ceil(nu_max / nu_step)), 2)
    nu_grid = np.arange(-n_half, n_half + 1) * nu_step
    u_grid = np.arange(0.0, 1.0 + 1e-9, 1.0 / n_x)
    w_grid = np.arange(-1.0, 1.0 + 1e-9, 1.0 / n_x)
    if angle_priors:
        us = np.array([np.sin(p) * np.sin(s) for p, s in angle_priors])
        ws = np.array([np.sin(p) * np.cos(s) for p, s in angle_priors])
        keep_u = np.any(np.abs(u_grid[:, None] - us[None, :]) <= angle_window, axis=1)
        keep_w = np.any(np.abs(w_grid[:, None] - ws[None, :]) <= angle_window, axis=1)
        if keep_u.any():
            u_grid = u_grid[keep_u]
        if keep_w.any():
            w_grid = w_grid[keep_w]
    return nu_grid, u_grid, w_grid


def _coarse_detect(resid, preamble, schedule, tables, nu_grid, u_grid, w_grid):
    """Best (tau_tap, nu, u, w) by correlation, using the row/column split of
    the activation pattern to factorise the angle search."""
    time_idx, rows, cols, n_act = tables
    n_t = preamble.n_t
    y = resid.reshape(n_t, n_act)
    row_elems = rows == 0  # first-row activations: response varies with w
    col_elems = ~row_elems
    dft_w = np.exp(1j * np.pi * np.outer(w_grid, cols[row_elems]))
    dft_u = np.exp(1j * np.pi * np.outer(u_grid, rows[col_elems]))
    # conj(atom) = conj(seq)*exp(-j2pi nu t)*exp(+j pi (row*u + col*w))
    best = (-1.0, None)
    slots = np.arange(n_t)
    for tau_tap in range(n_t):
        seq_c = np.conj(preamble.seq[(slots - tau_tap) % n_t])
        for nu in nu_grid:
            g = np.einsum(
                "t,ta,ta->a", seq_c, np.exp(-2j * np.pi * nu * preamble.ts * time_idx), y
            )
            a_row = dft_w @ g[row_elems]  # (w,)
            a_col = dft_u @ g[col_elems]  # (u,)
            score = np.abs(a_col[:, None] + a_row[None, :]) ** 2  # (u, w)
            uu, ww = np.meshgrid(u_grid, w_grid, indexing="ij")
            score = np.where(uu**2 + ww**2 <= 1.0, score, -1.0)
            i, j = np.unravel_index(np.argmax(score), score.shape)
            if score[i, j] > best[0]:
                best = (float(score[i, j]), (tau_tap, float(nu), float(u_grid[i]), float(w_grid[j])))
    return best[1]


def _newton_refine(resid, preamble, schedule, tables, theta, nu_bound, iters: int):
    """Maximise |a(nu,u,w)^H r|^2 by damped Newton steps; tau stays on grid."""
    time_idx, rows, cols, n_act = tables
    tau_tap, nu, u, w = theta
    n_t = preamble.n_t
    slots = np.arange(n_t)
    seq_shift = preamble.seq[(slots - tau_tap) % n_t]
    r = resid.reshape(n_t, n_act)
    # phase derivative tables (per flattened sample)
    d_nu = (2 * np.pi * preamble.ts * time_idx)[:, :]
    d_u = np.broadcast_to(-np.pi * rows[None, :], d_nu.shape)
    d_w = np.broadcast_to(-np.pi * cols[None, :], d_nu.shape)

    def corr(nu_, u_, w_):
        elem = np.exp(1j * upa_element_phase(rows, cols, u_, w_))
        a = seq_shift[:, None] * np.exp(2j * np.pi * nu_ * preamble.ts * time_idx) * elem
        ca = np.conj(a) * r
        c = ca.sum()
        return c, ca

    def objective(nu_, u_, w_):
        c, _ = corr(nu_, u_, w_)
        return float(np.abs(c) ** 2)

    f0 = objective(nu, u, w)
    x = np.array([nu, u, w])
    fx = f0
    for _ in range(iters):
        c, ca = corr(*x)
        cj = np.array([(d * ca).sum() for d in (d_nu, d_u, d_w)])
        grad = 2 * np.imag(cj * np.conj(c))
        hess = np.empty((3, 3))
        ds = (d_nu, d_u, d_w)
        for a_ in range(3):
            for b_ in range(a_, 3):
                cjk = (ds[a_] * ds[b_] * ca).sum()
                hess[a_, b_] = hess[b_, a_] = 2 * np.real(-cjk * np.conj(c) + cj[a_] * np.conj(cj[b_]))
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        cand = x + step
        cand[0] = np.clip(cand[0], -nu_bound, nu_bound)
        cand[1] = np.clip(cand[1], 0.0, 1.0)
        rad = np.hypot(cand[1], cand[2])
        if rad > 1.0 - 1e-9:
            cand[1:] *= (1.0 - 1e-9) / rad
        fc = objective(*cand)
        if not np.isfinite(fc) or fc <= fx:
            # halve once before giving up on this iteration
            cand = x + 0.5 * step
            cand[0] = np.clip(cand[0], -nu_bound, nu_bound)
            rad = np.hypot(cand[1], cand[2])
            if rad > 1.0 - 1e-9:
                cand[1:] *= (1.0 - 1e-9) / rad
            fc = objective(*cand)
            if not np.isfinite(fc) or fc <= fx:
                break
        x, fx = cand, fc
    if fx < f0:
        log.debug("newton refinement fell back to the grid point")
        return theta
    return (tau_tap, float(x[0]), float(x[1]), float(x[2]))


def nomp_extract(
    obs: HrisObservation,
    preamble: Preamble,
    schedule: ActivationSchedule,
    max_paths: int,
    stop_threshold: float = 1e-3,
    refine_iters: int = 3,
    cyclic_passes: int = 1,
    nu_max: float = 0.0,
    angle_priors: list | None = None,
    angle_window: float = 0.12,
) -> list:
    """Greedy extraction of (delay tap, Doppler, direction) path parameters.

    Detection on an oversampled coarse grid, Newton refinement of the
    continuous parameters, least-squares re-fit of all gains after each
    addition, and cyclic refinement passes.  Stops when the residual energy
    reduction falls below `stop_threshold` (relative) or at `max_paths`.
    """
    tables = _atom_phase_tables(preamble, schedule)
    nu_grid, u_grid, w_grid = _coarse_grids(preamble, schedule, nu_max, angle_priors, angle_window)
    nu_bound = 1.2 * max(nu_max, nu_grid[-1] if nu_grid.size else 0.0) + 1e-12
    y = obs.y
    resid = y.copy()
    thetas: list = []
    atoms: list = []
    gains = np.zeros(0, dtype=complex)
    energy = float(np.vdot(resid, resid).real)

    def refit():
        nonlocal gains, resid
        a_mat = np.stack(atoms, axis=1)
        gains, *_ = np.linalg.lstsq(a_mat, y, rcond=None)
        resid = y - a_mat @ gains

    while len(thetas) < max_paths:
        theta = _coarse_detect(resid, preamble, schedule, tables, nu_grid, u_grid, w_grid)
        theta = _newton_refine(resid, preamble, schedule, tables, theta, nu_bound, refine_iters)
        thetas.append(theta)
        atoms.append(_atom(preamble, schedule, tables, *theta))
        refit()
        new_energy = float(np.vdot(resid, resid).real)
        if energy - new_energy < stop_threshold * energy:
            thetas.pop()
            atoms.pop()
            if atoms:
                refit()
            else:
                gains = np.zeros(0, dtype=complex)
                resid = y.copy()
            break
        energy = new_energy

        for _ in range(cyclic_passes):
            for idx in range(len(thetas)):
                local = resid + atoms[idx] * gains[idx]
                th = _newton_refine(local, preamble, schedule, tables, thetas[idx], nu_bound, refine_iters)
                thetas[idx] = th
                atoms[idx] = _atom(preamble, schedule, tables, *th)
                refit()
        energy = float(np.vdot(resid, resid).real)

    out = []
    for th, g in zip(thetas, gains):
        tau_tap, nu, u, w = th
        sin_phi = min(np.hypot(u, w), 1.0)
        out.append(
            PathEstimate(
                gain=complex(g),
                tau=float(tau_tap * preamble.ts),
                nu=float(nu),
                phi=float(np.arcsin(sin_phi)),
                psi=float(np.arctan2(u, w)),
            )
        )
    return out


# --- beam design and calibration ----------------------------------------------


def interference_energy(
    l_tau: int, k_nu: int, beta_nu: float, pattern, cfg: OtfsConfig
) -> float:
    """Total spreading energy a tap deposits outside the pilot positions.

    Sum of |kernel|^2 over all non-pilot grids and every Doppler offset.
    """
    from .channel import tap_kernel

    ker = tap_kernel(cfg, l_tau, k_nu, beta_nu)  # (N, M, Q)
    non_pilot = pattern.class_grid != 1
    return float((np.abs(ker) ** 2).sum(axis=2)[non_pilot].sum())


def beamform(
    estimates: list,
    phi_r: float,
    psi_r: float,
    s_weights: np.ndarray,
    nx: int,
    ny: int,
) -> np.ndarray:
    """Closed-form unit-modulus phase profile.

    Each element's phase aligns the weighted sum of departure x conjugate
    arrival responses; weights are |S_p| |h_p|.  Elements where the sum
    vanishes default to phase 0.
    """
    from .channel import array_response_upa

    a_out = array_response_upa(phi_r, psi_r, nx, ny)
    acc = np.zeros(nx * ny, dtype=complex)
    for est, s2 in zip(estimates, s_weights):
        a_in = array_response_upa(est.phi, est.psi, nx, ny)
        acc += np.sqrt(max(s2, 0.0)) * np.abs(est.gain) * a_out * np.conj(a_in)
    mag = np.abs(acc)
    omega = np.where(mag > 0, acc / np.where(mag > 0, mag, 1.0), 1.0 + 0j)
    return omega


def calibration_matrix(
    estimates: list, preamble: Preamble, schedule: ActivationSchedule
) -> np.ndarray:
    """Atom matrix for the short recalibration pilot with frozen parameters."""
    tables = _atom_phase_tables(preamble, schedule)
    cols = []
    for est in estimates:
        tap = int(round(est.tau / preamble.ts))
        u = np.sin(est.phi) * np.sin(est.psi)
        w = np.sin(est.phi) * np.cos(est.psi)
        cols.append(_atom(preamble, schedule, tables, tap, est.nu, u, w))
    return np.stack(cols, axis=1)


def ls_calibrate(
    obs_short: HrisObservation,
    estimates: list,
    preamble: Preamble,
) -> list | None:
    """Re-fit complex gains with delays/Dopplers/angles frozen.

    Returns refreshed PathEstimates, or None when the system is rank
    deficient (caller keeps the previous gains).
    """
    j_t = calibration_matrix(estimates, preamble, obs_short.schedule)
    rank = np.linalg.matrix_rank(j_t)
    if rank < len(estimates):
        log.debug("calibration skipped: rank %d < %d paths", rank, len(estimates))
        return None
    h_bar, *_ = np.linalg.lstsq(j_t, obs_short.y, rcond=None)
    out = []
    for est, g in zip(estimates, h_bar):
        out.append(PathEstimate(gain=complex(g), tau=est.tau, nu=est.nu, phi=est.phi, psi=est.psi))
    return out
