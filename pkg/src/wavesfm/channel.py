"""MIMO-OFDM channel simulation and classical pilot-based estimators.

The channel is a tapped-delay Rayleigh model: taps draw from an exponential
power-delay profile, evolve over OFDM symbols with Jakes time correlation
rho(dt) = J0(2 pi f_d dt), and transform to per-subcarrier frequency
response.  This replaces a full geometric simulator; it is small enough to
verify analytically (Doppler value, pilot MSE, LMMSE ordering) while keeping
the correlation structure the estimators rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import j0

from .pipeline import GridSample
from .rng import RngState

LIGHT_SPEED = 3e8


@dataclass(frozen=True)
class OfdmConfig:
    n_subcarriers: int = 64
    n_symbols: int = 14
    pilot_symbols: tuple = (2, 11)
    n_rx_antennas: int = 16
    scs_hz: float = 30e3
    carrier_hz: float = 3.5e9
    speed_mps: float = 3.0
    snr_range_db: tuple = (-10.0, 20.0)
    n_taps: int = 12
    tap_spacing_s: float = 100e-9
    rms_delay_s: float = 300e-9
    spatial_rho: float = 0.0

    def __post_init__(self):
        if any(p < 0 or p >= self.n_symbols for p in self.pilot_symbols):
            raise ValueError("pilot symbol indices must lie inside the grid")
        if self.n_rx_antennas < 1:
            raise ValueError("need at least one antenna")
        if not 0.0 <= self.spatial_rho < 1.0:
            raise ValueError("spatial correlation must be in [0, 1)")


@dataclass
class ChannelRealization:
    h: np.ndarray                 # (antennas, symbols, subcarriers) complex
    taps: np.ndarray              # (antennas, taps, symbols) complex gains
    doppler_hz: float
    snr_db: Optional[float]


def doppler_hz(cfg: OfdmConfig) -> float:
    return cfg.speed_mps * cfg.carrier_hz / LIGHT_SPEED


def _complex_normal(rng: RngState, shape) -> np.ndarray:
    re = rng.normal(shape)
    im = rng.normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def _pdp(cfg: OfdmConfig) -> np.ndarray:
    p = np.exp(-np.arange(cfg.n_taps) * cfg.tap_spacing_s / cfg.rms_delay_s)
    return p / p.sum()


def _time_cholesky(cfg: OfdmConfig) -> np.ndarray:
    t_sym = 1.0 / cfg.scs_hz
    lags = np.arange(cfg.n_symbols)
    rho = j0(2.0 * np.pi * doppler_hz(cfg) * t_sym * np.abs(lags[:, None] - lags[None, :]))
    # slow fading makes this matrix nearly rank one; jitter keeps it Cholesky-able
    return np.linalg.cholesky(rho + 1e-10 * np.eye(cfg.n_symbols))


def gen_channel(cfg: OfdmConfig, rng: RngState, snr_db: Optional[float] = None) -> ChannelRealization:
    """One channel realization, grid power normalized to exactly 1."""
    a, s, f, l = cfg.n_rx_antennas, cfg.n_symbols, cfg.n_subcarriers, cfg.n_taps
    chol = _time_cholesky(cfg)
    pdp = _pdp(cfg)
    # (antennas, taps, symbols) of Jakes-correlated Rayleigh gains
    white = _complex_normal(rng, (a, l, s))
    gains = white @ chol.T * np.sqrt(pdp)[None, :, None]
    if cfg.spatial_rho > 0.0 and a > 1:
        r_s = cfg.spatial_rho ** np.abs(np.subtract.outer(np.arange(a), np.arange(a)))
        mix = np.linalg.cholesky(r_s + 1e-12 * np.eye(a))
        gains = np.tensordot(mix, gains, axes=(1, 0))
    delays = np.arange(l) * cfg.tap_spacing_s
    freqs = np.arange(f) * cfg.scs_hz
    steering = np.exp(-2j * np.pi * np.outer(delays, freqs))     # (taps, subcarriers)
    h = np.einsum("als,lf->asf", gains, steering)
    power = np.mean(np.abs(h) ** 2)
    h = h / np.sqrt(power)
    gains = gains / np.sqrt(power)
    if snr_db is None:
        lo, hi = cfg.snr_range_db
        snr_db = rng.uniform(lo=lo, hi=hi)
    return ChannelRealization(h=h, taps=gains, doppler_hz=doppler_hz(cfg), snr_db=snr_db)


def gen_mimo_ofdm(cfg: OfdmConfig, rng: RngState, snr_db: Optional[float] = None):
    """Simulate one pilot transmission.

    Returns (tx_pilots, rx_grid, realization): tx is the (symbols x
    subcarriers) resource grid holding unit-modulus QPSK pilots at the pilot
    symbols and zeros elsewhere; rx is the per-antenna noisy observation,
    with AWGN applied on pilot cells only.  ``snr_db=inf`` disables noise.
    """
    chan = gen_channel(cfg, rng.split("channel"), snr_db=snr_db)
    s, f = cfg.n_symbols, cfg.n_subcarriers
    qpsk = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)
    tx = np.zeros((s, f), dtype=np.complex128)
    prng = rng.split("pilots")
    for p in cfg.pilot_symbols:
        sel = prng.integers(4, (f,))
        tx[p] = qpsk[sel]
    rx = chan.h * tx[None, :, :]
    if chan.snr_db is not None and np.isfinite(chan.snr_db):
        sigma2 = 10.0 ** (-chan.snr_db / 10.0)
        nrng = rng.split("noise")
        for p in cfg.pilot_symbols:
            noise = _complex_normal(nrng, (cfg.n_rx_antennas, f)) * np.sqrt(sigma2)
            rx[:, p, :] += noise
    return tx, rx, chan


# -- estimators -----------------------------------------------------------------


def pilot_rows(tx_pilots: np.ndarray) -> np.ndarray:
    return np.where(np.abs(tx_pilots).sum(axis=1) > 0)[0]


def ls_estimate(tx_pilots: np.ndarray, rx_grid: np.ndarray):
    """Per-cell division rx / tx at the pilot symbols.

    Returns (pilot_indices, estimates) with estimates shaped
    (antennas, n_pilot_symbols, subcarriers).
    """
    pilots = pilot_rows(tx_pilots)
    if len(pilots) == 0:
        raise ValueError("no pilot symbols in the tx grid")
    ref = tx_pilots[pilots]
    if (np.abs(ref) == 0).any():
        raise ValueError("zero pilot value")
    return pilots, rx_grid[:, pilots, :] / ref[None, :, :]


def interpolate_pilots(pilot_csi: np.ndarray, pilot_indices, n_symbols: int,
                       method: str = "linear") -> np.ndarray:
    """Extend pilot-symbol estimates to the whole grid along the time axis.

    Linear interpolation between pilot symbols and linear extrapolation from
    the nearest segment outside them; a single pilot symbol tiles.
    """
    if method != "linear":
        raise ValueError(f"unknown interpolation method: {method}")
    pil = np.asarray(pilot_indices, dtype=np.int64)
    n_p = len(pil)
    if n_p == 0:
        raise ValueError("need at least one pilot symbol")
    w = np.zeros((n_symbols, n_p))
    if n_p == 1:
        w[:, 0] = 1.0
    else:
        for sym in range(n_symbols):
            seg = int(np.clip(np.searchsorted(pil, sym, side="right") - 1, 0, n_p - 2))
            p0, p1 = pil[seg], pil[seg + 1]
            w[sym, seg] = (p1 - sym) / (p1 - p0)
            w[sym, seg + 1] = (sym - p0) / (p1 - p0)
    return np.einsum("sp,apf->asf", w, pilot_csi)


def estimate_covariances(cfg: OfdmConfig, rng: RngState, n_draws: int = 10000):
    """Empirical frequency and time covariances from simulator draws."""
    f, s = cfg.n_subcarriers, cfg.n_symbols
    r_f = np.zeros((f, f), dtype=np.complex128)
    r_t = np.zeros((s, s), dtype=np.complex128)
    for i in range(n_draws):
        h = gen_channel(cfg, rng.split("cov", i)).h
        r_f += np.einsum("asf,ask->fk", h, h.conj())
        r_t += np.einsum("asf,auf->su", h, h.conj())
    r_f /= n_draws * cfg.n_rx_antennas * s
    r_t /= n_draws * cfg.n_rx_antennas * f
    return r_f, r_t


def lmmse_estimate(ls_pilot_csi: np.ndarray, pilot_indices, freq_cov: np.ndarray,
                   time_cov: np.ndarray, noise_var: float, reg: float = 1e-9) -> np.ndarray:
    """Separable LMMSE: Wiener smoothing across subcarriers at each pilot
    symbol, then covariance-weighted interpolation across symbols.

    ``noise_var`` is the per-cell AWGN variance on the LS estimates.  All
    inversions carry a reg * I ridge so near-singular covariances (very slow
    fading) stay solvable.
    """
    f = freq_cov.shape[0]
    n_symbols = time_cov.shape[0]
    pil = np.asarray(pilot_indices, dtype=np.int64)
    eye_f = np.eye(f)
    a_f = freq_cov @ np.linalg.inv(freq_cov + (noise_var + reg) * eye_f)
    smoothed = np.einsum("fk,apk->apf", a_f, ls_pilot_csi)
    # average per-coefficient noise power that survives the smoother
    res_var = noise_var * np.real(np.trace(a_f @ a_f.conj().T)) / f
    r_pp = time_cov[np.ix_(pil, pil)]
    w_t = time_cov[:, pil] @ np.linalg.inv(r_pp + (res_var + reg) * np.eye(len(pil)))
    return np.einsum("sp,apf->asf", w_t, smoothed)


# -- resource-grid packing -------------------------------------------------------


def pack_chanest_input(tx_pilots: np.ndarray, rx_grid: np.ndarray,
                       snr_db: Optional[float] = None) -> GridSample:
    """Stack antennas vertically into an image with channels
    {Re rx, Im rx, Re tx, Im tx}; non-pilot cells are zero."""
    a, s, f = rx_grid.shape
    img = np.zeros((a * s, f, 4), dtype=np.float32)
    for ant in range(a):
        rows = slice(ant * s, (ant + 1) * s)
        img[rows, :, 0] = rx_grid[ant].real
        img[rows, :, 1] = rx_grid[ant].imag
        img[rows, :, 2] = tx_pilots.real
        img[rows, :, 3] = tx_pilots.imag
    return GridSample(data=img, modality="ofdm-grid", snr_db=snr_db)


def unpack_chanest_input(sample: GridSample, n_antennas: int):
    """Inverse of pack_chanest_input; returns (tx_pilots, rx_grid)."""
    img = sample.data
    s = img.shape[0] // n_antennas
    tx = img[:s, :, 2] + 1j * img[:s, :, 3]
    rx = np.stack([img[ant * s:(ant + 1) * s, :, 0] + 1j * img[ant * s:(ant + 1) * s, :, 1]
                   for ant in range(n_antennas)])
    return tx.astype(np.complex128), rx.astype(np.complex128)


def pack_chanest_target(h: np.ndarray) -> np.ndarray:
    """Channel grid as a stacked-antenna real image with {Re, Im} channels."""
    a, s, f = h.shape
    out = np.zeros((a * s, f, 2), dtype=np.float32)
    for ant in range(a):
        rows = slice(ant * s, (ant + 1) * s)
        out[rows, :, 0] = h[ant].real
        out[rows, :, 1] = h[ant].imag
    return out


def unpack_chanest_target(img: np.ndarray, n_antennas: int) -> np.ndarray:
    s = img.shape[0] // n_antennas
    return np.stack([img[ant * s:(ant + 1) * s, :, 0] + 1j * img[ant * s:(ant + 1) * s, :, 1]
                     for ant in range(n_antennas)]).astype(np.complex128)
