"""Synthetic wireless datasets for the four downstream tasks.

Everything here is procedurally generated from a seeded counter RNG, so a
dataset is fully described by (generator parameters, seed) and can be
regenerated bit-for-bit.  Signal families are deliberately simple closed
forms (tones, chirps, bursts, hoppers); the point is distributions with
known, testable structure, not radio realism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import (OfdmConfig, gen_mimo_ofdm, pack_chanest_input,
                      pack_chanest_target)
from .pipeline import GridSample
from .rng import RngState

N_FFT = 256
HOP = 64
N_ACTIVITY_SUBCARRIERS = 114
N_ACTIVITY_CHANNELS = 3
ACTIVITY_CLASSES = 6
LIGHT_SPEED = 3e8

# one modulation frequency (cycles per frame) per activity class, all
# distinct and below Nyquist for the default frame counts
ACTIVITY_FREQS = (0.04, 0.08, 0.13, 0.19, 0.26, 0.34)


@dataclass
class SceneSpec:
    """Parameters of one emitter scene for the spectrogram generator."""
    class_id: int
    family: str
    params: dict
    snr_db: float = 20.0
    n_frames: int = 64
    boxes: tuple = ()        # normalized (t0, t1, f0, f1) occupancy boxes

    def __post_init__(self):
        for t0, t1, f0, f1 in self.boxes:
            if not (0.0 <= t0 < t1 <= 1.0 and 0.0 <= f0 < f1 <= 1.0):
                raise ValueError(f"occupancy box out of bounds: {(t0, t1, f0, f1)}")


def build_class_table(n_classes: int = 20):
    """Emitter class definitions: six families cycled with shifted params.

    Frequencies are normalized to the sample rate (cycles/sample in
    [-0.5, 0.5)).
    """
    families = ("tone", "chirp", "burst", "fm", "hopper", "noise")
    table = []
    for cid in range(n_classes):
        fam = families[cid % len(families)]
        v = cid // len(families)    # variant index shifts the params
        if fam == "tone":
            params = {"f0": 0.06 + 0.09 * v}
        elif fam == "chirp":
            params = {"f0": -0.30 + 0.10 * v, "f1": 0.05 + 0.10 * v}
        elif fam == "burst":
            params = {"f_lo": -0.25 + 0.12 * v, "n_tones": 8 + 4 * v,
                      "spacing": 0.01, "duty": 0.5}
        elif fam == "fm":
            params = {"fc": -0.10 + 0.08 * v, "fdev": 0.03 + 0.01 * v,
                      "rate": 0.002 * (v + 1)}
        elif fam == "hopper":
            params = {"freqs": tuple(-0.35 + 0.1 * k + 0.04 * v for k in range(5)),
                      "dwell_frames": 6 + 2 * v}
        else:
            # variant 0 is broadband AWGN; higher variants are band-limited
            # noise plateaus so the noise classes stay mutually distinguishable
            params = {} if v == 0 else {"band": (-0.35 + 0.3 * v, -0.15 + 0.3 * v)}
        table.append({"class_id": cid, "family": fam, "params": params})
    return table


def scene_for_class(class_id: int, snr_db: float = 20.0, n_frames: int = 64,
                    table=None) -> SceneSpec:
    table = table if table is not None else build_class_table()
    entry = table[class_id]
    return SceneSpec(class_id=class_id, family=entry["family"],
                     params=dict(entry["params"]), snr_db=snr_db, n_frames=n_frames)


def _synth_baseband(spec: SceneSpec, n_samples: int, rng: RngState) -> np.ndarray:
    t = np.arange(n_samples, dtype=np.float64)
    fam, p = spec.family, spec.params
    if fam == "tone":
        phase = rng.uniform(lo=0.0, hi=2 * np.pi)
        return np.exp(1j * (2 * np.pi * p["f0"] * t + phase))
    if fam == "chirp":
        f = p["f0"] + (p["f1"] - p["f0"]) * t / n_samples
        phase = 2 * np.pi * np.cumsum(f)
        return np.exp(1j * (phase + rng.uniform(lo=0.0, hi=2 * np.pi)))
    if fam == "burst":
        sig = np.zeros(n_samples, dtype=np.complex128)
        for k in range(p["n_tones"]):
            ph = rng.uniform(lo=0.0, hi=2 * np.pi)
            sig += np.exp(1j * (2 * np.pi * (p["f_lo"] + k * p["spacing"]) * t + ph))
        # on/off gating with the requested duty cycle, toggled per frame
        n_frames = max(1, n_samples // HOP)
        gate_frames = rng.uniform((n_frames,)) < p["duty"]
        gate = np.repeat(gate_frames, HOP)[:n_samples]
        if n_samples > len(gate):
            gate = np.concatenate([gate, np.full(n_samples - len(gate), gate_frames[-1])])
        return sig * gate
    if fam == "fm":
        phase = (2 * np.pi * p["fc"] * t
                 + (p["fdev"] / p["rate"]) * np.sin(2 * np.pi * p["rate"] * t)
                 + rng.uniform(lo=0.0, hi=2 * np.pi))
        return np.exp(1j * phase)
    if fam == "hopper":
        freqs = np.asarray(p["freqs"])
        dwell = p["dwell_frames"] * HOP
        n_hops = int(np.ceil(n_samples / dwell))
        choice = np.array([rng.randbelow(len(freqs)) for _ in range(n_hops)])
        f_inst = np.repeat(freqs[choice], dwell)[:n_samples]
        phase = 2 * np.pi * np.cumsum(f_inst)
        return np.exp(1j * (phase + rng.uniform(lo=0.0, hi=2 * np.pi)))
    if fam == "noise":
        band = p.get("band")
        if band is None:
            return np.zeros(n_samples, dtype=np.complex128)
        white = (rng.normal((n_samples,)) + 1j * rng.normal((n_samples,))) / np.sqrt(2.0)
        freqs = np.fft.fftfreq(n_samples)
        mask = (freqs >= band[0]) & (freqs < band[1])
        return np.fft.ifft(np.fft.fft(white) * mask)
    raise ValueError(f"unknown signal family: {fam}")


def _stft_mag(x: np.ndarray, n_frames: int) -> np.ndarray:
    """Magnitude STFT, frequency rows centered on DC: (N_FFT, n_frames)."""
    n = np.arange(N_FFT)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / N_FFT)
    frames = np.stack([x[i * HOP:i * HOP + N_FFT] for i in range(n_frames)])
    spec = np.fft.fftshift(np.fft.fft(frames * window, axis=1), axes=1)
    return np.abs(spec).T


def gen_spectrogram(spec: SceneSpec, rng: RngState) -> GridSample:
    """One labelled magnitude spectrogram (N_FFT x n_frames x 1)."""
    n_samples = HOP * (spec.n_frames - 1) + N_FFT
    sig = _synth_baseband(spec, n_samples, rng.split("signal"))
    power = np.mean(np.abs(sig) ** 2)
    if power > 0:
        sig = sig / np.sqrt(power)
    # a silent scene (broadband-noise class) is pure unit AWGN; everything
    # else gets noise at the scene SNR
    sigma = 1.0 if power == 0 else np.sqrt(10.0 ** (-spec.snr_db / 10.0))
    wrng = rng.split("awgn")
    noise = (wrng.normal((n_samples,)) + 1j * wrng.normal((n_samples,))) / np.sqrt(2.0)
    x = sig + sigma * noise
    mag = _stft_mag(x, spec.n_frames)
    return GridSample(data=mag[:, :, None].astype(np.float32),
                      modality="spectrogram", label=spec.class_id,
                      snr_db=spec.snr_db)


def gen_activity_csi(class_id: int, rng: RngState, n_frames: int = 64,
                     snr_db: float = 25.0) -> GridSample:
    """CSI-amplitude grid (114 x n_frames x 3) whose motion signature is a
    class-specific periodic modulation on top of slow frequency-selective
    fading."""
    if not 0 <= class_id < ACTIVITY_CLASSES:
        raise ValueError(f"activity class out of range: {class_id}")
    f_mod = ACTIVITY_FREQS[class_id]
    depth = 0.35 + 0.05 * class_id
    t = np.arange(n_frames)
    sc = np.arange(N_ACTIVITY_SUBCARRIERS)
    grid = np.zeros((N_ACTIVITY_SUBCARRIERS, n_frames, N_ACTIVITY_CHANNELS), dtype=np.float64)
    sigma = np.sqrt(10.0 ** (-snr_db / 10.0))
    for ch in range(N_ACTIVITY_CHANNELS):
        crng = rng.split("link", ch)
        # frequency-selective floor: smoothed complex fading across subcarriers
        raw = (crng.normal((N_ACTIVITY_SUBCARRIERS + 8,))
               + 1j * crng.normal((N_ACTIVITY_SUBCARRIERS + 8,)))
        kernel = np.ones(9) / 9.0
        floor = np.abs(np.convolve(raw, kernel, mode="valid"))[:N_ACTIVITY_SUBCARRIERS]
        floor = floor / floor.mean()
        phase0 = crng.uniform(lo=0.0, hi=2 * np.pi)
        sc_phase = 2 * np.pi * 0.02 * sc          # modulation band drifts across subcarriers
        mod = 1.0 + depth * np.cos(2 * np.pi * f_mod * t[None, :] + phase0 + sc_phase[:, None])
        grid[:, :, ch] = floor[:, None] * mod + sigma * crng.normal((N_ACTIVITY_SUBCARRIERS, n_frames))
    return GridSample(data=np.abs(grid).astype(np.float32), modality="csi",
                      label=class_id, snr_db=snr_db)


# -- positioning ---------------------------------------------------------------


@dataclass(frozen=True)
class ArenaSpec:
    """Base-station layout and the volume user positions may occupy."""
    bs_positions: tuple = ((0.0, 0.0, 10.0), (100.0, 0.0, 10.0),
                           (0.0, 100.0, 10.0), (100.0, 100.0, 10.0))
    bounds_lo: tuple = (0.0, 0.0, 0.0)
    bounds_hi: tuple = (100.0, 100.0, 3.0)

    def contains(self, pos) -> bool:
        return all(lo <= x <= hi for x, lo, hi in zip(pos, self.bounds_lo, self.bounds_hi))

    def sample_position(self, rng: RngState) -> np.ndarray:
        lo = np.asarray(self.bounds_lo)
        hi = np.asarray(self.bounds_hi)
        return lo + rng.uniform((3,)) * (hi - lo)


def gen_positioning_sample(pos, arena: ArenaSpec, rng: RngState,
                           n_subcarriers: int = 192, n_symbols: int = 14,
                           scs_hz: float = 30e3, multipath: float = 0.05,
                           phase_noise: float = 0.02) -> GridSample:
    """Uplink phase grid (n_subcarriers x n_symbols x n_bs).

    Channel k of the image holds the wrapped phase of the frequency response
    seen at base station k; the line-of-sight component gives each column a
    phase slope of -2 pi * scs * distance / c per subcarrier.  Set
    ``multipath`` and ``phase_noise`` to zero for an exact closed form.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if not arena.contains(pos):
        raise ValueError(f"position {pos.tolist()} outside the arena")
    n_bs = len(arena.bs_positions)
    k = np.arange(n_subcarriers)
    img = np.zeros((n_subcarriers, n_symbols, n_bs), dtype=np.float64)
    for b, bs in enumerate(arena.bs_positions):
        d = float(np.linalg.norm(pos - np.asarray(bs)))
        tau = d / LIGHT_SPEED
        los = np.exp(-2j * np.pi * k * scs_hz * tau)
        brng = rng.split("bs", b)
        h = np.repeat(los[:, None], n_symbols, axis=1).astype(np.complex128)
        if multipath > 0:
            raw = (brng.normal((n_subcarriers + 8, n_symbols))
                   + 1j * brng.normal((n_subcarriers + 8, n_symbols)))
            kernel = np.ones((9, 1)) / 9.0
            from scipy.signal import convolve2d
            scat = convolve2d(raw, kernel, mode="valid")[:n_subcarriers]
            h = h + multipath * scat
        if phase_noise > 0:
            h = h * np.exp(1j * phase_noise * brng.normal((n_subcarriers, n_symbols)))
        img[:, :, b] = np.angle(h)
    return GridSample(data=img.astype(np.float32), modality="csi",
                      position=pos.copy())


# -- channel-estimation samples --------------------------------------------------


def gen_chanest_sample(cfg: OfdmConfig, rng: RngState,
                       snr_db: Optional[float] = None) -> GridSample:
    """One pilot observation packed with its target.

    Channels 0..3 are the model input {Re rx, Im rx, Re tx, Im tx}; channels
    4..5 carry the true channel {Re h, Im h} so a single archive record holds
    the full supervised pair.  Split with :func:`split_chanest_sample`.
    """
    tx, rx, chan = gen_mimo_ofdm(cfg, rng, snr_db=snr_db)
    inp = pack_chanest_input(tx, rx, snr_db=chan.snr_db)
    tgt = pack_chanest_target(chan.h)
    data = np.concatenate([inp.data, tgt], axis=2)
    return GridSample(data=data, modality="ofdm-grid", snr_db=chan.snr_db)


def split_chanest_sample(sample: GridSample):
    """(input GridSample with 4 channels, target array with 2 channels)."""
    inp = GridSample(data=np.ascontiguousarray(sample.data[:, :, :4]),
                     modality="ofdm-grid", snr_db=sample.snr_db)
    return inp, np.ascontiguousarray(sample.data[:, :, 4:6])


# -- dataset assembly ------------------------------------------------------------


def make_spectrogram_set(n: int, classes: Sequence[int], rng: RngState,
                         snr_db: float = 20.0, n_frames: int = 64):
    table = build_class_table()
    out = []
    for i in range(n):
        cid = classes[i % len(classes)]
        spec = scene_for_class(cid, snr_db=snr_db, n_frames=n_frames, table=table)
        out.append(gen_spectrogram(spec, rng.split("spectrogram", i)))
    return out


def make_activity_set(n: int, rng: RngState, n_frames: int = 64,
                      classes: Sequence[int] = tuple(range(ACTIVITY_CLASSES))):
    return [gen_activity_csi(classes[i % len(classes)], rng.split("activity", i),
                             n_frames=n_frames) for i in range(n)]


def make_positioning_set(n: int, rng: RngState, arena: Optional[ArenaSpec] = None,
                         n_subcarriers: int = 192, n_symbols: int = 14):
    arena = arena or ArenaSpec()
    out = []
    for i in range(n):
        srng = rng.split("positioning", i)
        pos = arena.sample_position(srng.split("pos"))
        out.append(gen_positioning_sample(pos, arena, srng.split("grid"),
                                          n_subcarriers=n_subcarriers,
                                          n_symbols=n_symbols))
    return out


def make_chanest_set(n: int, cfg: OfdmConfig, rng: RngState,
                     snr_db: Optional[float] = None):
    return [gen_chanest_sample(cfg, rng.split("chanest", i), snr_db=snr_db)
            for i in range(n)]
