"""Local-LO digital signal processing for a pilot-assisted CV-QKD frame.

Frame layout (one buffer, indices relative to the frame start):

* a Zadoff-Chu preamble followed by the payload symbols, both RRC-shaped and
  shifted to ``signal_freq_offset``;
* a continuous pilot tone at ``pilot_freq_offset``.

Waveforms are complex baseband samples in SNU: vacuum noise is complex white
noise with unit variance per real quadrature per sample, so a unit-energy
matched filter maps vacuum to unit-variance symbols.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal

from .errors import ConfigError, DomainError, SyncError
from .simulate import SymbolBlock, standard_normals, stage_rng

WAVEFORM_MAGIC = b"CVQKDWAV"


@dataclass(frozen=True)
class WaveformBuffer:
    samples: np.ndarray
    sample_rate: float
    symbol_rate: float

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=complex))
        ratio = self.sample_rate / self.symbol_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise DomainError(f"sample_rate/symbol_rate must be an integer >= 2, got {ratio}")

    @property
    def sps(self) -> int:
        return int(round(self.sample_rate / self.symbol_rate))

    def __len__(self) -> int:
        return self.samples.size

    def with_samples(self, samples) -> "WaveformBuffer":
        return replace(self, samples=np.asarray(samples, dtype=complex))


@dataclass(frozen=True)
class FrameLayout:
    """Frame parameters. Frequencies are in Hz relative to the LO.

    ``pilot_amplitude`` is relative to the payload RMS per complex symbol;
    ``preamble_amplitude`` is absolute (SNU).
    """

    payload_symbols: int = 4096
    symbol_rate: float = 100e6
    sps: int = 4
    rolloff: float = 0.3
    span_symbols: int = 128
    zc_length: int = 255
    zc_root: int = 7
    preamble_amplitude: float = 10.0
    pilot_freq_offset: float = 80e6
    pilot_amplitude: float = 100.0
    signal_freq_offset: float = -40e6

    def __post_init__(self):
        if self.zc_length < 1 or self.zc_length % 2 == 0:
            raise ConfigError(f"zc_length must be odd, got {self.zc_length}")
        if math.gcd(self.zc_root, self.zc_length) != 1:
            raise ConfigError(f"zc_root {self.zc_root} is not coprime with {self.zc_length}")
        if self.sps < 2:
            raise ConfigError(f"sps must be >= 2, got {self.sps}")
        half_band = (1.0 + self.rolloff) * self.symbol_rate / 2.0
        if abs(self.pilot_freq_offset - self.signal_freq_offset) < half_band:
            raise ConfigError("pilot tone falls inside the payload band")
        if max(abs(self.pilot_freq_offset), abs(self.signal_freq_offset) + half_band) >= self.sample_rate / 2:
            raise ConfigError("pilot or payload band exceeds the Nyquist frequency")

    @property
    def sample_rate(self) -> float:
        return self.sps * self.symbol_rate


# ---------------------------------------------------------------------------
# building blocks


def rrc_taps(rolloff: float, span_symbols: int, sps: int) -> np.ndarray:
    """Unit-energy root-raised-cosine filter sampled at ``sps`` per symbol."""
    if not 0 < rolloff <= 1:
        raise DomainError(f"rolloff must lie in (0, 1], got {rolloff}")
    if span_symbols % 2 or span_symbols < 2:
        raise DomainError(f"span_symbols must be even and positive, got {span_symbols}")
    if sps < 2:
        raise DomainError(f"sps must be >= 2, got {sps}")
    b = rolloff
    t = np.arange(-span_symbols * sps // 2, span_symbols * sps // 2 + 1) / sps
    h = np.empty_like(t)
    for k, tk in enumerate(t):
        if abs(tk) < 1e-12:
            h[k] = 1.0 - b + 4.0 * b / math.pi
        elif abs(abs(tk) - 1.0 / (4.0 * b)) < 1e-12:
            h[k] = (b / math.sqrt(2.0)) * (
                (1 + 2 / math.pi) * math.sin(math.pi / (4 * b)) + (1 - 2 / math.pi) * math.cos(math.pi / (4 * b))
            )
        else:
            num = math.sin(math.pi * tk * (1 - b)) + 4 * b * tk * math.cos(math.pi * tk * (1 + b))
            h[k] = num / (math.pi * tk * (1 - (4 * b * tk) ** 2))
    return h / np.linalg.norm(h)


def zadoff_chu(N: int, q: int) -> np.ndarray:
    """Odd-length Zadoff-Chu sequence ``exp(-i pi q n (n+1) / N)``."""
    if N < 1 or N % 2 == 0:
        raise DomainError(f"Zadoff-Chu length must be odd, got {N}")
    if math.gcd(q, N) != 1:
        raise DomainError(f"root {q} is not coprime with {N}")
    n = np.arange(N)
    return np.exp(-1j * np.pi * q * n * (n + 1) / N)


def _carrier(freq: float, sample_rate: float, n: int, start: int = 0) -> np.ndarray:
    k = np.arange(start, start + n)
    return np.exp(2j * np.pi * freq * k / sample_rate)


def _shape(symbols: np.ndarray, taps: np.ndarray, sps: int) -> np.ndarray:
    up = np.zeros(symbols.size * sps, dtype=complex)
    up[::sps] = symbols
    return signal.fftconvolve(up, taps)


def _layout_taps(layout: FrameLayout) -> np.ndarray:
    return rrc_taps(layout.rolloff, layout.span_symbols, layout.sps)


def preamble_reference(layout: FrameLayout) -> np.ndarray:
    """Shaped, frequency-shifted preamble as it appears at the frame start."""
    zc = layout.preamble_amplitude * zadoff_chu(layout.zc_length, layout.zc_root)
    ref = _shape(zc, _layout_taps(layout), layout.sps)
    return ref * _carrier(layout.signal_freq_offset, layout.sample_rate, ref.size)


def payload_rms(block: SymbolBlock) -> float:
    """RMS of a complex symbol; the format's nominal value when known."""
    if block.format is not None:
        return math.sqrt(2.0 * block.format.V_M)
    return float(np.sqrt(np.mean(block.x**2 + block.p**2))) if len(block) else 0.0


def shape_and_mux(block: SymbolBlock, layout: FrameLayout) -> WaveformBuffer:
    """Upsample, RRC-shape and frequency-shift preamble+payload; add the pilot."""
    if len(block) != layout.payload_symbols:
        raise DomainError(f"layout expects {layout.payload_symbols} symbols, got {len(block)}")
    zc = layout.preamble_amplitude * zadoff_chu(layout.zc_length, layout.zc_root)
    symbols = np.concatenate([zc, block.x + 1j * block.p])
    wave = _shape(symbols, _layout_taps(layout), layout.sps)
    wave *= _carrier(layout.signal_freq_offset, layout.sample_rate, wave.size)
    amp = layout.pilot_amplitude * payload_rms(block)
    wave += amp * _carrier(layout.pilot_freq_offset, layout.sample_rate, wave.size)
    return WaveformBuffer(wave, layout.sample_rate, layout.symbol_rate)


# ---------------------------------------------------------------------------
# receiver


def frame_sync(rx: WaveformBuffer, layout: FrameLayout, min_peak_ratio: float = 2.0) -> int:
    """Sample offset of the frame start from normalised preamble correlation.

    Raises:
        SyncError: if the main peak is less than ``min_peak_ratio`` times the
            largest correlation more than two symbols away from it.
    """
    ref = preamble_reference(layout)
    if len(rx) < ref.size:
        raise SyncError("buffer shorter than the preamble")
    corr = np.abs(signal.correlate(rx.samples, ref, mode="valid", method="fft"))
    energy = np.concatenate([[0.0], np.cumsum(np.abs(rx.samples) ** 2)])
    window = energy[ref.size :] - energy[: -ref.size]
    norm = np.sqrt(np.maximum(window, 1e-300)) * np.linalg.norm(ref)
    ncc = corr / norm
    peak = int(np.argmax(ncc))
    guard = 2 * layout.sps
    rest = np.concatenate([ncc[: max(peak - guard, 0)], ncc[peak + guard + 1 :]])
    second = float(rest.max()) if rest.size else 0.0
    if second > 0 and ncc[peak] < min_peak_ratio * second:
        raise SyncError(f"ambiguous correlation peak (ratio {ncc[peak] / second:.2f})")
    return peak


def _lowpass(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase FIR filtering with edge renormalisation."""
    y = signal.fftconvolve(x, taps, mode="same")
    weight = signal.fftconvolve(np.ones(x.size), taps, mode="same")
    return y / weight


@dataclass(frozen=True)
class PhaseRecovery:
    phase: np.ndarray  # per symbol instant, radians
    corrected: WaveformBuffer
    pilot_amplitude: float
    pilot_snr_db: float
    low_snr: bool


def pilot_phase_recover(
    rx: WaveformBuffer,
    layout: FrameLayout,
    bandwidth: Optional[float] = None,
    numtaps: int = 513,
    noise_freq: Optional[float] = None,
) -> PhaseRecovery:
    """Estimate the LO phase from the pilot tone and derotate the buffer.

    ``rx`` must start at the frame start so that the pilot and payload
    carriers share their phase reference. The pilot is mixed to DC,
    low-pass filtered, its phase unwrapped and sampled at symbol instants;
    linear interpolation between those instants gives the per-sample
    correction. The recovered pilot is then removed.
    """
    fs, sps = layout.sample_rate, layout.sps
    bandwidth = 0.05 * fs if bandwidth is None else bandwidth
    noise_freq = 0.35 * fs if noise_freq is None else noise_freq
    taps = signal.firwin(numtaps, bandwidth, fs=fs)
    n = len(rx)
    base = _lowpass(rx.samples * np.conj(_carrier(layout.pilot_freq_offset, fs, n)), taps)
    noise = _lowpass(rx.samples * np.conj(_carrier(noise_freq, fs, n)), taps)

    instants = np.arange(0, n, sps)
    amp = float(np.mean(np.abs(base)))
    p_pilot = amp**2
    p_noise = float(np.mean(np.abs(noise) ** 2))
    snr_db = 10 * math.log10(p_pilot / p_noise) if p_noise > 0 else math.inf
    if p_pilot == 0.0 or p_pilot < 10 * p_noise:
        # a pilot this weak gives no usable phase: leave the buffer untouched
        return PhaseRecovery(np.zeros(instants.size), rx, amp, snr_db if p_pilot else -math.inf, True)
    phase = np.unwrap(np.angle(base[instants]))
    per_sample = np.interp(np.arange(n), instants, phase)
    corrected = rx.samples * np.exp(-1j * per_sample) - amp * _carrier(layout.pilot_freq_offset, fs, n)
    return PhaseRecovery(phase, rx.with_samples(corrected), amp, snr_db, False)


def _matched(rx: WaveformBuffer, layout: FrameLayout) -> np.ndarray:
    fs = layout.sample_rate
    base = rx.samples * np.conj(_carrier(layout.signal_freq_offset, fs, len(rx)))
    return signal.fftconvolve(base, _layout_taps(layout))


def dsp_snu(layout: FrameLayout, n_samples: int = 200_000, seed: int = 0) -> float:
    """Per-quadrature variance of vacuum noise after the receiver chain."""
    z0, z1 = standard_normals(stage_rng(seed, "vacuum"), n_samples)
    vac = WaveformBuffer(z0 + 1j * z1, layout.sample_rate, layout.symbol_rate)
    taps_len = _layout_taps(layout).size
    out = _matched(vac, layout)[taps_len : n_samples - taps_len : layout.sps]
    return float(0.5 * np.mean(np.abs(out) ** 2))


@dataclass(frozen=True)
class Demuxed:
    block: SymbolBlock
    decimation_phase: int
    phase_energies: np.ndarray


def demux_and_downsample(
    rx: WaveformBuffer,
    layout: FrameLayout,
    snu: float = 1.0,
    phase: Optional[int] = None,
) -> Demuxed:
    """Recover payload symbols from a synced, phase-corrected buffer.

    Mixes the payload band to baseband, applies the matched RRC filter and
    decimates. Unless ``phase`` is given, the decimation phase (relative to
    the nominal symbol instants) is the one with the largest payload energy.
    Outputs are divided by ``sqrt(snu)``.
    """
    taps_len = _layout_taps(layout).size
    mf = _matched(rx, layout)
    sps = layout.sps
    start = taps_len - 1 + layout.zc_length * sps
    offsets = np.arange(-(sps // 2), sps - sps // 2)
    energies = np.zeros(offsets.size)
    for k, off in enumerate(offsets):
        idx = start + off + sps * np.arange(layout.payload_symbols)
        idx = idx[(idx >= 0) & (idx < mf.size)]
        energies[k] = float(np.sum(np.abs(mf[idx]) ** 2))
    chosen = int(offsets[np.argmax(energies)]) if phase is None else int(phase)
    idx = start + chosen + sps * np.arange(layout.payload_symbols)
    if idx[-1] >= mf.size or idx[0] < 0:
        raise DomainError("buffer too short for the payload")
    sym = mf[idx] / math.sqrt(snu)
    return Demuxed(SymbolBlock(sym.real, sym.imag), chosen, energies)


def evm(received: SymbolBlock, reference: SymbolBlock) -> float:
    """RMS error vector magnitude relative to the reference RMS."""
    rx = received.x + 1j * received.p
    ref = reference.x + 1j * reference.p
    return float(np.sqrt(np.mean(np.abs(rx - ref) ** 2) / np.mean(np.abs(ref) ** 2)))


@dataclass(frozen=True)
class LoopbackResult:
    offset: int
    recovery: PhaseRecovery
    demuxed: Demuxed


def receive(rx: WaveformBuffer, layout: FrameLayout, snu: float = 1.0) -> LoopbackResult:
    """frame_sync -> pilot_phase_recover -> demux_and_downsample."""
    offset = frame_sync(rx, layout)
    aligned = rx.with_samples(rx.samples[offset:])
    rec = pilot_phase_recover(aligned, layout)
    return LoopbackResult(offset, rec, demux_and_downsample(rec.corrected, layout, snu))


# ---------------------------------------------------------------------------
# impairments


def delay(buf: WaveformBuffer, n: int, tail: int = 0) -> WaveformBuffer:
    """Prepend ``n`` and append ``tail`` zero samples."""
    return buf.with_samples(np.concatenate([np.zeros(n), buf.samples, np.zeros(tail)]))


def add_vacuum_noise(buf: WaveformBuffer, seed: int, variance: float = 1.0) -> WaveformBuffer:
    z0, z1 = standard_normals(stage_rng(seed, "channel"), len(buf))
    return buf.with_samples(buf.samples + math.sqrt(variance) * (z0 + 1j * z1))


def apply_phase_noise(
    buf: WaveformBuffer,
    static_phase: float = 0.0,
    freq_offset: float = 0.0,
    linewidth_ratio: float = 0.0,
    seed: int = 0,
) -> WaveformBuffer:
    """Rotate by a static phase, a frequency offset (Hz) and a Wiener process.

    ``linewidth_ratio`` is the combined laser linewidth over the symbol rate;
    the Wiener increment variance per sample is ``2 pi linewidth / fs``.
    """
    n = len(buf)
    phi = static_phase + 2 * np.pi * freq_offset * np.arange(n) / buf.sample_rate
    if linewidth_ratio > 0:
        steps, _ = standard_normals(stage_rng(seed, "detect"), n)
        var = 2 * np.pi * linewidth_ratio * buf.symbol_rate / buf.sample_rate
        phi = phi + np.cumsum(math.sqrt(var) * steps)
    return buf.with_samples(buf.samples * np.exp(1j * phi))


# ---------------------------------------------------------------------------
# waveform I/O


def write_waveform_csv(path, buf: WaveformBuffer) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "re", "im"])
        for i, s in enumerate(buf.samples):
            w.writerow([i, repr(float(s.real)), repr(float(s.imag))])


def read_waveform_csv(path, sample_rate: float, symbol_rate: float) -> WaveformBuffer:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return WaveformBuffer(data[:, 1] + 1j * data[:, 2], sample_rate, symbol_rate)


def write_waveform_bin(path, buf: WaveformBuffer) -> None:
    inter = np.empty(2 * len(buf), dtype="<f8")
    inter[0::2] = buf.samples.real
    inter[1::2] = buf.samples.imag
    Path(path).write_bytes(WAVEFORM_MAGIC + inter.tobytes())


def read_waveform_bin(path, sample_rate: float, symbol_rate: float) -> WaveformBuffer:
    raw = Path(path).read_bytes()
    if raw[:8] != WAVEFORM_MAGIC:
        raise DomainError("not a waveform file (bad magic)")
    body = raw[8:]
    if len(body) % 16:
        raise DomainError("waveform file length is not a whole number of samples")
    inter = np.frombuffer(body, dtype="<f8")
    return WaveformBuffer(inter[0::2] + 1j * inter[1::2], sample_rate, symbol_rate)
