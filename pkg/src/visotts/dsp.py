"""Deterministic signal processing for the 16 kHz mel pipeline.

Fixed pipeline settings: 16 kHz audio, 512-point FFT, 25 ms (400 sample)
periodic Hann analysis window, 10 ms (160 sample) hop, 80 Slaney-scale mel
bands between 0 and 8 kHz. Framing uses center reflection padding, so a
signal of length L yields 1 + L // hop frames. Spectrograms are amplitude
(not power); mel energies are natural-log compressed with a 1e-5 floor and
affinely normalized to [0, 1]. Everything here is a pure function of its
inputs and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import VisottsError
from .fileio import read_f32_matrix, write_f32_matrix

SAMPLE_RATE = 16000
N_FFT = 512
WIN_LENGTH = 400
HOP_LENGTH = 160
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-5


class DspError(VisottsError):
    pass


@dataclass(frozen=True)
class MelScale:
    """Affine map between clamped log-mel energies and the [0, 1] model range.

    log_floor is the log of the energy floor applied before compression;
    log_ceil is the corpus-level maximum used for normalization. Both are
    stored in corpus manifests and model checkpoints so that training targets
    and Griffin-Lim inversion agree on the same dynamic range.
    """

    log_floor: float = math.log(LOG_FLOOR)
    log_ceil: float = 5.0

    def normalize(self, log_mel: np.ndarray) -> np.ndarray:
        span = self.log_ceil - self.log_floor
        return np.clip((log_mel - self.log_floor) / span, 0.0, 1.0)

    def denormalize(self, normed: np.ndarray) -> np.ndarray:
        span = self.log_ceil - self.log_floor
        return np.asarray(normed, dtype=np.float64) * span + self.log_floor


def periodic_hann(length: int) -> np.ndarray:
    n = np.arange(length, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def _padded_window(win_length: int, n_fft: int) -> np.ndarray:
    # Window is centered inside the FFT frame, zero-padded on both sides.
    window = periodic_hann(win_length)
    left = (n_fft - win_length) // 2
    padded = np.zeros(n_fft, dtype=np.float64)
    padded[left : left + win_length] = window
    return padded


def _check_framing(n_fft: int, win_length: int, hop_length: int) -> None:
    if win_length > n_fft:
        raise DspError(f"win_length {win_length} exceeds n_fft {n_fft}")
    if hop_length > win_length:
        raise DspError(f"hop_length {hop_length} exceeds win_length {win_length}")
    if hop_length < 1:
        raise DspError("hop_length must be positive")


def frame_count(n_samples: int, hop_length: int = HOP_LENGTH) -> int:
    """Frames produced by stft() for a signal of the given length."""
    return 1 + n_samples // hop_length


def stft(
    samples: np.ndarray,
    n_fft: int = N_FFT,
    win_length: int = WIN_LENGTH,
    hop_length: int = HOP_LENGTH,
) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude/phase STFT with center reflection padding.

    Returns (magnitudes, phases), each of shape (frames, n_fft // 2 + 1)
    with frames == 1 + len(samples) // hop_length.
    """
    _check_framing(n_fft, win_length, hop_length)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise DspError("empty audio")
    if not np.all(np.isfinite(samples)):
        raise DspError("audio contains non-finite samples")

    pad = n_fft // 2
    if samples.size > 1:
        padded = np.pad(samples, pad, mode="reflect")
    else:
        padded = np.pad(samples, pad, mode="edge")
    n_frames = frame_count(samples.size, hop_length)
    window = _padded_window(win_length, n_fft)

    offsets = np.arange(n_frames) * hop_length
    idx = offsets[:, None] + np.arange(n_fft)[None, :]
    frames = padded[idx] * window[None, :]
    spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
    return np.abs(spectrum), np.angle(spectrum)


def istft(
    magnitudes: np.ndarray,
    phases: np.ndarray,
    win_length: int = WIN_LENGTH,
    hop_length: int = HOP_LENGTH,
    length: int | None = None,
) -> np.ndarray:
    """Weighted overlap-add inverse of stft().

    The synthesis window matches the analysis window and the overlap-add is
    normalized by the summed squared window, so unmodified spectra round-trip
    exactly on the region the frames cover. `length` selects how many samples
    to return after stripping the center padding; it defaults to
    (frames - 1) * hop_length, the length whose stft() has the same frame
    count.
    """
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    phases = np.asarray(phases, dtype=np.float64)
    if magnitudes.shape != phases.shape:
        raise DspError(
            f"magnitude shape {magnitudes.shape} does not match phase shape {phases.shape}"
        )
    if magnitudes.ndim != 2 or magnitudes.shape[0] < 1:
        raise DspError("spectrogram must be a non-empty 2-D array")

    n_fft = 2 * (magnitudes.shape[1] - 1)
    _check_framing(n_fft, win_length, hop_length)
    n_frames = magnitudes.shape[0]
    pad = n_fft // 2
    if length is None:
        length = (n_frames - 1) * hop_length
    if length < 0 or length > (n_frames - 1) * hop_length + n_fft - pad:
        raise DspError(f"requested length {length} not covered by {n_frames} frames")

    window = _padded_window(win_length, n_fft)
    frames = np.fft.irfft(magnitudes * np.exp(1j * phases), n=n_fft, axis=1)

    total = (n_frames - 1) * hop_length + n_fft
    acc = np.zeros(total, dtype=np.float64)
    norm = np.zeros(total, dtype=np.float64)
    win_sq = window * window
    for k in range(n_frames):
        start = k * hop_length
        acc[start : start + n_fft] += frames[k] * window
        norm[start : start + n_fft] += win_sq
    valid = norm > 1e-11
    acc[valid] /= norm[valid]
    return acc[pad : pad + length]


def _hz_to_mel(freq: np.ndarray) -> np.ndarray:
    # Slaney scale: linear below 1 kHz, logarithmic above.
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3.0
    mel = freq / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    above = freq >= min_log_hz
    mel = np.where(above, min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3.0
    freq = mel * f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    above = mel >= min_log_mel
    freq = np.where(above, min_log_hz * np.exp(logstep * (mel - min_log_mel)), freq)
    return freq


@lru_cache(maxsize=8)
def _cached_filterbank(sample_rate, n_fft, n_mels, f_min, f_max):
    return _build_filterbank(sample_rate, n_fft, n_mels, f_min, f_max)


def _build_filterbank(sample_rate, n_fft, n_mels, f_min, f_max):
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_points = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)

    bank = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular Slaney-scale filterbank, shape (n_mels, n_fft // 2 + 1)."""
    if not (0.0 <= f_min < f_max <= sample_rate / 2.0):
        raise DspError(f"need 0 <= f_min < f_max <= sr/2, got f_min={f_min}, f_max={f_max}")
    if n_mels < 1:
        raise DspError("n_mels must be >= 1")
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    usable = int(np.sum((fft_freqs > f_min) & (fft_freqs < f_max)))
    if n_mels > usable:
        raise DspError(f"{n_mels} mel bands do not fit into {usable} usable FFT bins")
    return _cached_filterbank(sample_rate, n_fft, n_mels, float(f_min), float(f_max)).copy()


def melspectrogram(samples: np.ndarray, scale: MelScale = MelScale()) -> np.ndarray:
    """Normalized log-mel spectrogram at the pipeline settings, shape (F, 80)."""
    magnitudes, _ = stft(samples)
    bank = _cached_filterbank(SAMPLE_RATE, N_FFT, N_MELS, F_MIN, F_MAX)
    energies = magnitudes @ bank.T
    log_mel = np.log(np.maximum(energies, LOG_FLOOR))
    return scale.normalize(log_mel).astype(np.float32)


def mel_to_magnitudes(mel: np.ndarray, scale: MelScale = MelScale()) -> np.ndarray:
    """Approximate linear magnitudes from a normalized mel via pseudo-inverse."""
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise DspError(f"expected (F, {N_MELS}) mel, got shape {mel.shape}")
    bank = _cached_filterbank(SAMPLE_RATE, N_FFT, N_MELS, F_MIN, F_MAX)
    energies = np.exp(scale.denormalize(mel))
    magnitudes = energies @ np.linalg.pinv(bank).T
    return np.maximum(magnitudes, 0.0)


def griffin_lim(
    mel: np.ndarray,
    iterations: int = 60,
    scale: MelScale = MelScale(),
) -> np.ndarray:
    """Waveform from a normalized mel by iterative phase retrieval.

    Phase starts at zero, so the result is fully deterministic. Output length
    is F * hop samples (exactly the audio span the mel frames stand for, i.e.
    T video frames -> T/25 seconds).
    """
    if iterations < 1:
        raise DspError("iterations must be >= 1")
    magnitudes = mel_to_magnitudes(mel, scale)
    n_frames = magnitudes.shape[0]
    phases = np.zeros_like(magnitudes)
    for _ in range(iterations):
        signal = istft(magnitudes, phases)
        _, phases = stft(signal)
    return istft(magnitudes, phases, length=n_frames * HOP_LENGTH)


def spectral_convergence(reference_magnitudes: np.ndarray, magnitudes: np.ndarray) -> float:
    """Relative Frobenius distance between two magnitude spectrograms."""
    reference_magnitudes = np.asarray(reference_magnitudes, dtype=np.float64)
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    denom = np.linalg.norm(reference_magnitudes)
    if denom == 0.0:
        return float(np.linalg.norm(magnitudes))
    return float(np.linalg.norm(reference_magnitudes - magnitudes) / denom)


def save_mel(path, mel: np.ndarray) -> None:
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise DspError(f"expected (F, {N_MELS}) mel, got shape {mel.shape}")
    write_f32_matrix(path, mel)


def load_mel(path) -> np.ndarray:
    return read_f32_matrix(path, expected_cols=N_MELS)
