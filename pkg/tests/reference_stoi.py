"""Reference STOI/ESTOI used as the test oracle.

This is a deliberately literal, loop-style port of the published reference
implementation of the short-time objective intelligibility measure (10 kHz,
256-sample Hann frames with 50% overlap, 512-point FFT, 15 one-third octave
bands from 150 Hz, 30-frame segments, -15 dB clipping; the extended variant
uses row- and column-normalized spectral correlation). It is kept separate
from the package implementation so the two can disagree.
"""

import math

import numpy as np
from scipy.signal import resample_poly

FS = 10000
N_FRAME = 256
NFFT = 512
NUMBAND = 15
MINFREQ = 150
N = 30
BETA = -15.0
DYN_RANGE = 40
EPS = np.finfo(np.float64).eps


def thirdoct(fs, nfft, num_bands, mn):
    f = np.linspace(0, fs, nfft + 1)
    f = f[: int(nfft / 2) + 1]
    k = np.array(range(num_bands)).astype(float)
    cf = np.power(2.0 ** (1.0 / 3), k) * mn
    freq_low = mn * np.power(2.0, (2 * k - 1) / 6)
    freq_high = mn * np.power(2.0, (2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(len(cf)):
        f_bin = np.argmin(np.square(f - freq_low[i]))
        freq_low[i] = f[f_bin]
        fl_ii = f_bin
        f_bin = np.argmin(np.square(f - freq_high[i]))
        freq_high[i] = f[f_bin]
        fh_ii = f_bin
        obm[i, fl_ii:fh_ii] = 1
    return obm


def hanning_no_endpoints(n):
    return np.hanning(n + 2)[1:-1]


def stdft(x, win_size, fft_size, overlap):
    hop = int(win_size / overlap)
    w = hanning_no_endpoints(win_size)
    frames = range(0, len(x) - win_size + 1, hop)
    spec = np.zeros((len(frames), int(fft_size / 2) + 1), dtype=np.complex128)
    for i, m in enumerate(frames):
        spec[i] = np.fft.rfft(w * x[m : m + win_size], n=fft_size)
    return spec


def remove_silent_frames(x, y, dyn_range, frame_len, hop):
    w = hanning_no_endpoints(frame_len)
    starts = list(range(0, len(x) - frame_len + 1, hop))
    energies = []
    for m in starts:
        energies.append(20 * math.log10(np.linalg.norm(w * x[m : m + frame_len]) + EPS))
    energies = np.array(energies)
    mask = (np.max(energies) - dyn_range - energies) < 0

    kept = [m for m, keep in zip(starts, mask) if keep]
    x_sil = np.zeros(len(kept) * hop + frame_len if kept else 0)
    y_sil = np.zeros_like(x_sil)
    for i, m in enumerate(kept):
        x_sil[i * hop : i * hop + frame_len] += w * x[m : m + frame_len]
        y_sil[i * hop : i * hop + frame_len] += w * y[m : m + frame_len]
    return x_sil, y_sil


def reference_stoi(x, y, fs_signal, extended=False):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    if fs_signal != FS:
        g = math.gcd(int(fs_signal), FS)
        x = resample_poly(x, FS // g, fs_signal // g)
        y = resample_poly(y, FS // g, fs_signal // g)

    x, y = remove_silent_frames(x, y, DYN_RANGE, N_FRAME, N_FRAME // 2)

    obm = thirdoct(FS, NFFT, NUMBAND, MINFREQ)
    x_spec = stdft(x, N_FRAME, NFFT, 2)
    y_spec = stdft(y, N_FRAME, NFFT, 2)
    x_tob = np.sqrt(obm @ np.square(np.abs(x_spec)).T)
    y_tob = np.sqrt(obm @ np.square(np.abs(y_spec)).T)

    num_frames = x_tob.shape[1]
    if num_frames < N:
        raise ValueError("signal too short for the reference measure")

    if extended:
        values = []
        for m in range(N, num_frames + 1):
            x_seg = x_tob[:, m - N : m].copy()
            y_seg = y_tob[:, m - N : m].copy()
            for seg in (x_seg, y_seg):
                seg -= seg.mean(axis=1, keepdims=True)
                seg /= np.linalg.norm(seg, axis=1, keepdims=True) + EPS
                seg -= seg.mean(axis=0, keepdims=True)
                seg /= np.linalg.norm(seg, axis=0, keepdims=True) + EPS
            values.append(np.sum(x_seg * y_seg) / N)
        return float(np.mean(values))

    clip_factor = 10 ** (-BETA / 20.0)
    values = []
    for m in range(N, num_frames + 1):
        x_seg = x_tob[:, m - N : m]
        y_seg = y_tob[:, m - N : m]
        for j in range(NUMBAND):
            alpha = math.sqrt(np.sum(x_seg[j] ** 2) / (np.sum(y_seg[j] ** 2) + EPS))
            y_prime = np.minimum(alpha * y_seg[j], x_seg[j] * (1 + clip_factor))
            xc = x_seg[j] - np.mean(x_seg[j])
            yc = y_prime - np.mean(y_prime)
            denom = np.linalg.norm(xc) * np.linalg.norm(yc) + EPS
            values.append(float(np.sum(xc * yc) / denom))
    return float(np.mean(values))
