"""Quantitative verification: STOI/ESTOI intelligibility, mel-domain error
and alignment diagnostics.

The STOI pipeline follows the standard recipe: resample to 10 kHz, drop
frames more than 40 dB below the loudest reference frame, 512-point STFT
over 256-sample Hann frames with 50% overlap, 15 third-octave bands from
150 Hz, and clipped band-envelope correlation over 384 ms (30 frame)
segments. The extended variant replaces clipping with row+column normalized
spectral correlation, which makes it invariant to a global gain on the
degraded signal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from . import VisottsError
from .dsp import MelScale, griffin_lim

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_HOP = 128
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames per 384 ms segment
STOI_BETA = -15.0  # clipping SDR bound, dB
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


class EvalError(VisottsError):
    pass


def mel_l1(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise EvalError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def mel_l2(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise EvalError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


# -- alignment diagnostics -----------------------------------------------------

@dataclass(frozen=True)
class AlignmentReport:
    diagonality: float  # in [0, 1]; 1.0 on the exact diagonal path
    monotonicity_violations: int  # frames where the argmax path steps back
    entropy: float  # mean row entropy, nats
    frame_accuracy: float | None = None  # argmax vs oracle, when given


def alignment_diagnostics(
    weights: np.ndarray,
    oracle: np.ndarray | None = None,
    kappa: float = 5.0,
) -> AlignmentReport:
    """Diagnostics over a (T, N) row-stochastic attention matrix.

    The argmax path p(t) breaks ties toward the lowest phoneme index.
    Diagonality is mean_t exp(-kappa * |p(t)/N - t/T|), i.e. bounded
    similarity between the normalized path and the ideal diagonal.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.size == 0:
        raise EvalError("alignment matrix must be a non-empty (T, N) array")
    if np.any(weights < 0):
        raise EvalError("alignment matrix has negative entries")
    row_sums = weights.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise EvalError("alignment matrix rows must sum to 1 (non-stochastic rows)")

    n_frames, n_phonemes = weights.shape
    path = np.argmax(weights, axis=1)  # argmax takes the first (lowest) index on ties
    violations = int(np.sum(np.diff(path) < 0))

    offsets = np.abs(path / n_phonemes - np.arange(n_frames) / n_frames)
    diagonality = float(np.mean(np.exp(-kappa * offsets)))

    probs = np.maximum(weights, _EPS)
    entropy = float(np.mean(-np.sum(probs * np.log(probs), axis=1)))

    frame_accuracy = None
    if oracle is not None:
        oracle = np.asarray(oracle)
        if oracle.shape != (n_frames,):
            raise EvalError(f"oracle alignment must have shape ({n_frames},)")
        frame_accuracy = float(np.mean(path == oracle))

    return AlignmentReport(
        diagonality=diagonality,
        monotonicity_violations=violations,
        entropy=entropy,
        frame_accuracy=frame_accuracy,
    )


# -- STOI / ESTOI ---------------------------------------------------------------

def _stoi_window() -> np.ndarray:
    # Symmetric Hann without the zero endpoints, as in the reference code.
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frame(signal: np.ndarray, window: np.ndarray) -> np.ndarray:
    n_frames = (signal.size - STOI_FRAME) // STOI_HOP + 1
    if n_frames < 1:
        return np.empty((0, STOI_FRAME))
    idx = np.arange(n_frames)[:, None] * STOI_HOP + np.arange(STOI_FRAME)[None, :]
    return signal[idx] * window[None, :]


def _remove_silent_frames(
    reference: np.ndarray, degraded: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames more than 40 dB below the loudest reference frame and
    overlap-add the survivors back into signals. The reference decides the
    mask for both inputs."""
    window = _stoi_window()
    ref_frames = _frame(reference, window)
    deg_frames = _frame(degraded, window)
    if ref_frames.shape[0] == 0:
        return np.empty(0), np.empty(0)
    energies = 20.0 * np.log10(np.linalg.norm(ref_frames, axis=1) + _EPS)
    mask = energies > energies.max() - STOI_DYN_RANGE
    ref_frames = ref_frames[mask]
    deg_frames = deg_frames[mask]

    def overlap_add(frames: np.ndarray) -> np.ndarray:
        out = np.zeros((frames.shape[0] - 1) * STOI_HOP + STOI_FRAME)
        for i, frame in enumerate(frames):
            out[i * STOI_HOP : i * STOI_HOP + STOI_FRAME] += frame
        return out

    if ref_frames.shape[0] == 0:
        return np.empty(0), np.empty(0)
    return overlap_add(ref_frames), overlap_add(deg_frames)


def third_octave_bands(
    fs: int = STOI_FS,
    n_fft: int = STOI_NFFT,
    n_bands: int = STOI_BANDS,
    min_freq: float = STOI_MIN_FREQ,
) -> np.ndarray:
    """Binary (n_bands, n_fft//2 + 1) matrix selecting third-octave bins."""
    freqs = np.linspace(0.0, fs, n_fft + 1)[: n_fft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    lows = min_freq * 2.0 ** ((2.0 * k - 1.0) / 6.0)
    highs = min_freq * 2.0 ** ((2.0 * k + 1.0) / 6.0)
    obm = np.zeros((n_bands, freqs.size))
    for band in range(n_bands):
        lo = int(np.argmin(np.square(freqs - lows[band])))
        hi = int(np.argmin(np.square(freqs - highs[band])))
        obm[band, lo:hi] = 1.0
    return obm


def _band_envelopes(signal: np.ndarray, obm: np.ndarray) -> np.ndarray:
    """(n_bands, n_frames) third-octave magnitude envelopes."""
    frames = _frame(signal, _stoi_window())
    spectra = np.abs(np.fft.rfft(frames, n=STOI_NFFT, axis=1))
    return np.sqrt(obm @ (spectra.T**2))


def _segment_views(envelopes: np.ndarray) -> np.ndarray:
    """(n_segments, n_bands, SEGMENT) sliding segments over the frame axis."""
    windows = np.lib.stride_tricks.sliding_window_view(envelopes, STOI_SEGMENT, axis=1)
    return windows.transpose(1, 0, 2)


def stoi(
    reference: np.ndarray,
    degraded: np.ndarray,
    sample_rate: int = 16000,
    extended: bool = False,
) -> float:
    """Short-time objective intelligibility of `degraded` against `reference`.

    Both clips must share the sample rate and be at least 384 ms long after
    silent-frame removal. Higher is better; identical finite inputs score 1.
    """
    reference = np.asarray(reference, dtype=np.float64).ravel()
    degraded = np.asarray(degraded, dtype=np.float64).ravel()
    if reference.size == 0 or degraded.size == 0:
        raise EvalError("empty audio")
    if not (np.all(np.isfinite(reference)) and np.all(np.isfinite(degraded))):
        raise EvalError("audio contains non-finite samples")
    n = min(reference.size, degraded.size)
    reference, degraded = reference[:n], degraded[:n]

    if sample_rate != STOI_FS:
        gcd = math.gcd(int(sample_rate), STOI_FS)
        reference = resample_poly(reference, STOI_FS // gcd, sample_rate // gcd)
        degraded = resample_poly(degraded, STOI_FS // gcd, sample_rate // gcd)

    reference, degraded = _remove_silent_frames(reference, degraded)

    obm = third_octave_bands()
    ref_env = _band_envelopes(reference, obm) if reference.size else np.empty((STOI_BANDS, 0))
    deg_env = _band_envelopes(degraded, obm) if degraded.size else np.empty((STOI_BANDS, 0))
    if ref_env.shape[1] < STOI_SEGMENT:
        raise EvalError("clip shorter than analysis window")

    x = _segment_views(ref_env)  # (M, bands, frames)
    y = _segment_views(deg_env)

    if extended:
        def normalize(seg):
            seg = seg - seg.mean(axis=2, keepdims=True)
            seg = seg / (np.linalg.norm(seg, axis=2, keepdims=True) + _EPS)
            seg = seg - seg.mean(axis=1, keepdims=True)
            return seg / (np.linalg.norm(seg, axis=1, keepdims=True) + _EPS)

        xn, yn = normalize(x), normalize(y)
        per_segment = np.sum(xn * yn, axis=(1, 2)) / STOI_SEGMENT
        return float(per_segment.mean())

    alpha = np.sqrt(
        np.sum(x**2, axis=2, keepdims=True) / (np.sum(y**2, axis=2, keepdims=True) + _EPS)
    )
    clipped = np.minimum(alpha * y, x * (1.0 + 10.0 ** (-STOI_BETA / 20.0)))
    xc = x - x.mean(axis=2, keepdims=True)
    yc = clipped - clipped.mean(axis=2, keepdims=True)
    denom = np.linalg.norm(xc, axis=2) * np.linalg.norm(yc, axis=2) + _EPS
    correlations = np.sum(xc * yc, axis=2) / denom
    return float(correlations.mean())


# -- corpus-level reports --------------------------------------------------------

REPORT_COLUMNS = ("utt_id", "mel_l1", "stoi", "estoi", "diagonality", "violations", "frame_acc")


def evaluate_corpus(
    corpus,
    model=None,
    utterance_names=None,
    gl_iterations: int = 60,
    mel_scale: MelScale | None = None,
    keep_alignments: bool = False,
):
    """Per-utterance metric rows plus aggregate means.

    With a model, predictions come from deterministic inference; without one
    the ground-truth mels evaluate against themselves (harness upper bound).
    STOI/ESTOI compare Griffin-Lim resyntheses of target and predicted mels.
    Returns (rows, means) -- and alignment matrices too when requested.
    """
    from .model import infer_utterance  # local import to keep numpy paths torch-free

    if mel_scale is None:
        mel_scale = corpus.manifest.mel_scale()
    names = list(utterance_names) if utterance_names is not None else corpus.names
    unknown = [n for n in names if n not in corpus.manifest.utterances]
    if unknown:
        raise EvalError(f"unknown utterances requested: {', '.join(unknown)}")

    rows = []
    alignments = {}
    for name in names:
        utt = corpus.load_utterance(name)
        target = utt.mel.astype(np.float64)
        if model is not None:
            if model.cfg.vocab_size != len(corpus.vocab):
                raise EvalError("checkpoint and corpus vocabularies disagree")
            speaker = corpus.speaker_embedding(utt.speaker_id)
            pred, weights = infer_utterance(model, utt.phoneme_ids, utt.visual, speaker)
            pred = pred.astype(np.float64)
            report = alignment_diagnostics(weights, oracle=utt.alignment)
        else:
            pred = target
            # Harness mode: a one-hot oracle alignment stands in for attention.
            weights = np.zeros((utt.n_video_frames, utt.n_phonemes))
            weights[np.arange(utt.n_video_frames), utt.alignment] = 1.0
            report = alignment_diagnostics(weights, oracle=utt.alignment)

        ref_audio = griffin_lim(target, iterations=gl_iterations, scale=mel_scale)
        deg_audio = (
            ref_audio if pred is target
            else griffin_lim(pred, iterations=gl_iterations, scale=mel_scale)
        )
        rows.append({
            "utt_id": name,
            "mel_l1": mel_l1(pred, target),
            "stoi": stoi(ref_audio, deg_audio),
            "estoi": stoi(ref_audio, deg_audio, extended=True),
            "diagonality": report.diagonality,
            "violations": report.monotonicity_violations,
            "frame_acc": report.frame_accuracy,
        })
        if keep_alignments:
            alignments[name] = weights

    means = {
        key: float(np.mean([row[key] for row in rows]))
        for key in REPORT_COLUMNS if key != "utt_id"
    }
    if keep_alignments:
        return rows, means, alignments
    return rows, means


def write_report(rows, means, out_dir) -> tuple[Path, Path]:
    """report.csv with one row per utterance; summary.csv with the means."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.csv"
    summary_path = out_dir / "summary.csv"

    def fmt(value):
        if isinstance(value, int):
            return str(value)
        return f"{value:.6f}"

    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row["utt_id"]] + [fmt(row[k]) for k in REPORT_COLUMNS[1:]])
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        writer.writerow(["mean"] + [fmt(means[k]) for k in REPORT_COLUMNS[1:]])
    return report_path, summary_path
