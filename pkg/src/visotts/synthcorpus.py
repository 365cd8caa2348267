"""Synthetic paired corpus used as a verification oracle.

Visual features are viseme-faithful: phonemes map onto mouth-shape classes,
each class gets a fixed pseudo-random 512-d signature, and visual frame t is
the signature of the class active at t plus Gaussian noise. Mel targets stay
phoneme-specific: each phoneme gets a fixed smooth 80-band template
(low-order random Fourier series in normalized [0, 1] mel space), and mel
frames 4t..4t+3 are the active phoneme's template shifted by a fixed
per-speaker offset vector, plus noise. Because a viseme signature only
narrows the phoneme down to its class, the mel target is not predictable
from the visual stream alone -- recovering it forces a lookup into the text
sequence, which is exactly the alignment behavior the evaluation suite
measures. By default utterances draw at most one phoneme per viseme class so
that the lookup has a unique answer. The frame-level phoneme index sequence
is kept as the oracle alignment. Every tensor is a pure function of
(config, master seed), so corpora regenerate byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import VisottsError
from .dsp import HOP_LENGTH, N_MELS, SAMPLE_RATE, MelScale, melspectrogram
from .fileio import (
    derive_seed,
    read_f32_matrix,
    read_f32_vector,
    read_u32_vector,
    write_f32_matrix,
    write_f32_vector,
    write_u32_vector,
)
from .text import PhonemeVocabulary, decode, encode

FPS = 25
UPSAMPLE_N = 4
VISUAL_DIM = 512
SPEAKER_DIM = 256

_SPECTRAL_PROJECTION_SEED = derive_seed("spectral-speaker-projection")

# Mouth-shape classes in the Jeffers & Barley spirit: phonemes inside a group
# are visually near-indistinguishable. Symbols not listed (PAD, BOS, EOS, or
# symbols of a custom vocabulary) each get their own singleton group.
VISEME_GROUPS = (
    ("SIL",),
    ("P", "B", "M"),
    ("F", "V"),
    ("TH", "DH"),
    ("T", "D", "S", "Z"),
    ("N", "L"),
    ("SH", "ZH", "CH", "JH"),
    ("K", "G", "NG", "HH"),
    ("W", "UW", "UH"),
    ("R", "ER"),
    ("Y", "IY", "IH"),
    ("AA", "AH", "AO"),
    ("AE", "EH", "EY"),
    ("AW", "AY", "OW", "OY"),
)


class CorpusError(VisottsError):
    pass


@dataclass(frozen=True)
class CorpusGenConfig:
    utterances: int = 32
    speakers: int = 4
    seed: int = 0
    min_phonemes: int = 6
    max_phonemes: int = 12
    min_duration: int = 1
    max_duration: int = 4
    min_frames: int = 12
    max_frames: int = 200
    # With a value > 0 every utterance is drawn to span exactly this many
    # video frames (duration variety stays, totals collide), so same-length
    # bucketing can form full batches.
    frames_per_utterance: int = 24
    sigma_v: float = 0.05
    sigma_m: float = 0.05
    fourier_order: int = 4
    distinct_visemes: bool = True

    def __post_init__(self):
        if self.speakers < 2:
            raise CorpusError("need at least 2 speakers for multi-speaker tests")
        if self.utterances < 1:
            raise CorpusError("need at least one utterance")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise CorpusError("invalid phoneme count range")
        if not 1 <= self.min_duration <= self.max_duration:
            raise CorpusError("invalid duration range")
        if self.min_frames > self.max_frames:
            raise CorpusError("min_frames exceeds max_frames")
        if self.min_phonemes * self.max_duration < self.min_frames:
            raise CorpusError("min_frames unreachable with this phoneme/duration range")
        if self.frames_per_utterance:
            if not self.min_frames <= self.frames_per_utterance <= self.max_frames:
                raise CorpusError("frames_per_utterance outside [min_frames, max_frames]")
            if self.max_phonemes * self.max_duration < self.frames_per_utterance:
                raise CorpusError("frames_per_utterance unreachable with this duration range")


def viseme_map(vocab: PhonemeVocabulary) -> np.ndarray:
    """Phoneme id -> viseme class id; unlisted symbols get singleton classes."""
    group_of = {s: g for g, symbols in enumerate(VISEME_GROUPS) for s in symbols}
    next_free = len(VISEME_GROUPS)
    classes = np.empty(len(vocab), dtype=np.int64)
    for i, symbol in enumerate(vocab.symbols):
        if symbol in group_of:
            classes[i] = group_of[symbol]
        else:
            classes[i] = next_free
            next_free += 1
    return classes


class TemplateBank:
    """Fixed per-viseme visual signatures and per-phoneme mel templates."""

    def __init__(self, vocab: PhonemeVocabulary, seed: int, fourier_order: int = 4):
        self.vocab_size = len(vocab)
        self.seed = seed
        self.viseme_of = viseme_map(vocab)
        n_visemes = int(self.viseme_of.max()) + 1
        rng = np.random.default_rng(derive_seed(seed, "templates"))
        self.viseme_signatures = rng.standard_normal((n_visemes, VISUAL_DIM)).astype(np.float32)
        self.mel_templates = np.empty((self.vocab_size, N_MELS), dtype=np.float32)
        bands = np.arange(N_MELS) / N_MELS
        for p in range(self.vocab_size):
            curve = np.zeros(N_MELS)
            for k in range(1, fourier_order + 1):
                a, b = rng.standard_normal(2)
                curve += a * np.sin(2 * np.pi * k * bands) + b * np.cos(2 * np.pi * k * bands)
            lo, hi = curve.min(), curve.max()
            if hi - lo < 1e-9:
                curve = np.full(N_MELS, 0.5)
            else:
                curve = 0.2 + 0.6 * (curve - lo) / (hi - lo)
            self.mel_templates[p] = curve.astype(np.float32)

    def visual_signature(self, phoneme_ids: np.ndarray) -> np.ndarray:
        return self.viseme_signatures[self.viseme_of[phoneme_ids]]


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    embedding: np.ndarray  # (256,) unit L2 norm
    mel_offset: np.ndarray  # (80,) entries +-offset_scale

    def __post_init__(self):
        if self.embedding.shape != (SPEAKER_DIM,):
            raise CorpusError(f"speaker embedding must be ({SPEAKER_DIM},)")
        if abs(float(np.linalg.norm(self.embedding)) - 1.0) > 1e-5:
            raise CorpusError(f"speaker {self.speaker_id}: embedding is not unit norm")


def make_speakers(speaker_ids, seed: int, offset_scale: float = 0.1) -> dict[str, Speaker]:
    """Fixed random unit-norm embedding and +-offset_scale mel offset per id."""
    speakers = {}
    for sid in speaker_ids:
        rng = np.random.default_rng(derive_seed(seed, "speaker", sid))
        vec = rng.standard_normal(SPEAKER_DIM)
        vec /= np.linalg.norm(vec)
        signs = rng.integers(0, 2, size=N_MELS) * 2 - 1
        speakers[sid] = Speaker(
            speaker_id=sid,
            embedding=vec.astype(np.float32),
            mel_offset=(offset_scale * signs).astype(np.float32),
        )
    return speakers


class SpeakerTable:
    """Lookup provider over a fixed roster; unknown ids are an error."""

    def __init__(self, speakers: dict[str, Speaker]):
        self._speakers = dict(speakers)

    def __call__(self, speaker_id: str) -> np.ndarray:
        try:
            return self._speakers[speaker_id].embedding
        except KeyError:
            raise CorpusError(f"unknown speaker: {speaker_id}") from None

    def ids(self) -> list[str]:
        return sorted(self._speakers)


def spectral_speaker_embedding(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Speaker embedding from audio: per-band mel mean/std (160 values)
    through a fixed random 256x160 projection, L2-normalized."""
    samples = np.asarray(samples, dtype=np.float64)
    if sample_rate != SAMPLE_RATE:
        raise CorpusError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    if samples.size < SAMPLE_RATE:
        raise CorpusError("need at least one second of audio for a speaker embedding")
    mel = melspectrogram(samples)
    stats = np.concatenate([mel.mean(axis=0), mel.std(axis=0)])
    rng = np.random.default_rng(_SPECTRAL_PROJECTION_SEED)
    projection = rng.standard_normal((SPEAKER_DIM, 2 * N_MELS)) / np.sqrt(2 * N_MELS)
    vec = projection @ stats
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        raise CorpusError("degenerate audio produced a zero embedding")
    return (vec / norm).astype(np.float32)


@dataclass
class Utterance:
    name: str
    phoneme_ids: np.ndarray  # (N,) int64
    visual: np.ndarray  # (T, 512) float32
    mel: np.ndarray  # (4T, 80) float32
    alignment: np.ndarray  # (T,) int64, frame -> phoneme index
    speaker_id: str

    @property
    def n_phonemes(self) -> int:
        return int(self.phoneme_ids.shape[0])

    @property
    def n_video_frames(self) -> int:
        return int(self.visual.shape[0])

    @property
    def n_mel_frames(self) -> int:
        return int(self.mel.shape[0])

    def validate(self) -> None:
        n, t, f = self.n_phonemes, self.n_video_frames, self.n_mel_frames
        if n < 1 or t < 1:
            raise CorpusError(f"{self.name}: empty utterance")
        if self.visual.shape != (t, VISUAL_DIM):
            raise CorpusError(f"{self.name}: visual features must be (T, {VISUAL_DIM})")
        if self.mel.shape != (f, N_MELS) or f != UPSAMPLE_N * t:
            raise CorpusError(f"{self.name}: mel must be ({UPSAMPLE_N}*T, {N_MELS}), got {self.mel.shape}")
        if self.alignment.shape != (t,):
            raise CorpusError(f"{self.name}: alignment must have one entry per video frame")
        if self.alignment[0] != 0 or self.alignment[-1] != n - 1:
            raise CorpusError(f"{self.name}: alignment must run from phoneme 0 to N-1")
        if np.any(np.diff(self.alignment) < 0):
            raise CorpusError(f"{self.name}: alignment must be non-decreasing")
        if len(np.unique(self.alignment)) != n:
            raise CorpusError(f"{self.name}: alignment must cover every phoneme")
        for label, arr in (("visual", self.visual), ("mel", self.mel)):
            if not np.all(np.isfinite(arr)):
                raise CorpusError(f"{self.name}: non-finite {label} values")


def generate_utterance(
    seed: int,
    bank: TemplateBank,
    speaker: Speaker,
    phoneme_ids,
    durations,
    sigma_v: float = 0.05,
    sigma_m: float = 0.05,
    max_frames: int = 200,
    name: str = "utt",
) -> Utterance:
    """Deterministic synthetic utterance from per-phoneme frame durations."""
    phoneme_ids = np.asarray(phoneme_ids, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if phoneme_ids.ndim != 1 or phoneme_ids.size < 1:
        raise CorpusError("need at least one phoneme")
    if durations.shape != phoneme_ids.shape:
        raise CorpusError("durations must match phoneme count")
    if np.any(durations < 1):
        raise CorpusError("durations must all be >= 1 video frame")
    if np.any(phoneme_ids < 0) or np.any(phoneme_ids >= bank.vocab_size):
        raise CorpusError("phoneme id outside the template bank")
    total = int(durations.sum())
    if total > max_frames:
        raise CorpusError(f"utterance spans {total} frames, exceeding the {max_frames} frame cap")

    alignment = np.repeat(np.arange(phoneme_ids.size), durations)
    active = phoneme_ids[alignment]

    rng = np.random.default_rng(derive_seed(seed, "noise"))
    visual = bank.visual_signature(active).astype(np.float64)
    if sigma_v > 0:
        visual = visual + rng.normal(0.0, sigma_v, size=visual.shape)

    mel_rows = bank.mel_templates[active].astype(np.float64) + speaker.mel_offset[None, :]
    mel = np.repeat(mel_rows, UPSAMPLE_N, axis=0)
    if sigma_m > 0:
        mel = mel + rng.normal(0.0, sigma_m, size=mel.shape)
        mel = np.clip(mel, 0.0, 1.0)

    utt = Utterance(
        name=name,
        phoneme_ids=phoneme_ids,
        visual=visual.astype(np.float32),
        mel=mel.astype(np.float32),
        alignment=alignment,
        speaker_id=speaker.speaker_id,
    )
    utt.validate()
    return utt


@dataclass
class CorpusManifest:
    sample_rate: int
    n_mels: int
    fps: int
    upsample_n: int
    hop_length: int
    vocabulary: str
    mel_log_floor: float
    mel_log_ceil: float
    speakers: list[str]
    utterances: list[str]
    generation: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.upsample_n != UPSAMPLE_N:
            raise CorpusError(f"manifest upsample_n must be {UPSAMPLE_N}, got {self.upsample_n}")
        if self.fps != FPS:
            raise CorpusError(f"manifest fps must be {FPS}, got {self.fps}")
        if self.n_mels != N_MELS or self.sample_rate != SAMPLE_RATE:
            raise CorpusError("manifest audio settings do not match the pipeline")
        if len(self.speakers) < 1 or len(self.utterances) < 1:
            raise CorpusError("manifest lists no speakers or no utterances")

    def mel_scale(self) -> MelScale:
        return MelScale(log_floor=self.mel_log_floor, log_ceil=self.mel_log_ceil)


def _draw_utterance_plan(cfg: CorpusGenConfig, vocab: PhonemeVocabulary, bank: TemplateBank, k: int):
    """Phoneme ids, durations and speaker index for utterance k."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "plan", k))
    usable = np.array(
        [i for i, s in enumerate(vocab.symbols) if s not in ("PAD", "BOS", "EOS")],
        dtype=np.int64,
    )
    n_lo, n_hi = cfg.min_phonemes, cfg.max_phonemes
    if cfg.frames_per_utterance:
        # keep the target frame total reachable by the duration range
        n_lo = max(n_lo, -(-cfg.frames_per_utterance // cfg.max_duration))
        n_hi = min(n_hi, cfg.frames_per_utterance // cfg.min_duration)
    if cfg.distinct_visemes:
        # one candidate phoneme per mouth-shape class, so the visual stream
        # always has a unique textual answer
        classes = bank.viseme_of[usable]
        n_hi = min(n_hi, len(np.unique(classes)))
    if n_lo > n_hi:
        raise CorpusError(
            f"no phoneme count satisfies min_phonemes={cfg.min_phonemes}, "
            f"max_phonemes={cfg.max_phonemes} under the frame and viseme constraints"
        )
    n = int(rng.integers(n_lo, n_hi + 1))
    if cfg.distinct_visemes:
        picked = []
        for group in rng.permutation(np.unique(classes))[:n]:
            members = usable[classes == group]
            picked.append(int(members[rng.integers(0, members.size)]))
        ids = np.array(picked, dtype=np.int64)
    else:
        ids = rng.choice(usable, size=n, replace=True)
    if cfg.frames_per_utterance:
        durations = _compose_durations(
            rng, n, cfg.frames_per_utterance, cfg.min_duration, cfg.max_duration
        )
    else:
        while True:
            durations = rng.integers(cfg.min_duration, cfg.max_duration + 1, size=n)
            if cfg.min_frames <= durations.sum() <= cfg.max_frames:
                break
    speaker_idx = int(rng.integers(0, cfg.speakers))
    return ids, durations, speaker_idx


def _compose_durations(rng, n: int, total: int, lo: int, hi: int) -> np.ndarray:
    """Random composition of `total` into n parts, each within [lo, hi]."""
    if not n * lo <= total <= n * hi:
        raise CorpusError(f"cannot split {total} frames into {n} durations of {lo}..{hi}")
    durations = np.empty(n, dtype=np.int64)
    remaining = total
    for i in range(n):
        slots_left = n - i - 1
        d_lo = max(lo, remaining - hi * slots_left)
        d_hi = min(hi, remaining - lo * slots_left)
        durations[i] = int(rng.integers(d_lo, d_hi + 1))
        remaining -= durations[i]
    return durations


def generate_corpus(
    cfg: CorpusGenConfig,
    out_dir,
    vocab: PhonemeVocabulary | None = None,
    mel_scale: MelScale = MelScale(),
) -> CorpusManifest:
    """Generate and write a corpus; returns the manifest."""
    if vocab is None:
        vocab = PhonemeVocabulary.default()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    bank = TemplateBank(vocab, cfg.seed, cfg.fourier_order)
    speaker_ids = [f"spk{i}" for i in range(cfg.speakers)]
    speakers = make_speakers(speaker_ids, cfg.seed)

    vocab.save(out_dir / "vocabulary.txt")
    (out_dir / "speakers").mkdir(exist_ok=True)
    for sid in speaker_ids:
        write_f32_vector(out_dir / "speakers" / f"{sid}.emb", speakers[sid].embedding)

    names = []
    for k in range(cfg.utterances):
        ids, durations, speaker_idx = _draw_utterance_plan(cfg, vocab, bank, k)
        name = f"utt_{k:04d}"
        utt = generate_utterance(
            seed=derive_seed(cfg.seed, "utt", k),
            bank=bank,
            speaker=speakers[speaker_ids[speaker_idx]],
            phoneme_ids=ids,
            durations=durations,
            sigma_v=cfg.sigma_v,
            sigma_m=cfg.sigma_m,
            max_frames=cfg.max_frames,
            name=name,
        )
        udir = out_dir / name
        udir.mkdir(exist_ok=True)
        (udir / "phonemes.txt").write_text(" ".join(decode(utt.phoneme_ids, vocab)) + "\n")
        write_f32_matrix(udir / "visual.f32", utt.visual)
        write_f32_matrix(udir / "mel.f32", utt.mel)
        write_u32_vector(udir / "align.u32", utt.alignment)
        (udir / "speaker.txt").write_text(utt.speaker_id + "\n")
        names.append(name)

    manifest = CorpusManifest(
        sample_rate=SAMPLE_RATE,
        n_mels=N_MELS,
        fps=FPS,
        upsample_n=UPSAMPLE_N,
        hop_length=HOP_LENGTH,
        vocabulary="vocabulary.txt",
        mel_log_floor=mel_scale.log_floor,
        mel_log_ceil=mel_scale.log_ceil,
        speakers=speaker_ids,
        utterances=names,
        generation=asdict(cfg),
    )
    manifest.validate()
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class Corpus:
    """Read-only view of an on-disk corpus with lazy utterance loading."""

    def __init__(self, root, manifest: CorpusManifest, vocab: PhonemeVocabulary):
        self.root = Path(root)
        self.manifest = manifest
        self.vocab = vocab
        self._embeddings: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.manifest.utterances)

    @property
    def names(self) -> list[str]:
        return list(self.manifest.utterances)

    def speaker_embedding(self, speaker_id: str) -> np.ndarray:
        if speaker_id not in self.manifest.speakers:
            raise CorpusError(f"unknown speaker: {speaker_id}")
        if speaker_id not in self._embeddings:
            path = self.root / "speakers" / f"{speaker_id}.emb"
            self._embeddings[speaker_id] = read_f32_vector(path, expected_len=SPEAKER_DIM)
        return self._embeddings[speaker_id]

    def load_utterance(self, name: str) -> Utterance:
        if name not in self.manifest.utterances:
            raise CorpusError(f"unknown utterance: {name}")
        udir = self.root / name
        try:
            symbols = (udir / "phonemes.txt").read_text().split()
            phoneme_ids = np.array(encode(symbols, self.vocab).ids, dtype=np.int64)
            visual = read_f32_matrix(udir / "visual.f32", expected_cols=VISUAL_DIM)
        except (OSError, VisottsError) as exc:
            raise CorpusError(f"corrupt utterance: {name} ({exc})") from exc
        try:
            mel = read_f32_matrix(udir / "mel.f32", expected_cols=N_MELS)
        except (OSError, VisottsError) as exc:
            raise CorpusError(f"corrupt mel: {name}") from exc
        try:
            alignment = read_u32_vector(udir / "align.u32")
            speaker_id = (udir / "speaker.txt").read_text().strip()
        except OSError as exc:
            raise CorpusError(f"corrupt utterance: {name} ({exc})") from exc
        utt = Utterance(
            name=name,
            phoneme_ids=phoneme_ids,
            visual=visual,
            mel=mel,
            alignment=alignment,
            speaker_id=speaker_id,
        )
        utt.validate()
        if speaker_id not in self.manifest.speakers:
            raise CorpusError(f"{name}: speaker {speaker_id} not in manifest roster")
        return utt

    def __iter__(self):
        for name in self.manifest.utterances:
            yield self.load_utterance(name)

    def rebuild_generator_tables(self) -> tuple[TemplateBank, dict[str, Speaker]]:
        """Recreate the template bank and speakers from generation metadata.

        Used by oracle tests: with noise at zero, stored mels are exactly
        template[alignment] + speaker offset.
        """
        gen = self.manifest.generation
        if not gen:
            raise CorpusError("corpus manifest carries no generation metadata")
        cfg = CorpusGenConfig(**gen)
        bank = TemplateBank(self.vocab, cfg.seed, cfg.fourier_order)
        speakers = make_speakers(self.manifest.speakers, cfg.seed)
        return bank, speakers


def read_corpus(path) -> Corpus:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CorpusError(f"no manifest.json under {root}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest = CorpusManifest(**raw)
    except (TypeError, ValueError) as exc:
        raise CorpusError(f"invalid manifest: {exc}") from exc
    manifest.validate()
    vocab_path = root / manifest.vocabulary
    if not vocab_path.is_file():
        raise CorpusError(f"manifest references missing vocabulary file {vocab_path}")
    vocab = PhonemeVocabulary.load(vocab_path)
    for name in manifest.utterances:
        if not (root / name).is_dir():
            raise CorpusError(f"missing utterance directory: {name}")
    for sid in manifest.speakers:
        if not (root / "speakers" / f"{sid}.emb").is_file():
            raise CorpusError(f"missing speaker embedding: {sid}")
    return Corpus(root, manifest, vocab)
