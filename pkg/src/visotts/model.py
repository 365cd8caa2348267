"""Visual text-to-speech network.

Phonemes run through an embedding + positional encoding + feed-forward
transformer (FFT) stack; visual features through a linear projection +
positional encoding + FFT stack. A scaled dot-product attention with the
visual embeddings as queries and the text embeddings as keys/values aligns
the two streams; its output is upsampled 4x (25 fps video -> 10 ms mel hop),
shifted by a projected speaker embedding and decoded by a second FFT stack
into an 80-band melspectrogram. There is no duration predictor: phoneme
timing lives entirely in the attention weights, and the output mel length is
always exactly 4x the video length.
"""

from __future__ import annotations

import json
import math
import struct
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import VisottsError
from .fileio import derive_seed

UPSAMPLE_N = 4


class ModelError(VisottsError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 2
    text_blocks: int = 4
    visual_blocks: int = 4
    decoder_blocks: int = 6
    conv_kernel: int = 9
    conv_hidden: int | None = None  # defaults to 4 * d
    dropout: float = 0.1
    max_len: int = 2000
    upsample_n: int = UPSAMPLE_N
    mel_bins: int = 80
    visual_in: int = 512
    speaker_in: int = 256
    vocab_size: int = 43

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ModelError(f"width {self.d} not divisible by {self.heads} heads")
        if self.upsample_n != UPSAMPLE_N:
            raise ModelError(f"upsample_n is fixed at {UPSAMPLE_N} by the 25 fps / 10 ms rates")
        if min(self.text_blocks, self.visual_blocks, self.decoder_blocks) < 1:
            raise ModelError("block counts must be >= 1")
        if self.conv_kernel % 2 != 1:
            raise ModelError("conv_kernel must be odd to preserve length")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")

    @property
    def conv_hidden_size(self) -> int:
        return self.conv_hidden if self.conv_hidden is not None else 4 * self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def positional_encoding(length: int, d: int, max_len: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal table: (pos, 2i) -> sin(pos / 10000^(2i/d)), (pos, 2i+1) -> cos."""
    if length < 1:
        raise ModelError("positional encoding length must be >= 1")
    if max_len is not None and length > max_len:
        raise ModelError(f"sequence length {length} exceeds max_len {max_len}")
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(length, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: table[:, 1::2].shape[1]])
    return table.to(dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention returning head-averaged weights."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads != 0:
            raise ModelError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.q_proj = nn.Linear(d, d)
        # a key bias shifts every logit row uniformly, which softmax cancels;
        # it would be a permanently gradient-dead parameter
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)
        # Damped query/key init keeps early logits small: if the softmax
        # saturates before content matching has formed, the alignment locks
        # onto the positional shortcut and its gradient never recovers.
        with torch.no_grad():
            self.q_proj.weight.mul_(0.25)
            self.k_proj.weight.mul_(0.25)

    def forward(self, query, key, value, key_mask=None):
        """query: (B, Lq, d); key/value: (B, Lk, d); key_mask: (B, Lk) bool,
        True for real positions. Returns (out (B, Lq, d), weights (B, Lq, Lk))."""
        if query.shape[-1] != self.d or key.shape[-1] != self.d:
            raise ModelError(f"attention inputs must have width {self.d}")
        b, lq, _ = query.shape
        lk = key.shape[1]

        def split(x):
            return x.view(b, -1, self.heads, self.d_head).transpose(1, 2)

        q = split(self.q_proj(query))
        k = split(self.k_proj(key))
        v = split(self.v_proj(value))

        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        # No dropout on the probabilities: zeroing single weights punishes
        # exactly the peaked distributions the alignment is supposed to reach.
        # Regularization lives on the projected output instead.
        context = torch.matmul(weights, v)
        context = context.transpose(1, 2).reshape(b, lq, self.d)
        return self.dropout(self.out_proj(context)), weights.mean(dim=1)


class ConvFeedForward(nn.Module):
    """Two-conv position-wise feed-forward (kernel k then 1)."""

    def __init__(self, d: int, hidden: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(d, hidden, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(hidden, d, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        y = x.transpose(1, 2)
        y = self.conv2(self.dropout(torch.nn.functional.gelu(self.conv1(y))))
        return y.transpose(1, 2)


class FFTBlock(nn.Module):
    """Self-attention + conv feed-forward, each with residual and LayerNorm.

    Normalization is applied at each sublayer input (pre-LN) and once more at
    the top of every stack: with normalization after the residual add
    instead, the sublayer outputs grow during training and the divide-by-std
    in every LayerNorm backward crushes upstream gradients to float32 noise,
    which freezes the cross-attention. With zeroed sublayer weights the block
    is exactly the identity.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout)
        self.feed_forward = ConvFeedForward(cfg.d, cfg.conv_hidden_size, cfg.conv_kernel, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask=None):
        # mask: (B, L) bool, True for real positions. Padded positions are
        # zeroed after each sublayer so the convolution sees the same zeros
        # it would see past the end of an unpadded sequence.
        attn_out, _ = self.attention(*(self.norm1(x),) * 3, key_mask=mask)
        x = x + attn_out  # attention already applies output dropout
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        ff_in = self.norm2(x)
        if mask is not None:
            # a trained LayerNorm bias would otherwise leak into the conv
            # through padded positions
            ff_in = ff_in * mask.unsqueeze(-1)
        x = x + self.dropout(self.feed_forward(ff_in))
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        return x


def upsample(x: torch.Tensor, n: int = UPSAMPLE_N) -> torch.Tensor:
    """Nearest-neighbor repetition along time: (B, T, d) -> (B, n*T, d)."""
    if x.dim() != 3:
        raise ModelError("upsample expects (B, T, d)")
    return torch.repeat_interleave(x, n, dim=1)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d, padding_idx=0)
        self.blocks = nn.ModuleList(FFTBlock(cfg) for _ in range(cfg.text_blocks))
        self.final_norm = nn.LayerNorm(cfg.d)

    def forward(self, ids, mask=None):
        if ids.dim() != 2:
            raise ModelError("text encoder expects (B, N) phoneme ids")
        if ids.numel() == 0:
            raise ModelError("text encoder got an empty sequence")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise ModelError(f"phoneme id out of range [0, {self.cfg.vocab_size})")
        n = ids.shape[1]
        x = self.embedding(ids)
        x = x + positional_encoding(n, self.cfg.d, self.cfg.max_len, dtype=x.dtype).to(x.device)
        for block in self.blocks:
            x = block(x, mask)
        x = self.final_norm(x)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        return x


class VisualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.visual_in, cfg.d)
        self.blocks = nn.ModuleList(FFTBlock(cfg) for _ in range(cfg.visual_blocks))
        self.final_norm = nn.LayerNorm(cfg.d)

    def forward(self, features):
        if features.dim() != 3 or features.shape[-1] != self.cfg.visual_in:
            raise ModelError(f"visual encoder expects (B, T, {self.cfg.visual_in})")
        t = features.shape[1]
        x = self.input_proj(features)
        x = x + positional_encoding(t, self.cfg.d, self.cfg.max_len, dtype=x.dtype).to(x.device)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


class MelDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(FFTBlock(cfg) for _ in range(cfg.decoder_blocks))
        self.final_norm = nn.LayerNorm(cfg.d)
        self.mel_head = nn.Linear(cfg.d, cfg.mel_bins)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.mel_head(self.final_norm(x))


class VisualTTS(nn.Module):
    """Full network of encoders, visual-text attention, upsampler, speaker
    conditioning and spectrogram decoder. Inference is deterministic once
    `eval()` disables dropout."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.visual_encoder = VisualEncoder(cfg)
        self.cross_attention = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout)
        self.speaker_proj = nn.Linear(cfg.speaker_in, cfg.d)
        self.decoder = MelDecoder(cfg)

    def encode_text(self, ids, mask=None):
        return self.text_encoder(ids, mask)

    def encode_visual(self, features):
        return self.visual_encoder(features)

    def visual_text_attention(self, e_vis, e_text, text_mask=None):
        """Returns (context (B, T, d), alignment (B, T, N)); alignment rows
        are the head-averaged attention weights over phonemes."""
        return self.cross_attention(e_vis, e_text, e_text, key_mask=text_mask)

    def condition_speaker(self, x, speaker):
        if speaker.dim() != 2 or speaker.shape[-1] != self.cfg.speaker_in:
            raise ModelError(f"speaker embedding must be (B, {self.cfg.speaker_in})")
        return x + self.speaker_proj(speaker).unsqueeze(1)

    def decode_mel(self, x):
        return self.decoder(x)

    def forward(self, ids, visual, speaker, text_mask=None):
        """ids: (B, N) int64; visual: (B, T, visual_in); speaker: (B, 256).
        Returns (mel (B, 4T, 80), alignment (B, T, N))."""
        if visual.dim() != 3:
            raise ModelError("visual input must be (B, T, visual_in)")
        t = visual.shape[1]
        if self.cfg.upsample_n * t > self.cfg.max_len:
            raise ModelError(f"decoded length {self.cfg.upsample_n * t} exceeds max_len")
        e_text = self.encode_text(ids, text_mask)
        e_vis = self.encode_visual(visual)
        context, alignment = self.visual_text_attention(e_vis, e_text, text_mask)
        x = upsample(context, self.cfg.upsample_n)
        x = self.condition_speaker(x, speaker)
        mel = self.decode_mel(x)
        return mel, alignment


def build_model(cfg: ModelConfig, seed: int = 0) -> VisualTTS:
    """Deterministically initialized model."""
    torch.manual_seed(derive_seed(seed, "init"))
    return VisualTTS(cfg)


def infer_utterance(model: VisualTTS, phoneme_ids, visual, speaker):
    """Single-utterance inference on numpy arrays; returns (mel, alignment)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            ids = torch.as_tensor(np.asarray(phoneme_ids), dtype=torch.long).unsqueeze(0)
            vis = torch.as_tensor(np.asarray(visual, dtype=np.float32)).unsqueeze(0)
            spk = torch.as_tensor(np.asarray(speaker, dtype=np.float32)).unsqueeze(0)
            mel, alignment = model(ids, vis, spk)
    finally:
        model.train(was_training)
    return mel[0].numpy(), alignment[0].numpy()


# -- checkpoint format --------------------------------------------------------
#
# A checkpoint is a directory holding config.json (model config, phoneme
# vocabulary, mel normalization constants, git describe string) and
# params.bin, a named-tensor blob:
#   magic "VTTSTNSR", uint32 version, uint32 tensor count, then per tensor
#   uint16 name length, name (utf-8), uint8 ndim, ndim x uint32 shape,
#   float32 little-endian data.

_BLOB_MAGIC = b"VTTSTNSR"
_BLOB_VERSION = 1


def write_tensor_blob(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<II", _BLOB_VERSION, len(tensors)))
        for name, tensor in tensors.items():
            data = np.ascontiguousarray(tensor, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def read_tensor_blob(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _BLOB_MAGIC:
        raise ModelError(f"{path} is not a tensor blob")
    version, count = struct.unpack("<II", raw[8:16])
    if version != _BLOB_VERSION:
        raise ModelError(f"unsupported tensor blob version {version}")
    tensors: dict[str, np.ndarray] = {}
    offset = 16
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n_values = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=n_values, offset=offset)
        offset += 4 * n_values
        tensors[name] = data.reshape(shape).copy()
    if offset != len(raw):
        raise ModelError(f"{path} has {len(raw) - offset} trailing bytes")
    return tensors


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def save_checkpoint(directory, model: VisualTTS, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {"model": model.cfg.to_dict(), "git": _git_describe()}
    if extra:
        config.update(extra)
    with open(directory / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    tensors = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    write_tensor_blob(directory / "params.bin", tensors)
    return directory


def load_checkpoint(directory) -> tuple[VisualTTS, dict]:
    directory = Path(directory)
    config_path = directory / "config.json"
    params_path = directory / "params.bin"
    if not config_path.is_file() or not params_path.is_file():
        raise ModelError(f"checkpoint not found: {directory}")
    config = json.loads(config_path.read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(config["model"])
    model = VisualTTS(cfg)
    stored = read_tensor_blob(params_path)
    expected = {name: tuple(p.shape) for name, p in model.named_parameters()}
    extra_names = sorted(set(stored) - set(expected))
    missing_names = sorted(set(expected) - set(stored))
    if extra_names:
        raise ModelError(f"checkpoint has unexpected tensors: {', '.join(extra_names)}")
    if missing_names:
        raise ModelError(f"checkpoint is missing tensors: {', '.join(missing_names)}")
    with torch.no_grad():
        for name, param in model.named_parameters():
            data = stored[name]
            if tuple(data.shape) != tuple(param.shape):
                raise ModelError(
                    f"checkpoint tensor {name} has shape {data.shape}, expected {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(data))
    model.eval()
    return model, config
