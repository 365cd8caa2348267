"""Optimization loop: L1 reconstruction, Adam with warmup/inverse-sqrt decay,
checkpointing and reproducible runs.

Reproducibility discipline: batch composition and dropout noise are pure
functions of (seed, step) -- every step reseeds torch from a derived seed and
batch order is drawn per epoch from a derived generator -- so resuming from a
checkpoint replays the exact trace the uninterrupted run would have produced.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import VisottsError
from .fileio import derive_seed
from .model import (
    ModelConfig,
    VisualTTS,
    build_model,
    load_checkpoint,
    read_tensor_blob,
    save_checkpoint,
    write_tensor_blob,
)
from .synthcorpus import Corpus


class TrainingError(VisottsError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 500
    base_scale: float = 1.0
    max_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise TrainingError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise TrainingError("max_steps must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise TrainingError("log_every and checkpoint_every must be >= 1")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all entries."""
    if pred.shape != target.shape:
        raise TrainingError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def lr_schedule(step: int, d: int, warmup_steps: int, base_scale: float = 1.0) -> float:
    """base_scale * d^-1/2 * min(step^-1/2, step * warmup^-3/2)."""
    if step < 1:
        raise TrainingError("schedule is defined for step >= 1")
    return base_scale * d ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class Batch:
    names: list[str]
    ids: torch.Tensor  # (B, N) padded with PAD=0
    text_mask: torch.Tensor  # (B, N) bool
    visual: torch.Tensor  # (B, T, 512)
    mel: torch.Tensor  # (B, 4T, 80)
    speaker: torch.Tensor  # (B, 256)


class BatchPlanner:
    """Same-video-length bucketing; batch order is a pure function of
    (corpus order, seed, epoch). Buckets may emit short batches at their
    boundaries."""

    def __init__(self, corpus: Corpus, batch_size: int, seed: int):
        self.corpus = corpus
        self.batch_size = batch_size
        self.seed = seed
        self._utts = [corpus.load_utterance(name) for name in corpus.names]
        buckets: dict[int, list[int]] = {}
        for i, utt in enumerate(self._utts):
            buckets.setdefault(utt.n_video_frames, []).append(i)
        self._buckets = [buckets[t] for t in sorted(buckets)]

    def batches_per_epoch(self) -> int:
        return sum(-(-len(b) // self.batch_size) for b in self._buckets)

    def plan_epoch(self, epoch: int) -> list[list[int]]:
        rng = np.random.default_rng(derive_seed(self.seed, "epoch", epoch))
        chunks: list[list[int]] = []
        for bucket in self._buckets:
            order = [bucket[i] for i in rng.permutation(len(bucket))]
            chunks.extend(order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size))
        return [chunks[i] for i in rng.permutation(len(chunks))]

    def batch_for_step(self, step: int) -> Batch:
        per_epoch = self.batches_per_epoch()
        epoch, index = divmod(step - 1, per_epoch)
        indices = self.plan_epoch(epoch)[index]
        return self._collate(indices)

    def _collate(self, indices: list[int]) -> Batch:
        utts = [self._utts[i] for i in indices]
        n_max = max(u.n_phonemes for u in utts)
        ids = torch.zeros(len(utts), n_max, dtype=torch.long)
        mask = torch.zeros(len(utts), n_max, dtype=torch.bool)
        for row, utt in enumerate(utts):
            n = utt.n_phonemes
            ids[row, :n] = torch.from_numpy(utt.phoneme_ids)
            mask[row, :n] = True
        visual = torch.from_numpy(np.stack([u.visual for u in utts]))
        mel = torch.from_numpy(np.stack([u.mel for u in utts]))
        speaker = torch.from_numpy(
            np.stack([self.corpus.speaker_embedding(u.speaker_id) for u in utts])
        )
        return Batch(
            names=[u.name for u in utts],
            ids=ids, text_mask=mask, visual=visual, mel=mel, speaker=speaker,
        )


@dataclass
class TrainState:
    model: VisualTTS
    optimizer: torch.optim.Adam
    train_cfg: TrainConfig
    step: int = 0
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)  # step, lr, loss


def make_train_state(train_cfg: TrainConfig, model_cfg: ModelConfig) -> TrainState:
    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=lr_schedule(1, model_cfg.d, train_cfg.warmup_steps, train_cfg.base_scale),
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        eps=train_cfg.adam_eps,
    )
    return TrainState(model=model, optimizer=optimizer, train_cfg=train_cfg)


def train_step(state: TrainState, batch: Batch) -> float:
    """One forward/backward/Adam update; returns the scalar loss."""
    cfg = state.train_cfg
    step = state.step + 1
    torch.manual_seed(derive_seed(cfg.seed, "step", step))
    state.model.train()

    lr = lr_schedule(step, state.model.cfg.d, cfg.warmup_steps, cfg.base_scale)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.optimizer.zero_grad()
    pred, _ = state.model(batch.ids, batch.visual, batch.speaker, text_mask=batch.text_mask)
    loss = l1_loss(pred, batch.mel)
    loss_value = float(loss.detach())
    if not np.isfinite(loss_value):
        raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3e})")
    loss.backward()
    grad_norm = float(torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip))
    if not np.isfinite(grad_norm):
        raise TrainingError(f"non-finite gradients at step {step} (lr={lr:.3e}, grad_norm={grad_norm})")
    state.optimizer.step()
    state.step = step
    return loss_value


# -- train-state checkpointing -------------------------------------------------

def save_train_checkpoint(directory, state: TrainState, extra: dict | None = None) -> Path:
    directory = Path(directory)
    save_checkpoint(directory, state.model, extra=extra)
    moments: dict[str, np.ndarray] = {}
    adam_steps: dict[str, int] = {}
    params = dict(state.model.named_parameters())
    opt_state = state.optimizer.state
    for name, param in params.items():
        entry = opt_state.get(param)
        if not entry:
            continue
        moments[f"exp_avg.{name}"] = entry["exp_avg"].detach().cpu().numpy()
        moments[f"exp_avg_sq.{name}"] = entry["exp_avg_sq"].detach().cpu().numpy()
        adam_steps[name] = int(entry["step"])
    write_tensor_blob(directory / "optimizer.bin", moments)
    trainer = {
        "step": state.step,
        "train_config": asdict(state.train_cfg),
        "adam_steps": adam_steps,
    }
    with open(directory / "trainer.json", "w", encoding="utf-8") as fh:
        json.dump(trainer, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_train_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    trainer_path = directory / "trainer.json"
    if not trainer_path.is_file():
        raise TrainingError(f"not a training checkpoint: {directory}")
    trainer = json.loads(trainer_path.read_text(encoding="utf-8"))
    train_cfg = TrainConfig(**trainer["train_config"])
    model, _ = load_checkpoint(directory)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=1.0,
        betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
        eps=train_cfg.adam_eps,
    )
    moments = read_tensor_blob(directory / "optimizer.bin")
    adam_steps = trainer["adam_steps"]
    for name, param in model.named_parameters():
        if name not in adam_steps:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(adam_steps[name])),
            "exp_avg": torch.from_numpy(moments[f"exp_avg.{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(moments[f"exp_avg_sq.{name}"].copy()),
        }
    return TrainState(
        model=model, optimizer=optimizer, train_cfg=train_cfg, step=int(trainer["step"])
    )


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    first_loss: float
    final_loss: float


def train_loop(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    corpus: Corpus,
    out_dir,
    resume_from=None,
    checkpoint_extra: dict | None = None,
) -> TrainResult:
    """Train on a corpus, writing checkpoints and a step/lr/loss CSV.

    Rows are logged whenever step % log_every == 0; checkpoints are written
    every checkpoint_every steps and at the final step.
    """
    if model_cfg.vocab_size != len(corpus.vocab):
        raise TrainingError(
            f"model vocab size {model_cfg.vocab_size} does not match corpus "
            f"vocabulary of {len(corpus.vocab)} symbols"
        )
    if model_cfg.upsample_n != corpus.manifest.upsample_n:
        raise TrainingError("model and corpus disagree on the upsample factor")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = dict(checkpoint_extra or {})
    extra.setdefault("vocab", list(corpus.vocab.symbols))
    extra.setdefault("mel_log_floor", corpus.manifest.mel_log_floor)
    extra.setdefault("mel_log_ceil", corpus.manifest.mel_log_ceil)

    if resume_from is not None:
        state = load_train_checkpoint(resume_from)
        if state.model.cfg != model_cfg:
            raise TrainingError("resume checkpoint was trained with a different model config")
        # Everything except the step budget must match or the replayed trace
        # would diverge from the uninterrupted run.
        saved = asdict(state.train_cfg)
        wanted = asdict(train_cfg)
        for key in ("max_steps", "checkpoint_every", "log_every"):
            saved.pop(key), wanted.pop(key)
        if saved != wanted:
            raise TrainingError("resume checkpoint was trained with a different train config")
        state.train_cfg = train_cfg
    else:
        state = make_train_state(train_cfg, model_cfg)

    planner = BatchPlanner(corpus, train_cfg.batch_size, train_cfg.seed)
    log_path = out_dir / "loss_log.csv"
    ckpt_root = out_dir / "checkpoints"
    first_loss = None
    last_loss = None
    last_dir = None

    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        while state.step < train_cfg.max_steps:
            batch = planner.batch_for_step(state.step + 1)
            loss = train_step(state, batch)
            if first_loss is None:
                first_loss = loss
            last_loss = loss
            if state.step % train_cfg.log_every == 0:
                lr = lr_schedule(state.step, model_cfg.d, train_cfg.warmup_steps, train_cfg.base_scale)
                writer.writerow([state.step, f"{lr:.8e}", f"{loss:.6f}"])
            if state.step % train_cfg.checkpoint_every == 0 or state.step == train_cfg.max_steps:
                last_dir = save_train_checkpoint(
                    ckpt_root / f"step_{state.step:06d}", state, extra=extra
                )

    try:
        from .plots import save_loss_curve

        save_loss_curve(log_path, out_dir / "loss_curve.png")
    except Exception:
        pass  # figures are a convenience; training artifacts stand alone

    return TrainResult(
        checkpoint_dir=last_dir,
        log_path=log_path,
        first_loss=first_loss,
        final_loss=last_loss,
    )
