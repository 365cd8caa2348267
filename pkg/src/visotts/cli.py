"""Command-line operator surface.

Subcommands: gen-data, train, synth, eval, inspect-attn. Every option mirrors
a flat JSON config key (kebab-case flag <-> snake_case key) with precedence
flags > config file > defaults, and each run writes its fully resolved
configuration into the output directory as run_config.json. The environment
variable VISOTTS_SEED acts as a global seed fallback. Usage errors exit 2;
runtime errors exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import VisottsError
from .dsp import HOP_LENGTH, griffin_lim, save_mel
from .fileio import read_f32_matrix, read_f32_vector, write_wav
from .model import ModelConfig, infer_utterance, load_checkpoint
from .synthcorpus import (
    SPEAKER_DIM,
    VISUAL_DIM,
    CorpusGenConfig,
    generate_corpus,
    read_corpus,
)
from .text import PhonemeVocabulary, encode, g2p
from .training import TrainConfig, train_loop


class CliError(VisottsError):
    pass


# key -> (type, default); None defaults mean "absent unless provided".
_SCHEMA: dict[str, tuple[type, object]] = {
    # model
    "d": (int, 64),
    "heads": (int, 2),
    "text_blocks": (int, 4),
    "visual_blocks": (int, 4),
    "decoder_blocks": (int, 6),
    "conv_kernel": (int, 9),
    "conv_hidden": (int, None),
    "dropout": (float, 0.1),
    "max_len": (int, 2000),
    "upsample_n": (int, 4),
    "mel_bins": (int, 80),
    "visual_in": (int, 512),
    "speaker_in": (int, 256),
    # training
    "batch_size": (int, 16),
    "warmup_steps": (int, 500),
    "base_scale": (float, 1.0),
    "max_steps": (int, 2000),
    "checkpoint_every": (int, 1000),
    "log_every": (int, 10),
    "grad_clip": (float, 1.0),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.98),
    "adam_eps": (float, 1e-9),
    # corpus generation
    "utterances": (int, 32),
    "speakers": (int, 4),
    "min_phonemes": (int, 6),
    "max_phonemes": (int, 12),
    "min_frames": (int, 12),
    "frames_per_utterance": (int, 24),
    "sigma_v": (float, 0.05),
    "sigma_m": (float, 0.05),
    # shared
    "seed": (int, None),
    "gl_iterations": (int, 60),
    # paths and run inputs
    "corpus": (str, None),
    "checkpoint": (str, None),
    "out": (str, None),
    "resume": (str, None),
    "visual": (str, None),
    "text": (str, None),
    "phonemes": (str, None),
    "speaker": (str, None),
    "speaker_emb": (str, None),
    "names": (str, None),
}

_MODEL_KEYS = (
    "d", "heads", "text_blocks", "visual_blocks", "decoder_blocks", "conv_kernel",
    "conv_hidden", "dropout", "max_len", "upsample_n", "mel_bins", "visual_in", "speaker_in",
)
_TRAIN_KEYS = (
    "batch_size", "warmup_steps", "base_scale", "max_steps", "checkpoint_every",
    "log_every", "grad_clip", "adam_beta1", "adam_beta2", "adam_eps",
)
_GEN_KEYS = (
    "utterances", "speakers", "min_phonemes", "max_phonemes", "min_frames",
    "frames_per_utterance", "sigma_v", "sigma_m",
)


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        if self.values["seed"] is not None:
            return self.values["seed"]
        env = os.environ.get("VISOTTS_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise CliError(f"VISOTTS_SEED must be an integer, got {env!r}") from None
        return 0

    def model_config(self, vocab_size: int) -> ModelConfig:
        kwargs = {k: self.values[k] for k in _MODEL_KEYS}
        return ModelConfig(vocab_size=vocab_size, **kwargs)

    def train_config(self) -> TrainConfig:
        kwargs = {k: self.values[k] for k in _TRAIN_KEYS}
        return TrainConfig(seed=self.seed, **kwargs)

    def gen_config(self) -> CorpusGenConfig:
        kwargs = {k: self.values[k] for k in _GEN_KEYS}
        return CorpusGenConfig(seed=self.seed, **kwargs)

    def resolved(self) -> dict:
        resolved = dict(self.values)
        resolved["seed"] = self.seed
        return resolved


def _coerce(key: str, value, expected: type):
    if value is None:
        return None
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError(f"config key {key}: expected int, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError(f"config key {key}: expected float, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise CliError(f"config key {key}: expected str, got {value!r}")
        return value
    raise CliError(f"config key {key}: unsupported type")


def parse_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, config file and flag overrides (that order)."""
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in _SCHEMA:
                raise CliError(f"unknown config key: {key}")
            values[key] = _coerce(key, value, _SCHEMA[key][0])
    for key, value in (overrides or {}).items():
        if key not in _SCHEMA:
            raise CliError(f"unknown config key: {key}")
        if value is not None:
            values[key] = _coerce(key, value, _SCHEMA[key][0])
    if values["upsample_n"] != 4:
        raise CliError("config key upsample_n: must be 4 (fixed by the 25 fps / 10 ms rates)")
    return RunConfig(values)


def _write_run_config(run: RunConfig, out_dir: Path, subcommand: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = run.resolved()
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # Subcommand recorded next to, not inside, the reloadable config keys.
    (out_dir / "run_config.cmd").write_text(subcommand + "\n", encoding="utf-8")


def _add_config_flags(parser: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        expected, _ = _SCHEMA[key]
        parser.add_argument(
            "--" + key.replace("_", "-"),
            dest=key,
            type=expected,
            default=None,
            help=f"config key {key}",
        )


def _overrides_from_args(args: argparse.Namespace) -> dict:
    return {
        key: value
        for key, value in vars(args).items()
        if key in _SCHEMA and value is not None
    }


def _require(run: RunConfig, *keys: str) -> None:
    for key in keys:
        if run.values.get(key) is None:
            flag = "--" + key.replace("_", "-")
            raise CliError(f"missing required option {flag}")


def _load_checkpoint_or_fail(path_str: str):
    path = Path(path_str)
    if not path.is_dir() or not (path / "config.json").is_file():
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_data(run: RunConfig) -> None:
    _require(run, "out")
    out_dir = Path(run["out"])
    manifest = generate_corpus(run.gen_config(), out_dir)
    _write_run_config(run, out_dir, "gen-data")
    print(f"wrote {len(manifest.utterances)} utterances, "
          f"{len(manifest.speakers)} speakers -> {out_dir}")


def cmd_train(run: RunConfig) -> None:
    _require(run, "corpus", "out")
    corpus = read_corpus(run["corpus"])
    out_dir = Path(run["out"])
    _write_run_config(run, out_dir, "train")
    result = train_loop(
        run.train_config(),
        run.model_config(vocab_size=len(corpus.vocab)),
        corpus,
        out_dir,
        resume_from=run.values.get("resume"),
    )
    print(f"trained to step {run['max_steps']}: first loss {result.first_loss:.4f}, "
          f"final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"loss log:   {result.log_path}")


def _resolve_phonemes(run: RunConfig, vocab: PhonemeVocabulary):
    if run.values.get("phonemes"):
        return encode(run["phonemes"].split(), vocab)
    if run.values.get("text"):
        return g2p(run["text"], vocab=vocab)
    raise CliError("missing required option --text or --phonemes")


def _resolve_speaker(run: RunConfig) -> np.ndarray:
    if run.values.get("speaker_emb"):
        return read_f32_vector(run["speaker_emb"], expected_len=SPEAKER_DIM)
    if run.values.get("speaker"):
        if not run.values.get("corpus"):
            raise CliError("--speaker <id> needs --corpus to resolve the roster")
        corpus = read_corpus(run["corpus"])
        return corpus.speaker_embedding(run["speaker"])
    raise CliError("missing required option --speaker-emb or --speaker")


def cmd_synth(run: RunConfig) -> None:
    _require(run, "checkpoint", "visual", "out")
    model, config = _load_checkpoint_or_fail(run["checkpoint"])
    vocab = PhonemeVocabulary(tuple(config["vocab"]))
    sequence = _resolve_phonemes(run, vocab)
    speaker = _resolve_speaker(run)
    visual = read_f32_matrix(run["visual"], expected_cols=VISUAL_DIM)

    mel, alignment = infer_utterance(model, np.array(sequence.ids), visual, speaker)
    from .dsp import MelScale

    scale = MelScale(log_floor=config["mel_log_floor"], log_ceil=config["mel_log_ceil"])
    audio = griffin_lim(mel, iterations=run["gl_iterations"], scale=scale)

    out_dir = Path(run["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_mel(out_dir / "mel.f32", mel)
    write_wav(out_dir / "synth.wav", audio)
    np.savetxt(out_dir / "alignment.csv", alignment, fmt="%.6f", delimiter=",")
    _write_run_config(run, out_dir, "synth")
    print(f"synthesized {mel.shape[0]} mel frames "
          f"({mel.shape[0] * HOP_LENGTH} samples) -> {out_dir}")


def _selected_names(run: RunConfig):
    raw = run.values.get("names")
    if raw is None:
        return None
    names = [n.strip() for n in raw.split(",") if n.strip()]
    if not names:
        raise CliError("--names needs at least one utterance id")
    return names


def cmd_eval(run: RunConfig) -> None:
    _require(run, "checkpoint", "corpus", "out")
    from .evaluation import evaluate_corpus, write_report
    from .plots import save_metric_overview

    model, config = _load_checkpoint_or_fail(run["checkpoint"])
    corpus = read_corpus(run["corpus"])
    if list(config.get("vocab", [])) != list(corpus.vocab.symbols):
        raise CliError("checkpoint and corpus vocabularies disagree")
    rows, means = evaluate_corpus(
        corpus, model=model,
        utterance_names=_selected_names(run),
        gl_iterations=run["gl_iterations"],
    )
    out_dir = Path(run["out"])
    report_path, summary_path = write_report(rows, means, out_dir)
    save_metric_overview(rows, out_dir / "metrics.png")
    _write_run_config(run, out_dir, "eval")
    print(f"evaluated {len(rows)} utterances -> {report_path}")
    print("means: " + ", ".join(f"{k}={v:.4f}" for k, v in means.items()))


def cmd_inspect_attn(run: RunConfig) -> None:
    _require(run, "checkpoint", "corpus", "out", "names")
    from .plots import save_alignment_heatmap

    model, config = _load_checkpoint_or_fail(run["checkpoint"])
    corpus = read_corpus(run["corpus"])
    if list(config.get("vocab", [])) != list(corpus.vocab.symbols):
        raise CliError("checkpoint and corpus vocabularies disagree")
    out_dir = Path(run["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in _selected_names(run):
        utt = corpus.load_utterance(name)
        speaker = corpus.speaker_embedding(utt.speaker_id)
        _, alignment = infer_utterance(model, utt.phoneme_ids, utt.visual, speaker)
        np.savetxt(out_dir / f"{name}_alignment.csv", alignment, fmt="%.6f", delimiter=",")
        save_alignment_heatmap(alignment, out_dir / f"{name}_alignment.png", title=name)
        print(f"{name}: T={alignment.shape[0]} N={alignment.shape[1]} -> {out_dir}")
    _write_run_config(run, out_dir, "inspect-attn")


_COMMANDS = {
    "gen-data": (cmd_gen_data, ("out", "seed", *_GEN_KEYS)),
    "train": (
        cmd_train,
        ("corpus", "out", "resume", "seed", *_TRAIN_KEYS, *_MODEL_KEYS),
    ),
    "synth": (
        cmd_synth,
        ("checkpoint", "visual", "out", "text", "phonemes", "speaker",
         "speaker_emb", "corpus", "gl_iterations", "seed"),
    ),
    "eval": (cmd_eval, ("checkpoint", "corpus", "out", "names", "gl_iterations", "seed")),
    "inspect-attn": (cmd_inspect_attn, ("checkpoint", "corpus", "out", "names", "seed")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visotts",
        description="Visually-conditioned text-to-speech: corpus generation, "
        "training, synthesis, evaluation and attention inspection.",
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name, (_, keys) in _COMMANDS.items():
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", default=None, help="flat key-value JSON config file")
        _add_config_flags(sub, keys)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler, _ = _COMMANDS[args.subcommand]
    try:
        run = parse_config(args.config, _overrides_from_args(args))
        handler(run)
    except VisottsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
