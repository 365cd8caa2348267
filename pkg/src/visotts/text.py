"""Phoneme frontend: vocabulary management and dictionary-based G2P.

The phoneme inventory is the 39-symbol ARPAbet core (stress markers
stripped) plus four specials: PAD (always id 0), BOS, EOS and SIL. G2P looks
words up in a pronouncing dictionary (first listed pronunciation wins),
spells out-of-vocabulary words letter by letter, and inserts SIL at word
boundaries. All structures are read-only after construction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import VisottsError


class TextError(VisottsError):
    pass


PAD, BOS, EOS, SIL = "PAD", "BOS", "EOS", "SIL"
SPECIALS = (PAD, BOS, EOS, SIL)

ARPABET = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER",
    "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW",
    "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)

# Spoken names for characters, used as the OOV fallback.
CHARACTER_NAMES = {
    "a": ("EY",), "b": ("B", "IY"), "c": ("S", "IY"), "d": ("D", "IY"),
    "e": ("IY",), "f": ("EH", "F"), "g": ("JH", "IY"), "h": ("EY", "CH"),
    "i": ("AY",), "j": ("JH", "EY"), "k": ("K", "EY"), "l": ("EH", "L"),
    "m": ("EH", "M"), "n": ("EH", "N"), "o": ("OW",), "p": ("P", "IY"),
    "q": ("K", "Y", "UW"), "r": ("AA", "R"), "s": ("EH", "S"), "t": ("T", "IY"),
    "u": ("Y", "UW"), "v": ("V", "IY"), "w": ("D", "AH", "B", "AH", "L", "Y", "UW"),
    "x": ("EH", "K", "S"), "y": ("W", "AY"), "z": ("Z", "IY"),
    "0": ("Z", "IH", "R", "OW"), "1": ("W", "AH", "N"), "2": ("T", "UW"),
    "3": ("TH", "R", "IY"), "4": ("F", "AO", "R"), "5": ("F", "AY", "V"),
    "6": ("S", "IH", "K", "S"), "7": ("S", "EH", "V", "AH", "N"),
    "8": ("EY", "T"), "9": ("N", "AY", "N"),
}

_WORD_RE = re.compile(r"[a-z0-9']+")


@dataclass(frozen=True)
class PhonemeVocabulary:
    """Bijection between phoneme symbols and contiguous integer ids."""

    symbols: tuple[str, ...]
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = {symbol: i for i, symbol in enumerate(self.symbols)}
        if len(ids) != len(self.symbols):
            raise TextError("vocabulary contains duplicate symbols")
        if not self.symbols or self.symbols[0] != PAD:
            raise TextError("vocabulary must place PAD at id 0")
        object.__setattr__(self, "_ids", ids)

    @classmethod
    def default(cls) -> "PhonemeVocabulary":
        return cls(SPECIALS + ARPABET)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise TextError(f"unknown phoneme: {symbol}") from None

    def symbol_of(self, phoneme_id: int) -> str:
        if not 0 <= phoneme_id < len(self.symbols):
            raise TextError(f"unknown phoneme id: {phoneme_id}")
        return self.symbols[phoneme_id]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PhonemeVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        symbols = tuple(line.strip() for line in lines if line.strip())
        if not symbols:
            raise TextError(f"vocabulary file {path} is empty")
        return cls(symbols)


@dataclass(frozen=True)
class PhonemeSequence:
    """Integer phoneme ids plus the text they came from (metadata only)."""

    ids: tuple[int, ...]
    source_text: str = ""

    def __post_init__(self):
        if len(self.ids) < 1:
            raise TextError("phoneme sequence must contain at least one id")

    def __len__(self) -> int:
        return len(self.ids)


def _check_interior_pad(ids: tuple[int, ...]) -> None:
    # Trailing PAD is batching padding; PAD anywhere else is malformed.
    interior = ids
    while interior and interior[-1] == 0:
        interior = interior[:-1]
    if 0 in interior:
        raise TextError("PAD may only appear as trailing padding")


def encode(symbols, vocab: PhonemeVocabulary) -> PhonemeSequence:
    ids = tuple(vocab.id_of(symbol) for symbol in symbols)
    if not ids:
        raise TextError("cannot encode an empty symbol list")
    _check_interior_pad(ids)
    return PhonemeSequence(ids=ids)


def decode(sequence, vocab: PhonemeVocabulary) -> list[str]:
    ids = sequence.ids if isinstance(sequence, PhonemeSequence) else tuple(sequence)
    return [vocab.symbol_of(int(i)) for i in ids]


def load_dictionary(path) -> dict[str, tuple[str, ...]]:
    """Pronouncing dictionary: one `WORD PH1 PH2 ...` entry per line.

    Repeated headwords keep their first listed pronunciation.
    """
    table: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise TextError(f"{path}:{lineno}: entry needs a word and at least one phoneme")
        word, phones = parts[0], tuple(parts[1:])
        table.setdefault(word, phones)
    return table


def default_dictionary() -> dict[str, tuple[str, ...]]:
    with resources.as_file(resources.files("visotts.data") / "pronunciations.txt") as path:
        return load_dictionary(path)


def normalize_text(text: str) -> str:
    return " ".join(_WORD_RE.findall(text.lower()))


def g2p(
    text: str,
    dictionary: dict[str, tuple[str, ...]] | None = None,
    vocab: PhonemeVocabulary | None = None,
) -> PhonemeSequence:
    """Text to phoneme ids: dictionary lookup, letter-name fallback, SIL at
    word boundaries (no leading/trailing SIL)."""
    if dictionary is None:
        dictionary = default_dictionary()
    if vocab is None:
        vocab = PhonemeVocabulary.default()

    normalized = normalize_text(text)
    if not normalized:
        raise TextError("empty text")

    words = normalized.split()
    symbols: list[str] = []
    for i, word in enumerate(words):
        if i > 0:
            symbols.append(SIL)
        phones = dictionary.get(word.upper())
        if phones is None:
            phones = tuple(p for ch in word for p in CHARACTER_NAMES.get(ch, ()))
        if not phones:
            raise TextError(f"no pronunciation derivable for word: {word!r}")
        symbols.extend(phones)

    ids = tuple(vocab.id_of(s) for s in symbols)
    return PhonemeSequence(ids=ids, source_text=text)
