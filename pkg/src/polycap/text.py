"""Language registry, tokenization, vocabularies and stopword lists.

All four target languages share one tokenizer: lowercase, Unicode-aware,
punctuation stripped except intra-word hyphens, apostrophes split (so French
elisions like "l'eau" become two tokens). Vocabularies are word-level with
four special tokens pinned to ids 0..3.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from polycap.errors import ValidationError

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


class Language(str, Enum):
    """The four supported caption languages, in stable head-index order."""

    EN = "en"
    FR = "fr"
    ES = "es"
    DE = "de"

    @property
    def ordinal(self) -> int:
        return _LANGUAGE_ORDER.index(self)

    @classmethod
    def parse(cls, code: str) -> "Language":
        try:
            return cls(code.strip().lower())
        except ValueError:
            known = ", ".join(lang.value for lang in cls)
            raise ValidationError(f"unknown language code {code!r} (known: {known})") from None


_LANGUAGE_ORDER = tuple(Language)

# Word tokens: runs of word characters, optionally joined by internal hyphens.
_TOKEN_RE = re.compile(r"\w+(?:-\w+)*", re.UNICODE)
_APOSTROPHES = "'’ʼ"


def tokenize(text: str) -> list[str]:
    """Split text into lowercase word tokens.

    Punctuation is stripped, apostrophes split the word and empty pieces are
    dropped, intra-word hyphens are kept. Empty input gives an empty list.
    """
    lowered = text.lower()
    for ch in _APOSTROPHES:
        if ch in lowered:
            lowered = lowered.replace(ch, " ")
    return _TOKEN_RE.findall(lowered)


@dataclass(frozen=True)
class Vocabulary:
    """Dense token <-> id map with specials pinned at ids 0..3."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValidationError("vocabulary must start with PAD/BOS/EOS/UNK specials")
        if len(self.index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.bos_id, self.eos_id, self.unk_id))

    @property
    def word_ids(self) -> range:
        """Ids of ordinary word tokens (everything past the specials)."""
        return range(4, len(self.tokens))

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        toks = tuple(tokens)
        return cls(tokens=toks, index={t: i for i, t in enumerate(toks)})

    def encode(self, caption: Sequence[str]) -> list[int]:
        """Map tokens to ids, wrap with BOS..EOS; unknown tokens become UNK."""
        ids = [self.index.get(tok, self.unk_id) for tok in caption]
        return [self.bos_id, *ids, self.eos_id]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Inverse of encode for in-vocabulary tokens; specials are stripped."""
        specials = self.special_ids
        return [self.tokens[i] for i in ids if i not in specials]

    def to_json(self) -> str:
        doc = {
            "tokens": list(self.tokens),
            "specials": {"pad": self.pad_id, "bos": self.bos_id, "eos": self.eos_id, "unk": self.unk_id},
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            doc = json.loads(text)
            tokens = doc["tokens"]
            specials = doc["specials"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"malformed vocabulary JSON: {exc}") from exc
        expected = {"pad": 0, "bos": 1, "eos": 2, "unk": 3}
        if specials != expected:
            raise ValidationError(f"vocabulary specials must be {expected}, got {specials}")
        return cls.from_tokens(tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from tokenized captions.

    Keeps every token with corpus frequency >= min_count, ordered by frequency
    descending then lexicographically, after the four specials. Deterministic
    for a given (corpus, min_count).
    """
    if min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    for caption in corpus:
        counts.update(caption)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary.from_tokens([*SPECIAL_TOKENS, *kept])


@dataclass(frozen=True)
class StopwordList:
    """Per-language set of lowercase stopwords, exempt from the no-repeat rule."""

    language: Language
    words: frozenset[str]

    def __post_init__(self):
        if not self.words:
            raise ValidationError(f"stopword list for {self.language.value} is empty")
        bad = [w for w in self.words if w != w.lower()]
        if bad:
            raise ValidationError(f"stopwords must be lowercase: {bad[:5]}")

    def __contains__(self, word: str) -> bool:
        return word in self.words


def load_stopwords(language: Language) -> StopwordList:
    """Load the packaged stopword list for one language (one word per line)."""
    ref = resources.files("polycap").joinpath(f"data/stopwords/{language.value}.txt")
    words = frozenset(
        line.strip() for line in ref.read_text(encoding="utf-8").splitlines() if line.strip()
    )
    return StopwordList(language=language, words=words)
