"""Embedding-file and caption-manifest ingestion.

Two external formats live here:

* AEMB embedding files: magic ``AEMB``, u32 version=1, u32 dim, u32 frames,
  then frames*dim little-endian float32 values, row-major by frame.
* Caption manifests: JSON Lines, one object per audio,
  ``{"audio_id": ..., "split": ..., "captions": {"en": [...], ...}}``.

Loading is read-only; manifests are immutable after load; all randomness is
driven by caller-owned numpy Generators.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from polycap.errors import ValidationError
from polycap.text import Language, tokenize

AEMB_MAGIC = b"AEMB"
AEMB_VERSION = 1
PRODUCTION_EMBED_DIM = 768  # channel count emitted by the production audio encoder

SPLITS = ("train", "val", "test")


class EmbeddingFormatError(ValidationError):
    """Base for malformed AEMB files."""


class BadMagicError(EmbeddingFormatError):
    pass


class UnsupportedVersionError(EmbeddingFormatError):
    pass


class BadHeaderError(EmbeddingFormatError):
    pass


class PayloadMismatchError(EmbeddingFormatError):
    pass


class NonFiniteDataError(EmbeddingFormatError):
    pass


@dataclass(frozen=True)
class EmbeddingSequence:
    """A precomputed audio-embedding matrix, frames x dim, float32."""

    audio_id: str
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValidationError(f"{self.audio_id}: embedding data must be 2-D")
        if self.frames < 1 or self.dim < 1:
            raise ValidationError(f"{self.audio_id}: empty embedding matrix")
        if not np.isfinite(self.data).all():
            raise NonFiniteDataError(f"{self.audio_id}: embedding contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_embedding(path: str | Path, seq: EmbeddingSequence) -> None:
    """Serialize an embedding sequence to the AEMB binary format."""
    data = np.ascontiguousarray(seq.data, dtype="<f4")
    header = AEMB_MAGIC + struct.pack("<III", AEMB_VERSION, seq.dim, seq.frames)
    Path(path).write_bytes(header + data.tobytes())


def load_embedding(path: str | Path, audio_id: str | None = None) -> EmbeddingSequence:
    """Parse an AEMB file bit-exactly, validating header and payload."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise BadHeaderError(f"{path}: file shorter than the 16-byte AEMB header")
    if raw[:4] != AEMB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {AEMB_MAGIC!r}")
    version, dim, frames = struct.unpack("<III", raw[4:16])
    if version != AEMB_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if dim < 1 or frames < 1:
        raise BadHeaderError(f"{path}: invalid shape {frames}x{dim} in header")
    expected = 4 * dim * frames
    payload = raw[16:]
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"{path}: payload length mismatch, header implies {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, dim)
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"{path}: embedding contains non-finite values")
    return EmbeddingSequence(audio_id=audio_id or path.stem, data=data)


@dataclass(frozen=True)
class CaptionRecord:
    """Captions for one (audio, language) pair."""

    audio_id: str
    language: Language
    captions: tuple[str, ...]

    def __post_init__(self):
        if not self.captions:
            raise ValidationError(f"{self.audio_id}/{self.language.value}: empty caption list")


def sample_caption(record: CaptionRecord, rng: np.random.Generator) -> str:
    """Draw one caption uniformly at random from the record."""
    if len(record.captions) == 1:
        return record.captions[0]
    return record.captions[int(rng.integers(len(record.captions)))]


@dataclass(frozen=True)
class CaptionManifest:
    """All caption records of one split, grouped by audio id."""

    split: str
    entries: dict[str, dict[Language, tuple[str, ...]]] = field(repr=False)

    @property
    def audio_ids(self) -> tuple[str, ...]:
        return tuple(self.entries.keys())

    def languages(self) -> set[Language]:
        found: set[Language] = set()
        for caps in self.entries.values():
            found.update(caps.keys())
        return found

    def records(self, language: Language) -> Iterator[CaptionRecord]:
        for audio_id, caps in self.entries.items():
            if language in caps:
                yield CaptionRecord(audio_id, language, caps[language])

    def record(self, audio_id: str, language: Language) -> CaptionRecord:
        try:
            return CaptionRecord(audio_id, language, self.entries[audio_id][language])
        except KeyError:
            raise ValidationError(
                f"no captions for audio {audio_id!r} in language {language.value!r} (split {self.split})"
            ) from None


def load_manifests(path: str | Path) -> dict[str, CaptionManifest]:
    """Read a JSON-Lines manifest into per-split manifests.

    Fails fast on duplicate audio ids within a split, unknown languages,
    unknown splits and empty caption lists.
    """
    path = Path(path)
    per_split: dict[str, dict[str, dict[Language, tuple[str, ...]]]] = {}
    problems: list[str] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        audio_id = obj.get("audio_id")
        split = obj.get("split")
        captions = obj.get("captions")
        if not isinstance(audio_id, str) or not audio_id:
            problems.append(f"line {lineno}: missing audio_id")
            continue
        if split not in SPLITS:
            problems.append(f"line {lineno}: unknown split {split!r}")
            continue
        if not isinstance(captions, dict) or not captions:
            problems.append(f"line {lineno}: captions must be a non-empty object")
            continue
        entry: dict[Language, tuple[str, ...]] = {}
        for code, caps in captions.items():
            try:
                lang = Language.parse(code)
            except ValidationError:
                problems.append(f"line {lineno}: unknown language {code!r}")
                continue
            if not isinstance(caps, list) or not caps or not all(isinstance(c, str) and c for c in caps):
                problems.append(f"line {lineno}: captions[{code}] must be a non-empty list of strings")
                continue
            entry[lang] = tuple(caps)
        bucket = per_split.setdefault(split, {})
        if audio_id in bucket:
            problems.append(f"line {lineno}: duplicate audio_id {audio_id!r} in split {split!r}")
            continue
        if entry:
            bucket[audio_id] = entry
    if problems:
        raise ValidationError(f"manifest {path} failed validation", items=problems)
    return {split: CaptionManifest(split=split, entries=entries) for split, entries in per_split.items()}


@dataclass(frozen=True)
class CorpusStats:
    """Table-1 style statistics for one (language, split) pair."""

    language: Language
    split: str
    avg_sentence_length: float
    word_types: int
    n_captions: int


def compute_stats(
    manifests: Mapping[str, CaptionManifest], language: Language, split: str
) -> CorpusStats:
    """Average caption length in tokens and unique-token count for a pair."""
    if split not in manifests:
        raise ValidationError(f"split {split!r} not present in manifest")
    manifest = manifests[split]
    lengths: list[int] = []
    types: set[str] = set()
    for record in manifest.records(language):
        for caption in record.captions:
            toks = tokenize(caption)
            lengths.append(len(toks))
            types.update(toks)
    avg = float(np.mean(lengths)) if lengths else 0.0
    return CorpusStats(
        language=language,
        split=split,
        avg_sentence_length=avg,
        word_types=len(types),
        n_captions=len(lengths),
    )


@dataclass(frozen=True)
class CorpusIndex:
    """A validated split: manifest entries plus in-memory embeddings.

    Construction rejects, with an itemized report, any audio missing an
    embedding or missing captions in a declared language.
    """

    manifest: CaptionManifest
    embeddings: dict[str, np.ndarray] = field(repr=False)
    languages: tuple[Language, ...]

    def __post_init__(self):
        problems: list[str] = []
        if not self.languages:
            raise ValidationError("a corpus index needs at least one declared language")
        dims = set()
        for audio_id, caps in self.manifest.entries.items():
            if audio_id not in self.embeddings:
                problems.append(f"{audio_id}: no embedding")
            else:
                dims.add(self.embeddings[audio_id].shape[1])
            for lang in self.languages:
                if lang not in caps:
                    problems.append(f"{audio_id}: no {lang.value} captions")
        if len(dims) > 1:
            problems.append(f"inconsistent embedding dims: {sorted(dims)}")
        if problems:
            raise ValidationError(
                f"corpus validation failed for split {self.manifest.split!r}", items=problems
            )

    @property
    def audio_ids(self) -> tuple[str, ...]:
        return self.manifest.audio_ids

    @property
    def embed_dim(self) -> int:
        first = next(iter(self.embeddings.values()))
        return first.shape[1]

    def __len__(self) -> int:
        return len(self.manifest.entries)

    @classmethod
    def from_paths(
        cls,
        manifest_path: str | Path,
        embeddings_dir: str | Path,
        split: str,
        languages: Sequence[Language],
    ) -> "CorpusIndex":
        manifests = load_manifests(manifest_path)
        if split not in manifests:
            raise ValidationError(f"split {split!r} not present in {manifest_path}")
        manifest = manifests[split]
        embeddings_dir = Path(embeddings_dir)
        embeddings: dict[str, np.ndarray] = {}
        problems: list[str] = []
        for audio_id in manifest.audio_ids:
            path = embeddings_dir / f"{audio_id}.aemb"
            if not path.is_file():
                problems.append(f"{audio_id}: missing embedding file {path.name}")
                continue
            try:
                embeddings[audio_id] = load_embedding(path, audio_id).data
            except EmbeddingFormatError as exc:
                problems.append(f"{audio_id}: {exc.message}")
        if problems:
            raise ValidationError(
                f"corpus validation failed for split {split!r}", items=problems
            )
        return cls(manifest=manifest, embeddings=embeddings, languages=tuple(languages))
