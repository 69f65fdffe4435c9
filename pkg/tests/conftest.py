import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from polycap.corpus import CaptionManifest, CorpusIndex
from polycap.model import ModelConfig, MultilingualModel
from polycap.text import SPECIAL_TOKENS, Language, Vocabulary, build_vocabulary, tokenize


def word_vocab(words: list[str]) -> Vocabulary:
    return Vocabulary.from_tokens([*SPECIAL_TOKENS, *words])


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        d_in=6,
        d_model=8,
        n_layers=1,
        n_heads=2,
        d_ff=16,
        trunk_dropout=0.0,
        frontend_dropout=0.0,
        max_len=10,
    )
    base.update(overrides)
    return ModelConfig(**base)


def synthetic_caption(lang: Language, i: int) -> str:
    """Four distinct tokens, one unique marker per item, vocab <= 20 with specials."""
    fills = [f"{lang.value}f{j}" for j in range(6)]
    return " ".join([f"{lang.value}m{i}", fills[i % 6], fills[(i + 2) % 6], fills[(i + 4) % 6]])


def synthetic_corpus(
    languages: list[Language],
    n_items: int = 10,
    n_frames: int = 8,
    d_in: int = 16,
    seed: int = 42,
    split: str = "train",
) -> tuple[CorpusIndex, dict[Language, Vocabulary]]:
    rng = np.random.default_rng(seed)
    entries = {}
    embeddings = {}
    for i in range(n_items):
        audio_id = f"clip{i:02d}"
        embeddings[audio_id] = rng.normal(size=(n_frames, d_in))
        entries[audio_id] = {lang: (synthetic_caption(lang, i),) for lang in languages}
    index = CorpusIndex(
        manifest=CaptionManifest(split=split, entries=entries),
        embeddings=embeddings,
        languages=tuple(languages),
    )
    vocabs = {
        lang: build_vocabulary([tokenize(synthetic_caption(lang, i)) for i in range(n_items)])
        for lang in languages
    }
    return index, vocabs


@pytest.fixture
def en_vocab() -> Vocabulary:
    return word_vocab([f"w{i}" for i in range(7)])  # size 11


@pytest.fixture
def tiny_model(en_vocab) -> MultilingualModel:
    return MultilingualModel(tiny_model_config(), {Language.EN: en_vocab}, seed=3)
