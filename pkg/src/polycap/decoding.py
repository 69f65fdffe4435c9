"""Constrained beam search: no word is emitted twice unless it is a stopword.

The search is layer-synchronous. At every expansion, any word already present
in a hypothesis scores -inf unless it is a stopword; BOS/PAD/UNK are never
candidates; EOS is always available and terminates a hypothesis. Hypotheses
that reach the word budget may only take EOS (scored normally). Finished
hypotheses go to a pool that never competes for beam slots, and the best one
under length normalization wins. Ties break on lexicographic token ids.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from polycap import autodiff as ad
from polycap.errors import ValidationError
from polycap.model import MultilingualModel
from polycap.text import Language, StopwordList, Vocabulary

# step function: (k, t) int prefix matrix -> (k, vocab) log-probability rows
StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    max_len: int = 20
    length_norm: float = 1.0  # 1.0 = mean log-probability

    def __post_init__(self):
        if self.beam_size < 1 or self.max_len < 1:
            raise ValidationError("beam_size and max_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BeamHypothesis:
    ids: tuple[int, ...]
    log_prob: float
    finished: bool = False

    def normalized_score(self, exponent: float) -> float:
        steps = len(self.ids) - 1  # emitted tokens, EOS included, BOS not
        return self.log_prob / (steps**exponent)


@dataclass(frozen=True)
class DecodeResult:
    tokens: list[str]
    token_ids: tuple[int, ...]
    log_prob: float
    normalized_score: float


def _allowed_scores(
    hyp: BeamHypothesis,
    row: np.ndarray,
    vocab: Vocabulary,
    stopwords: frozenset[str],
    max_len: int,
) -> dict[int, float]:
    """Candidate token -> step log-prob for one hypothesis."""
    words_emitted = len(hyp.ids) - 1
    out = {vocab.eos_id: float(row[vocab.eos_id])}
    if words_emitted >= max_len:
        return out
    used = {vocab.tokens[i] for i in hyp.ids[1:]}
    for tok_id in vocab.word_ids:
        surface = vocab.tokens[tok_id]
        if surface in used and surface not in stopwords:
            continue
        out[tok_id] = float(row[tok_id])
    return out


def beam_search(
    step_fn: StepFn,
    vocab: Vocabulary,
    stopwords: StopwordList | frozenset[str] | None,
    cfg: DecodeConfig,
) -> DecodeResult:
    """Best finished hypothesis under the no-repeat constraint.

    step_fn maps a (k, t) matrix of BOS-prefixed id rows to (k, vocab)
    log-probability rows for the next token.
    """
    return beam_search_nbest(step_fn, vocab, stopwords, cfg, n=1)[0]


def beam_search_nbest(
    step_fn: StepFn,
    vocab: Vocabulary,
    stopwords: StopwordList | frozenset[str] | None,
    cfg: DecodeConfig,
    n: int = 1,
) -> list[DecodeResult]:
    """Top-n finished hypotheses by normalized score (n=1 is the main surface)."""
    stop_set = frozenset() if stopwords is None else frozenset(getattr(stopwords, "words", stopwords))
    active = [BeamHypothesis(ids=(vocab.bos_id,), log_prob=0.0)]
    finished: list[BeamHypothesis] = []
    # every round appends one token; +1 round lets max_len-word hyps take EOS
    for _ in range(cfg.max_len + 1):
        if not active:
            break
        rows = step_fn(np.array([h.ids for h in active], dtype=np.int64))
        candidates: list[BeamHypothesis] = []
        for hyp, row in zip(active, rows):
            for tok_id, logp in _allowed_scores(hyp, row, vocab, stop_set, cfg.max_len).items():
                new = BeamHypothesis(
                    ids=hyp.ids + (tok_id,),
                    log_prob=hyp.log_prob + logp,
                    finished=tok_id == vocab.eos_id,
                )
                if new.finished:
                    finished.append(new)
                else:
                    candidates.append(new)
        candidates.sort(key=lambda h: (-h.log_prob, h.ids))
        active = candidates[: cfg.beam_size]
    ranked = sorted(finished, key=lambda h: (-h.normalized_score(cfg.length_norm), h.ids))
    return [
        DecodeResult(
            tokens=vocab.decode(h.ids),
            token_ids=h.ids,
            log_prob=h.log_prob,
            normalized_score=h.normalized_score(cfg.length_norm),
        )
        for h in ranked[: max(1, n)]
    ]


def model_step_fn(
    model: MultilingualModel, audio: np.ndarray, language: Language
) -> StepFn:
    """Adapt a model + one audio sequence into a beam-search step function."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 2:
        raise ValidationError("model_step_fn expects a single (frames, dim) sequence")

    def step(prefixes: np.ndarray) -> np.ndarray:
        k = prefixes.shape[0]
        tiled = np.broadcast_to(audio, (k, *audio.shape))
        with ad.no_grad():
            logits = model.forward(tiled, prefixes, language, mode="eval")
        last = logits.data[:, -1, :]
        shifted = last - last.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    return step


def caption_audio(
    model: MultilingualModel,
    audio: np.ndarray,
    language: Language,
    cfg: DecodeConfig,
    stopwords: StopwordList | frozenset[str] | None,
) -> DecodeResult:
    """Decode one caption for one (audio, language) pair."""
    vocab = model.vocab(language)
    effective = cfg
    if cfg.max_len > model.config.max_len - 1:
        # the model scores at most max_len positions (BOS included)
        effective = DecodeConfig(
            beam_size=cfg.beam_size,
            max_len=model.config.max_len - 1,
            length_norm=cfg.length_norm,
        )
    return beam_search(model_step_fn(model, audio, language), vocab, stopwords, effective)
