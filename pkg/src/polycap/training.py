"""Training recipe: smoothed cross-entropy, mixup, embedding-sequence masking,
cosine learning-rate decay, AdamW with decoupled weight decay, and the
mono/multilingual epoch loops.

A multilingual epoch visits every (audio, language) pair exactly once, so one
epoch touches each audio file once per registered language. All randomness
flows from per-purpose streams spawned deterministically from one seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from polycap import autodiff as ad
from polycap.autodiff import Tensor
from polycap.corpus import CorpusIndex, sample_caption
from polycap.errors import ValidationError
from polycap.model import MixupDraw, MultilingualModel
from polycap.text import Language, tokenize


@dataclass(frozen=True)
class SpecAugmentConfig:
    """Masking over the embedding sequence: time-frame spans and channel bands.

    Widths are drawn uniformly from {0, ..., max_width}; start positions
    uniformly over valid placements. Widths are clamped to each item's extent.
    """

    n_time_masks: int = 2
    max_time_width: int = 6
    n_channel_masks: int = 2
    max_channel_width: int = 96

    def enabled(self) -> bool:
        return (self.n_time_masks > 0 and self.max_time_width > 0) or (
            self.n_channel_masks > 0 and self.max_channel_width > 0
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 5e-4
    weight_decay: float = 2.0
    label_smoothing_eps: float = 0.1
    mixup_alpha: float = 0.4
    mixup_lambda: float | None = None  # fixed lambda override, mainly for tests
    specaug: SpecAugmentConfig | None = SpecAugmentConfig()
    batch_size: int = 32
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_caption_mode: str = "first"  # "first" or "sample"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValidationError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            raise ValidationError(f"label_smoothing_eps={self.label_smoothing_eps} outside [0, 1)")
        if self.mixup_alpha < 0:
            raise ValidationError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.val_caption_mode not in ("first", "sample"):
            raise ValidationError(f"bad val_caption_mode {self.val_caption_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        try:
            if "specaug" in d and d["specaug"] is not None:
                d["specaug"] = SpecAugmentConfig(**d["specaug"])
            if "adam_betas" in d:
                d["adam_betas"] = tuple(d["adam_betas"])
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad training config: {exc}") from exc


# -- loss ----------------------------------------------------------------


def smoothed_cross_entropy(
    logits: Tensor, target_ids: np.ndarray, eps: float, pad_id: int
) -> Tensor:
    """Mean cross-entropy against eps-smoothed one-hot targets.

    The true class gets 1-eps, the remaining eps is spread over the other
    vocab entries. Pad positions contribute nothing; the mean runs over
    non-pad positions only.
    """
    if not 0.0 <= eps < 1.0:
        raise ValidationError(f"eps={eps} outside [0, 1)")
    target_ids = np.asarray(target_ids)
    mask = (target_ids != pad_id).astype(np.float64)
    n_valid = mask.sum()
    if n_valid == 0:
        raise ValidationError("all-pad batch: no target positions to score")
    vocab = logits.shape[-1]
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.gather_last(logp, np.where(target_ids == pad_id, 0, target_ids))
    if eps == 0.0:
        per_pos = -picked
    else:
        off = eps / (vocab - 1)
        per_pos = -(picked * (1.0 - eps - off) + logp.sum(axis=-1) * off)
    return (per_pos * Tensor(mask)).sum() / n_valid


def mixup_embeddings(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam*a + (1-lam)*b of two same-shape embedding batches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"mixup shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixup lambda {lam} outside [0, 1]")
    return lam * a + (1.0 - lam) * b


def draw_mixup(
    batch_size: int, alpha: float, rng: np.random.Generator, fixed_lambda: float | None = None
) -> MixupDraw:
    """Sample a batch mixup draw: lambda ~ Beta(alpha, alpha) plus a partner permutation."""
    partner = rng.permutation(batch_size)
    if fixed_lambda is not None:
        lam = float(fixed_lambda)
    else:
        lam = float(rng.beta(alpha, alpha))
    return MixupDraw(lam=lam, partner=partner)


# -- embedding-sequence masking ------------------------------------------


def spec_mask(
    batch: np.ndarray,
    frame_counts: np.ndarray,
    cfg: SpecAugmentConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero random time-frame spans and channel bands, per item.

    batch: (B, S, D) zero-padded embedding sequences; frame_counts gives each
    item's true frame count. Draw order per item is fixed: time masks first,
    then channel masks, each as (width, start).
    """
    out = np.array(batch, dtype=np.float64, copy=True)
    n_channels = out.shape[2]
    for i in range(out.shape[0]):
        frames = int(frame_counts[i])
        for _ in range(cfg.n_time_masks):
            w = int(rng.integers(0, min(cfg.max_time_width, frames) + 1))
            t0 = int(rng.integers(0, frames - w + 1))
            out[i, t0 : t0 + w, :] = 0.0
        for _ in range(cfg.n_channel_masks):
            w = int(rng.integers(0, min(cfg.max_channel_width, n_channels) + 1))
            c0 = int(rng.integers(0, n_channels - w + 1))
            out[i, :, c0 : c0 + w] = 0.0
    return out


# -- schedule and optimizer ------------------------------------------------


def cosine_lr(epoch: int, epochs: int, lr0: float) -> float:
    """Cosine decay from lr0 at epoch 0 to zero at the final epoch."""
    if not 0 <= epoch <= epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {epochs}]")
    return lr0 * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


class AdamW:
    """AdamW with decoupled weight decay and per-parameter step counts.

    Decay applies only to names in the decay set, directly to the weights
    (not through the gradient), so zero-gradient parameters still shrink.
    Heads that sit out a step keep their moments and step counts untouched.
    """

    def __init__(self, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(
        self,
        named_params: Mapping[str, Tensor],
        lr: float,
        weight_decay: float,
        decay_names: frozenset[str],
    ) -> None:
        for name, p in named_params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st = self.state.setdefault(
                name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            )
            st["t"] += 1
            st["m"] = self.b1 * st["m"] + (1.0 - self.b1) * g
            st["v"] = self.b2 * st["v"] + (1.0 - self.b2) * g * g
            m_hat = st["m"] / (1.0 - self.b1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.b2 ** st["t"])
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if name in decay_names and weight_decay > 0.0:
                p.data = p.data - lr * weight_decay * p.data


def zero_grads(named_params: Mapping[str, Tensor]) -> None:
    for p in named_params.values():
        p.grad = None


# -- batching ---------------------------------------------------------------


def _pad_audio(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack variable-length embedding sequences with zero padding."""
    frames = np.array([a.shape[0] for a in arrays])
    dim = arrays[0].shape[1]
    out = np.zeros((len(arrays), int(frames.max()), dim), dtype=np.float64)
    mask = np.zeros((len(arrays), int(frames.max())), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return out, mask, frames


def _pad_ids(seqs: Sequence[list[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float | None
    n_examples: int
    n_updates: int
    seconds: float
    per_language: dict[str, int] = field(default_factory=dict)
    visited_pairs: list[tuple[str, str]] = field(default_factory=list, repr=False)

    def to_log_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "seconds": self.seconds,
        }


class Trainer:
    """Drives epochs over a corpus index; owns optimizer and RNG streams.

    Streams are spawned from the config seed in a fixed order (captions,
    batch order, mixup, masking, dropout), so disabling one augmentation
    never perturbs the draws of another.
    """

    def __init__(
        self,
        model: MultilingualModel,
        train_corpus: CorpusIndex,
        cfg: TrainConfig,
        val_corpus: CorpusIndex | None = None,
    ):
        for corpus in (train_corpus, val_corpus):
            if corpus is None:
                continue
            missing = [l.value for l in corpus.languages if l not in model.heads]
            if missing:
                raise ValidationError(f"corpus languages without model heads: {missing}")
        self.model = model
        self.corpus = train_corpus
        self.val_corpus = val_corpus
        self.cfg = cfg
        self.optimizer = AdamW(betas=cfg.adam_betas, eps=cfg.adam_eps)
        self.decay_names = model.decay_parameter_names()
        seqs = np.random.SeedSequence(cfg.seed).spawn(5)
        self.rng_captions = np.random.default_rng(seqs[0])
        self.rng_order = np.random.default_rng(seqs[1])
        self.rng_mixup = np.random.default_rng(seqs[2])
        self.rng_specaug = np.random.default_rng(seqs[3])
        self.rng_dropout = np.random.default_rng(seqs[4])

    # -- batch assembly --

    def _encode_captions(self, captions: Sequence[str], language: Language) -> np.ndarray:
        vocab = self.model.vocab(language)
        max_words = self.model.config.max_len - 1
        ids = [vocab.encode(tokenize(c)[:max_words]) for c in captions]
        return _pad_ids(ids, vocab.pad_id)

    def _make_batches(self, epoch_corpus: CorpusIndex) -> list[tuple[Language, list[str]]]:
        """Language-homogeneous batches covering every (audio, language) pair once."""
        batches: list[tuple[Language, list[str]]] = []
        for lang in epoch_corpus.languages:
            ids = list(epoch_corpus.audio_ids)
            order = self.rng_order.permutation(len(ids))
            shuffled = [ids[i] for i in order]
            for i in range(0, len(shuffled), self.cfg.batch_size):
                batches.append((lang, shuffled[i : i + self.cfg.batch_size]))
        batch_order = self.rng_order.permutation(len(batches))
        return [batches[i] for i in batch_order]

    def _train_batch(self, language: Language, audio_ids: list[str], lr: float) -> float:
        cfg = self.cfg
        corpus = self.corpus
        captions = [
            sample_caption(corpus.manifest.record(a, language), self.rng_captions)
            for a in audio_ids
        ]
        ids = self._encode_captions(captions, language)
        audio, frame_mask, frame_counts = _pad_audio([corpus.embeddings[a] for a in audio_ids])
        if cfg.specaug is not None and cfg.specaug.enabled():
            audio = spec_mask(audio, frame_counts, cfg.specaug, self.rng_specaug)

        dec_in, targets = ids[:, :-1], ids[:, 1:]
        vocab = self.model.vocab(language)
        mixup = None
        if cfg.mixup_alpha > 0 or cfg.mixup_lambda is not None:
            mixup = draw_mixup(len(audio_ids), cfg.mixup_alpha, self.rng_mixup, cfg.mixup_lambda)

        logits = self.model.forward(
            audio,
            dec_in,
            language,
            mode="train",
            frame_mask=frame_mask,
            rng=self.rng_dropout,
            mixup=mixup,
        )
        eps = cfg.label_smoothing_eps
        if mixup is None or mixup.lam == 1.0:
            loss = smoothed_cross_entropy(logits, targets, eps, vocab.pad_id)
        else:
            loss_a = smoothed_cross_entropy(logits, targets, eps, vocab.pad_id)
            loss_b = smoothed_cross_entropy(logits, targets[mixup.partner], eps, vocab.pad_id)
            loss = loss_a * mixup.lam + loss_b * (1.0 - mixup.lam)

        params = self.model.named_parameters(language)
        zero_grads(params)
        loss.backward()
        self.optimizer.step(params, lr, cfg.weight_decay, self.decay_names)
        return loss.item()

    def run_epoch(self, epoch: int) -> EpochMetrics:
        """One multilingual epoch: each (audio, language) pair exactly once."""
        t0 = time.monotonic()
        lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.lr0)
        batches = self._make_batches(self.corpus)
        losses = []
        per_language: dict[str, int] = {}
        visited: list[tuple[str, str]] = []
        for language, audio_ids in batches:
            losses.append(self._train_batch(language, audio_ids, lr))
            per_language[language.value] = per_language.get(language.value, 0) + len(audio_ids)
            visited.extend((a, language.value) for a in audio_ids)
        val_loss = self.evaluate_loss(self.val_corpus) if self.val_corpus is not None else None
        return EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            n_examples=len(visited),
            n_updates=len(batches),
            seconds=time.monotonic() - t0,
            per_language=per_language,
            visited_pairs=visited,
        )

    def evaluate_loss(self, corpus: CorpusIndex) -> float:
        """Mean eval-mode loss over a corpus (no updates, no augmentation)."""
        losses = []
        rng_val = np.random.default_rng(self.cfg.seed)  # only used in "sample" mode
        for language in corpus.languages:
            vocab = self.model.vocab(language)
            ids_all = list(corpus.audio_ids)
            for i in range(0, len(ids_all), self.cfg.batch_size):
                chunk = ids_all[i : i + self.cfg.batch_size]
                caps = []
                for a in chunk:
                    record = corpus.manifest.record(a, language)
                    if self.cfg.val_caption_mode == "sample":
                        caps.append(sample_caption(record, rng_val))
                    else:
                        caps.append(record.captions[0])
                ids = self._encode_captions(caps, language)
                audio, frame_mask, _ = _pad_audio([corpus.embeddings[a] for a in chunk])
                with ad.no_grad():
                    logits = self.model.forward(
                        audio, ids[:, :-1], language, mode="eval", frame_mask=frame_mask
                    )
                    loss = smoothed_cross_entropy(
                        logits, ids[:, 1:], self.cfg.label_smoothing_eps, vocab.pad_id
                    )
                losses.append(loss.item())
        return float(np.mean(losses))

    def fit(self, metrics_path: str | Path | None = None) -> list[EpochMetrics]:
        """Train for cfg.epochs epochs, optionally appending a JSONL metrics log."""
        history = []
        sink = Path(metrics_path).open("w", encoding="utf-8") if metrics_path else None
        try:
            for epoch in range(self.cfg.epochs):
                metrics = self.run_epoch(epoch)
                history.append(metrics)
                if sink is not None:
                    sink.write(json.dumps(metrics.to_log_dict(), sort_keys=True) + "\n")
                    sink.flush()
        finally:
            if sink is not None:
                sink.close()
        return history
