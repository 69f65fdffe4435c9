"""Caption decoder: projection front-end, transformer trunk, language heads.

The trunk (front-end projection plus decoder stack) is shared by all
languages; each language owns an embedding matrix and an output classifier
sized to its vocabulary. A monolingual model is the one-head special case.

Width defaults to 256: the reported per-language classifier sizes divide by
the vocabulary sizes to ~257 = width + bias, so 256 is the implied width.
It stays configurable.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from polycap import autodiff as ad
from polycap.autodiff import Tensor
from polycap.errors import ValidationError
from polycap.text import Language, Vocabulary

FROZEN_ENCODER_PARAMS = 28_000_000  # reporting constant; the audio encoder is external
NEG_INF = -1e9

CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1


class UnknownLanguageError(ValidationError):
    pass


class SequenceTooLongError(ValidationError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 768
    d_model: int = 256
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 2048
    trunk_dropout: float = 0.2
    frontend_dropout: float = 0.5
    max_len: int = 40

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValidationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("trunk_dropout", "frontend_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValidationError(f"{name}={p} outside [0, 1)")
        if min(self.d_in, self.d_model, self.n_heads, self.d_ff, self.max_len) < 1 or self.n_layers < 0:
            raise ValidationError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise ValidationError(f"bad model config: {exc}") from exc


@dataclass
class MixupDraw:
    """One batch's mixup draw: interpolation weight and partner permutation."""

    lam: float
    partner: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"mixup lambda {self.lam} outside [0, 1]")


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = Tensor(_uniform_init(rng, (d_in, d_out), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def params(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ((var + self.eps) ** -0.5) * self.gain + self.bias

    def params(self) -> list[tuple[str, Tensor]]:
        return [("gain", self.gain), ("bias", self.bias)]


def _dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValidationError("training-mode forward with dropout needs an RNG")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


class MultiHeadAttention:
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, p_drop: float):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.p_drop = p_drop
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def __call__(
        self,
        query: Tensor,
        memory: Tensor,
        additive_mask: np.ndarray | None,
        train: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        b, t, d = query.shape
        s = memory.shape[1]

        def split(x: Tensor, length: int) -> Tensor:
            return x.reshape(b, length, self.n_heads, self.d_head).swapaxes(1, 2)

        q = split(self.wq(query), t)
        k = split(self.wk(memory), s)
        v = split(self.wv(memory), s)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_head))
        if additive_mask is not None:
            scores = scores + Tensor(additive_mask)
        attn = ad.softmax(scores, axis=-1)
        attn = _dropout(attn, self.p_drop, train, rng)
        ctx = (attn @ v).swapaxes(1, 2).reshape(b, t, d)
        return self.wo(ctx)

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend((f"{name}.{p}", t) for p, t in lin.params())
        return out


class DecoderLayer:
    """Post-norm decoder block: masked self-attention, cross-attention, GELU FF."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.d_model
        self.p_drop = cfg.trunk_dropout
        self.self_attn = MultiHeadAttention(rng, d, cfg.n_heads, cfg.trunk_dropout)
        self.cross_attn = MultiHeadAttention(rng, d, cfg.n_heads, cfg.trunk_dropout)
        self.w1 = Linear(rng, d, cfg.d_ff)
        self.w2 = Linear(rng, cfg.d_ff, d)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)

    def __call__(self, x, memory, causal_mask, memory_mask, train, rng):
        h = self.self_attn(x, x, causal_mask, train, rng)
        x = self.norm1(x + _dropout(h, self.p_drop, train, rng))
        h = self.cross_attn(x, memory, memory_mask, train, rng)
        x = self.norm2(x + _dropout(h, self.p_drop, train, rng))
        h = self.w2(_dropout(ad.gelu(self.w1(x)), self.p_drop, train, rng))
        return self.norm3(x + _dropout(h, self.p_drop, train, rng))

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, mod in (
            ("self_attn", self.self_attn),
            ("cross_attn", self.cross_attn),
            ("ff.w1", self.w1),
            ("ff.w2", self.w2),
            ("norm1", self.norm1),
            ("norm2", self.norm2),
            ("norm3", self.norm3),
        ):
            out.extend((f"{name}.{p}", t) for p, t in mod.params())
        return out


class LanguageHead:
    """Per-language token embedding and output classifier (untied)."""

    def __init__(self, rng: np.random.Generator, language: Language, vocab: Vocabulary, d_model: int):
        self.language = language
        self.vocab = vocab
        self.embedding = Tensor(
            _uniform_init(rng, (vocab.size, d_model), d_model), requires_grad=True
        )
        self.classifier = Linear(rng, d_model, vocab.size)

    def params(self) -> list[tuple[str, Tensor]]:
        return [
            ("embedding.weight", self.embedding),
            ("classifier.weight", self.classifier.weight),
            ("classifier.bias", self.classifier.bias),
        ]


def sinusoidal_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine table added to target-token embeddings."""
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table


class MultilingualModel:
    """Shared trunk plus one head per registered language."""

    def __init__(self, config: ModelConfig, vocabs: Mapping[Language, Vocabulary], seed: int = 0):
        if not vocabs:
            raise ValidationError("model needs at least one language head")
        self.config = config
        rng = np.random.default_rng(seed)
        self.frontend = Linear(rng, config.d_in, config.d_model)
        self.layers = [DecoderLayer(rng, config) for _ in range(config.n_layers)]
        # heads initialized in stable language order so seeds are reproducible
        self.heads: dict[Language, LanguageHead] = {}
        for lang in sorted(vocabs, key=lambda l: l.ordinal):
            self.heads[lang] = LanguageHead(rng, lang, vocabs[lang], config.d_model)
        self.pos_encoding = sinusoidal_encoding(config.max_len, config.d_model)

    @property
    def languages(self) -> tuple[Language, ...]:
        return tuple(self.heads.keys())

    def vocab(self, language: Language) -> Vocabulary:
        return self.head(language).vocab

    def head(self, language: Language) -> LanguageHead:
        try:
            return self.heads[language]
        except KeyError:
            raise UnknownLanguageError(
                f"no head registered for language {language.value!r}"
            ) from None

    # -- parameters ----------------------------------------------------

    def named_parameters(self, language: Language | None = None) -> dict[str, Tensor]:
        """Trunk parameters plus either one language's head or all heads."""
        out: dict[str, Tensor] = {}
        for name, t in self.frontend.params():
            out[f"frontend.{name}"] = t
        for i, layer in enumerate(self.layers):
            for name, t in layer.params():
                out[f"trunk.layers.{i}.{name}"] = t
        heads = [self.head(language)] if language is not None else list(self.heads.values())
        for head in heads:
            for name, t in head.params():
                out[f"heads.{head.language.value}.{name}"] = t
        return out

    def decay_parameter_names(self) -> frozenset[str]:
        """Weight matrices subject to decoupled weight decay.

        Biases, normalization gains and embeddings are excluded.
        """
        names = set()
        for name, t in self.named_parameters().items():
            if not name.endswith(".weight"):
                continue
            if ".embedding." in name:
                continue
            names.add(name)
        return frozenset(names)

    # -- forward -------------------------------------------------------

    def encode_audio(
        self,
        audio: np.ndarray,
        frame_mask: np.ndarray | None,
        train: bool,
        rng: np.random.Generator | None,
    ) -> Tensor:
        """Project raw audio embeddings through the dropout/dense/ReLU front-end."""
        x = Tensor(np.asarray(audio, dtype=np.float64))
        p = self.config.frontend_dropout
        x = _dropout(x, p, train, rng)
        x = ad.relu(self.frontend(x))
        x = _dropout(x, p, train, rng)
        return x

    def forward(
        self,
        audio: np.ndarray,
        target_ids: np.ndarray,
        language: Language,
        *,
        mode: str = "eval",
        frame_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        mixup: MixupDraw | None = None,
    ) -> Tensor:
        """Next-token logits, one row per target position.

        audio: (batch, frames, d_in) raw embedding sequences, zero-padded.
        target_ids: (batch, t) decoder input ids (BOS-first).
        frame_mask: (batch, frames) True on valid frames; None means all valid.
        mixup: optional batch interpolation of audio and token embeddings.
        Causal masking keeps position t blind to positions > t; dropout is
        active only in train mode.
        """
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        head = self.head(language)
        audio = np.asarray(audio, dtype=np.float64)
        target_ids = np.asarray(target_ids)
        b, t = target_ids.shape
        if t > self.config.max_len:
            raise SequenceTooLongError(
                f"target length {t} exceeds max_len {self.config.max_len}"
            )
        if mixup is not None:
            audio = mixup.lam * audio + (1.0 - mixup.lam) * audio[mixup.partner]
            if frame_mask is not None:
                # the partner's frames only become valid when it contributes
                if mixup.lam == 0.0:
                    frame_mask = frame_mask[mixup.partner]
                elif mixup.lam < 1.0:
                    frame_mask = frame_mask | frame_mask[mixup.partner]

        memory = self.encode_audio(audio, frame_mask, train, rng)

        scale = math.sqrt(self.config.d_model)
        tok = ad.embedding(head.embedding, target_ids) * scale
        if mixup is not None:
            partner_tok = ad.embedding(head.embedding, target_ids[mixup.partner]) * scale
            tok = tok * mixup.lam + partner_tok * (1.0 - mixup.lam)
        x = tok + Tensor(self.pos_encoding[:t])
        x = _dropout(x, self.config.trunk_dropout, train, rng)

        causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None, :, :]
        memory_mask = None
        if frame_mask is not None:
            memory_mask = np.where(frame_mask, 0.0, NEG_INF)[:, None, None, :]

        for layer in self.layers:
            x = layer(x, memory, causal, memory_mask, train, rng)
        return head.classifier(x)


# -- parameter accounting ----------------------------------------------


@dataclass(frozen=True)
class HeadParams:
    embedding: int
    classifier: int

    @property
    def total(self) -> int:
        return self.embedding + self.classifier


@dataclass(frozen=True)
class ParamReport:
    frontend: int
    trunk: int
    heads: dict[str, HeadParams] = field(default_factory=dict)
    frozen_encoder: int = FROZEN_ENCODER_PARAMS

    @property
    def trainable_total(self) -> int:
        return self.frontend + self.trunk + sum(h.total for h in self.heads.values())

    @property
    def grand_total(self) -> int:
        return self.trainable_total + self.frozen_encoder

    def to_dict(self) -> dict:
        return {
            "frontend": self.frontend,
            "trunk": self.trunk,
            "heads": {
                code: {"embedding": h.embedding, "classifier": h.classifier, "total": h.total}
                for code, h in self.heads.items()
            },
            "trainable_total": self.trainable_total,
            "frozen_encoder": self.frozen_encoder,
            "grand_total": self.grand_total,
        }


def count_params(model: MultilingualModel) -> ParamReport:
    """Exact parameter counts from the live arrays, grouped by component."""
    frontend = trunk = 0
    heads: dict[str, dict[str, int]] = {}
    for name, t in model.named_parameters().items():
        n = t.data.size
        if name.startswith("frontend."):
            frontend += n
        elif name.startswith("trunk."):
            trunk += n
        else:
            _, code, *rest = name.split(".")
            part = "embedding" if rest[0] == "embedding" else "classifier"
            heads.setdefault(code, {"embedding": 0, "classifier": 0})[part] += n
    return ParamReport(
        frontend=frontend,
        trunk=trunk,
        heads={code: HeadParams(**parts) for code, parts in heads.items()},
    )


def param_report(config: ModelConfig, vocab_sizes: Mapping[Language, int]) -> ParamReport:
    """Closed-form parameter counts for a configuration (no tensors allocated)."""
    d, dff = config.d_model, config.d_ff
    attn = 4 * d * d + 4 * d
    ff = d * dff + dff + dff * d + d
    norms = 3 * 2 * d
    per_layer = 2 * attn + ff + norms
    heads = {
        lang.value: HeadParams(embedding=v * d, classifier=d * v + v)
        for lang, v in vocab_sizes.items()
    }
    return ParamReport(
        frontend=config.d_in * d + d,
        trunk=config.n_layers * per_layer,
        heads=heads,
    )


def size_comparison(mono_reports: Sequence[ParamReport], multi_report: ParamReport) -> float:
    """Relative size reduction (%) of one multilingual model vs. monolinguals.

    Compares grand totals: (sum of mono totals - multi total) / sum of monos.
    """
    mono_langs = sorted(code for r in mono_reports for code in r.heads)
    multi_langs = sorted(multi_report.heads)
    if mono_langs != multi_langs:
        raise ValidationError(
            f"language sets differ: monolinguals {mono_langs} vs multilingual {multi_langs}"
        )
    mono_sum = sum(r.grand_total for r in mono_reports)
    return (mono_sum - multi_report.grand_total) / mono_sum * 100.0


# -- checkpointing ------------------------------------------------------


def save_checkpoint(model: MultilingualModel, path: str | Path) -> None:
    """Single-container checkpoint: JSON meta block + named float64 tensors."""
    meta = {
        "model_config": model.config.to_dict(),
        "languages": [lang.value for lang in model.languages],
        "vocabs": {
            lang.value: json.loads(model.vocab(lang).to_json()) for lang in model.languages
        },
    }
    meta_bytes = json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    blob = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    blob.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        name_bytes = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        blob.append(struct.pack("<I", len(name_bytes)))
        blob.append(name_bytes)
        blob.append(struct.pack("<I", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path: str | Path) -> MultilingualModel:
    """Rebuild a model from a checkpoint, bit-exactly."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    config = ModelConfig.from_dict(meta["model_config"])
    vocabs = {
        Language.parse(code): Vocabulary.from_json(json.dumps(doc))
        for code, doc in meta["vocabs"].items()
    }
    model = MultilingualModel(config, vocabs, seed=0)
    params = model.named_parameters()
    (n_tensors,) = struct.unpack("<I", raw[offset : offset + 4])
    offset += 4
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        shape = struct.unpack(f"<{ndim}I", raw[offset : offset + 4 * ndim])
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw[offset : offset + 8 * count], dtype="<f8").reshape(shape)
        offset += 8 * count
        if name not in params:
            raise ValidationError(f"{path}: unexpected tensor {name!r}")
        if params[name].data.shape != data.shape:
            raise ValidationError(f"{path}: shape mismatch for {name!r}")
        params[name].data = data.copy()
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValidationError(f"{path}: missing tensors", items=sorted(missing))
    return model
