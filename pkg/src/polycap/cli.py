"""Command-line surface: prepare, stats, train, caption, eval, params,
compare-langs.

Every command is reproducible (same inputs + --seed give byte-identical
outputs; wall-clock values live only in the run manifest and metrics
timings) and writes a run manifest next to its outputs with resolved config,
input digests and the toolkit version. Exit codes: 0 success, 2 validation
failure, 3 runtime failure; errors are JSON on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import polycap
from polycap import corpus as corpus_mod
from polycap import decoding, evaluation, model as model_mod, training
from polycap.errors import ToolkitError, ValidationError
from polycap.text import Language, build_vocabulary, load_stopwords, tokenize


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(path: Path) -> str:
    """Content hash of a file, or of a directory's sorted (name, hash) lines."""
    if path.is_file():
        return _sha256_file(path)
    if path.is_dir():
        lines = sorted(
            f"{p.relative_to(path)}:{_sha256_file(p)}" for p in path.rglob("*") if p.is_file()
        )
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    raise ValidationError(f"no such input: {path}")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n", "utf-8")


def write_run_manifest(
    out_dir: Path, command: str, config: dict, inputs: dict[str, Path], seed: int | None
) -> None:
    manifest = {
        "command": command,
        "toolkit_version": polycap.__version__,
        "seed": seed,
        "config": config,
        "input_digests": {label: _digest(Path(p)) for label, p in inputs.items()},
        "timestamp_unix": time.time(),
    }
    _dump_json(manifest, out_dir / "run_manifest.json")


def _parse_languages(spec: str) -> list[Language]:
    codes = [c for c in (s.strip() for s in spec.split(",")) if c]
    if not codes:
        raise ValidationError("empty language list")
    return [Language.parse(c) for c in codes]


# -- commands ----------------------------------------------------------------


def cmd_prepare(args) -> int:
    languages = _parse_languages(args.languages)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = corpus_mod.load_manifests(args.manifest)
    if args.split not in manifests:
        raise ValidationError(f"split {args.split!r} not present in {args.manifest}")
    index = corpus_mod.CorpusIndex.from_paths(args.manifest, args.embeddings_dir, args.split, languages)
    vocab_files = {}
    for lang in languages:
        tokenized = [
            tokenize(c) for record in index.manifest.records(lang) for c in record.captions
        ]
        vocab = build_vocabulary(tokenized, min_count=args.min_count)
        path = out_dir / f"vocab.{lang.value}.json"
        vocab.save(path)
        vocab_files[lang.value] = {"path": path.name, "size": vocab.size}
    summary = {
        "split": args.split,
        "n_audios": len(index),
        "embed_dim": index.embed_dim,
        "languages": [l.value for l in languages],
        "vocabularies": vocab_files,
    }
    _dump_json(summary, out_dir / "corpus_index.json")
    write_run_manifest(
        out_dir,
        "prepare",
        {"manifest": str(args.manifest), "split": args.split, "min_count": args.min_count},
        {"manifest": Path(args.manifest), "embeddings_dir": Path(args.embeddings_dir)},
        seed=None,
    )
    print(f"prepared {len(index)} audios, {len(languages)} languages -> {out_dir}")
    return 0


def cmd_stats(args) -> int:
    languages = _parse_languages(args.languages)
    manifests = corpus_mod.load_manifests(args.manifest)
    rows = [corpus_mod.compute_stats(manifests, lang, args.split) for lang in languages]
    print(f"{'lang':<6}{'split':<8}{'sent.length':>12}{'word types':>12}{'captions':>10}")
    for r in rows:
        print(
            f"{r.language.value:<6}{r.split:<8}{r.avg_sentence_length:>12.2f}"
            f"{r.word_types:>12}{r.n_captions:>10}"
        )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _dump_json([asdict(r) | {"language": r.language.value} for r in rows], out_dir / "stats.json")
        write_run_manifest(
            out_dir, "stats", {"split": args.split}, {"manifest": Path(args.manifest)}, seed=None
        )
    return 0


def _load_train_config(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    for key in ("data", "languages"):
        if key not in doc:
            raise ValidationError(f"config missing required key {key!r}")
    return doc


def cmd_train(args) -> int:
    config_path = Path(args.config)
    doc = _load_train_config(config_path)
    base = config_path.parent
    data = doc["data"]
    manifest_path = (base / data["manifest"]).resolve()
    embeddings_dir = (base / data["embeddings_dir"]).resolve()
    languages = [Language.parse(c) for c in doc["languages"]]
    if not languages:
        raise ValidationError("config declares an empty language list")

    train_cfg = training.TrainConfig.from_dict(doc.get("train", {}))
    if args.seed is not None:
        train_cfg = training.TrainConfig.from_dict(train_cfg.to_dict() | {"seed": args.seed})
    model_cfg = model_mod.ModelConfig.from_dict(doc.get("model", {}))

    out_dir = Path(args.out or doc.get("out_dir", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)

    train_index = corpus_mod.CorpusIndex.from_paths(
        manifest_path, embeddings_dir, data.get("train_split", "train"), languages
    )
    val_split = data.get("val_split")
    val_index = (
        corpus_mod.CorpusIndex.from_paths(manifest_path, embeddings_dir, val_split, languages)
        if val_split
        else None
    )
    if train_index.embed_dim != model_cfg.d_in:
        raise ValidationError(
            f"embedding dim {train_index.embed_dim} does not match model d_in {model_cfg.d_in}"
        )

    vocabs = {}
    for lang in languages:
        tokenized = [
            tokenize(c) for record in train_index.manifest.records(lang) for c in record.captions
        ]
        vocabs[lang] = build_vocabulary(tokenized, min_count=doc.get("min_count", 1))
    model = model_mod.MultilingualModel(model_cfg, vocabs, seed=train_cfg.seed)

    trainer = training.Trainer(model, train_index, train_cfg, val_corpus=val_index)
    history = trainer.fit(metrics_path=out_dir / "metrics.jsonl")
    model_mod.save_checkpoint(model, out_dir / "checkpoint.ackp")
    write_run_manifest(
        out_dir,
        "train",
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "languages": doc["languages"]},
        {"manifest": manifest_path, "embeddings_dir": embeddings_dir},
        seed=train_cfg.seed,
    )
    first, last = history[0].train_loss, history[-1].train_loss
    print(f"trained {train_cfg.epochs} epochs: loss {first:.4f} -> {last:.4f}; wrote {out_dir}")
    return 0


def cmd_caption(args) -> int:
    model = model_mod.load_checkpoint(args.checkpoint)
    languages = _parse_languages(args.languages) if args.languages else list(model.languages)
    embeddings_dir = Path(args.embeddings_dir)
    if args.manifest:
        manifests = corpus_mod.load_manifests(args.manifest)
        if args.split not in manifests:
            raise ValidationError(f"split {args.split!r} not present in {args.manifest}")
        audio_ids = list(manifests[args.split].audio_ids)
    else:
        audio_ids = sorted(p.stem for p in embeddings_dir.glob("*.aemb"))
    if not audio_ids:
        raise ValidationError(f"no embeddings to caption in {embeddings_dir}")

    cfg = decoding.DecodeConfig(
        beam_size=args.beam_size, max_len=args.max_len, length_norm=args.length_norm
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "captions.jsonl"
    with out_path.open("w", encoding="utf-8") as sink:
        for audio_id in audio_ids:
            seq = corpus_mod.load_embedding(embeddings_dir / f"{audio_id}.aemb", audio_id)
            for lang in languages:
                stopwords = load_stopwords(lang)
                result = decoding.caption_audio(model, seq.data, lang, cfg, stopwords)
                sink.write(
                    json.dumps(
                        {
                            "audio_id": audio_id,
                            "language": lang.value,
                            "caption": " ".join(result.tokens),
                            "log_prob": result.log_prob,
                            "normalized_score": result.normalized_score,
                            "decode_config": cfg.to_dict(),
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    write_run_manifest(
        out_dir,
        "caption",
        {"decode_config": cfg.to_dict(), "languages": [l.value for l in languages]},
        {"checkpoint": Path(args.checkpoint), "embeddings_dir": embeddings_dir},
        seed=None,
    )
    print(f"captioned {len(audio_ids)} audios x {len(languages)} languages -> {out_path}")
    return 0


def _read_captions_jsonl(path: Path) -> dict[Language, dict[str, str]]:
    out: dict[Language, dict[str, str]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            lang = Language.parse(obj["language"])
            out.setdefault(lang, {})[obj["audio_id"]] = obj["caption"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad caption record ({exc})") from exc
    if not out:
        raise ValidationError(f"{path}: no caption records")
    return out


def cmd_eval(args) -> int:
    candidates = _read_captions_jsonl(Path(args.captions))
    manifests = corpus_mod.load_manifests(args.manifest)
    if args.split not in manifests:
        raise ValidationError(f"split {args.split!r} not present in {args.manifest}")
    manifest = manifests[args.split]
    references = {
        lang: {r.audio_id: list(r.captions) for r in manifest.records(lang)}
        for lang in candidates
    }
    provider = evaluation.HttpEmbedder(args.sbert_endpoint) if args.sbert_endpoint else None
    report = evaluation.evaluate_captions(
        candidates,
        references,
        provider=provider,
        aggregate=args.sbert_aggregate,
        config_echo={
            "split": args.split,
            "sbert_endpoint": args.sbert_endpoint,
            "sbert_aggregate": args.sbert_aggregate,
        },
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(report.to_dict(), out_dir / "eval_report.json")
    write_run_manifest(
        out_dir,
        "eval",
        {"split": args.split},
        {"captions": Path(args.captions), "manifest": Path(args.manifest)},
        seed=None,
    )
    for code, s in report.scores.items():
        sim = f"{s.sbert_sim_pct:.1f}" if s.sbert_sim_pct is not None else "-"
        print(
            f"{code}: CIDEr-D {s.cider_d_raw:.4f} (raw) / {s.cider_d_pct:.1f}% "
            f"SBERT-sim {sim} on {s.n_items} items"
        )
    return 0


def _parse_vocab_sizes(spec: str) -> dict[Language, int]:
    out = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        try:
            code, size = part.split("=")
            out[Language.parse(code)] = int(size)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"bad vocab size entry {part!r} (want lang=size)") from exc
    if not out:
        raise ValidationError("empty vocab size list")
    return out


def cmd_params(args) -> int:
    config = model_mod.ModelConfig.from_dict(json.loads(Path(args.config).read_text()) if args.config else {})
    vocab_sizes = _parse_vocab_sizes(args.vocab_sizes)
    multi = model_mod.param_report(config, vocab_sizes)
    monos = [model_mod.param_report(config, {lang: size}) for lang, size in vocab_sizes.items()]
    reduction = model_mod.size_comparison(monos, multi)
    print(f"{'component':<28}{'params':>14}")
    print(f"{'frontend':<28}{multi.frontend:>14,}")
    print(f"{'trunk':<28}{multi.trunk:>14,}")
    for code, head in multi.heads.items():
        print(f"{'head.' + code + '.embedding':<28}{head.embedding:>14,}")
        print(f"{'head.' + code + '.classifier':<28}{head.classifier:>14,}")
    print(f"{'multilingual trainable':<28}{multi.trainable_total:>14,}")
    print(f"{'multilingual grand total':<28}{multi.grand_total:>14,}")
    for mono in monos:
        code = next(iter(mono.heads))
        print(f"{'mono-' + code + ' trainable':<28}{mono.trainable_total:>14,}")
        print(f"{'mono-' + code + ' grand total':<28}{mono.grand_total:>14,}")
    print(f"size reduction vs monolinguals: {reduction:.2f}%")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _dump_json(
            {
                "multilingual": multi.to_dict(),
                "monolingual": {next(iter(m.heads)): m.to_dict() for m in monos},
                "reduction_pct": reduction,
            },
            out_dir / "params.json",
        )
        write_run_manifest(out_dir, "params", {"config": config.to_dict()}, {}, seed=None)
    return 0


def cmd_compare_langs(args) -> int:
    captions = _read_captions_jsonl(Path(args.captions))
    base = Language.parse(args.base)
    provider = evaluation.HttpEmbedder(args.endpoint)
    result = evaluation.cross_language_similarity(captions, base, provider)
    table = {lang.value: pct for lang, pct in sorted(result.items(), key=lambda kv: kv[0].ordinal)}
    for code, pct in table.items():
        print(f"{base.value} vs {code}: {pct:.1f}%")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _dump_json({"base": base.value, "similarity_pct": table}, out_dir / "cross_language.json")
        write_run_manifest(
            out_dir, "compare-langs", {"base": base.value}, {"captions": Path(args.captions)}, seed=None
        )
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polycap",
        description="Train, decode and evaluate multilingual audio-caption decoders.",
    )
    parser.add_argument("--version", action="version", version=f"polycap {polycap.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate a corpus and build vocabularies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings-dir", required=True)
    p.add_argument("--languages", required=True, help="comma-separated codes, e.g. en,fr,es,de")
    p.add_argument("--split", default="train")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", help="corpus statistics per language")
    p.add_argument("--manifest", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="decode captions with constrained beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings-dir", required=True)
    p.add_argument("--languages")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--beam-size", type=int, default=4)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--length-norm", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score captions against references")
    p.add_argument("--captions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--sbert-endpoint")
    p.add_argument("--sbert-aggregate", choices=("mean", "max"), default="mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter accounting for a configuration")
    p.add_argument("--config")
    p.add_argument(
        "--vocab-sizes",
        default="en=4861,fr=5797,es=5889,de=9391",
        help="comma-separated lang=size pairs",
    )
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("compare-langs", help="cross-language output similarity")
    p.add_argument("--captions", required=True)
    p.add_argument("--base", default="en")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare_langs)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        sys.stderr.write(json.dumps(exc.payload(), sort_keys=True) + "\n")
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        payload = {"error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
