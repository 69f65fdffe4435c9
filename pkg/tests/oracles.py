"""Independent reference implementations used only to check the production
code: a literal transcription of the CIDEr-D formula, exhaustive constrained
sequence search, and central finite differences. These deliberately share no
code with the package paths they verify.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np


def bruteforce_cider_d(
    cand_tokens: dict[str, list[str]],
    ref_tokens: dict[str, list[list[str]]],
    n_max: int = 4,
    sigma: float = 6.0,
) -> dict[str, float]:
    """CIDEr-D per item, written straight from the published formula."""

    def grams(tokens, n):
        return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))

    items = list(cand_tokens)
    log_n = math.log(len(items))

    def df(gram):
        hits = 0
        for item in items:
            if any(gram in grams(ref, len(gram)) for ref in ref_tokens[item]):
                hits += 1
        return hits

    def tfidf(tokens, n):
        return {
            g: tf * (log_n - math.log(max(1.0, df(g)))) for g, tf in grams(tokens, n).items()
        }

    scores = {}
    for item in items:
        cand = cand_tokens[item]
        per_n = []
        for n in range(1, n_max + 1):
            vc = tfidf(cand, n)
            nc = math.sqrt(sum(w * w for w in vc.values()))
            acc = 0.0
            for ref in ref_tokens[item]:
                vr = tfidf(ref, n)
                nr = math.sqrt(sum(w * w for w in vr.values()))
                if nc == 0.0 or nr == 0.0:
                    continue
                num = sum(min(vc[g], vr.get(g, 0.0)) * vr.get(g, 0.0) for g in vc)
                penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma**2))
                acc += penalty * num / (nc * nr)
            per_n.append(acc / len(ref_tokens[item]))
        scores[item] = 10.0 * sum(per_n) / n_max
    return scores


def exhaustive_constrained_search(
    step_fn,
    vocab,
    stopwords: frozenset[str],
    max_len: int,
    length_norm: float,
) -> tuple[tuple[int, ...], float]:
    """Enumerate every no-repeat word sequence of length <= max_len (EOS
    appended and scored) and return (ids, best normalized score)."""
    word_ids = list(vocab.word_ids)
    best_ids, best_score = None, -math.inf

    def score_of(seq: tuple[int, ...]) -> float:
        prefix = (vocab.bos_id,)
        total = 0.0
        for tok in seq + (vocab.eos_id,):
            row = step_fn(np.array([prefix], dtype=np.int64))[0]
            total += float(row[tok])
            prefix = prefix + (tok,)
        steps = len(seq) + 1
        return total / steps**length_norm

    def expand(seq: tuple[int, ...]):
        nonlocal best_ids, best_score
        norm = score_of(seq)
        key = tuple([vocab.bos_id, *seq, vocab.eos_id])
        if norm > best_score or (norm == best_score and key < best_ids):
            best_ids, best_score = key, norm
        if len(seq) >= max_len:
            return
        used = {vocab.tokens[i] for i in seq}
        for tok in word_ids:
            surface = vocab.tokens[tok]
            if surface in used and surface not in stopwords:
                continue
            expand(seq + (tok,))

    expand(tuple())
    return best_ids, best_score


def greedy_constrained_decode(
    step_fn,
    vocab,
    stopwords: frozenset[str],
    max_len: int,
    length_norm: float,
) -> tuple[tuple[int, ...], float]:
    """Constrained greedy decoding, written independently of the beam code.

    Follow the argmax word at every step (banned words excluded, ties to the
    smaller id), consider the EOS termination of every prefix along the way,
    and return the termination with the best normalized score (ties to the
    lexicographically smaller id sequence).
    """
    prefix = (vocab.bos_id,)
    total = 0.0
    terminations = []

    def consider(prefix, total, row):
        logp = total + float(row[vocab.eos_id])
        ids = prefix + (vocab.eos_id,)
        steps = len(ids) - 1
        terminations.append((logp / steps**length_norm, ids, logp))

    for _ in range(max_len):
        row = step_fn(np.array([prefix], dtype=np.int64))[0]
        consider(prefix, total, row)
        used = {vocab.tokens[i] for i in prefix[1:]}
        best_tok, best_lp = None, -math.inf
        for tok in vocab.word_ids:
            surface = vocab.tokens[tok]
            if surface in used and surface not in stopwords:
                continue
            lp = float(row[tok])
            if lp > best_lp:
                best_tok, best_lp = tok, lp
        if best_tok is None:
            break
        prefix = prefix + (best_tok,)
        total += best_lp
    row = step_fn(np.array([prefix], dtype=np.int64))[0]
    consider(prefix, total, row)
    best = min(terminations, key=lambda t: (-t[0], t[1]))
    return best[1], best[0]


def finite_difference_grads(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central finite differences of a scalar loss for each named array."""
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        out = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            out[i] = (lp - lm) / (2.0 * step)
        grads[name] = out.reshape(p.data.shape)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)))
