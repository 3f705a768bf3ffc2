"""Text similarity metrics over whitespace tokens, with multi-reference support.

All functions take token lists. Special tokens (``<pad>``, ``<bos>``, ...) are
stripped first, so scores do not depend on how a decode was terminated.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from ..prompts import SPECIALS

METRICS = ("bleu1", "bleu4", "rougeL", "cider", "meteorLite")


def clean(tokens):
    if isinstance(tokens, str):
        tokens = tokens.split()
    return [t for t in tokens if t not in SPECIALS]


def ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c_len, refs):
    # ties go to the shorter reference
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def _clipped(candidate, references, n):
    counts = ngrams(candidate, n)
    max_ref = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    return sum(min(c, max_ref[g]) for g, c in counts.items()), max(len(candidate) - n + 1, 0)


def _bleu_from_stats(matches, totals, c_len, r_len):
    if c_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu(candidate, references, n=4):
    """Sentence BLEU-n: uniform geometric mean of clipped precisions times brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    candidate = clean(candidate)
    references = [clean(r) for r in references]
    if not candidate:
        return 0.0
    stats = [_clipped(candidate, references, k) for k in range(1, n + 1)]
    return _bleu_from_stats([m for m, _ in stats], [t for _, t in stats], len(candidate),
                            _closest_ref_len(len(candidate), references))


def corpus_bleu(candidates, references_list, n=4):
    """Corpus BLEU: pooled clipped counts and one corpus-level brevity penalty."""
    matches, totals = [0] * n, [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_list):
        cand = clean(cand)
        refs = [clean(r) for r in refs]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for k in range(n):
            m, t = _clipped(cand, refs, k + 1)
            matches[k] += m
            totals[k] += t
    return _bleu_from_stats(matches, totals, c_len, r_len)


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references):
    """LCS F1, maximised over references."""
    candidate = clean(candidate)
    best = 0.0
    for ref in references:
        ref = clean(ref)
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, 2 * p * r / (p + r))
    return best


def _alignment(candidate, reference):
    """Exact-match alignment as (cand index, ref index) pairs.

    Each candidate token first tries to continue the current chunk, otherwise
    takes the leftmost unused reference position with the same word.
    """
    used = set()
    pairs = []
    for i, tok in enumerate(candidate):
        j = None
        if pairs and pairs[-1][0] == i - 1:
            nxt = pairs[-1][1] + 1
            if nxt < len(reference) and nxt not in used and reference[nxt] == tok:
                j = nxt
        if j is None:
            j = next((k for k, r in enumerate(reference) if r == tok and k not in used), None)
        if j is not None:
            used.add(j)
            pairs.append((i, j))
    return pairs


def count_chunks(pairs):
    chunks = 0
    for k, (i, j) in enumerate(pairs):
        if k == 0 or not (i == pairs[k - 1][0] + 1 and j == pairs[k - 1][1] + 1):
            chunks += 1
    return chunks


def meteor_lite(candidate, references, alpha=0.9, gamma=0.5, beta=3.0):
    """Exact-match METEOR: recall-weighted F-mean times a fragmentation penalty.

    No stemming or synonym stages. Max over references.
    """
    candidate = clean(candidate)
    best = 0.0
    for ref in references:
        ref = clean(ref)
        pairs = _alignment(candidate, ref)
        m = len(pairs)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        fmean = p * r / (alpha * p + (1 - alpha) * r)
        penalty = gamma * (count_chunks(pairs) / m) ** beta
        best = max(best, fmean * (1 - penalty))
    return best


@dataclass
class CiderResult:
    corpus: float
    per_sample: list
    flags: list = field(default_factory=list)


def cider(candidates, references_list, max_n=4, scale=10.0):
    """CIDEr: TF-IDF n-gram cosine averaged over references and n = 1..max_n.

    Document frequencies come from the reference sets (one document per sample).
    A one-sample corpus is scored but flagged, since every IDF is then zero.
    """
    refs_list = [[clean(r) for r in refs] for refs in references_list]
    cands = [clean(c) for c in candidates]
    N = len(cands)
    flags = ["single-sample corpus: idf is degenerate"] if N < 2 else []
    df = Counter()
    for refs in refs_list:
        seen = set()
        for r in refs:
            for n in range(1, max_n + 1):
                seen.update(ngrams(r, n))
        df.update(seen)

    def vec(tokens, n):
        return {g: c * math.log(N / max(1.0, df[g])) for g, c in ngrams(tokens, n).items()}

    def cos(a, b):
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)

    scores = []
    for cand, refs in zip(cands, refs_list):
        total = 0.0
        for n in range(1, max_n + 1):
            cv = vec(cand, n)
            total += sum(cos(cv, vec(r, n)) for r in refs) / len(refs)
        scores.append(scale * total / max_n)
    corpus = sum(scores) / N if N else 0.0
    return CiderResult(corpus, scores, flags)


@dataclass
class MetricReport:
    per_sample: dict  # metric -> list of scores
    corpus: dict  # metric -> corpus score
    reference_counts: list
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {"per_sample": self.per_sample, "corpus": self.corpus,
                "reference_counts": self.reference_counts, "flags": self.flags}


def evaluate(candidates, references_list, metrics=METRICS):
    """Score a corpus; ``references_list[i]`` holds every reference for candidate ``i``."""
    if len(candidates) != len(references_list):
        raise ValueError("candidate and reference counts differ")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {METRICS}")
    per, corpus, flags = {}, {}, []
    for i, c in enumerate(candidates):
        if not clean(c):
            flags.append(f"sample {i}: empty candidate scored 0")
    for m in metrics:
        if m in ("bleu1", "bleu4"):
            n = int(m[-1])
            per[m] = [bleu(c, r, n) for c, r in zip(candidates, references_list)]
            corpus[m] = corpus_bleu(candidates, references_list, n)
        elif m == "rougeL":
            per[m] = [rouge_l(c, r) for c, r in zip(candidates, references_list)]
            corpus[m] = sum(per[m]) / max(len(per[m]), 1)
        elif m == "meteorLite":
            per[m] = [meteor_lite(c, r) for c, r in zip(candidates, references_list)]
            corpus[m] = sum(per[m]) / max(len(per[m]), 1)
        else:
            res = cider(candidates, references_list)
            per[m], corpus[m] = res.per_sample, res.corpus
            flags.extend(res.flags)
    return MetricReport(per, corpus, [len(r) for r in references_list], flags)
