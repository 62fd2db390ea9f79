"""Analysis helpers: measure correlation, TF-IDF keywords, significance tests."""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gradgroup.errors import EmptyCorpus, LabelMismatch, LengthMismatch, ZeroVariance
from gradgroup.similarity import SimilarityMatrix

PERMUTATION_CHUNK = 1000
MIN_RESAMPLES = 1000


# -- correlation between similarity measures --------------------------------

def upper_triangle(S: SimilarityMatrix) -> list[float]:
    """Entries above the diagonal, row by row."""
    i, j = np.triu_indices(len(S), k=1)
    return S.values[i, j].tolist()


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise LengthMismatch("pearson needs at least two observations")
    dx = x - math.fsum(x) / x.size
    dy = y - math.fsum(y) / y.size
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("pearson is undefined for a constant input")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def correlate_measures(A: SimilarityMatrix, B: SimilarityMatrix) -> float:
    """Pearson r between the off-diagonal entries of two similarity matrices.

    ``B`` is reordered to ``A``'s label order first; the label sets must match.
    """
    if set(A.labels) != set(B.labels):
        only_a = sorted(set(A.labels) - set(B.labels))
        only_b = sorted(set(B.labels) - set(A.labels))
        raise LabelMismatch(f"label sets differ (only in A: {only_a}, only in B: {only_b})")
    return pearson(upper_triangle(A), upper_triangle(B.reorder(A.labels)))


# -- TF-IDF keywords --------------------------------------------------------

@dataclass(frozen=True)
class CorpusDoc:
    task: str
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))


def _strip_punct(tok: str) -> str:
    start, end = 0, len(tok)
    while start < end and unicodedata.category(tok[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(tok[end - 1]).startswith("P"):
        end -= 1
    return tok[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation."""
    out = []
    for raw in text.lower().split():
        tok = _strip_punct(raw)
        if tok:
            out.append(tok)
    return out


def tfidf_scores(corpus: Sequence[CorpusDoc], stopwords: Iterable[str] = ()) -> dict[str, dict[str, float]]:
    """Raw-count tf times ln(D / df) for every eligible term of every doc."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("corpus has no documents")
    stop = set(stopwords)
    n_docs = len(corpus)
    counts = [Counter(doc.tokens) for doc in corpus]
    df = Counter()
    for c in counts:
        df.update(c.keys())
    out = {}
    for doc, c in zip(corpus, counts):
        out[doc.task] = {t: tf * math.log(n_docs / df[t]) for t, tf in c.items()
                         if t not in stop and df[t] < n_docs}
    return out


def tfidf_keywords(corpus: Sequence[CorpusDoc], top_k: int = 50,
                   stopwords: Iterable[str] = ()) -> dict[str, list[str]]:
    """Top ``top_k`` terms per document by TF-IDF, ties broken alphabetically.

    Terms occurring in every document have zero idf and are never returned.
    """
    corpus = list(corpus)
    if len(corpus) < 2:
        raise EmptyCorpus(f"keyword extraction needs at least two documents, got {len(corpus)}")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    if len({d.task for d in corpus}) != len(corpus):
        raise EmptyCorpus("one document per task expected")
    scores = tfidf_scores(corpus, stopwords)
    return {task: [t for t, _ in sorted(s.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]]
            for task, s in scores.items()}


def read_corpus_dir(path) -> list[CorpusDoc]:
    """One ``<task>.txt`` file per task; the file stem is the task label."""
    path = Path(path)
    if not path.is_dir():
        raise EmptyCorpus(f"{path} is not a directory")
    docs = []
    for f in sorted(path.glob("*.txt")):
        docs.append(CorpusDoc(f.stem, tokenize(f.read_text(encoding="utf-8"))))
    if not docs:
        raise EmptyCorpus(f"no .txt files in {path}")
    return docs


def read_stopwords(path) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        return {line.strip().lower() for line in fh if line.strip()}


# -- paired permutation test ------------------------------------------------

def paired_permutation_test(a: Sequence[float], b: Sequence[float],
                            n_resamples: int = 10_000, seed: int = 0) -> float:
    """Two-sided sign-flip test on paired differences.

    Returns ``(1 + hits) / (1 + n_resamples)`` where a hit is a resample whose
    |mean of sign-flipped differences| reaches the observed |mean difference|.
    Resamples are drawn in fixed chunks, each from its own seed derived from
    ``(seed, chunk index)``, so a chunked parallel run gives the same count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples must have equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise LengthMismatch("need at least two paired observations")
    if n_resamples < MIN_RESAMPLES:
        raise ValueError(f"n_resamples must be at least {MIN_RESAMPLES}")
    d = a - b
    observed = abs(d.mean())
    # flipped means equal to the observed one up to rounding count as hits
    threshold = observed - 1e-12 * max(1.0, observed)
    hits = 0
    for chunk, lo in enumerate(range(0, n_resamples, PERMUTATION_CHUNK)):
        m = min(PERMUTATION_CHUNK, n_resamples - lo)
        hits += _count_hits(d, threshold, seed, chunk, m)
    return (1 + hits) / (1 + n_resamples)


def _count_hits(d, threshold, seed, chunk, m) -> int:
    rng = np.random.default_rng([seed, chunk])
    signs = rng.integers(0, 2, size=(m, d.size)) * 2 - 1
    return int(np.count_nonzero(np.abs((signs * d).mean(axis=1)) >= threshold))
