"""Text primitives shared by the pipeline.

Cleaning and tokenization, bag-of-words term frequencies, cosine similarity
and Levenshtein edit distance.  Everything here is a pure function; the
language dependent parts (stopwords, stemmer) come from a :class:`TextConfig`.
"""

from __future__ import annotations

import math
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit

URL_RE = re.compile(r"(?i)\b(?:https?://|www\.)[^\s<>\"']+")
EMAIL_RE = re.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+")
_NON_LETTER_RE = re.compile(r"[^\W\d_]+")

_MAX_STEM_PASSES = 8


def read_token_file(path: str | Path) -> list[str]:
    """Read a one-token-per-line UTF-8 resource file; blank lines and ``#`` comments skipped."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(unicodedata.normalize("NFC", line).lower())
    return out


def builtin_stopwords(language: str) -> frozenset[str]:
    name = f"stopwords_{language}.txt"
    try:
        text = resources.files("phishtriage").joinpath("data", name).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValueError(f"no shipped stopword list for language {language!r}") from None
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


@dataclass(frozen=True)
class TextConfig:
    """Language resources for tokenization.

    ``stemmer`` is a Snowball algorithm name (``english``, ``dutch``, ...) or
    ``"none"``.  ``no_stem`` lists tokens that must never be stemmed.
    """

    language: str = "english"
    stemmer: str = "english"
    stopwords: frozenset[str] = field(default_factory=lambda: builtin_stopwords("english"))
    min_token_len: int = 2
    no_stem: frozenset[str] = frozenset()

    @classmethod
    def load(
        cls,
        language: str = "english",
        stemmer: str | None = None,
        stopwords_path: str | Path | None = None,
        no_stem_path: str | Path | None = None,
        min_token_len: int = 2,
    ) -> "TextConfig":
        stop = (
            frozenset(read_token_file(stopwords_path))
            if stopwords_path
            else builtin_stopwords(language)
        )
        no_stem = frozenset(read_token_file(no_stem_path)) if no_stem_path else frozenset()
        return cls(
            language=language,
            stemmer=stemmer if stemmer is not None else language,
            stopwords=stop,
            min_token_len=min_token_len,
            no_stem=no_stem,
        )

    def to_dict(self) -> dict:
        return {
            "language": self.language,
            "stemmer": self.stemmer,
            "stopwords": sorted(self.stopwords),
            "min_token_len": self.min_token_len,
            "no_stem": sorted(self.no_stem),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TextConfig":
        return cls(
            language=d["language"],
            stemmer=d["stemmer"],
            stopwords=frozenset(d["stopwords"]),
            min_token_len=int(d["min_token_len"]),
            no_stem=frozenset(d.get("no_stem", ())),
        )


_STEMMERS: dict[str, object] = {}
_STEM_CACHE: dict[tuple[str, str], str] = {}


def _stem(word: str, algorithm: str) -> str:
    key = (algorithm, word)
    hit = _STEM_CACHE.get(key)
    if hit is not None:
        return hit
    st = _STEMMERS.get(algorithm)
    if st is None:
        import snowballstemmer

        st = _STEMMERS[algorithm] = snowballstemmer.stemmer(algorithm)
    # iterate to a fixed point so re-tokenizing stemmed output is a no-op
    cur = word
    for _ in range(_MAX_STEM_PASSES):
        nxt = st.stemWord(cur)
        if nxt == cur:
            break
        cur = nxt
    _STEM_CACHE[key] = cur
    return cur


@dataclass(frozen=True)
class TokenDoc:
    email_id: str
    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def clean_and_tokenize(body: str, config: TextConfig | None = None, email_id: str = "") -> TokenDoc:
    """Strip URLs, email addresses and non-letters, then lowercase, filter and stem."""
    cfg = config or DEFAULT_TEXT_CONFIG
    text = unicodedata.normalize("NFC", body)
    text = URL_RE.sub(" ", text)
    text = EMAIL_RE.sub(" ", text)
    stem = cfg.stemmer != "none"
    tokens = []
    for raw in _NON_LETTER_RE.findall(text.lower()):
        if len(raw) < cfg.min_token_len or raw in cfg.stopwords:
            continue
        tok = raw
        if stem and raw not in cfg.no_stem:
            tok = _stem(raw, cfg.stemmer)
            if len(tok) < cfg.min_token_len or tok in cfg.stopwords:
                continue
        tokens.append(tok)
    return TokenDoc(email_id, tuple(tokens))


DEFAULT_TEXT_CONFIG = TextConfig()


@dataclass(frozen=True)
class TfVector:
    email_id: str
    weights: Mapping[str, float]
    normalized: bool = False

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.weights.values()))


def tf_vector(doc: TokenDoc, normalize: bool = True) -> TfVector:
    """Raw term counts of ``doc``, optionally divided by their Euclidean norm."""
    counts: dict[str, float] = {}
    for tok in doc.tokens:
        counts[tok] = counts.get(tok, 0.0) + 1.0
    if normalize and counts:
        n = math.sqrt(math.fsum(v * v for v in counts.values()))
        counts = {k: v / n for k, v in counts.items()}
    return TfVector(doc.email_id, counts, normalized=normalize)


def cosine(a: TfVector, b: TfVector) -> float:
    """Cosine of the angle between two term vectors; 0.0 when either is empty."""
    wa, wb = a.weights, b.weights
    if not wa or not wb:
        return 0.0
    if len(wb) < len(wa):
        wa, wb = wb, wa
    dot = math.fsum(v * wb[k] for k, v in wa.items() if k in wb)
    if dot == 0.0:
        return 0.0
    na = 1.0 if a.normalized else a.norm()
    nb = 1.0 if b.normalized else b.norm()
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, max(0.0, dot / (na * nb)))


def build_vocabulary(docs: Iterable[TokenDoc]) -> dict[str, int]:
    """First pass of the two-pass vectorization: sorted token -> column index."""
    vocab = sorted({t for d in docs for t in d.tokens})
    return {t: i for i, t in enumerate(vocab)}


def tf_matrix(vectors: Sequence[TfVector], vocab: Mapping[str, int]):
    """Stack term vectors as rows of a CSR matrix over ``vocab``."""
    from scipy import sparse

    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for v in vectors:
        items = sorted((vocab[k], w) for k, w in v.weights.items())
        indices.extend(i for i, _ in items)
        data.extend(w for _, w in items)
        indptr.append(len(indices))
    return sparse.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(vectors), len(vocab)),
    )


# -- edit distance ----------------------------------------------------------


@njit(cache=True, nogil=True)
def _lev_codes(a, b, row):
    la = a.shape[0]
    lb = b.shape[0]
    if la == 0:
        return lb
    if lb == 0:
        return la
    for j in range(lb + 1):
        row[j] = j
    for i in range(1, la + 1):
        diag = row[0]
        row[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            up = row[j]
            best = diag + (0 if ai == b[j - 1] else 1)
            if up + 1 < best:
                best = up + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
            diag = up
    return row[lb]


@njit(cache=True, nogil=True)
def _lev_pair(a, b):
    row = np.empty(b.shape[0] + 1, dtype=np.int64)
    return _lev_codes(a, b, row)


@njit(cache=True, nogil=True)
def _lev_cross(A, alen, B, blen, out):
    width = B.shape[1] + 1
    row = np.empty(width, dtype=np.int64)
    for i in range(A.shape[0]):
        a = A[i, : alen[i]]
        for j in range(B.shape[0]):
            out[i, j] = _lev_codes(a, B[j, : blen[j]], row)


def _codes(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def _pack(strings: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.fromiter((len(s) for s in strings), dtype=np.int64, count=len(strings))
    width = int(lens.max()) if len(strings) else 0
    arr = np.zeros((len(strings), max(width, 1)), dtype=np.uint32)
    for i, s in enumerate(strings):
        if s:
            arr[i, : len(s)] = _codes(s)
    return arr, lens


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute edit distance."""
    if a == b:
        return 0
    return int(_lev_pair(_codes(a), _codes(b)))


def levenshtein_matrix(a: Sequence[str], b: Sequence[str]) -> np.ndarray:
    """All pairwise distances, ``out[i, j] = levenshtein(a[i], b[j])``."""
    A, alen = _pack(a)
    B, blen = _pack(b)
    out = np.zeros((len(a), len(b)), dtype=np.int32)
    if len(a) and len(b):
        _lev_cross(A, alen, B, blen, out)
    return out
