"""Deterministic vector primitives, seeded randomness, and embedding providers.

Everything downstream (curation, bank building, retrieval, conditioning,
metrics) consumes the helpers in this module.  All floating point work is
done in float64; binary interchange formats quantize to float32 (see
``matrixio``).
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path

import numpy as np

# Fixed for the whole repo; recorded in every manifest so seeds stay portable.
RNG_ALGORITHM = "pcg64"

_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DimensionMismatch(ValueError):
    """Two vectors/matrices that must share a dimension do not."""


class ZeroVector(ValueError):
    """An operation that needs a direction received a (near-)zero vector."""


class ShapeMismatch(ValueError):
    """Array shapes disagree with each other or with declared metadata."""


class WidthMismatch(ValueError):
    """A token sequence has the wrong feature width for this module."""


class EmptyPrompt(ValueError):
    """Prompt is empty after whitespace trimming / tokenization."""


class UnknownId(KeyError):
    """Requested id is not present in a feature file."""


class ProviderIo(OSError):
    """Embedding provider failed to read its backing files."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on Unicode whitespace/punctuation.

    Returns the list of alphanumeric tokens (underscores are treated as
    punctuation).  Shared by the hash-text provider, vocabulary extraction,
    inverted-index construction and keyword parsing so that all components
    agree on token boundaries.
    """
    return _TOKEN_RE.findall(text.lower())


def ngrams(tokens: list[str], max_n: int) -> list[str]:
    """All contiguous token n-grams for n in 1..max_n, space-joined."""
    out = []
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            out.append(" ".join(tokens[i : i + n]))
    return out


def stable_hash64(*parts: str | bytes | int) -> int:
    """64-bit hash that is stable across processes and platforms.

    Python's builtin ``hash`` is salted per process; this one is not, so it
    can be used to derive seeds and hash buckets that survive restarts.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, int):
            data = part.to_bytes(8, "little", signed=False)
        elif isinstance(part, str):
            data = part.encode("utf-8")
        else:
            data = part
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Deterministic random stream (PCG64) keyed by a 64-bit seed.

    Identical seeds produce identical streams on every platform.  Use
    :meth:`derive` to fork statistically independent child streams keyed by
    string/int labels, e.g. one stream per pipeline stage or per query.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *parts: str | bytes | int) -> "SeededRng":
        return SeededRng(stable_hash64(self.seed, *parts))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size=size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        return self._gen.integers(0, high, size=size)

    def choice_without_replacement(self, pool, k: int) -> list:
        """Draw k distinct items uniformly from pool, in draw order."""
        pool = list(pool)
        if k > len(pool):
            raise ValueError(f"cannot draw {k} items from pool of {len(pool)}")
        idx = self._gen.choice(len(pool), size=k, replace=False)
        return [pool[int(i)] for i in idx]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and convert to a finite 1-D float64 embedding."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"{name} must be 1-D and non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_feature_matrix(x, name: str = "features") -> np.ndarray:
    """Validate and convert to a finite 2-D float64 row-major matrix."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def cosine(u, v) -> float:
    """Cosine similarity of two embeddings, in [-1, 1]."""
    a = as_vector(u, "u")
    b = as_vector(v, "v")
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= 1e-12 or nb <= 1e-12:
        raise ZeroVector("cosine undefined for (near-)zero vectors")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm, preserving direction."""
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm <= 1e-12:
        raise ZeroVector(f"cannot normalize vector with norm {norm}")
    return arr / norm


def normalize_rows(x, name: str = "features") -> np.ndarray:
    """Row-wise unit normalization; raises ZeroVector naming the bad row."""
    arr = as_feature_matrix(x, name)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ZeroVector(f"{name} row {int(bad[0])} has (near-)zero norm")
    return arr / norms[:, None]


class HashTextProvider:
    """Feature-hashing text encoder: deterministic, dependency-free.

    Tokenizes (lowercase, Unicode punctuation split), takes character
    n-grams per token, feature-hashes each gram into ``dim`` buckets with a
    sign bit, and L2-normalizes the result.  Similar prompts share grams
    and therefore land near each other, which is enough locality for the
    rest of the pipeline.
    """

    kind = "hash-text"

    def __init__(self, dim: int, ngram: int = 3, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        if ngram < 1:
            raise ValueError("ngram must be >= 1")
        self.dim = int(dim)
        self.ngram = int(ngram)
        self.seed = int(seed) & _MASK64

    def spec(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "ngram": self.ngram, "seed": self.seed}

    def _grams(self, token: str):
        n = self.ngram
        if len(token) <= n:
            yield token
            return
        for i in range(len(token) - n + 1):
            yield token[i : i + n]

    def encode(self, prompt: str) -> np.ndarray:
        tokens = tokenize(prompt)
        if not tokens:
            raise EmptyPrompt("prompt has no tokens after trimming")
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            for gram in self._grams(token):
                h = stable_hash64(self.seed, gram)
                bucket = h % self.dim
                sign = 1.0 if (h >> 63) & 1 else -1.0
                vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm <= 1e-12:
            raise ZeroVector("hashed prompt cancelled to the zero vector")
        return vec / norm


class FeatureFileProvider:
    """Looks up precomputed embeddings by id from a binary matrix file.

    The matrix uses the repo's binary layout (see :mod:`protoflow.matrixio`)
    and the sidecar id map is a text file with one id per line, where line
    index equals row index.
    """

    kind = "feature-file"

    def __init__(self, matrix_path: str | Path, ids_path: str | Path):
        from .matrixio import read_matrix

        self.matrix_path = str(matrix_path)
        self.ids_path = str(ids_path)
        try:
            self._matrix = read_matrix(matrix_path)
            lines = Path(ids_path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ProviderIo(f"cannot read provider files: {exc}") from exc
        ids = [line.strip() for line in lines if line.strip()]
        if len(ids) != self._matrix.shape[0]:
            raise ShapeMismatch(
                f"id map has {len(ids)} entries but matrix has {self._matrix.shape[0]} rows"
            )
        self._row_of = {ident: i for i, ident in enumerate(ids)}
        self.dim = int(self._matrix.shape[1])

    def spec(self) -> dict:
        return {"kind": self.kind, "matrix": self.matrix_path, "ids": self.ids_path}

    def encode(self, ident: str) -> np.ndarray:
        key = ident.strip()
        if key not in self._row_of:
            raise UnknownId(f"id {key!r} not present in {self.ids_path}")
        return self._matrix[self._row_of[key]].copy()


def encode_text(provider, prompt: str) -> np.ndarray:
    """Encode a prompt (or id, for file providers) into an embedding."""
    return provider.encode(prompt)
