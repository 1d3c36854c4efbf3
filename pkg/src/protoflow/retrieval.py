"""Hybrid prototype retrieval: global dense top-k plus rarest-keyword recall.

Global candidates (text index then vision index) come first in the union,
local keyword candidates after, and the deduplicated sequence is clipped
to the prototype budget.  Retrieval is read-only over an immutable bank;
the local sampling stream is seeded per query so concurrent queries cannot
perturb each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bank import PrototypeBank
from .core import (DimensionMismatch, SeededRng, as_vector, encode_text,
                   l2_normalize, stable_hash64, tokenize)

#: Branch-masking modes for the retrieval-component ablation.
RETRIEVAL_MODES = ("text-only", "vision-only", "hybrid-global", "local-only", "global+local")


@dataclass
class RetrievalConfig:
    """Budgets for one hybrid retrieval query.

    ``km`` is the total prototype budget after clipping; ``k_t``/``k_v``
    are the global dense top-k counts; the local branch samples ``n_per``
    prototypes for each of the ``n_kw`` rarest matched keywords.
    """

    km: int = 16
    k_t: int = 4
    k_v: int = 4
    n_kw: int = 4
    n_per: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("km", "k_t", "k_v", "n_kw", "n_per"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class RetrievalResult:
    """Clipped prototype ids with gathered features and per-id provenance."""

    ids: list[int]
    features: np.ndarray
    provenance: list[str] = field(default_factory=list)


def query_seed(seed: int, prompt: str) -> int:
    """Per-query sampling seed: global seed mixed with a stable prompt hash."""
    return stable_hash64("local-retrieval", seed, prompt)


def _top_k(index_matrix: np.ndarray, q: np.ndarray, k: int) -> list[int]:
    if k <= 0 or index_matrix.shape[0] == 0:
        return []
    scores = index_matrix @ q
    # Primary key: score descending; secondary: id ascending.
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return [int(i) for i in order[: min(k, scores.shape[0])]]


def global_retrieve(q, bank: PrototypeBank, k_t: int, k_v: int) -> list[int]:
    """Top-k_t over the text index then top-k_v over the vision index.

    Scores are dot products against unit-norm rows (equivalently cosine);
    ties break toward the lower id.  The concatenation drops duplicate ids,
    keeping the first occurrence.
    """
    vec = as_vector(q, "query")
    if vec.shape[0] != bank.d_q:
        raise DimensionMismatch(f"query dim {vec.shape[0]} != bank d_q {bank.d_q}")
    ids = _top_k(bank.text_index.matrix, vec, k_t) + _top_k(bank.vision_index.matrix, vec, k_v)
    seen: set[int] = set()
    out = []
    for i in ids:
        if i not in seen:
            seen.add(i)
            out.append(i)
    return out


def parse_keywords(prompt: str, inverted, vocab) -> list[str]:
    """Vocabulary terms occurring in the prompt, greedy longest match first.

    The prompt is scanned left to right; at each position the longest
    matching vocabulary phrase wins and consumes its tokens, so sub-grams
    of a matched phrase are not reported separately.  Each term appears at
    most once, in order of first match.
    """
    tokens = tokenize(prompt)
    term_set = set(vocab.terms)
    max_n = vocab.max_term_tokens()
    matched: list[str] = []
    seen: set[str] = set()
    i = 0
    while i < len(tokens):
        for n in range(min(max_n, len(tokens) - i), 0, -1):
            phrase = " ".join(tokens[i : i + n])
            if phrase in term_set:
                if phrase not in seen:
                    seen.add(phrase)
                    matched.append(phrase)
                i += n
                break
        else:
            i += 1
    return matched


def local_retrieve(prompt: str, bank: PrototypeBank, n_kw: int, n_per: int,
                   seed: int) -> list[int]:
    """Sample prototypes for the rarest keywords found in the prompt.

    Matched terms are ranked by ascending posting-list length (ties
    lexicographic); for each of the first ``n_kw`` terms, ``n_per``
    prototypes are drawn uniformly without replacement from its postings
    (fewer if the posting list is shorter).  Draws share one stream seeded
    by ``seed``, consumed in term order.
    """
    return [i for i, _ in _local_provenance(prompt, bank, n_kw, n_per, seed)]


def _local_provenance(prompt: str, bank: PrototypeBank, n_kw: int, n_per: int,
                      seed: int) -> list[tuple[int, str]]:
    """local_retrieve plus the term each id was drawn for."""
    if n_kw <= 0 or n_per <= 0:
        return []
    terms = parse_keywords(prompt, bank.inverted, bank.vocab)
    terms.sort(key=lambda t: (bank.inverted.rarity(t), t))
    rng = SeededRng(seed)
    out: list[tuple[int, str]] = []
    for term in terms[:n_kw]:
        pool = bank.inverted.postings.get(term, [])
        if not pool:
            continue
        for i in rng.choice_without_replacement(pool, min(n_per, len(pool))):
            out.append((int(i), term))
    return out


def masked_config(cfg: RetrievalConfig, mode: str) -> RetrievalConfig:
    """Zero out the branches a retrieval-ablation mode disables."""
    if mode not in RETRIEVAL_MODES:
        raise ValueError(f"unknown retrieval mode {mode!r}")
    kw = dict(km=cfg.km, k_t=cfg.k_t, k_v=cfg.k_v, n_kw=cfg.n_kw, n_per=cfg.n_per,
              seed=cfg.seed)
    if mode == "text-only":
        kw.update(k_v=0, n_kw=0)
    elif mode == "vision-only":
        kw.update(k_t=0, n_kw=0)
    elif mode == "hybrid-global":
        kw.update(n_kw=0)
    elif mode == "local-only":
        kw.update(k_t=0, k_v=0)
    return RetrievalConfig(**kw)


def hybrid_retrieve(prompt: str, bank: PrototypeBank, cfg: RetrievalConfig,
                    provider) -> RetrievalResult:
    """Full query: encode, global + local recall, union, clip, gather.

    The union keeps global-text ids first, then global-vision, then local,
    drops duplicates at their first occurrence, and truncates to ``km``.
    No padding happens when fewer than ``km`` ids are found; downstream
    conditioning accepts variable-length prototype segments.
    """
    if cfg.km == 0:
        return RetrievalResult(ids=[], features=np.zeros((0, bank.d_p)), provenance=[])
    q = l2_normalize(encode_text(provider, prompt))
    if q.shape[0] != bank.d_q:
        raise DimensionMismatch(f"provider dim {q.shape[0]} != bank d_q {bank.d_q}")

    tagged: list[tuple[int, str]] = []
    n_text = min(cfg.k_t, bank.size)
    for pos, i in enumerate(global_retrieve(q, bank, cfg.k_t, cfg.k_v)):
        tagged.append((i, "global-text" if pos < n_text else "global-vision"))
    # A vision id equal to a text id was deduplicated inside global_retrieve,
    # so position against n_text still identifies the branch.
    tagged.extend((i, f"local({term})") for i, term in _local_provenance(
        prompt, bank, cfg.n_kw, cfg.n_per, query_seed(cfg.seed, prompt)))

    ids: list[int] = []
    provenance: list[str] = []
    seen: set[int] = set()
    for i, tag in tagged:
        if i in seen:
            continue
        seen.add(i)
        ids.append(i)
        provenance.append(tag)
        if len(ids) == cfg.km:
            break
    features = bank.proto[ids] if ids else np.zeros((0, bank.d_p))
    return RetrievalResult(ids=ids, features=np.array(features, copy=True),
                           provenance=provenance)
