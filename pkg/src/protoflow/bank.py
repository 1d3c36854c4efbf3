"""Prototype bank: dense indices, keyword vocabulary, inverted index, features.

A bank is a frozen instance store.  Construction is single-writer; once
loaded it is immutable and can be shared by any number of retrieval
workers.  On-disk layout (one directory):

    manifest.json   version, M, d_q, d_p, rng algorithm, per-file checksums
    text.idx        dense text index, binary matrix (float32)
    vision.idx      dense vision index, binary matrix (float32)
    proto.bin       prototype feature matrix (float32)
    vocab.txt       one term per line, rank order
    inverted.json   term -> ascending id array
    captions.txt    one caption per line
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RNG_ALGORITHM, ZeroVector, ShapeMismatch, as_feature_matrix, ngrams, tokenize
from .matrixio import quantize_f32, read_matrix, sha256_file, write_matrix

BANK_FORMAT_VERSION = 1
_BANK_FILES = ("text.idx", "vision.idx", "proto.bin", "vocab.txt", "inverted.json", "captions.txt")


class EmptyCorpus(ValueError):
    """Vocabulary extraction got no captions (or no tokens at all)."""


class VersionMismatch(ValueError):
    """Bank directory was written by an incompatible format version."""


class ChecksumMismatch(ValueError):
    """A bank file does not match the checksum recorded in the manifest."""


@dataclass
class DenseIndex:
    """L2-normalized embedding matrix for one modality (text or vision)."""

    matrix: np.ndarray
    modality: str

    def __post_init__(self):
        norms = np.linalg.norm(self.matrix, axis=1)
        if self.matrix.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError(f"{self.modality} index rows are not unit-norm")


@dataclass
class Vocabulary:
    """Ranked keyword phrases with per-term caption counts.

    ``doc_freq[i]`` is the number of corpus captions containing
    ``terms[i]`` as a whole-token phrase.  Within a loaded bank the counts
    refer to the bank's own captions.
    """

    terms: list[str]
    doc_freq: list[int]

    def __post_init__(self):
        if len(self.terms) != len(set(self.terms)):
            raise ValueError("vocabulary terms must be unique")
        if len(self.terms) != len(self.doc_freq):
            raise ShapeMismatch("terms and doc_freq lengths differ")

    def max_term_tokens(self) -> int:
        return max((len(t.split()) for t in self.terms), default=0)


@dataclass
class InvertedIndex:
    """term -> strictly ascending list of prototype ids holding that term."""

    postings: dict[str, list[int]]

    def rarity(self, term: str) -> int:
        return len(self.postings.get(term, []))


@dataclass
class PrototypeBank:
    text_index: DenseIndex
    vision_index: DenseIndex
    inverted: InvertedIndex
    vocab: Vocabulary
    proto: np.ndarray
    captions: list[str]
    manifest: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.proto.shape[0])

    @property
    def d_q(self) -> int:
        return int(self.text_index.matrix.shape[1])

    @property
    def d_p(self) -> int:
        return int(self.proto.shape[1])

    def __post_init__(self):
        m = self.size
        parts = {
            "text index": self.text_index.matrix.shape[0],
            "vision index": self.vision_index.matrix.shape[0],
            "captions": len(self.captions),
        }
        for name, count in parts.items():
            if count != m:
                raise ShapeMismatch(f"{name} has {count} entries, prototype matrix has {m}")
        if self.text_index.matrix.shape[1] != self.vision_index.matrix.shape[1]:
            raise ShapeMismatch("text and vision indices disagree on embedding width")
        for term, ids in self.inverted.postings.items():
            if any(not 0 <= i < m for i in ids):
                raise ShapeMismatch(f"posting list for {term!r} references id outside bank")
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise ValueError(f"posting list for {term!r} is not strictly ascending")


def build_dense_index(vectors, modality: str) -> DenseIndex:
    """Normalize rows and freeze them at float32 precision.

    Quantization keeps in-memory matrices bit-identical to what a save/load
    round-trip produces.
    """
    arr = as_feature_matrix(vectors, f"{modality} vectors")
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ZeroVector(f"{modality} row {int(bad[0])} has (near-)zero norm")
    return DenseIndex(matrix=quantize_f32(arr / norms[:, None]), modality=modality)


def extract_vocabulary(captions, top_n: int, max_ngram: int,
                       allow_terms=None) -> Vocabulary:
    """Rank token n-grams (1..max_ngram) by caption frequency.

    Candidates are lowercase whole-token phrases.  Ranking is caption
    frequency descending, then lexicographic ascending, truncated to
    ``top_n``.  ``allow_terms``, when given, filters candidates to a
    curated list (stands in for an external review pass).
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if max_ngram < 1:
        raise ValueError("max_ngram must be >= 1")
    captions = list(captions)
    if not captions:
        raise EmptyCorpus("no captions")
    allowed = None
    if allow_terms is not None:
        allowed = {" ".join(tokenize(t)) for t in allow_terms}
        allowed.discard("")
    counts: dict[str, int] = {}
    for caption in captions:
        seen = set(ngrams(tokenize(caption), max_ngram))
        for gram in seen:
            if allowed is not None and gram not in allowed:
                continue
            counts[gram] = counts.get(gram, 0) + 1
    if not counts:
        raise EmptyCorpus("captions produced no candidate terms")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:top_n]
    return Vocabulary(terms=ranked, doc_freq=[counts[t] for t in ranked])


def build_inverted_index(captions, vocab: Vocabulary) -> InvertedIndex:
    """Map every vocabulary term to the captions containing it.

    Matching is case-folded whole-token phrase containment; empty posting
    lists are retained so rarity lookups stay total.
    """
    if not vocab.terms:
        raise ValueError("vocabulary is empty")
    term_set = set(vocab.terms)
    max_n = vocab.max_term_tokens()
    postings: dict[str, list[int]] = {t: [] for t in vocab.terms}
    for i, caption in enumerate(captions):
        present = set(ngrams(tokenize(caption), max_n)) & term_set
        for term in present:
            postings[term].append(i)
    return InvertedIndex(postings=postings)


def build_bank(captions, text_vectors, vision_vectors, proto_features, *,
               top_n: int = 5000, max_ngram: int = 2, allow_terms=None,
               vocab_corpus=None, seed: int = 0,
               provider_spec: dict | None = None) -> PrototypeBank:
    """Assemble a frozen bank from aligned captions and feature rows.

    The vocabulary may be extracted from a larger ``vocab_corpus``; its
    doc_freq is then re-bound to the bank's own captions so that keyword
    rarity reflects the postings actually used at retrieval time.
    """
    captions = [str(c) for c in captions]
    vocab = extract_vocabulary(vocab_corpus if vocab_corpus is not None else captions,
                               top_n=top_n, max_ngram=max_ngram, allow_terms=allow_terms)
    inverted = build_inverted_index(captions, vocab)
    vocab = Vocabulary(terms=vocab.terms,
                       doc_freq=[len(inverted.postings[t]) for t in vocab.terms])
    text_index = build_dense_index(text_vectors, "text")
    vision_index = build_dense_index(vision_vectors, "vision")
    proto = quantize_f32(as_feature_matrix(proto_features, "prototype features"))
    manifest = {
        "format_version": BANK_FORMAT_VERSION,
        "M": int(proto.shape[0]),
        "d_q": int(text_index.matrix.shape[1]),
        "d_p": int(proto.shape[1]),
        "seed": int(seed),
        "rng_algorithm": RNG_ALGORITHM,
    }
    if provider_spec is not None:
        manifest["provider"] = dict(provider_spec)
    return PrototypeBank(text_index=text_index, vision_index=vision_index,
                         inverted=inverted, vocab=vocab, proto=proto,
                         captions=captions, manifest=manifest)


def save_bank(bank: PrototypeBank, directory: str | Path) -> None:
    """Write the bank directory; load_bank(save_bank(b)) is bit-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for caption in bank.captions:
        if "\n" in caption or "\r" in caption:
            raise ValueError("captions must not contain newlines")
    write_matrix(directory / "text.idx", bank.text_index.matrix)
    write_matrix(directory / "vision.idx", bank.vision_index.matrix)
    write_matrix(directory / "proto.bin", bank.proto)
    (directory / "vocab.txt").write_text(
        "".join(t + "\n" for t in bank.vocab.terms), encoding="utf-8")
    (directory / "inverted.json").write_text(
        json.dumps(bank.inverted.postings, sort_keys=True), encoding="utf-8")
    (directory / "captions.txt").write_text(
        "".join(c + "\n" for c in bank.captions), encoding="utf-8")
    manifest = dict(bank.manifest)
    manifest.update({
        "format_version": BANK_FORMAT_VERSION,
        "M": bank.size,
        "d_q": bank.d_q,
        "d_p": bank.d_p,
        "rng_algorithm": RNG_ALGORITHM,
        "files": {name: sha256_file(directory / name) for name in _BANK_FILES},
    })
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_bank(directory: str | Path) -> PrototypeBank:
    """Load and fully validate a bank directory.

    Checks, in order: manifest format version, per-file checksums, matrix
    shapes against the manifest, and cross-component consistency.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != BANK_FORMAT_VERSION:
        raise VersionMismatch(f"bank format {version!r}, expected {BANK_FORMAT_VERSION}")
    for name, digest in manifest.get("files", {}).items():
        actual = sha256_file(directory / name)
        if actual != digest:
            raise ChecksumMismatch(f"{name}: stored {digest[:12]}.., found {actual[:12]}..")
    text = read_matrix(directory / "text.idx", expect_version=1)
    vision = read_matrix(directory / "vision.idx", expect_version=1)
    proto = read_matrix(directory / "proto.bin", expect_version=1)
    m, d_q, d_p = manifest["M"], manifest["d_q"], manifest["d_p"]
    for name, mat, want in (("text.idx", text, (m, d_q)),
                            ("vision.idx", vision, (m, d_q)),
                            ("proto.bin", proto, (m, d_p))):
        if mat.shape != tuple(want):
            raise ShapeMismatch(f"{name} has shape {mat.shape}, manifest says {tuple(want)}")
    captions = (directory / "captions.txt").read_text(encoding="utf-8").splitlines()
    if len(captions) != m:
        raise ShapeMismatch(f"captions.txt has {len(captions)} lines, manifest says {m}")
    terms = [t for t in (directory / "vocab.txt").read_text(encoding="utf-8").splitlines()]
    postings_raw = json.loads((directory / "inverted.json").read_text(encoding="utf-8"))
    if set(postings_raw) != set(terms):
        raise ShapeMismatch("inverted.json terms do not match vocab.txt")
    inverted = InvertedIndex(postings={t: [int(i) for i in postings_raw[t]] for t in terms})
    vocab = Vocabulary(terms=terms, doc_freq=[len(inverted.postings[t]) for t in terms])
    return PrototypeBank(
        text_index=DenseIndex(matrix=text, modality="text"),
        vision_index=DenseIndex(matrix=vision, modality="vision"),
        inverted=inverted, vocab=vocab, proto=proto, captions=captions,
        manifest=manifest)
