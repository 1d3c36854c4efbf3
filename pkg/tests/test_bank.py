import json

import numpy as np
import pytest

from protoflow.bank import (ChecksumMismatch, EmptyCorpus, VersionMismatch, Vocabulary,
                            build_bank, build_dense_index, build_inverted_index,
                            extract_vocabulary, load_bank, save_bank)
from protoflow.core import SeededRng, ShapeMismatch, ZeroVector, ngrams, tokenize
from protoflow.matrixio import CodecError, read_matrix, write_matrix

CAPTIONS = [
    "dense rosette field with ringed cores",
    "sparse spindle pattern with woven strands",
    "Dense Rosette texture with clustered cores",
    "uniform lattice region with aligned strands",
    "mixed nodule field with ringed cores",
]


def _caption_vectors(captions, dim=8, seed=0):
    rng = SeededRng(seed)
    return rng.normal(size=(len(captions), dim)) + 1e-3


def naive_postings(captions, term):
    """Independent whole-token phrase scan."""
    n = len(term.split())
    out = []
    for i, caption in enumerate(captions):
        if term in ngrams(tokenize(caption), n):
            out.append(i)
    return out


class TestDenseIndex:
    def test_unit_rows_unchanged(self):
        rows = np.eye(3)
        index = build_dense_index(rows, "text")
        np.testing.assert_allclose(index.matrix, rows, atol=1e-6)

    def test_three_four_normalized(self):
        index = build_dense_index(np.array([[3.0, 4.0]]), "vision")
        np.testing.assert_allclose(index.matrix[0], [0.6, 0.8], atol=1e-6)

    def test_zero_row_named(self):
        with pytest.raises(ZeroVector, match="row 1"):
            build_dense_index(np.array([[1.0, 0.0], [0.0, 0.0]]), "text")

    def test_all_rows_unit(self):
        rng = SeededRng(1)
        index = build_dense_index(rng.normal(size=(40, 6)), "vision")
        norms = np.linalg.norm(index.matrix, axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-6


class TestVocabulary:
    def test_counting(self):
        vocab = extract_vocabulary(["a b", "a c"], top_n=1, max_ngram=1)
        assert vocab.terms == ["a"]
        assert vocab.doc_freq == [2]

    def test_single_caption(self):
        vocab = extract_vocabulary(["x"], top_n=10, max_ngram=2)
        assert vocab.terms == ["x"]

    def test_rank_frequency_then_lexicographic(self):
        vocab = extract_vocabulary(["b a", "b c", "a q"], top_n=4, max_ngram=1)
        # a and b tie at 2 captions; lexicographic breaks the tie.
        assert vocab.terms[:2] == ["a", "b"]

    def test_caption_frequency_not_term_frequency(self):
        vocab = extract_vocabulary(["a a a b", "b"], top_n=2, max_ngram=1)
        assert vocab.terms == ["b", "a"]
        assert vocab.doc_freq == [2, 1]

    def test_ngrams_included(self):
        vocab = extract_vocabulary(["woven strands here", "woven strands there"],
                                   top_n=50, max_ngram=2)
        assert "woven strands" in vocab.terms

    def test_allow_list_filters(self):
        vocab = extract_vocabulary(CAPTIONS, top_n=100, max_ngram=2,
                                   allow_terms=["ringed cores", "spindle"])
        assert set(vocab.terms) == {"ringed cores", "spindle"}

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            extract_vocabulary([], top_n=5, max_ngram=1)

    def test_deterministic(self):
        a = extract_vocabulary(CAPTIONS, top_n=20, max_ngram=2)
        b = extract_vocabulary(CAPTIONS, top_n=20, max_ngram=2)
        assert a.terms == b.terms and a.doc_freq == b.doc_freq

    def test_unique_terms_enforced(self):
        with pytest.raises(ValueError):
            Vocabulary(terms=["a", "a"], doc_freq=[1, 1])


class TestInvertedIndex:
    def test_postings_match_naive_scan(self):
        vocab = extract_vocabulary(CAPTIONS, top_n=100, max_ngram=2)
        index = build_inverted_index(CAPTIONS, vocab)
        for term in vocab.terms:
            assert index.postings[term] == naive_postings(CAPTIONS, term)

    def test_case_folded_phrase_match(self):
        vocab = Vocabulary(terms=["dense rosette"], doc_freq=[0])
        index = build_inverted_index(CAPTIONS, vocab)
        assert index.postings["dense rosette"] == [0, 2]

    def test_empty_posting_retained(self):
        vocab = Vocabulary(terms=["absent phrase"], doc_freq=[0])
        index = build_inverted_index(CAPTIONS, vocab)
        assert index.postings["absent phrase"] == []

    def test_whole_token_not_substring(self):
        vocab = Vocabulary(terms=["core"], doc_freq=[0])
        index = build_inverted_index(["ringed cores everywhere"], vocab)
        assert index.postings["core"] == []


def _toy_bank(seed=0):
    text = _caption_vectors(CAPTIONS, dim=8, seed=seed)
    vision = _caption_vectors(CAPTIONS, dim=8, seed=seed + 1)
    proto = SeededRng(seed + 2).normal(size=(len(CAPTIONS), 4))
    return build_bank(CAPTIONS, text, vision, proto, top_n=30, max_ngram=2, seed=seed)


class TestBankPersistence:
    def test_round_trip_exact(self, tmp_path):
        bank = _toy_bank()
        save_bank(bank, tmp_path / "store")
        loaded = load_bank(tmp_path / "store")
        np.testing.assert_array_equal(loaded.text_index.matrix, bank.text_index.matrix)
        np.testing.assert_array_equal(loaded.vision_index.matrix, bank.vision_index.matrix)
        np.testing.assert_array_equal(loaded.proto, bank.proto)
        assert loaded.captions == bank.captions
        assert loaded.inverted.postings == bank.inverted.postings
        assert loaded.vocab.terms == bank.vocab.terms
        assert loaded.vocab.doc_freq == bank.vocab.doc_freq

    def test_double_round_trip_bit_identical(self, tmp_path):
        bank = _toy_bank()
        save_bank(bank, tmp_path / "a")
        save_bank(load_bank(tmp_path / "a"), tmp_path / "b")
        for name in ("text.idx", "vision.idx", "proto.bin", "vocab.txt",
                     "inverted.json", "captions.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_manifest_m_edit_detected(self, tmp_path):
        save_bank(_toy_bank(), tmp_path / "store")
        manifest_path = tmp_path / "store" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["M"] += 1
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ShapeMismatch):
            load_bank(tmp_path / "store")

    def test_corrupt_byte_detected(self, tmp_path):
        save_bank(_toy_bank(), tmp_path / "store")
        target = tmp_path / "store" / "proto.bin"
        blob = bytearray(target.read_bytes())
        blob[-1] ^= 0xFF
        target.write_bytes(bytes(blob))
        with pytest.raises(ChecksumMismatch, match="proto.bin"):
            load_bank(tmp_path / "store")

    def test_version_mismatch(self, tmp_path):
        save_bank(_toy_bank(), tmp_path / "store")
        manifest_path = tmp_path / "store" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 99
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(VersionMismatch):
            load_bank(tmp_path / "store")

    def test_caption_newline_rejected(self, tmp_path):
        bank = _toy_bank()
        bank.captions[0] = "two\nlines"
        with pytest.raises(ValueError):
            save_bank(bank, tmp_path / "store")


class TestMatrixCodec:
    def test_round_trip_f32(self, tmp_path):
        mat = np.array([[1.5, -2.25], [0.0, 3.125]])
        write_matrix(tmp_path / "m.upbk", mat)
        np.testing.assert_array_equal(read_matrix(tmp_path / "m.upbk"), mat)

    def test_round_trip_f64(self, tmp_path):
        rng = SeededRng(0)
        mat = rng.normal(size=(3, 5))
        write_matrix(tmp_path / "m.upbk", mat, version=2)
        np.testing.assert_array_equal(read_matrix(tmp_path / "m.upbk"), mat)

    def test_header_layout(self, tmp_path):
        write_matrix(tmp_path / "m.upbk", np.zeros((2, 3)))
        blob = (tmp_path / "m.upbk").read_bytes()
        assert blob[:4] == b"UPBK"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:16], "little") == 2
        assert int.from_bytes(blob[16:24], "little") == 3
        assert len(blob) == 24 + 2 * 3 * 4

    def test_truncation_detected(self, tmp_path):
        write_matrix(tmp_path / "m.upbk", np.zeros((2, 3)))
        blob = (tmp_path / "m.upbk").read_bytes()
        (tmp_path / "m.upbk").write_bytes(blob[:-2])
        with pytest.raises(CodecError):
            read_matrix(tmp_path / "m.upbk")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.upbk").write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(CodecError):
            read_matrix(tmp_path / "m.upbk")
