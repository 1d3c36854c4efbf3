import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoflow.core import (DimensionMismatch, EmptyPrompt, FeatureFileProvider,
                            HashTextProvider, ProviderIo, SeededRng, ShapeMismatch,
                            UnknownId, ZeroVector, cosine, encode_text, l2_normalize,
                            stable_hash64, tokenize)
from protoflow.matrixio import write_matrix

finite_vectors = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False),
    min_size=1, max_size=12)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine([1, 0, 0], [1, 0, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]) == 0.0

    def test_oblique(self):
        # dot = 1, norms 1 and sqrt(2)
        assert cosine([1, 0], [1, 1]) == pytest.approx(1 / np.sqrt(2), abs=1e-9)

    def test_symmetric(self):
        u, v = [0.3, -1.2, 4.0], [2.0, 0.5, -0.1]
        assert cosine(u, v) == cosine(v, u)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine([1, 0], [1, 0, 0])

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine([0, 0], [1, 0])

    @settings(max_examples=200, deadline=None)
    @given(finite_vectors)
    def test_self_cosine_is_one(self, values):
        v = np.array(values)
        if np.linalg.norm(v) <= 1e-6:
            return
        assert cosine(l2_normalize(v), l2_normalize(v)) == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(finite_vectors, st.floats(min_value=1e-3, max_value=1e3))
    def test_positive_scale_invariance(self, values, a):
        v = np.array(values)
        if np.linalg.norm(v) <= 1e-6:
            return
        u = np.roll(v, 1) + 1.0
        if np.linalg.norm(u) <= 1e-6:
            return
        assert abs(cosine(a * v, u) - cosine(v, u)) <= 1e-9


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-12)

    def test_already_unit(self):
        np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_zero_raises(self):
        with pytest.raises(ZeroVector):
            l2_normalize([0.0, 0.0])

    def test_norm_within_tolerance(self):
        rng = SeededRng(0)
        for _ in range(50):
            v = rng.normal(size=7)
            assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) <= 1e-6


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("Dense, Rosette-Field!") == ["dense", "rosette", "field"]

    def test_underscore_is_punctuation(self):
        assert tokenize("a_b") == ["a", "b"]

    def test_empty(self):
        assert tokenize("  \t ") == []


class TestHashTextProvider:
    def test_deterministic(self):
        p = HashTextProvider(dim=32, seed=1)
        a = p.encode("crowded nuclei")
        b = p.encode("crowded nuclei")
        np.testing.assert_array_equal(a, b)
        # A fresh provider with the same config produces identical bits.
        c = HashTextProvider(dim=32, seed=1).encode("crowded nuclei")
        np.testing.assert_array_equal(a, c)

    def test_unit_norm(self):
        p = HashTextProvider(dim=24, seed=3)
        for prompt in ("a", "dense rosette field", "x y z w", "1 2 3"):
            assert abs(np.linalg.norm(p.encode(prompt)) - 1.0) <= 1e-6

    def test_one_token_difference_changes_vector(self):
        p = HashTextProvider(dim=64, seed=9)
        a = p.encode("dense rosette field")
        b = p.encode("dense spindle field")
        assert not np.array_equal(a, b)

    def test_empty_prompt(self):
        with pytest.raises(EmptyPrompt):
            HashTextProvider(dim=8).encode("   ")

    def test_restart_stability_frozen_value(self):
        # Frozen output bytes: guards against any drift in tokenization,
        # gram hashing, or normalization across versions/processes.
        p = HashTextProvider(dim=16, ngram=3, seed=42)
        v = p.encode("glandular tissue with crowded nuclei")
        digest = hashlib.sha256(v.tobytes()).hexdigest()
        assert digest == "61442b1f760c3b478a99e4251d3e428dcf0d66459c02e0ef3c1d551ce18a7807"

    def test_shared_tokens_correlate(self):
        p = HashTextProvider(dim=128, seed=5)
        near = cosine(p.encode("dense rosette field"), p.encode("dense rosette region"))
        far = cosine(p.encode("dense rosette field"), p.encode("woven strands"))
        assert near > far


class TestFeatureFileProvider:
    @pytest.fixture
    def stored(self, tmp_path):
        mat = np.array([[1.0, 2.0], [3.0, 4.0]])
        write_matrix(tmp_path / "feats.upbk", mat)
        (tmp_path / "ids.txt").write_text("alpha\nbeta\n", encoding="utf-8")
        return tmp_path

    def test_lookup(self, stored):
        p = FeatureFileProvider(stored / "feats.upbk", stored / "ids.txt")
        np.testing.assert_allclose(p.encode("beta"), [3.0, 4.0])
        assert p.dim == 2

    def test_unknown_id(self, stored):
        p = FeatureFileProvider(stored / "feats.upbk", stored / "ids.txt")
        with pytest.raises(UnknownId):
            p.encode("gamma")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ProviderIo):
            FeatureFileProvider(tmp_path / "nope.upbk", tmp_path / "ids.txt")

    def test_id_count_mismatch(self, stored):
        (stored / "ids.txt").write_text("alpha\n", encoding="utf-8")
        with pytest.raises(ShapeMismatch):
            FeatureFileProvider(stored / "feats.upbk", stored / "ids.txt")

    def test_encode_text_facade(self, stored):
        p = FeatureFileProvider(stored / "feats.upbk", stored / "ids.txt")
        np.testing.assert_allclose(encode_text(p, "alpha"), [1.0, 2.0])


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(123).normal(size=10)
        b = SeededRng(123).normal(size=10)
        np.testing.assert_array_equal(a, b)

    def test_derive_changes_stream(self):
        base = SeededRng(7)
        child_a = base.derive("a").normal(size=4)
        child_b = base.derive("b").normal(size=4)
        assert not np.array_equal(child_a, child_b)

    def test_derive_deterministic(self):
        x = SeededRng(7).derive("stage", 1).uniform()
        y = SeededRng(7).derive("stage", 1).uniform()
        assert x == y

    def test_choice_without_replacement(self):
        rng = SeededRng(0)
        picks = rng.choice_without_replacement([10, 20, 30, 40], 3)
        assert len(picks) == len(set(picks)) == 3
        assert set(picks) <= {10, 20, 30, 40}
        with pytest.raises(ValueError):
            SeededRng(0).choice_without_replacement([1], 2)

    def test_stable_hash64_types(self):
        assert stable_hash64("a", 1) == stable_hash64("a", 1)
        assert stable_hash64("a", 1) != stable_hash64("a", 2)
        assert stable_hash64("ab") != stable_hash64("a", "b")
