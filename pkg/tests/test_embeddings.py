"""Embedding store, similarity conventions, and toy embedder tests."""

import numpy as np
import pytest

from covr_forge.embeddings import (
    EmbeddingError,
    EmbeddingStore,
    cosine,
    load_embeddings,
    normalized_similarity,
    save_embeddings,
    toy_embed,
)


def unit(*xs):
    v = np.array(xs, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestSimilarity:
    def test_cosine_basic(self):
        u = unit(1, 0)
        assert cosine(u, u) == pytest.approx(1.0, abs=1e-12)
        assert cosine(u, -u) == pytest.approx(-1.0, abs=1e-12)
        assert cosine(unit(1, 0), unit(0, 1)) == pytest.approx(0.0, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(EmbeddingError, match="dimension mismatch"):
            cosine(unit(1, 0), unit(1, 0, 0))

    def test_normalized_similarity(self):
        u = unit(1, 0)
        assert normalized_similarity(u, u) == pytest.approx(1.0)
        assert normalized_similarity(u, -u) == pytest.approx(0.0)
        assert normalized_similarity(unit(1, 0), unit(0, 1)) == pytest.approx(0.5)

    def test_symmetry_and_affine_relation(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(50):
            u = rng.standard_normal(8)
            v = rng.standard_normal(8)
            u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
            assert cosine(u, v) == pytest.approx(cosine(v, u), abs=1e-12)
            assert normalized_similarity(u, v) == pytest.approx((1 + cosine(u, v)) / 2, abs=1e-12)
            assert np.abs(cosine(u, v)) <= 1 + 1e-9


class TestToyEmbed:
    def test_deterministic(self):
        a = toy_embed("a b c", 32)
        assert np.array_equal(a, toy_embed("a b c", 32))
        assert cosine(a, toy_embed("a b c", 32)) == pytest.approx(1.0, abs=1e-6)

    def test_unit_norm(self):
        for text in ("", "one", "a b c d e"):
            assert np.linalg.norm(toy_embed(text, 16)) == pytest.approx(1.0, abs=1e-4)

    def test_dim_too_small(self):
        with pytest.raises(EmbeddingError):
            toy_embed("x", 1)

    def test_shared_tokens_raise_cosine(self):
        # Monte-Carlo: one-token-different pairs vs fully disjoint pairs
        rng = np.random.Generator(np.random.PCG64(5))
        vocab = [f"tok{i}" for i in range(200)]
        near, far = [], []
        for _ in range(1000):
            base = rng.choice(200, size=5, replace=False)
            a = " ".join(vocab[i] for i in base)
            swapped = list(base)
            swapped[2] = (max(base) + 1 + int(rng.integers(100))) % 200
            b = " ".join(vocab[i] for i in swapped)
            other = [(i + 100) % 200 for i in base]
            c = " ".join(vocab[i] for i in other)
            near.append(cosine(toy_embed(a, 64), toy_embed(b, 64)))
            far.append(cosine(toy_embed(a, 64), toy_embed(c, 64)))
        assert np.mean(near) > np.mean(far) + 0.3


class TestStoreFormat:
    def make_store(self, dim=6, n=3):
        store = EmbeddingStore(dim=dim)
        rng = np.random.Generator(np.random.PCG64(1))
        for i in range(n):
            store.add(f"id{i}", rng.standard_normal(dim))
        return store

    def test_roundtrip_bit_exact(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "s.cvem"
        save_embeddings(store, path)
        loaded = load_embeddings(path)
        assert loaded.dim == store.dim and loaded.ids() == store.ids()
        for key in store.ids():
            assert np.array_equal(loaded.get(key), store.get(key))
        # a second save/load cycle is a fixed point
        path2 = tmp_path / "s2.cvem"
        save_embeddings(loaded, path2)
        assert path.read_bytes()[4:] == path2.read_bytes()[4:]
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_store_roundtrip(self, tmp_path):
        store = EmbeddingStore(dim=4)
        path = tmp_path / "empty.cvem"
        save_embeddings(store, path)
        loaded = load_embeddings(path)
        assert loaded.dim == 4 and len(loaded) == 0

    def test_unicode_and_frame_ids(self, tmp_path):
        store = EmbeddingStore(dim=3)
        store.add("vidé#2", [1.0, 2.0, 3.0])
        path = tmp_path / "s.cvem"
        save_embeddings(store, path)
        assert load_embeddings(path).get("vidé#2") is not None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cvem"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(EmbeddingError, match="bad magic"):
            load_embeddings(path)

    def test_truncated(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "s.cvem"
        save_embeddings(store, path)
        (tmp_path / "t.cvem").write_bytes(path.read_bytes()[:-5])
        with pytest.raises(EmbeddingError, match="truncated"):
            load_embeddings(tmp_path / "t.cvem")

    def test_version_mismatch(self, tmp_path):
        store = self.make_store()
        path = tmp_path / "s.cvem"
        save_embeddings(store, path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        (tmp_path / "v.cvem").write_bytes(bytes(data))
        with pytest.raises(EmbeddingError, match="version"):
            load_embeddings(tmp_path / "v.cvem")

    def test_duplicate_id(self):
        store = EmbeddingStore(dim=2)
        store.add("x", [1.0, 0.0])
        with pytest.raises(EmbeddingError, match="duplicate"):
            store.add("x", [0.0, 1.0])

    def test_zero_norm_rejected(self):
        store = EmbeddingStore(dim=2)
        with pytest.raises(EmbeddingError, match="zero-norm.*zv"):
            store.add("zv", [0.0, 0.0])

    def test_vectors_normalized_at_add(self):
        store = EmbeddingStore(dim=3)
        store.add("x", [3.0, 0.0, 4.0])
        assert np.linalg.norm(store.get("x")) == pytest.approx(1.0, abs=1e-4)

    def test_missing_id_error(self):
        store = EmbeddingStore(dim=2)
        with pytest.raises(EmbeddingError, match="missing embedding for 'nope'"):
            store.get("nope")
