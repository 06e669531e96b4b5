import threading

import numpy as np
import pytest

from efh.textenc import (CLS_ID, LanguageCache, ROLE_LABEL, ROLE_PROMPT,
                         build_text_encoder, cache_stats, tokenize)


class TestTokenize:
    def test_byte_identity(self):
        assert tokenize("ab") == [CLS_ID, 97, 98]

    def test_deterministic(self):
        assert tokenize("same text") == tokenize("same text")

    def test_truncation_keeps_cls(self):
        ids = tokenize("x" * 500, max_len=16)
        assert len(ids) == 16
        assert ids[0] == CLS_ID

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tokenize("   ")


class TestEncodeLabels:
    def setup_method(self):
        self.enc = build_text_encoder(seed=5)

    def test_per_label_independence(self):
        a = self.enc.encode_labels(["cat", "dog"])
        b = self.enc.encode_labels(["dog", "cat"])
        assert np.array_equal(a.embeddings.data[0], b.embeddings.data[1])
        assert np.array_equal(a.embeddings.data[1], b.embeddings.data[0])

    def test_cache_hits_bit_identical(self):
        cache = LanguageCache()
        first = self.enc.encode_labels(["cat", "dog"], cache)
        assert cache.stats()["misses"] == 2
        second = self.enc.encode_labels(["cat", "dog"], cache)
        assert cache.stats()["hits"] == 2
        assert np.array_equal(first.embeddings.data.view(np.uint8),
                              second.embeddings.data.view(np.uint8))

    def test_cold_vs_warm_equal(self):
        cold = self.enc.encode_labels(["cat"]).embeddings.data
        cache = LanguageCache()
        self.enc.encode_labels(["cat"], cache)
        warm = self.enc.encode_labels(["cat"], cache).embeddings.data
        assert np.array_equal(cold, warm)

    def test_cls_row_used(self):
        full = self.enc.encode_text("cat").data
        lab = self.enc.encode_labels(["cat"]).embeddings.data
        assert np.array_equal(lab[0], full[0])

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            self.enc.encode_labels([])


class TestEncodePrompt:
    def setup_method(self):
        self.enc = build_text_encoder(seed=6)

    def test_row_count_matches_tokens(self):
        pe = self.enc.encode_prompt("find the cat")
        assert pe.length == len(tokenize("find the cat"))
        assert pe.valid.all()

    def test_single_miss_then_hits(self):
        cache = LanguageCache()
        a = self.enc.encode_prompt("a prompt", cache)
        b = self.enc.encode_prompt("a prompt", cache)
        stats = cache.stats()
        assert stats["misses"] == 1
        assert stats["hits"] == 1
        assert np.array_equal(a.embeddings.data.view(np.uint8),
                              b.embeddings.data.view(np.uint8))

    def test_prefix_sharing_keys_whole_string(self):
        cache = LanguageCache()
        self.enc.encode_prompt("detect cats", cache)
        self.enc.encode_prompt("detect cats and dogs", cache)
        assert cache.stats()["entries"] == 2
        assert cache.stats()["misses"] == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            self.enc.encode_prompt(" ")


class TestDecoupling:
    def test_labels_invariant_to_prompts(self):
        enc = build_text_encoder(seed=7)
        before = enc.encode_labels(["cup"]).embeddings.data.copy()
        enc.encode_prompt("a totally different task prompt")
        after = enc.encode_labels(["cup"]).embeddings.data
        assert np.array_equal(before, after)

    def test_cache_transparency(self):
        enc = build_text_encoder(seed=8)
        cache = LanguageCache()
        seq = [("p", "where is the dog"), ("l", "dog"), ("p", "where is the dog"),
               ("l", "cat"), ("l", "dog")]
        cached, plain = [], []
        for role, text in seq:
            if role == "p":
                cached.append(enc.encode_prompt(text, cache).embeddings.data)
                plain.append(enc.encode_prompt(text).embeddings.data)
            else:
                cached.append(enc.encode_labels([text], cache).embeddings.data)
                plain.append(enc.encode_labels([text]).embeddings.data)
        for a, b in zip(cached, plain):
            assert np.array_equal(a.view(np.uint8), b.view(np.uint8))


class TestLanguageCache:
    def test_fresh_counters(self):
        assert cache_stats(LanguageCache()) == {
            "hits": 0, "misses": 0, "entries": 0, "evictions": 0}

    def test_miss_then_hit(self):
        cache = LanguageCache()
        assert cache.lookup(ROLE_LABEL, "k") is None
        cache.insert(ROLE_LABEL, "k", np.ones(3))
        assert cache.lookup(ROLE_LABEL, "k") is not None
        assert cache.stats() == {"hits": 1, "misses": 1, "entries": 1,
                                 "evictions": 0}

    def test_lru_eviction(self):
        cache = LanguageCache(capacity=2)
        cache.insert(ROLE_LABEL, "a", np.ones(1))
        cache.insert(ROLE_LABEL, "b", np.ones(1))
        cache.lookup(ROLE_LABEL, "a")          # a becomes most recent
        cache.insert(ROLE_LABEL, "c", np.ones(1))
        stats = cache.stats()
        assert stats["evictions"] == 1
        assert stats["entries"] == 2
        assert cache.lookup(ROLE_LABEL, "b") is None   # b was least recent
        assert cache.lookup(ROLE_LABEL, "a") is not None

    def test_roles_are_distinct_keys(self):
        cache = LanguageCache()
        cache.insert(ROLE_LABEL, "same", np.zeros(2))
        assert cache.lookup(ROLE_PROMPT, "same") is None

    def test_dump_load_roundtrip(self, tmp_path):
        enc = build_text_encoder(seed=9)
        cache = LanguageCache()
        enc.encode_prompt("warm me", cache)
        enc.encode_labels(["cat", "dog"], cache)
        path = tmp_path / "cache.bin"
        cache.dump(path)
        fresh = LanguageCache()
        fresh.load(path)
        assert fresh.stats()["entries"] == 3
        warm = enc.encode_labels(["cat"], fresh)
        assert fresh.stats()["hits"] == 1
        cold = enc.encode_labels(["cat"])
        assert np.array_equal(warm.embeddings.data, cold.embeddings.data)

    def test_concurrent_readers_and_writers(self):
        cache = LanguageCache(capacity=64)
        errors = []

        def writer(tag):
            for i in range(200):
                cache.insert(ROLE_LABEL, f"{tag}-{i}", np.full(4, i, dtype=np.float64))

        def reader(tag):
            for i in range(200):
                hit = cache.lookup(ROLE_LABEL, f"{tag}-{i}")
                if hit is not None and not np.all(hit == hit[0]):
                    errors.append(i)  # torn value

        threads = [threading.Thread(target=writer, args=("w1",)),
                   threading.Thread(target=writer, args=("w2",)),
                   threading.Thread(target=reader, args=("w1",)),
                   threading.Thread(target=reader, args=("w2",))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors

    def test_determinism(self):
        a = build_text_encoder(seed=10).encode_text("stable").data
        b = build_text_encoder(seed=10).encode_text("stable").data
        assert np.array_equal(a, b)
