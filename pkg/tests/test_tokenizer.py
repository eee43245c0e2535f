from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bertdst.data_io import generate_synthetic_corpus
from bertdst.errors import CandidateTooLong, EmptyCorpus, TargetSizeTooSmall
from bertdst.tokenizer import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    UNK,
    PackedInput,
    TokenSequence,
    Vocab,
    build_vocab,
    detokenize,
    pack_pair,
    pack_single,
    tokenize,
)

from oracles import word_counts


def seq(*ids):
    return TokenSequence(tuple(f"t{i}" for i in ids), tuple(ids))


def check_packed(p: PackedInput, n_sep: int, max_len: int):
    assert p.M == len(p.segment_ids) == len(p.attention_mask) <= max_len
    n = p.length
    assert p.attention_mask == (1,) * n + (0,) * (p.M - n)
    assert p.ids[0] == CLS_ID
    assert sum(1 for t in p.ids[:n] if t == SEP_ID) == n_sep
    assert all(t == PAD_ID for t in p.ids[n:])
    first_sep = p.ids.index(SEP_ID)
    assert all(s == 0 for s in p.segment_ids[: first_sep + 1])
    assert all(s == 1 for s in p.segment_ids[first_sep + 1:n])
    assert all(s == 0 for s in p.segment_ids[n:])


class TestBuildVocab:
    def test_minimal_corpus(self):
        vocab = build_vocab(["a b", "a"], 10)
        assert set(vocab.id_to_token) >= set(SPECIAL_TOKENS) | {"a", "b"}
        assert vocab.id_to_token[:5] == SPECIAL_TOKENS

    def test_frequent_whole_word(self):
        vocab = build_vocab(["chinese"] * 5, 20)
        assert "chinese" in vocab

    def test_size_and_top_words_match_frequency_oracle(self):
        corpus = generate_synthetic_corpus(3, 1000)
        vocab = build_vocab(corpus, 500)
        assert len(vocab) == 500
        counts = word_counts(corpus)
        top = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:100]]
        assert all(w in vocab for w in top)
        # no whole word left out while a rarer whole word got in
        included = [counts[w] for w in counts if w in vocab and len(w) > 1]
        excluded = [counts[w] for w in counts if w not in vocab]
        if excluded:
            assert max(excluded) <= min(included)

    def test_ids_contiguous_and_inverse(self):
        vocab = build_vocab(generate_synthetic_corpus(0, 50), 120)
        assert [vocab.token_to_id[t] for t in vocab.id_to_token] == list(range(len(vocab)))

    def test_deterministic(self):
        corpus = generate_synthetic_corpus(1, 200)
        assert build_vocab(corpus, 150) == build_vocab(list(corpus), 150)

    def test_errors(self):
        with pytest.raises(EmptyCorpus):
            build_vocab([], 10)
        with pytest.raises(TargetSizeTooSmall):
            build_vocab(["abcdef"], 8)

    def test_file_round_trip(self, tmp_path):
        vocab = build_vocab(["the cheap place", "a north place"], 30)
        vocab.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt") == vocab
        lines = (tmp_path / "vocab.txt").read_text().splitlines()
        assert lines[:5] == list(SPECIAL_TOKENS)


class TestTokenize:
    def test_empty(self):
        vocab = build_vocab(["a"], 10)
        assert tokenize("", vocab) == TokenSequence()

    def test_lowercase_whole_word(self):
        vocab = build_vocab(["chinese food"], 30)
        assert tokenize("Chinese", vocab).tokens == ("chinese",)

    def test_greedy_longest_match(self):
        # hand trace: "cheaply" -> longest prefix "cheap", then "##ly"
        chars = ["c", "##h", "##e", "##a", "##p", "##l", "##y"]
        vocab = Vocab(SPECIAL_TOKENS + tuple(chars) + ("cheap", "##ly", "che"))
        assert tokenize("cheaply", vocab).tokens == ("cheap", "##ly")

    def test_punctuation_split(self):
        vocab = build_vocab(["food = chinese , please ."], 40)
        assert tokenize("food=chinese,please.", vocab).tokens == ("food", "=", "chinese", ",", "please", ".")

    def test_unknown_character_only(self):
        vocab = build_vocab(["ab"], 12)
        toks = tokenize("abz", vocab).tokens
        assert toks.count(UNK) == 1
        assert toks[-1] == UNK

    def test_ids_match_tokens(self):
        vocab = build_vocab(generate_synthetic_corpus(0, 100), 200)
        ts = tokenize(generate_synthetic_corpus(5, 1)[0], vocab)
        assert ts.ids == tuple(vocab.token_to_id[t] for t in ts.tokens)

    def test_no_unk_on_corpus_characters(self):
        corpus = generate_synthetic_corpus(2, 300)
        vocab = build_vocab(corpus, 60)  # small: forces suffix/char fallback
        for line in generate_synthetic_corpus(9, 100):
            assert UNK not in tokenize(line, vocab).tokens

    def test_thread_determinism(self):
        vocab = build_vocab(generate_synthetic_corpus(0, 300), 200)
        lines = generate_synthetic_corpus(4, 50)
        expected = [tokenize(s, vocab) for s in lines]
        with ThreadPoolExecutor(4) as pool:
            for _ in range(3):
                assert list(pool.map(lambda s: tokenize(s, vocab), lines)) == expected


_ROUNDTRIP_VOCAB = build_vocab(generate_synthetic_corpus(0, 500), 90)
_WORDS = sorted({w for s in generate_synthetic_corpus(0, 500) for w in s.split()})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(_WORDS), max_size=12), st.sampled_from([" ", "  ", "\t"]))
def test_round_trip(words, sep):
    text = sep.join(w.upper() if i % 3 == 0 else w for i, w in enumerate(words))
    assert detokenize(tokenize(text, _ROUNDTRIP_VOCAB).tokens) == " ".join(words).lower()


class TestPackPair:
    def test_direct_construction(self):
        vocab = Vocab(SPECIAL_TOKENS + ("hi", "food", "=", "chinese"))
        ctx = tokenize("hi", vocab)
        cand = tokenize("food = chinese", vocab)
        p = pack_pair(ctx, cand, 10)
        assert p.ids == (CLS_ID, 5, SEP_ID, 6, 7, 8, SEP_ID, PAD_ID, PAD_ID, PAD_ID)
        assert p.segment_ids == (0, 0, 0, 1, 1, 1, 1, 0, 0, 0)
        assert p.attention_mask == (1,) * 7 + (0,) * 3

    def test_front_truncation(self):
        ctx = seq(*range(100, 120))
        p = pack_pair(ctx, seq(7, 8, 9), 16)
        # 16 - 3 specials - 3 candidate = 10 context tokens, the most recent ones
        assert p.ids[1:11] == tuple(range(110, 120))
        check_packed(p, 2, 16)

    def test_empty_context(self):
        p = pack_pair(TokenSequence(), seq(9), 4)
        assert p.ids == (CLS_ID, SEP_ID, 9, SEP_ID)
        assert p.segment_ids == (0, 0, 1, 1)

    def test_candidate_too_long(self):
        with pytest.raises(CandidateTooLong):
            pack_pair(seq(5), seq(5, 6, 7), 5)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 40), st.integers(1, 6), st.integers(9, 40))
def test_pack_pair_invariants(n_ctx, n_cand, max_len):
    p = pack_pair(seq(*range(10, 10 + n_ctx)), seq(*range(60, 60 + n_cand)), max_len)
    assert p.M == max_len
    check_packed(p, 2, max_len)
    assert p.ids[p.length - 1 - n_cand:p.length - 1] == tuple(range(60, 60 + n_cand))


class TestPackSingle:
    def test_short(self):
        p = pack_single(seq(7), 4)
        assert p.ids == (CLS_ID, 7, SEP_ID, PAD_ID)
        check_packed(p, 1, 4)

    def test_tail_truncation(self):
        p = pack_single(seq(*range(100, 130)), 16)
        assert p.ids[1:15] == tuple(range(100, 114))
        assert p.ids[15] == SEP_ID

    def test_degenerate(self):
        p = pack_single(TokenSequence(), 2)
        assert p.ids == (CLS_ID, SEP_ID)
        assert p.segment_ids == (0, 0)
