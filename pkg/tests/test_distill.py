import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bertdst.distill import (
    ALL_TOKENS,
    MASKED_ONLY,
    DistillConfig,
    MaskedExample,
    TrainHyper,
    batch_distill_losses,
    distill,
    encode_corpus,
    mask_corpus,
    mask_sentence,
    masked_token_accuracy,
    mean_distill_loss,
    n_to_mask,
    pretrain_teacher,
    sentence_distill_loss,
    teacher_logits,
    token_distill_loss,
)
from bertdst.encoder import EncoderConfig, collate, forward, init_params, mlm_logits
from bertdst.errors import InvalidConfig, LengthMismatch, NonFiniteInput, NothingToMask, VocabMismatch
from bertdst.tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, PackedInput, build_vocab

from oracles import softmax


def sentence(n_regular, pad=0):
    ids = (CLS_ID,) + tuple(range(5, 5 + n_regular)) + (SEP_ID,) + (PAD_ID,) * pad
    n = n_regular + 2
    return PackedInput(ids, (0,) * len(ids), (1,) * n + (0,) * pad)


def rand_params(config, seed, scale=0.5):
    p = init_params(config, seed)
    g = torch.Generator().manual_seed(seed + 50)
    for t in p.tensors.values():
        t.add_(scale * torch.randn(t.shape, generator=g))
    return p


CFG = EncoderConfig(N=1, d1=8, d2=16, h=2, V=30, P=40, dropout_rate=0.0)


class TestMasking:
    @pytest.mark.parametrize("n,expected", [(20, 3), (1, 1), (10, 2), (3, 1), (7, 1), (30, 5)])
    def test_counts(self, n, expected):
        # 10*0.15 = 1.5 rounds half up to 2; 7*0.15 = 1.05 rounds to 1
        assert n_to_mask(n, 0.15) == expected
        ex = mask_sentence(sentence(n, pad=2), 0.15, 0)
        assert len(ex.masked_positions) == expected

    def test_positions_and_originals(self):
        src = sentence(20, pad=3)
        ex = mask_sentence(src, 0.15, 4)
        assert all(1 <= i <= 20 for i in ex.masked_positions)
        assert ex.original_ids == tuple(src.ids[i] for i in ex.masked_positions)
        for i, t in enumerate(ex.input.ids):
            assert t == (MASK_ID if i in ex.masked_positions else src.ids[i])
        assert ex.input.attention_mask == src.attention_mask

    def test_deterministic(self):
        assert mask_sentence(sentence(20), 0.15, 9) == mask_sentence(sentence(20), 0.15, 9)
        seeds = {mask_sentence(sentence(20), 0.15, s).masked_positions for s in range(20)}
        assert len(seeds) > 1

    def test_nothing_to_mask(self):
        with pytest.raises(NothingToMask):
            mask_sentence(sentence(0, pad=2), 0.15, 0)

    def test_loss_positions(self):
        ex = mask_sentence(sentence(6, pad=2), 0.15, 0)
        assert ex.loss_positions(ALL_TOKENS) == tuple(range(1, 7))
        assert ex.loss_positions(MASKED_ONLY) == ex.masked_positions

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 60), st.floats(0.01, 0.99), st.integers(0, 1000))
    def test_mask_count_property(self, n, rate, seed):
        ex = mask_sentence(sentence(n), rate, seed)
        assert len(ex.masked_positions) == max(1, math.floor(rate * n + 0.5))
        assert len(set(ex.masked_positions)) == len(ex.masked_positions)


class TestTokenLoss:
    def test_uniform(self):
        assert abs(float(token_distill_loss([0.0, 0.0], [0.0, 0.0], 10)) - math.log(2)) < 1e-6

    def test_self_entropy(self):
        p = softmax([1.0, 0.0])
        expected = float(-(p * np.log(p)).sum())
        got = float(token_distill_loss([10.0, 0.0], [10.0, 0.0], 10))
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.5822) < 1e-4

    def test_cross(self):
        p, q = softmax([1.0, 0.0]), softmax([0.0, 1.0])
        got = float(token_distill_loss([10.0, 0.0], [0.0, 10.0], 10))
        assert abs(got - float(-(p * np.log(q)).sum())) < 1e-12
        assert abs(got - 1.0444) < 1e-4

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            token_distill_loss([0.0, 0.0], [0.0, 0.0, 0.0])
        with pytest.raises(NonFiniteInput):
            token_distill_loss([float("nan"), 0.0], [0.0, 0.0])
        with pytest.raises(NonFiniteInput):
            token_distill_loss([0.0, 0.0], [float("inf"), 0.0])

    def test_teacher_detached(self):
        a_T = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
        a_S = torch.tensor([0.5, 0.0, 1.0], dtype=torch.float64, requires_grad=True)
        token_distill_loss(a_T, a_S, 2.0).backward()
        assert a_T.grad is None
        # d/da_S of H(p, softmax(a_S/tau)) = (q - p) / tau
        p, q = softmax([0.5, 1.0, 1.5]), softmax([0.25, 0.0, 0.5])
        assert np.allclose(a_S.grad.numpy(), (q - p) / 2.0, atol=1e-12)

    def test_batched_rows(self):
        a = torch.randn(3, 5, 7, dtype=torch.float64)
        b = torch.randn(3, 5, 7, dtype=torch.float64)
        out = token_distill_loss(a, b, 3.0)
        assert out.shape == (3, 5)
        assert abs(float(out[1, 2]) - float(token_distill_loss(a[1, 2], b[1, 2], 3.0))) < 1e-12

    def test_temperature_limit_monotone(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(0, 3, 50).tolist(), rng.normal(0, 3, 50).tolist()
        gaps = [abs(float(token_distill_loss(a, b, tau)) - math.log(50)) for tau in (1, 10, 100, 1e4)]
        assert all(x > y for x, y in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-6


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-20, 20), min_size=n, max_size=n), st.lists(st.floats(-20, 20), min_size=n, max_size=n))),
    st.floats(0.5, 50), st.floats(-100, 100))
def test_gibbs_and_shift_invariance(pair, tau, shift):
    a, b = pair
    self_loss = float(token_distill_loss(a, a, tau))
    assert self_loss <= float(token_distill_loss(a, b, tau)) + 1e-12
    base = float(token_distill_loss(a, b, tau))
    assert abs(float(token_distill_loss([x + shift for x in a], b, tau)) - base) < 1e-6
    assert abs(float(token_distill_loss(a, [x + shift for x in b], tau)) - base) < 1e-6


class TestSentenceLoss:
    def setup_method(self):
        self.teacher = rand_params(CFG, 1)
        self.ex = mask_sentence(sentence(12, pad=4), 0.15, 2)

    def _positions_losses(self, student, tau):
        hidden_t = forward(self.teacher, self.ex.input)
        hidden_s = forward(student, self.ex.input)
        return token_distill_loss(mlm_logits(self.teacher, hidden_t), mlm_logits(student, hidden_s), tau)

    def test_all_tokens_sum(self):
        student = rand_params(CFG, 2)
        per = self._positions_losses(student, 10.0)
        expected = float(per[1:13].sum())
        assert abs(float(sentence_distill_loss(self.teacher, student, self.ex)) - expected) < 1e-4

    def test_single_masked_position(self):
        ex = mask_sentence(sentence(3), 0.15, 0)
        assert len(ex.masked_positions) == 1
        student = rand_params(CFG, 3)
        cfg = DistillConfig(loss_positions=MASKED_ONLY)
        (i,) = ex.masked_positions
        t = mlm_logits(self.teacher, forward(self.teacher, ex.input))[i]
        s = mlm_logits(student, forward(student, ex.input))[i]
        assert abs(float(sentence_distill_loss(self.teacher, student, ex, cfg)) - float(token_distill_loss(t, s))) < 1e-5

    def test_student_equal_teacher_is_minimum(self):
        same = sentence_distill_loss(self.teacher, self.teacher.clone(), self.ex)
        logits = mlm_logits(self.teacher, forward(self.teacher, self.ex.input)).double()
        p = torch.softmax(logits / 10.0, -1)
        entropy = float(-(p * torch.log(p)).sum(-1)[1:13].sum())
        assert abs(float(same) - entropy) < 1e-4
        for seed in range(5):
            assert float(sentence_distill_loss(self.teacher, rand_params(CFG, 10 + seed), self.ex)) > float(same)

    def test_huge_temperature(self):
        student = rand_params(CFG, 4)
        cfg = DistillConfig(temperature=1e6)
        loss = float(sentence_distill_loss(self.teacher.to(torch.float64), student.to(torch.float64), self.ex, cfg))
        expected = 12 * math.log(CFG.V)
        assert abs(loss - expected) / expected < 1e-3

    def test_padding_never_contributes(self):
        student = rand_params(CFG, 5)
        short = mask_sentence(sentence(12, pad=0), 0.15, 2)
        padded = MaskedExample(PackedInput(short.input.ids + (PAD_ID,) * 6, short.input.segment_ids + (0,) * 6,
                                           short.input.attention_mask + (0,) * 6),
                               short.masked_positions, short.original_ids)
        a = sentence_distill_loss(self.teacher, student, short)
        b = batch_distill_losses(self.teacher, student, [padded, padded], DistillConfig())
        assert torch.allclose(b, a.expand(2), atol=1e-4)

    def test_precomputed_teacher_logits(self):
        student = rand_params(CFG, 6)
        inputs = collate([self.ex.input])
        cached = teacher_logits(self.teacher, inputs)
        a = batch_distill_losses(self.teacher, student, [self.ex], DistillConfig())
        b = batch_distill_losses(self.teacher, student, [self.ex], DistillConfig(), t_logits=cached)
        assert torch.equal(a, b)

    def test_vocab_mismatch(self):
        other = init_params(EncoderConfig(N=1, d1=8, d2=16, h=2, V=31, P=40), 0)
        with pytest.raises(VocabMismatch):
            sentence_distill_loss(self.teacher, other, self.ex)


class TestConfig:
    def test_defaults(self):
        cfg = DistillConfig()
        assert cfg.temperature == 10.0 and cfg.mask_rate == 0.15 and cfg.loss_positions == ALL_TOKENS

    @pytest.mark.parametrize("kw", [{"temperature": 0.0}, {"mask_rate": 0.0}, {"mask_rate": 1.0},
                                    {"loss_positions": "everything"}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            DistillConfig(**kw)


REPEATED = ["the cheap north place serves thai food"] * 8


@pytest.fixture(scope="module")
def repeated_vocab():
    return build_vocab(REPEATED, 40)


class TestPretrain:
    def test_zero_steps_is_init(self, repeated_vocab):
        cfg = EncoderConfig(N=1, d1=16, d2=32, h=2, V=len(repeated_vocab), P=16, dropout_rate=0.0)
        p = pretrain_teacher(cfg, REPEATED, repeated_vocab, TrainHyper(steps=0, max_len=16))
        assert p.checksum() == init_params(cfg, 0).checksum()

    def test_memorizes_single_sentence(self, repeated_vocab):
        cfg = EncoderConfig(N=1, d1=32, d2=64, h=2, V=len(repeated_vocab), P=16, dropout_rate=0.0)
        hyper = TrainHyper(steps=150, batch_size=8, lr=1e-2, max_len=16)
        p = pretrain_teacher(cfg, REPEATED, repeated_vocab, hyper)
        examples = mask_corpus(encode_corpus(REPEATED[:1], repeated_vocab, 16) * 20, 0.15, 99)
        assert masked_token_accuracy(p, examples) == 1.0

    def test_vocab_size_must_match(self, repeated_vocab):
        cfg = EncoderConfig(N=1, d1=8, d2=16, h=2, V=len(repeated_vocab) + 1, P=16)
        with pytest.raises(VocabMismatch):
            pretrain_teacher(cfg, REPEATED, repeated_vocab, TrainHyper(steps=1))


class TestDistill:
    def test_frozen_teacher_and_improvement(self, repeated_vocab):
        V = len(repeated_vocab)
        teacher = rand_params(EncoderConfig(N=1, d1=16, d2=32, h=2, V=V, P=16, dropout_rate=0.0), 1)
        before = teacher.checksum()
        student_cfg = EncoderConfig(N=1, d1=8, d2=16, h=2, V=V, P=16, dropout_rate=0.0)
        cfg = DistillConfig(steps=80, batch_size=8, lr=1e-2, max_len=16, temperature=2.0)
        student = distill(teacher, student_cfg, REPEATED, repeated_vocab, cfg)
        assert teacher.checksum() == before
        held = mask_corpus(encode_corpus(REPEATED[:1], repeated_vocab, 16) * 4, 0.15, 7)
        init = init_params(student_cfg, cfg.seed)
        assert mean_distill_loss(teacher, student, held, cfg) < mean_distill_loss(teacher, init, held, cfg)

    def test_uniform_teacher(self, repeated_vocab):
        V = len(repeated_vocab)
        teacher = init_params(EncoderConfig(N=1, d1=8, d2=16, h=2, V=V, P=16, dropout_rate=0.0), 0)
        teacher["mlm.w"].zero_()
        teacher["mlm.b"].zero_()
        student_cfg = EncoderConfig(N=1, d1=8, d2=16, h=2, V=V, P=16, dropout_rate=0.0)
        cfg = DistillConfig(steps=40, batch_size=8, lr=1e-2, max_len=16)
        student = distill(teacher, student_cfg, REPEATED, repeated_vocab, cfg)
        held = mask_corpus(encode_corpus(REPEATED[:1], repeated_vocab, 16), 0.15, 0)
        n = len(held[0].loss_positions())
        assert abs(mean_distill_loss(teacher, student, held, cfg) / n - math.log(V)) < 1e-3

    def test_deterministic(self, repeated_vocab):
        V = len(repeated_vocab)
        teacher = rand_params(EncoderConfig(N=1, d1=8, d2=16, h=2, V=V, P=16, dropout_rate=0.0), 1)
        student_cfg = EncoderConfig(N=1, d1=8, d2=16, h=2, V=V, P=16, dropout_rate=0.1)
        cfg = DistillConfig(steps=5, batch_size=4, max_len=16)
        a = distill(teacher, student_cfg, REPEATED, repeated_vocab, cfg)
        b = distill(teacher, student_cfg, REPEATED, repeated_vocab, cfg)
        assert a.checksum() == b.checksum()

    def test_vocab_mismatch(self, repeated_vocab):
        teacher = init_params(EncoderConfig(N=1, d1=8, d2=16, h=2, V=len(repeated_vocab), P=16), 0)
        with pytest.raises(VocabMismatch):
            distill(teacher, EncoderConfig(N=1, d1=8, d2=16, h=2, V=7, P=16), REPEATED, repeated_vocab)
