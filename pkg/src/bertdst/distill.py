"""Masked-LM teacher pretraining and temperature-softened logit distillation
into a student trained from scratch."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import encoder
from .encoder import AdamHyper, AdamState, Batch, EncoderConfig, ModelParams, compute_gradients, optimizer_step
from .errors import InvalidConfig, LengthMismatch, NonFiniteInput, NothingToMask, VocabMismatch
from .tokenizer import MASK_ID, PackedInput, Vocab, pack_single, tokenize

log = logging.getLogger(__name__)

ALL_TOKENS = "all_tokens"
MASKED_ONLY = "masked_only"
_FIRST_REGULAR_ID = 5  # ids below are [PAD] [UNK] [CLS] [SEP] [MASK]


@dataclass(frozen=True)
class MaskedExample:
    input: PackedInput
    masked_positions: tuple[int, ...]
    original_ids: tuple[int, ...]

    def loss_positions(self, mode: str = ALL_TOKENS) -> tuple[int, ...]:
        if mode == MASKED_ONLY:
            return self.masked_positions
        masked = set(self.masked_positions)
        return tuple(i for i, (t, a) in enumerate(zip(self.input.ids, self.input.attention_mask))
                     if a and (t >= _FIRST_REGULAR_ID or i in masked))


@dataclass
class TrainHyper:
    """Optimization schedule shared by MLM pretraining and distillation."""

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float | None = 1.0
    warmup_frac: float = 0.05
    max_len: int = 32
    mask_rate: float = 0.15
    seed: int = 0


@dataclass
class DistillConfig(TrainHyper):
    temperature: float = 10.0
    loss_positions: str = ALL_TOKENS

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidConfig("temperature must be positive")
        if not 0.0 < self.mask_rate < 1.0:
            raise InvalidConfig("mask_rate must lie in (0, 1)")
        if self.loss_positions not in (ALL_TOKENS, MASKED_ONLY):
            raise InvalidConfig(f"loss_positions must be {ALL_TOKENS!r} or {MASKED_ONLY!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _maskable(packed: PackedInput) -> list[int]:
    return [i for i, (t, a) in enumerate(zip(packed.ids, packed.attention_mask)) if a and t >= _FIRST_REGULAR_ID]


def n_to_mask(n_maskable: int, rate: float) -> int:
    # round half up, at least one
    return max(1, int(np.floor(rate * n_maskable + 0.5)))


def mask_sentence(packed: PackedInput, rate: float = 0.15, rng=0) -> MaskedExample:
    """Replace ``round(rate * maskable)`` (min 1) random regular tokens with [MASK]."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    candidates = _maskable(packed)
    if not candidates:
        raise NothingToMask("sentence has no maskable tokens")
    k = n_to_mask(len(candidates), rate)
    chosen = sorted(int(i) for i in rng.choice(candidates, size=k, replace=False))
    ids = list(packed.ids)
    original = tuple(ids[i] for i in chosen)
    for i in chosen:
        ids[i] = MASK_ID
    return MaskedExample(PackedInput(tuple(ids), packed.segment_ids, packed.attention_mask), tuple(chosen), original)


def token_distill_loss(a_T, a_S, tau: float = 10.0) -> torch.Tensor:
    """Cross-entropy between softened teacher and student distributions.

    Works on ``(..., V)`` logits and returns one loss per leading index. The
    teacher side is detached. List or array input is promoted to float64.
    """
    if not isinstance(a_T, torch.Tensor):
        a_T = torch.as_tensor(a_T, dtype=torch.float64)
    if not isinstance(a_S, torch.Tensor):
        a_S = torch.as_tensor(a_S, dtype=torch.float64)
    if a_T.shape != a_S.shape:
        raise LengthMismatch(f"teacher logits {tuple(a_T.shape)} vs student logits {tuple(a_S.shape)}")
    if tau <= 0:
        raise InvalidConfig("temperature must be positive")
    if not (torch.isfinite(a_T).all() and torch.isfinite(a_S.detach()).all()):
        raise NonFiniteInput("logits contain NaN or Inf")
    p = encoder.stable_softmax(a_T.detach(), tau)
    return -(p * encoder.stable_log_softmax(a_S, tau)).sum(-1)


def _collate_masked(examples: Sequence[MaskedExample], mode: str):
    inputs = encoder.collate([e.input for e in examples])
    M = inputs.ids.shape[1]
    positions = torch.zeros((len(examples), M), dtype=torch.bool)
    targets = torch.full((len(examples), M), -100, dtype=torch.long)
    for b, ex in enumerate(examples):
        for i in ex.loss_positions(mode):
            positions[b, i] = True
        for i, t in zip(ex.masked_positions, ex.original_ids):
            targets[b, i] = t
    return inputs, positions, targets


def _check_vocab(teacher: ModelParams, student: ModelParams):
    if teacher.config.V != student.config.V:
        raise VocabMismatch(f"teacher V={teacher.config.V} vs student V={student.config.V}")


def teacher_logits(teacher: ModelParams, inputs: Batch) -> torch.Tensor:
    with torch.no_grad():
        return encoder.mlm_logits(teacher, encoder.forward(teacher, inputs))


def batch_distill_losses(teacher: ModelParams, student: ModelParams, examples: Sequence[MaskedExample],
                         config: DistillConfig, generator: torch.Generator | None = None,
                         t_logits: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sentence distillation losses ``(B,)``, summed over the selected positions."""
    _check_vocab(teacher, student)
    inputs, positions, _ = _collate_masked(examples, config.loss_positions)
    if t_logits is None:
        t_logits = teacher_logits(teacher, inputs)
    hidden = encoder.forward(student, inputs, train_mode=generator is not None, generator=generator)
    s_logits = encoder.mlm_logits(student, hidden)
    per_token = token_distill_loss(t_logits.to(s_logits.dtype), s_logits, config.temperature)
    return (per_token * positions.to(per_token.dtype)).sum(-1)


def sentence_distill_loss(teacher: ModelParams, student: ModelParams, example: MaskedExample,
                          config: DistillConfig | None = None) -> torch.Tensor:
    return batch_distill_losses(teacher, student, [example], config or DistillConfig())[0]


def mlm_loss(params: ModelParams, batch) -> torch.Tensor:
    """Mean cross-entropy at masked positions over ``(inputs, targets[, generator])``."""
    inputs, targets, *rest = batch
    generator = rest[0] if rest else None
    hidden = encoder.forward(params, inputs, train_mode=generator is not None, generator=generator)
    logits = encoder.mlm_logits(params, hidden)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def encode_corpus(corpus: Sequence[str], vocab: Vocab, max_len: int) -> list[PackedInput]:
    """Packed sentences that have at least one maskable token."""
    packed = (pack_single(tokenize(s, vocab), max_len) for s in corpus)
    return [p for p in packed if _maskable(p)]


def mask_corpus(packed: Sequence[PackedInput], rate: float, seed: int) -> list[MaskedExample]:
    rng = np.random.default_rng(seed)
    return [mask_sentence(p, rate, rng) for p in packed]


@torch.no_grad()
def masked_token_accuracy(params: ModelParams, examples: Sequence[MaskedExample], batch_size: int = 256) -> float:
    hits = total = 0
    for i in range(0, len(examples), batch_size):
        inputs, _, targets = _collate_masked(examples[i:i + batch_size], MASKED_ONLY)
        pred = encoder.mlm_logits(params, encoder.forward(params, inputs)).argmax(-1)
        sel = targets != -100
        hits += int((pred[sel] == targets[sel]).sum())
        total += int(sel.sum())
    return hits / max(1, total)


@torch.no_grad()
def mean_distill_loss(teacher: ModelParams, student: ModelParams, examples: Sequence[MaskedExample],
                      config: DistillConfig, batch_size: int = 256) -> float:
    """Mean per-sentence distillation loss, dropout off."""
    total = 0.0
    for i in range(0, len(examples), batch_size):
        total += float(batch_distill_losses(teacher, student, examples[i:i + batch_size], config).sum())
    return total / max(1, len(examples))


def _train_loop(params: ModelParams, hyper: TrainHyper, packed: Sequence[PackedInput], loss_fn, make_batch,
                history: list | None, tag: str) -> ModelParams:
    if not packed:
        raise NothingToMask("corpus has no maskable sentences")
    rng = np.random.default_rng(hyper.seed)
    gen = torch.Generator().manual_seed(hyper.seed)
    adam = AdamHyper(lr=hyper.lr, clip_norm=hyper.clip_norm)
    state = AdamState()
    for step in range(hyper.steps):
        idx = rng.choice(len(packed), size=min(hyper.batch_size, len(packed)), replace=False)
        examples = [mask_sentence(packed[i], hyper.mask_rate, rng) for i in idx]
        loss, grads = compute_gradients(params, loss_fn, make_batch(examples, gen))
        lr = encoder.linear_warmup_decay(step, hyper.steps, hyper.lr, hyper.warmup_frac)
        optimizer_step(params, grads, state, adam, lr=lr)
        if history is not None:
            history.append(loss)
        if step % 200 == 0:
            log.info("%s step %d/%d loss %.4f", tag, step, hyper.steps, loss)
    return params


def pretrain_teacher(config: EncoderConfig, corpus: Sequence[str], vocab: Vocab, hyper: TrainHyper | None = None,
                     history: list | None = None) -> ModelParams:
    """Masked-LM pretraining from scratch; loss only at masked positions."""
    hyper = hyper or TrainHyper()
    if config.V != len(vocab):
        raise VocabMismatch(f"config V={config.V} but vocab has {len(vocab)} tokens")
    params = encoder.init_params(config, hyper.seed)
    packed = encode_corpus(corpus, vocab, hyper.max_len)

    def make_batch(examples, gen):
        inputs, _, targets = _collate_masked(examples, MASKED_ONLY)
        return inputs, targets, gen

    return _train_loop(params, hyper, packed, mlm_loss, make_batch, history, "pretrain")


def distill(teacher: ModelParams, student_config: EncoderConfig, corpus: Sequence[str], vocab: Vocab,
            config: DistillConfig | None = None, history: list | None = None) -> ModelParams:
    """Train a fresh student to match the frozen teacher's softened MLM logits."""
    config = config or DistillConfig()
    if teacher.config.V != student_config.V or student_config.V != len(vocab):
        raise VocabMismatch("teacher, student and vocab must agree on V")
    student = encoder.init_params(student_config, config.seed)
    packed = encode_corpus(corpus, vocab, config.max_len)

    def loss_fn(params, batch):
        examples, gen = batch
        return batch_distill_losses(teacher, params, examples, config, gen).mean()

    return _train_loop(student, config, packed, loss_fn, lambda ex, gen: (ex, gen), history, "distill")
