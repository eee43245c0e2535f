"""Candidate scoring, per-turn prediction, state updates, DST fine-tuning and
the two turn-level metrics."""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from . import encoder
from .encoder import AdamHyper, AdamState, ModelParams, collate, compute_gradients, optimizer_step
from .errors import ConflictingValues, DuplicateSlot, EmptyValueList, LabelNotInOntology, LengthMismatch, ParseError
from .tokenizer import DEFAULT_MAX_LEN, SEP, TokenSequence, Vocab, pack_pair, tokenize

log = logging.getLogger(__name__)

REQUEST = "request"
THRESHOLD = 0.5

# Incremented on every predict_turn / update_state call; the benchmark tests
# use this to confirm they time the full per-turn path.
CALL_COUNTS: Counter = Counter()


@dataclass(frozen=True)
class Ontology:
    informable: Mapping[str, tuple[str, ...]]
    requestable: tuple[str, ...]

    def __post_init__(self):
        inf = {}
        for slot, values in self.informable.items():
            values = tuple(values)
            if not values:
                raise EmptyValueList(f"slot {slot!r} has no values")
            if len(set(values)) != len(values):
                raise ParseError(f"slot {slot!r} has duplicate values")
            inf[slot] = values
        if len(set(self.requestable)) != len(self.requestable):
            raise DuplicateSlot("duplicate requestable slot")
        if REQUEST in inf:
            raise ParseError(f"{REQUEST!r} is reserved and cannot be an informable slot")
        object.__setattr__(self, "informable", inf)
        object.__setattr__(self, "requestable", tuple(self.requestable))

    def is_valid(self, cand: "Candidate") -> bool:
        if cand.slot == REQUEST:
            return cand.value in self.requestable
        return cand.value in self.informable.get(cand.slot, ())


@dataclass(frozen=True, order=True)
class Candidate:
    slot: str
    value: str

    @property
    def text(self) -> str:
        return f"{self.slot} = {self.value}".lower()

    @property
    def is_request(self) -> bool:
        return self.slot == REQUEST


@dataclass(frozen=True)
class DialogState:
    goals: Mapping[str, str] = field(default_factory=dict)
    requests: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "goals", dict(self.goals))
        object.__setattr__(self, "requests", frozenset(self.requests))

    def __hash__(self):
        return hash((tuple(sorted(self.goals.items())), self.requests))

    def to_json(self) -> dict:
        return {"goals": dict(sorted(self.goals.items())), "requests": sorted(self.requests)}

    @classmethod
    def from_json(cls, d: Mapping) -> "DialogState":
        return cls(d.get("goals", {}), frozenset(d.get("requests", ())))


@dataclass(frozen=True)
class DialogTurn:
    user_utterance: str
    system_utterance: str = ""
    turn_label: frozenset = frozenset()
    gold_state: DialogState | None = None

    def __post_init__(self):
        if self.user_utterance is None:
            raise ParseError("user utterance must not be null")
        object.__setattr__(self, "turn_label", frozenset(self.turn_label))


@dataclass(frozen=True)
class Dialog:
    dialog_id: str
    turns: tuple[DialogTurn, ...]

    @property
    def gold_states(self) -> list[DialogState]:
        return [t.gold_state for t in self.turns]


@dataclass(frozen=True)
class Prediction:
    candidate: Candidate
    probability: float


def enumerate_candidates(ontology: Ontology) -> list[Candidate]:
    out = [Candidate(slot, v) for slot in sorted(ontology.informable) for v in sorted(ontology.informable[slot])]
    out += [Candidate(REQUEST, r) for r in sorted(ontology.requestable)]
    return out


def context_tokens(turn: DialogTurn, vocab: Vocab) -> TokenSequence:
    """System utterance, internal [SEP], user utterance."""
    return tokenize(turn.system_utterance, vocab) + TokenSequence.special(SEP) + tokenize(turn.user_utterance, vocab)


class ModelScorer:
    """Scores candidates for a turn with a parameterized encoder.

    Candidate tokenizations are cached; the scorer is read-only over params.
    """

    def __init__(self, params: ModelParams, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN, batch_size: int = 128):
        self.params = params
        self.vocab = vocab
        self.max_len = max_len
        self.batch_size = batch_size
        self._cand_cache: dict[Candidate, TokenSequence] = {}

    def candidate_tokens(self, cand: Candidate) -> TokenSequence:
        toks = self._cand_cache.get(cand)
        if toks is None:
            toks = self._cand_cache[cand] = tokenize(cand.text, self.vocab)
        return toks

    def pack(self, turn: DialogTurn, candidates: Sequence[Candidate]):
        ctx = context_tokens(turn, self.vocab)
        return [pack_pair(ctx, self.candidate_tokens(c), self.max_len) for c in candidates]

    @torch.no_grad()
    def __call__(self, turn: DialogTurn, candidates: Sequence[Candidate]) -> list[float]:
        packed = self.pack(turn, candidates)
        probs = []
        for i in range(0, len(packed), self.batch_size):
            hidden = encoder.forward(self.params, collate(packed[i:i + self.batch_size]))
            probs.extend(torch.sigmoid(encoder.scorer_logit(self.params, hidden)).tolist())
        return probs


Scorer = Callable[[DialogTurn, Sequence[Candidate]], Sequence[float]]


def _as_scorer(model, vocab, max_len) -> Scorer:
    if isinstance(model, ModelParams):
        return ModelScorer(model, vocab, max_len)
    return model


def score_candidate(params: ModelParams, turn: DialogTurn, candidate: Candidate, vocab: Vocab,
                    max_len: int = DEFAULT_MAX_LEN) -> Prediction:
    ctx = context_tokens(turn, vocab)
    packed = pack_pair(ctx, tokenize(candidate.text, vocab), max_len)
    with torch.no_grad():
        hidden = encoder.forward(params, packed)
        prob = float(torch.sigmoid(encoder.scorer_logit(params, hidden)))
    return Prediction(candidate, prob)


def select_predictions(predictions: Iterable[Prediction], threshold: float = THRESHOLD) -> frozenset:
    """Keep candidates at or above ``threshold``; one value per informable slot."""
    passing: dict[str, list[Prediction]] = {}
    requests = set()
    for pred in predictions:
        if pred.probability < threshold:
            continue
        if pred.candidate.is_request:
            requests.add(pred.candidate)
        else:
            passing.setdefault(pred.candidate.slot, []).append(pred)
    # highest probability wins; ties go to the lexicographically smaller value
    best = {min(preds, key=lambda p: (-p.probability, p.candidate.value)).candidate for preds in passing.values()}
    return frozenset(requests | best)


def predict_turn(params, turn: DialogTurn, ontology: Ontology, vocab: Vocab | None = None,
                 max_len: int = DEFAULT_MAX_LEN, threshold: float = THRESHOLD,
                 candidates: Sequence[Candidate] | None = None) -> frozenset:
    """Predicted turn label. ``params`` may be ModelParams or any scorer callable."""
    CALL_COUNTS["predict_turn"] += 1
    scorer = _as_scorer(params, vocab, max_len)
    candidates = enumerate_candidates(ontology) if candidates is None else candidates
    probs = scorer(turn, candidates)
    return select_predictions((Prediction(c, p) for c, p in zip(candidates, probs)), threshold)


def update_state(prev: DialogState, predicted: Iterable[Candidate]) -> DialogState:
    CALL_COUNTS["update_state"] += 1
    goals = dict(prev.goals)
    seen = {}
    requests = set()
    for cand in predicted:
        if cand.is_request:
            requests.add(cand.value)
            continue
        if cand.slot in seen and seen[cand.slot] != cand.value:
            raise ConflictingValues(f"slot {cand.slot!r} predicted as both {seen[cand.slot]!r} and {cand.value!r}")
        seen[cand.slot] = cand.value
    goals.update(seen)
    return DialogState(goals, frozenset(requests))


def track_dialog(params, turns: Sequence[DialogTurn], ontology: Ontology, vocab: Vocab | None = None,
                 max_len: int = DEFAULT_MAX_LEN, threshold: float = THRESHOLD) -> list[DialogState]:
    scorer = _as_scorer(params, vocab, max_len)
    candidates = enumerate_candidates(ontology)
    state = DialogState()
    states = []
    for turn in turns:
        state = update_state(state, predict_turn(scorer, turn, ontology, threshold=threshold, candidates=candidates))
        states.append(state)
    return states


def oracle_scorer(turn: DialogTurn, candidates: Sequence[Candidate]) -> list[float]:
    """Scores the gold turn label 1.0 and everything else 0.0."""
    return [1.0 if c in turn.turn_label else 0.0 for c in candidates]


def _check_lengths(pred, gold):
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predicted states vs {len(gold)} gold states")


def joint_goal_accuracy(predicted_states: Sequence[DialogState], gold_states: Sequence[DialogState]) -> float:
    """Fraction of turns whose whole goal map is exactly right; 1.0 when empty."""
    _check_lengths(predicted_states, gold_states)
    if not gold_states:
        return 1.0
    hits = sum(dict(p.goals) == dict(g.goals) for p, g in zip(predicted_states, gold_states))
    return hits / len(gold_states)


def turn_request_accuracy(predicted_states: Sequence[DialogState], gold_states: Sequence[DialogState]) -> float:
    _check_lengths(predicted_states, gold_states)
    if not gold_states:
        return 1.0
    hits = sum(set(p.requests) == set(g.requests) for p, g in zip(predicted_states, gold_states))
    return hits / len(gold_states)


def evaluate(predicted: Sequence[Sequence[DialogState]], dialogs: Sequence[Dialog]) -> dict:
    """Metrics report with a per-dialog breakdown."""
    if len(predicted) != len(dialogs):
        raise LengthMismatch(f"{len(predicted)} predicted dialogs vs {len(dialogs)} gold dialogs")
    flat_pred, flat_gold, per_dialog = [], [], []
    for states, dialog in zip(predicted, dialogs):
        gold = dialog.gold_states
        _check_lengths(states, gold)
        flat_pred.extend(states)
        flat_gold.extend(gold)
        per_dialog.append({
            "dialog_id": dialog.dialog_id,
            "turns": len(gold),
            "joint_goal": joint_goal_accuracy(states, gold),
            "turn_request": turn_request_accuracy(states, gold),
        })
    return {
        "joint_goal": joint_goal_accuracy(flat_pred, flat_gold),
        "turn_request": turn_request_accuracy(flat_pred, flat_gold),
        "turns": len(flat_gold),
        "dialogs": len(dialogs),
        "per_dialog": per_dialog,
    }


# ---------------------------------------------------------------- training

@dataclass
class DSTTrainHyper:
    epochs: int = 30
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float | None = 1.0
    warmup_frac: float = 0.1
    neg_ratio: float | None = None  # negatives per positive each epoch; None keeps all
    max_len: int = DEFAULT_MAX_LEN
    seed: int = 0


def bce_loss(params: ModelParams, batch) -> torch.Tensor:
    """Mean sigmoid binary cross-entropy of the [CLS] scorer over ``(Batch, labels)``."""
    inputs, labels, *rest = batch
    generator = rest[0] if rest else None
    hidden = encoder.forward(params, inputs, train_mode=generator is not None, generator=generator)
    logits = encoder.scorer_logit(params, hidden)
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def build_examples(dialogs: Sequence[Dialog], ontology: Ontology, vocab: Vocab, max_len: int):
    """Packed inputs and 0/1 labels, grouped per turn over every candidate."""
    scorer = ModelScorer(None, vocab, max_len)
    candidates = enumerate_candidates(ontology)
    groups = []
    for dialog in dialogs:
        for turn in dialog.turns:
            for cand in turn.turn_label:
                if not ontology.is_valid(cand):
                    raise LabelNotInOntology(f"{cand.slot}={cand.value} in dialog {dialog.dialog_id}")
            groups.append((scorer.pack(turn, candidates), [float(c in turn.turn_label) for c in candidates]))
    return groups


def _epoch_examples(groups, neg_ratio: float | None, rng: random.Random) -> list[int]:
    """Flat indices into the grouped examples: all positives plus (sampled) negatives."""
    picked = []
    for g, (_, labels) in enumerate(groups):
        pos = [(g, i) for i, y in enumerate(labels) if y]
        neg = [(g, i) for i, y in enumerate(labels) if not y]
        if neg_ratio is not None:
            k = min(len(neg), max(1, int(round(neg_ratio * max(1, len(pos))))))
            neg = rng.sample(neg, k)
        picked.extend(pos + neg)
    rng.shuffle(picked)
    return picked


def train_dst(params: ModelParams, dialogs: Sequence[Dialog], ontology: Ontology, vocab: Vocab,
              hyper: DSTTrainHyper | None = None, history: list | None = None) -> ModelParams:
    """Fine-tune a copy of ``params`` on turn-label membership with BCE.

    With ``neg_ratio`` set, negatives are resampled every epoch.
    """
    hyper = hyper or DSTTrainHyper()
    rng = random.Random(hyper.seed)
    groups = build_examples(dialogs, ontology, vocab, hyper.max_len)
    params = params.clone()
    if not params.has_scorer_head:
        fresh = encoder.init_params(params.config, hyper.seed, mlm_head=False)
        params.tensors["scorer.w"] = fresh["scorer.w"]
        params.tensors["scorer.b"] = fresh["scorer.b"]
    gen = torch.Generator().manual_seed(hyper.seed)
    per_epoch = max(1, -(-len(_epoch_examples(groups, hyper.neg_ratio, random.Random(0))) // hyper.batch_size))
    total = hyper.steps if hyper.steps is not None else hyper.epochs * per_epoch
    adam = AdamHyper(lr=hyper.lr, clip_norm=hyper.clip_norm)
    state = AdamState()
    order: list = []
    for step in range(total):
        if not order:
            order = _epoch_examples(groups, hyper.neg_ratio, rng)
        chunk, order = order[:hyper.batch_size], order[hyper.batch_size:]
        inputs = collate([groups[g][0][i] for g, i in chunk])
        labels = torch.tensor([groups[g][1][i] for g, i in chunk])
        loss, grads = compute_gradients(params, bce_loss, (inputs, labels, gen))
        lr = encoder.linear_warmup_decay(step, total, hyper.lr, hyper.warmup_frac)
        optimizer_step(params, grads, state, adam, lr=lr)
        if history is not None:
            history.append(loss)
        if step % 500 == 0:
            log.info("dst step %d/%d loss %.4f", step, total, loss)
    return params


def dataset_loss(params: ModelParams, dialogs: Sequence[Dialog], ontology: Ontology, vocab: Vocab,
                 max_len: int = DEFAULT_MAX_LEN, batch_size: int = 256) -> float:
    """Mean BCE over every (turn, candidate) pair, dropout off."""
    groups = build_examples(dialogs, ontology, vocab, max_len)
    packed = [x for g, _ in groups for x in g]
    labels = [y for _, ys in groups for y in ys]
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(packed), batch_size):
            chunk = packed[i:i + batch_size]
            total += float(bce_loss(params, (collate(chunk), torch.tensor(labels[i:i + batch_size])))) * len(chunk)
    return total / max(1, len(packed))
