"""Ontology/dialog/corpus files, the binary checkpoint, and deterministic
synthetic data generators."""

from __future__ import annotations

import hashlib
import json
import os
import random
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dst import REQUEST, Candidate, Dialog, DialogState, DialogTurn, Ontology, update_state
from .encoder import EncoderConfig, ModelParams, param_shapes
from .errors import (
    ChecksumMismatch,
    DuplicateSlot,
    EmptyValueList,
    InvalidSpec,
    IoError,
    LabelNotInOntology,
    MissingField,
    ParseError,
    VersionUnsupported,
)
from .tokenizer import Vocab

# ----------------------------------------------------------------- JSON files


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def _no_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise DuplicateSlot(f"duplicate key {k!r}")
        out[k] = v
    return out


def _parse_json(text: str, source):
    try:
        return json.loads(text, object_pairs_hook=_no_duplicate_keys)
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}: {e}") from e


def ontology_from_json(data) -> Ontology:
    if not isinstance(data, dict):
        raise ParseError("ontology must be a JSON object")
    for key in ("informable", "requestable"):
        if key not in data:
            raise MissingField(f"ontology missing {key!r}")
    informable, requestable = data["informable"], data["requestable"]
    if not isinstance(informable, dict) or not isinstance(requestable, list):
        raise ParseError("informable must be an object and requestable a list")
    for slot, values in informable.items():
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise ParseError(f"values of {slot!r} must be a list of strings")
        if not values:
            raise EmptyValueList(f"slot {slot!r} has no values")
        if len(set(values)) != len(values):
            raise ParseError(f"slot {slot!r} lists a value twice")
    if not all(isinstance(r, str) for r in requestable):
        raise ParseError("requestable must list strings")
    if len(set(requestable)) != len(requestable):
        raise DuplicateSlot("requestable slot listed twice")
    return Ontology(informable, tuple(requestable))


def ontology_to_json(ontology: Ontology) -> dict:
    return {"informable": {k: list(v) for k, v in ontology.informable.items()},
            "requestable": list(ontology.requestable)}


def load_ontology(path) -> Ontology:
    return ontology_from_json(_parse_json(_read_text(path), path))


def save_json(obj, path):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode("utf-8"))


def save_ontology(ontology: Ontology, path):
    save_json(ontology_to_json(ontology), path)


def _label(pair, ontology, where) -> Candidate:
    if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, str) for x in pair)):
        raise ParseError(f"{where}: turn label entries must be [slot, value] pairs")
    cand = Candidate(pair[0], pair[1])
    if ontology is not None and not ontology.is_valid(cand):
        raise LabelNotInOntology(f"{where}: {cand.slot}={cand.value} not in ontology")
    return cand


def _state(obj, ontology, where) -> DialogState:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: belief_state must be an object")
    goals = obj.get("goals", {})
    requests = obj.get("requests", [])
    if not isinstance(goals, dict) or not isinstance(requests, list):
        raise ParseError(f"{where}: malformed belief_state")
    if ontology is not None:
        for slot, value in goals.items():
            if slot == REQUEST or not ontology.is_valid(Candidate(slot, value)):
                raise LabelNotInOntology(f"{where}: goal {slot}={value} not in ontology")
        for r in requests:
            if r not in ontology.requestable:
                raise LabelNotInOntology(f"{where}: request {r} not in ontology")
    return DialogState(goals, frozenset(requests))


def dialogs_from_json(data, ontology: Ontology | None = None) -> list[Dialog]:
    if isinstance(data, dict):
        if "dialogs" not in data:
            raise MissingField("dialog file missing 'dialogs'")
        data = data["dialogs"]
    if not isinstance(data, list):
        raise ParseError("dialogs must be a list")
    dialogs = []
    for i, d in enumerate(data):
        if not isinstance(d, dict):
            raise ParseError(f"dialog {i} must be an object")
        if "turns" not in d:
            raise MissingField(f"dialog {i} missing 'turns'")
        did = str(d.get("dialog_id", i))
        turns = []
        state = DialogState()
        for j, t in enumerate(d["turns"]):
            where = f"dialog {did} turn {j}"
            if not isinstance(t, dict):
                raise ParseError(f"{where}: turn must be an object")
            for key in ("user", "turn_label"):
                if key not in t:
                    raise MissingField(f"{where}: missing {key!r}")
            if not isinstance(t["user"], str) or not isinstance(t.get("system", ""), str):
                raise ParseError(f"{where}: utterances must be strings")
            if not isinstance(t["turn_label"], list):
                raise ParseError(f"{where}: turn_label must be a list")
            label = frozenset(_label(p, ontology, where) for p in t["turn_label"])
            informed = [c.slot for c in label if not c.is_request]
            if len(informed) != len(set(informed)):
                raise ParseError(f"{where}: two values for one slot in turn label")
            state = update_state(state, label)
            gold = _state(t["belief_state"], ontology, where) if "belief_state" in t else state
            turns.append(DialogTurn(t["user"], t.get("system", ""), label, gold))
        dialogs.append(Dialog(did, tuple(turns)))
    return dialogs


def dialogs_to_json(dialogs: Sequence[Dialog]) -> dict:
    return {"dialogs": [
        {"dialog_id": d.dialog_id, "turns": [
            {"system": t.system_utterance, "user": t.user_utterance,
             "turn_label": [[c.slot, c.value] for c in sorted(t.turn_label)],
             "belief_state": t.gold_state.to_json()}
            for t in d.turns]}
        for d in dialogs]}


def load_dialogs(path, ontology: Ontology | None = None) -> list[Dialog]:
    return dialogs_from_json(_parse_json(_read_text(path), path), ontology)


def save_dialogs(dialogs: Sequence[Dialog], path):
    save_json(dialogs_to_json(dialogs), path)


def states_to_json(dialogs: Sequence[Dialog], states: Sequence[Sequence[DialogState]]) -> dict:
    return {"dialogs": [{"dialog_id": d.dialog_id, "states": [s.to_json() for s in ss]}
                        for d, ss in zip(dialogs, states)]}


def load_states(path) -> dict[str, list[DialogState]]:
    """Per-dialog state lists from a tracker output file or a gold dialog file."""
    data = _parse_json(_read_text(path), path)
    entries = data.get("dialogs") if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise MissingField(f"{path}: missing 'dialogs' list")
    out = {}
    for i, d in enumerate(entries):
        did = str(d.get("dialog_id", i))
        if "states" in d:
            out[did] = [_state(s, None, did) for s in d["states"]]
        elif "turns" in d:
            out[did] = [_state(t.get("belief_state", {}), None, did) for t in d["turns"]]
        else:
            raise MissingField(f"{path}: dialog {did} has neither 'states' nor 'turns'")
    return out


def save_corpus(sentences: Sequence[str], path):
    _atomic_write(path, "".join(s + "\n" for s in sentences).encode("utf-8"))


# ----------------------------------------------------------------- checkpoint

MAGIC = b"DSTD"
VERSION = 1
_HEADER = struct.Struct("<4sI6IIII")  # magic, version, N d1 d2 h V P, dropout ppm, head flags, vocab count
FLAG_MLM, FLAG_SCORER = 1, 2
DIGEST_BYTES = 32


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocab
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> EncoderConfig:
        return self.params.config


def _atomic_write(path, data: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _vocab_block(vocab: Vocab) -> bytes:
    parts = []
    for tok in vocab.id_to_token:
        b = tok.encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b)
    return b"".join(parts)


def checkpoint_bytes(params: ModelParams, vocab: Vocab) -> bytes:
    cfg = params.config
    if len(vocab) != cfg.V:
        raise ParseError(f"vocab has {len(vocab)} tokens but config V={cfg.V}")
    flags = (FLAG_MLM if params.has_mlm_head else 0) | (FLAG_SCORER if params.has_scorer_head else 0)
    shapes = param_shapes(cfg, params.has_mlm_head, params.has_scorer_head)
    if list(shapes) != list(params.tensors):
        raise ParseError("parameter names are not in canonical order")
    header = _HEADER.pack(MAGIC, VERSION, cfg.N, cfg.d1, cfg.d2, cfg.h, cfg.V, cfg.P,
                          int(round(cfg.dropout_rate * 1e6)), flags, len(vocab))
    flat = np.concatenate([params.tensors[k].detach().to(torch.float32).reshape(-1).numpy() for k in shapes])
    payload = struct.pack("<Q", flat.size) + flat.astype("<f4").tobytes()
    body = header + _vocab_block(vocab) + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(params: ModelParams, vocab: Vocab, path):
    _atomic_write(path, checkpoint_bytes(params, vocab))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + DIGEST_BYTES or data[:4] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    body, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("checkpoint checksum does not match")
    magic, version, N, d1, d2, h, V, P, ppm, flags, n_vocab = _HEADER.unpack_from(body, 0)
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} (supported: {VERSION})")
    cfg = EncoderConfig(N=N, d1=d1, d2=d2, h=h, V=V, P=P, dropout_rate=ppm / 1e6)
    off = _HEADER.size
    tokens = []
    for _ in range(n_vocab):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        tokens.append(body[off:off + n].decode("utf-8"))
        off += n
    vocab = Vocab(tuple(tokens))
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    shapes = param_shapes(cfg, bool(flags & FLAG_MLM), bool(flags & FLAG_SCORER))
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if count != expected or len(body) - off != 4 * count:
        raise ParseError(f"payload holds {count} values, config implies {expected}")
    flat = np.frombuffer(body, dtype="<f4", count=count, offset=off)
    tensors = OrderedDict()
    pos = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        tensors[name] = torch.from_numpy(flat[pos:pos + n].astype(np.float32).reshape(shape))
        pos += n
    return Checkpoint(ModelParams(cfg, tensors), vocab)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    return parse_checkpoint(data)


def projected_checkpoint_bytes(config: EncoderConfig, vocab_block_bytes: int = 0,
                               mlm_head: bool = False, scorer_head: bool = True) -> int:
    n = sum(int(np.prod(s)) for s in param_shapes(config, mlm_head, scorer_head).values())
    return _HEADER.size + vocab_block_bytes + 8 + 4 * n + DIGEST_BYTES


# ------------------------------------------------------ synthetic DST domain

DEFAULT_SLOTS = {
    "area": ["centre", "east", "north", "south", "west"],
    "food": ["chinese", "french", "indian", "italian", "korean"],
    "price": ["cheap", "expensive", "luxury", "moderate", "budget"],
}
DEFAULT_REQUESTABLE = ["address", "phone", "postcode"]
DEFAULT_TEMPLATES = {
    "inform": {
        "area": ["in the {value} of town", "somewhere in the {value}", "the {value} part of town please"],
        "food": ["i want {value} food", "a place serving {value} food", "how about {value} food"],
        "price": ["something {value} please", "a {value} restaurant", "in the {value} price range"],
        "*": ["i am looking for {value} {slot}", "{value} {slot} please"],
    },
    "change": ["actually , i would prefer {phrase} instead", "no wait , make that {phrase}",
               "sorry , i changed my mind , {phrase}"],
    "request": ["what is the {slot} ?", "can i have the {slot} please ?", "could you tell me the {slot} ?",
                "and the {slot} ?"],
    "system": ["what {slot} would you like ?", "do you have a preference for {slot} ?",
               "i found a place . anything else ?", "is there anything else i can help with ?"],
    "join": [" and ", " , also "],
}


@dataclass
class SyntheticDomainSpec:
    slots: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SLOTS.items()})
    requestable: list = field(default_factory=lambda: list(DEFAULT_REQUESTABLE))
    templates: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_TEMPLATES)))
    train_dialogs: int = 300
    dev_dialogs: int = 50
    test_dialogs: int = 50
    min_turns: int = 2
    max_turns: int = 5
    seed: int = 0

    def validate(self):
        if not self.slots or any(not v for v in self.slots.values()):
            raise InvalidSpec("every slot needs at least one value")
        if min(self.train_dialogs, self.dev_dialogs, self.test_dialogs) < 0:
            raise InvalidSpec("dialog counts must be non-negative")
        if not 1 <= self.min_turns <= self.max_turns:
            raise InvalidSpec("need 1 <= min_turns <= max_turns")
        inform = self.templates.get("inform", {})
        for slot in inform:
            if slot != "*" and slot not in self.slots:
                raise InvalidSpec(f"inform template for undeclared slot {slot!r}")
        for slot in self.slots:
            if slot not in inform and "*" not in inform:
                raise InvalidSpec(f"no inform template covers slot {slot!r}")
        for key in ("change", "request", "system", "join"):
            if not self.templates.get(key):
                raise InvalidSpec(f"templates need a non-empty {key!r} list")

    def ontology(self) -> Ontology:
        return Ontology({k: tuple(v) for k, v in self.slots.items()}, tuple(self.requestable))


def _inform_phrase(spec, rng, slot, value):
    inform = spec.templates["inform"]
    return rng.choice(inform.get(slot) or inform["*"]).format(value=value, slot=slot)


def _gen_dialog(spec: SyntheticDomainSpec, rng: random.Random, dialog_id: str) -> Dialog:
    slots = sorted(spec.slots)
    tpl = spec.templates
    n_turns = rng.randint(spec.min_turns, spec.max_turns)
    goals: dict = {}
    turns = []
    system = ""
    state = DialogState()
    for t in range(n_turns):
        unset = [s for s in slots if s not in goals]
        changeable = [s for s in goals if len(spec.slots[s]) > 1]
        options = []
        if unset:
            options += ["inform"] * 3
        if changeable:
            options.append("change")
        if spec.requestable and t > 0:
            options += ["request"] * 2
        if not options:
            options = ["inform"] if slots else ["request"]
        intent = "inform" if t == 0 else rng.choice(options)
        label = set()
        phrases = []
        if intent == "inform":
            pool = unset or slots
            chosen = rng.sample(pool, rng.randint(1, min(2, len(pool))))
            for slot in chosen:
                value = rng.choice(spec.slots[slot])
                label.add(Candidate(slot, value))
                phrases.append(_inform_phrase(spec, rng, slot, value))
            utterance = rng.choice(tpl["join"]).join(phrases)
        elif intent == "change":
            slot = rng.choice(sorted(changeable))
            value = rng.choice([v for v in spec.slots[slot] if v != goals[slot]])
            label.add(Candidate(slot, value))
            utterance = rng.choice(tpl["change"]).format(phrase=_inform_phrase(spec, rng, slot, value))
        else:
            for slot in rng.sample(spec.requestable, rng.randint(1, min(2, len(spec.requestable)))):
                label.add(Candidate(REQUEST, slot))
                phrases.append(rng.choice(tpl["request"]).format(slot=slot))
            utterance = rng.choice(tpl["join"]).join(phrases)
        state = update_state(state, label)
        goals = dict(state.goals)
        turns.append(DialogTurn(utterance, system, frozenset(label), state))
        unset = [s for s in slots if s not in goals]
        system_tpl = rng.choice(tpl["system"])
        system = system_tpl.format(slot=rng.choice(unset or slots))
    return Dialog(dialog_id, tuple(turns))


def generate_synthetic_domain(spec: SyntheticDomainSpec) -> tuple[Ontology, dict]:
    """Ontology plus ``{"train", "dev", "test"}`` dialog lists, fully determined by ``spec.seed``."""
    spec.validate()
    rng = random.Random(spec.seed)
    splits = {}
    for name, n in (("train", spec.train_dialogs), ("dev", spec.dev_dialogs), ("test", spec.test_dialogs)):
        splits[name] = [_gen_dialog(spec, rng, f"{name}-{i:04d}") for i in range(n)]
    return spec.ontology(), splits


# ------------------------------------------------------ synthetic MLM corpus

# Each topic owns its nouns, verbs and adjectives, so a masked content word is
# predictable from the rest of the sentence up to its topic.
_TOPIC_STEMS = [
    "river", "forest", "harbor", "market", "castle", "garden", "kitchen", "library", "orchard", "desert",
    "mountain", "village", "workshop", "theater", "stadium", "island", "temple", "factory", "school", "farm",
    "hospital", "station", "museum", "bakery", "prison", "circus", "mine", "church", "palace", "camp",
]
_SYLLABLES = ["ka", "lo", "mi", "ren", "tu", "sha", "vo", "pel", "dri", "nor", "ga", "bi", "zum", "te",
              "wen", "fa", "quo", "ly", "ster", "ob"]
_TEMPLATES = [
    "the {adj} {noun} {verb} the {noun2} near the {place} .",
    "a {noun} {verb} every {noun2} in the {place} .",
    "in the {place} , the {noun} {verb} a {adj} {noun2} .",
    "the {noun} and the {noun2} {verb} together at the {place} .",
    "every {adj} {noun} at the {place} {verb} slowly .",
    "near the {place} , a {adj} {noun} {verb} the old {noun2} .",
    "she said the {noun} {verb} the {adj} {noun2} .",
    "when the {noun} {verb} , the {noun2} was {adj} .",
]


def _corpus_lexicon():
    rng = random.Random(1234)
    words = set()
    topics = []

    def fresh(n, suffix=""):
        out = []
        while len(out) < n:
            w = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3))) + suffix
            if w not in words:
                words.add(w)
                out.append(w)
        return out

    for stem in _TOPIC_STEMS:
        topics.append({
            "place": [stem],
            "noun": fresh(6),
            "verb": fresh(4, "ed"),
            "adj": fresh(4, "ish"),
        })
    return topics


def generate_synthetic_corpus(seed: int, count: int) -> list[str]:
    """``count`` sentences from a topic-structured template grammar."""
    if count < 1:
        raise InvalidSpec("sentence count must be at least 1")
    topics = _corpus_lexicon()
    rng = random.Random(seed)
    sentences = []
    for _ in range(count):
        topic = rng.choice(topics)
        noun, noun2 = rng.sample(topic["noun"], 2)
        sentences.append(rng.choice(_TEMPLATES).format(
            adj=rng.choice(topic["adj"]), noun=noun, noun2=noun2,
            verb=rng.choice(topic["verb"]), place=topic["place"][0]))
    return sentences
