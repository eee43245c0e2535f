"""Frequency-built WordPiece vocabulary, greedy longest-match tokenization and
[CLS]/[SEP] packing."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CandidateTooLong, EmptyCorpus, IoError, ParseError, TargetSizeTooSmall

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

DEFAULT_MAX_LEN = 128
# suffix pieces longer than this are almost always fragments of a single word
MAX_SUFFIX_CHARS = 4


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:5]) != SPECIAL_TOKENS:
            raise ParseError("vocab must start with the five special tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ParseError("vocab contains duplicate tokens")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot read vocab file {path}: {e}") from e
        return cls(tuple(text.splitlines()))


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...] = ()
    ids: tuple[int, ...] = ()

    def __len__(self):
        return len(self.tokens)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.tokens + other.tokens, self.ids + other.ids)

    @classmethod
    def special(cls, token: str) -> "TokenSequence":
        return cls((token,), (SPECIAL_TOKENS.index(token),))


@dataclass(frozen=True)
class PackedInput:
    ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]

    @property
    def M(self) -> int:
        return len(self.ids)

    @property
    def length(self) -> int:
        """Number of non-padding positions."""
        return sum(self.attention_mask)


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    # all non-alphanumeric printable ASCII counts as punctuation, as in BERT
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split every punctuation char off."""
    words = []
    for chunk in text.lower().split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def build_vocab(corpus: Sequence[str], target_size: int) -> Vocab:
    """Build a vocabulary of at most ``target_size`` tokens from ``corpus``.

    Every character gets a piece in each position it occurs in (word-initial
    as a bare char, word-internal as ``##c``) so in-corpus text never yields
    [UNK]. Remaining slots go to whole words and ``##`` suffixes of 2 to
    ``MAX_SUFFIX_CHARS`` characters, highest count first, ties broken
    lexicographically.
    """
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    word_counts = Counter(w for line in corpus for w in basic_tokenize(line))
    if not word_counts:
        raise EmptyCorpus("corpus contains no words")

    char_pieces = set()
    for word in word_counts:
        char_pieces.add(word[0])
        char_pieces.update("##" + ch for ch in word[1:])
    required = sorted(char_pieces)
    if target_size < len(SPECIAL_TOKENS) + len(required):
        raise TargetSizeTooSmall(
            f"target_size={target_size} cannot hold {len(SPECIAL_TOKENS)} specials "
            f"and {len(required)} character pieces"
        )

    scores = Counter()
    for word, n in word_counts.items():
        scores[word] += n
        for k in range(2, min(MAX_SUFFIX_CHARS, len(word) - 1) + 1):
            scores["##" + word[-k:]] += n
    taken = set(required)
    ranked = sorted((t for t in scores if t not in taken), key=lambda t: (-scores[t], t))
    room = target_size - len(SPECIAL_TOKENS) - len(required)
    return Vocab(SPECIAL_TOKENS + tuple(required) + tuple(ranked[:room]))


def _wordpiece(word: str, vocab: Vocab) -> list[str]:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            sub = word[start:end] if start == 0 else "##" + word[start:end]
            if sub in vocab:
                piece = sub
                break
            end -= 1
        if piece is None:
            pieces.append(UNK)
            start += 1
        else:
            pieces.append(piece)
            start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    tokens = [p for word in basic_tokenize(text) for p in _wordpiece(word, vocab)]
    return TokenSequence(tuple(tokens), tuple(vocab.id(t) for t in tokens))


def detokenize(tokens: Iterable[str]) -> str:
    out = []
    for tok in tokens:
        if tok.startswith("##") and out:
            out[-1] += tok[2:]
        else:
            out.append(tok)
    return " ".join(out)


def _pad(ids, segments, max_len):
    n = len(ids)
    pad = max_len - n
    return PackedInput(
        tuple(ids) + (PAD_ID,) * pad,
        tuple(segments) + (0,) * pad,
        (1,) * n + (0,) * pad,
    )


def pack_pair(context: TokenSequence, candidate: TokenSequence, max_len: int = DEFAULT_MAX_LEN) -> PackedInput:
    """``[CLS] context [SEP] candidate [SEP]``, padded to ``max_len``.

    The candidate is never truncated; the context loses its oldest tokens first.
    """
    if len(candidate) + 3 > max_len:
        raise CandidateTooLong(f"candidate of {len(candidate)} tokens does not fit max_len={max_len}")
    room = max_len - 3 - len(candidate)
    ctx = context.ids[len(context.ids) - room:] if len(context.ids) > room else context.ids
    ids = (CLS_ID, *ctx, SEP_ID, *candidate.ids, SEP_ID)
    segments = (0,) * (len(ctx) + 2) + (1,) * (len(candidate) + 1)
    return _pad(ids, segments, max_len)


def pack_single(sentence: TokenSequence, max_len: int = DEFAULT_MAX_LEN) -> PackedInput:
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = (CLS_ID, *sentence.ids[: max_len - 2], SEP_ID)
    return _pad(ids, (0,) * len(ids), max_len)


def load_corpus(path) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"cannot read corpus {path}: {e}") from e
    return [line for line in lines if line.strip()]
