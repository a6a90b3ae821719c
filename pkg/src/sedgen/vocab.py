"""Event lists, the caption template grammar, and its closed vocabulary.

Captions follow one pattern per event, joined by SEP:

    <Class> heard between <X> and <Y> seconds

Times are quantized to a 0.1 s grid (round half up) and drawn from a closed
set of time tokens "0.0" ... "<clip_seconds>". The vocabulary is therefore
fully enumerable: 5 specials, the class names, 4 template keywords, and the
time grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, InputError, ParseError, TruncationError

PAD, BOS, EOS, SEP, CLS = "PAD", "BOS", "EOS", "SEP", "CLS"
SPECIALS = (PAD, BOS, EOS, SEP, CLS)
KEYWORDS = ("heard", "between", "and", "seconds")
TOKENS_PER_EVENT = 7  # class heard between X and Y seconds


@dataclass(frozen=True, order=True)
class Event:
    label: str
    onset: float
    offset: float

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def validate_events(events, clip_seconds: float) -> None:
    for ev in events:
        if not (0.0 <= ev.onset < ev.offset <= clip_seconds + 1e-9):
            raise InputError(
                f"event {ev.label} [{ev.onset}, {ev.offset}] violates 0 <= onset < offset <= {clip_seconds}"
            )


def quantize_tenths(t: float) -> int:
    """Round half up onto the 0.1 s grid, returned as integer tenths."""
    return int(math.floor(t * 10.0 + 0.5))


def tenths_to_token(tenths: int) -> str:
    if tenths < 0:
        raise InputError(f"negative time {tenths/10}")
    return f"{tenths // 10}.{tenths % 10}"


def canonical_events(events, clip_seconds: float = 10.0) -> list[Event]:
    """Quantize to the time grid, repair zero-length spans, sort.

    Quantization can collapse onset == offset; the span is restored by pushing
    the offset up one grid step, or (only possible at the very top of the
    range) pulling the onset down one step. Sort key is (onset, label, offset).
    """
    max_tenths = int(round(clip_seconds * 10))
    out = []
    for ev in events:
        on = max(0, min(quantize_tenths(ev.onset), max_tenths))
        off = max(0, min(quantize_tenths(ev.offset), max_tenths))
        if on == off:
            if off < max_tenths:
                off += 1
            else:
                on -= 1
        out.append(Event(ev.label, on / 10.0, off / 10.0))
    return sorted(out, key=lambda e: (e.onset, e.label, e.offset))


@dataclass
class TokenSequence:
    """Token ids, BOS-initial and EOS-terminal unless still being generated."""

    ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def padded(self, length: int, pad_id: int) -> list[int]:
        if len(self.ids) > length:
            raise TruncationError(f"sequence of {len(self.ids)} ids does not fit {length}")
        return self.ids + [pad_id] * (length - len(self.ids))


class Vocabulary:
    """Closed token set: specials, class names, keywords, time grid."""

    def __init__(self, classes, clip_seconds: float = 10.0):
        classes = list(classes)
        if not classes:
            raise ConfigError("vocabulary needs at least one class")
        if len(set(classes)) != len(classes):
            raise ConfigError(f"duplicate class names in {classes}")
        reserved = set(SPECIALS) | set(KEYWORDS)
        for name in classes:
            if not name or any(ch.isspace() for ch in name):
                raise ConfigError(f"class name {name!r} must be a single non-empty token")
            if name in reserved:
                raise ConfigError(f"class name {name!r} collides with a reserved token")
        max_tenths = int(round(clip_seconds * 10))
        if max_tenths < 1:
            raise ConfigError(f"clip_seconds {clip_seconds} leaves no usable time grid")
        time_tokens = [tenths_to_token(t) for t in range(max_tenths + 1)]
        if set(classes) & set(time_tokens):
            raise ConfigError("class names may not look like time tokens")

        self.classes = classes
        self.clip_seconds = float(clip_seconds)
        self.tokens: list[str] = list(SPECIALS) + classes + list(KEYWORDS) + time_tokens
        self.index: dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.sep_id, self.cls_id = range(5)
        self.class_ids = {name: self.index[name] for name in classes}
        self.heard_id = self.index["heard"]
        self.between_id = self.index["between"]
        self.and_id = self.index["and"]
        self.seconds_id = self.index["seconds"]
        self.time_id_base = self.index["0.0"]
        self.n_time_tokens = max_tenths + 1

    @property
    def size(self) -> int:
        return len(self.tokens)

    def time_id(self, tenths: int) -> int:
        if not 0 <= tenths < self.n_time_tokens:
            raise InputError(f"time {tenths/10:.1f}s is outside the token grid")
        return self.time_id_base + tenths

    def id_to_tenths(self, token_id: int) -> int | None:
        if self.time_id_base <= token_id < self.time_id_base + self.n_time_tokens:
            return token_id - self.time_id_base
        return None

    def is_class_id(self, token_id: int) -> bool:
        return 5 <= token_id < 5 + len(self.classes)

    def encode(self, text: str) -> list[int]:
        ids = []
        for pos, tok in enumerate(text.split()):
            if tok not in self.index:
                raise ParseError(f"unknown token {tok!r} at position {pos}")
            ids.append(self.index[tok])
        return ids

    def decode(self, ids, strip_pad: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise ParseError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            if strip_pad and i == self.pad_id:
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def to_token_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_token_list(cls, tokens) -> "Vocabulary":
        tokens = list(tokens)
        if tokens[:5] != list(SPECIALS):
            raise InputError("token list does not start with the special tokens")
        try:
            heard_at = tokens.index("heard")
        except ValueError:
            raise InputError("token list is missing the template keywords") from None
        classes = tokens[5:heard_at]
        n_times = len(tokens) - heard_at - len(KEYWORDS)
        vocab = cls(classes, clip_seconds=(n_times - 1) / 10.0)
        if vocab.tokens != tokens:
            raise InputError("token list does not round-trip; vocabulary layout mismatch")
        return vocab


def events_to_tokens(events, vocab: Vocabulary, max_len: int = 64) -> TokenSequence:
    """Render an event list as BOS <event> (SEP <event>)* EOS token ids.

    Events are canonicalized (quantized/sorted) first. If the rendering would
    exceed ``max_len`` a TruncationError is raised carrying the events that do
    not fit; nothing is silently dropped.
    """
    canon = canonical_events(events, vocab.clip_seconds)
    for ev in canon:
        if ev.label not in vocab.class_ids:
            raise InputError(f"label {ev.label!r} is not in the vocabulary classes {vocab.classes}")
    # BOS + k events * 7 tokens + (k-1) SEP + EOS = 8k + 1
    max_events = (max_len - 1) // (TOKENS_PER_EVENT + 1)
    if len(canon) > max_events:
        raise TruncationError(
            f"{len(canon)} events need {8 * len(canon) + 1} tokens > max_len {max_len}; "
            f"dropped: {[e.label for e in canon[max_events:]]}",
            dropped_events=canon[max_events:],
        )
    ids = [vocab.bos_id]
    for i, ev in enumerate(canon):
        if i:
            ids.append(vocab.sep_id)
        ids.extend(
            [
                vocab.class_ids[ev.label],
                vocab.heard_id,
                vocab.between_id,
                vocab.time_id(int(round(ev.onset * 10))),
                vocab.and_id,
                vocab.time_id(int(round(ev.offset * 10))),
                vocab.seconds_id,
            ]
        )
    ids.append(vocab.eos_id)
    return TokenSequence(ids)


# Canonical renderer name: an event list in, the template "text" out (as
# token ids; the string form is vocab.decode of it).
events_to_text = events_to_tokens


def default_classes() -> list[str]:
    return ["Beep", "Chirp", "Buzz", "Hiss"]
