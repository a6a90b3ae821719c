"""Caption parsing and detection scoring.

``parse_sequence`` is a total function turning generated token ids or raw
text back into an event list, collecting every fragment it must reject with
the reason. ``event_f1`` scores onset/offset agreement under a collar with
one-to-one maximum matching; ``segment_f1`` scores fixed-length time tiles.
``evaluate_run`` wires both over a dataset manifest and a directory of
per-clip prediction files.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, InputError
from .scenes import load_manifest, manifest_events
from .vocab import BOS, CLS, EOS, PAD, SEP, TOKENS_PER_EVENT, Event, TokenSequence, Vocabulary

logger = logging.getLogger("sedgen.metrics")

_EVENT_SORT_KEY = lambda e: (e.onset, e.label, e.offset)  # noqa: E731

_DROP_WORDS = {PAD, BOS, CLS}   # carry no caption content
_FLUSH_WORDS = {SEP, EOS}       # fragment boundaries


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


@dataclass
class ParsedPrediction:
    events: list[Event]
    rejected_spans: list[tuple[str, str]]  # (fragment text, reason)


def _ids_to_words(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    words = []
    for i in ids:
        i = int(i)
        words.append(vocab.tokens[i] if 0 <= i < vocab.size else f"<id:{i}>")
    return words


def _split_fragments(words: Iterable[str]) -> list[list[str]]:
    """Cut the word stream at SEP/EOS markers and sentence-ending periods."""
    fragments: list[list[str]] = []
    current: list[str] = []

    def flush():
        if current:
            fragments.append(list(current))
            current.clear()

    for raw in words:
        word = raw
        sentence_end = False
        if word == ".":
            flush()
            continue
        if word.endswith(".") and not _looks_numeric(word):
            word = word[:-1]
            sentence_end = True
        if word in _DROP_WORDS or word == "":
            continue
        if word in _FLUSH_WORDS:
            flush()
            continue
        current.append(word)
        if sentence_end:
            flush()
    flush()
    return fragments


def _looks_numeric(word: str) -> bool:
    try:
        float(word)
        return True
    except ValueError:
        return False


def _parse_time(word: str) -> float | None:
    try:
        value = float(word)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def _fragment_to_event(
    words: list[str], vocab: Vocabulary, clip_seconds: float
) -> tuple[Event | None, str | None]:
    if len(words) != TOKENS_PER_EVENT:
        return None, f"expected {TOKENS_PER_EVENT} tokens, got {len(words)}"
    label, w_heard, w_between, w_on, w_and, w_off, w_seconds = words
    if (w_heard, w_between, w_and, w_seconds) != ("heard", "between", "and", "seconds"):
        return None, "does not match '<class> heard between <time> and <time> seconds'"
    if label not in vocab.class_ids:
        return None, f"unknown class {label!r}"
    onset = _parse_time(w_on)
    if onset is None:
        return None, f"non-numeric time {w_on!r}"
    offset = _parse_time(w_off)
    if offset is None:
        return None, f"non-numeric time {w_off!r}"
    if onset >= offset:
        return None, f"onset {w_on} >= offset {w_off}"
    if onset < 0.0 or offset > clip_seconds:
        return None, f"times outside [0, {clip_seconds:g}]"
    return Event(label, onset, offset), None


def parse_sequence(seq, vocab: Vocabulary, clip_seconds: float | None = None) -> ParsedPrediction:
    """Extract events from generated output; never raises.

    ``seq`` may be raw text, a TokenSequence, or an iterable of token ids.
    Fragments (SEP-, EOS-, or sentence-delimited spans) that fail the
    template, name an unknown class, carry non-numeric or out-of-range
    times, or put the onset at/after the offset are returned in
    ``rejected_spans`` with a reason instead of crashing scoring.
    """
    if clip_seconds is None:
        clip_seconds = vocab.clip_seconds
    if isinstance(seq, TokenSequence):
        words = _ids_to_words(seq.ids, vocab)
    elif isinstance(seq, str):
        words = seq.split()
    else:
        words = _ids_to_words(seq, vocab)

    events: list[Event] = []
    rejected: list[tuple[str, str]] = []
    for fragment in _split_fragments(words):
        event, reason = _fragment_to_event(fragment, vocab, clip_seconds)
        if event is not None:
            events.append(event)
        else:
            rejected.append((" ".join(fragment), reason))
    return ParsedPrediction(events=sorted(events, key=_EVENT_SORT_KEY), rejected_spans=rejected)


# --------------------------------------------------------------------------
# Scores and reports
# --------------------------------------------------------------------------


@dataclass
class ClassScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "ClassScore":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp=int(tp), fp=int(fp), fn=int(fn), precision=precision, recall=recall, f1=f1)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class MetricsReport:
    mode: str  # "event" or "segment"
    config: dict
    micro: ClassScore
    per_class: dict[str, ClassScore]
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config,
            "micro": self.micro.to_dict(),
            "per_class": {name: score.to_dict() for name, score in sorted(self.per_class.items())},
            "macro_f1": self.macro_f1,
        }


def _build_report(mode: str, config: dict, counts: dict[str, list[int]]) -> MetricsReport:
    per_class = {name: ClassScore.from_counts(*tpfpfn) for name, tpfpfn in counts.items()}
    totals = [sum(c[i] for c in counts.values()) for i in range(3)]
    micro = ClassScore.from_counts(*totals)
    macro = float(np.mean([s.f1 for s in per_class.values()])) if per_class else 0.0
    return MetricsReport(mode=mode, config=config, micro=micro, per_class=per_class, macro_f1=macro)


@dataclass
class MetricsConfig:
    collar: float = 0.2
    offset_ratio: float = 0.2
    segment_seconds: float = 1.0

    def __post_init__(self):
        if self.collar <= 0.0:
            raise ConfigError(f"collar must be > 0, got {self.collar}")
        if self.offset_ratio < 0.0:
            raise ConfigError(f"offset_ratio must be >= 0, got {self.offset_ratio}")
        if self.segment_seconds <= 0.0:
            raise ConfigError(f"segment_seconds must be > 0, got {self.segment_seconds}")


# --------------------------------------------------------------------------
# Event-based F1
# --------------------------------------------------------------------------


def _event_match(ref: Event, pred: Event, collar: float, offset_ratio: float) -> bool:
    offset_tol = max(collar, offset_ratio * ref.duration)
    return abs(pred.onset - ref.onset) <= collar and abs(pred.offset - ref.offset) <= offset_tol


def _max_matches(refs: Sequence[Event], preds: Sequence[Event], collar: float, ratio: float) -> int:
    """Size of the maximum one-to-one matching under the collar rule."""
    if not refs or not preds:
        return 0
    adjacency = np.zeros((len(refs), len(preds)), dtype=bool)
    for i, ref in enumerate(refs):
        for j, pred in enumerate(preds):
            adjacency[i, j] = _event_match(ref, pred, collar, ratio)
    rows, cols = linear_sum_assignment(adjacency.astype(float), maximize=True)
    best = int(adjacency[rows, cols].sum())
    greedy = _greedy_matches(refs, preds, collar, ratio)
    if greedy != best:
        logger.debug(
            "greedy matching found %d pairs where maximum matching found %d", greedy, best
        )
    return best


def _greedy_matches(refs: Sequence[Event], preds: Sequence[Event], collar: float, ratio: float) -> int:
    """First-fit matching in onset order; only for divergence logging."""
    taken: set[int] = set()
    count = 0
    order = sorted(range(len(preds)), key=lambda j: _EVENT_SORT_KEY(preds[j]))
    for ref in sorted(refs, key=_EVENT_SORT_KEY):
        for j in order:
            if j not in taken and _event_match(ref, preds[j], collar, ratio):
                taken.add(j)
                count += 1
                break
    return count


def _split_by_class(events: Sequence[Event]) -> dict[str, list[Event]]:
    by_class: dict[str, list[Event]] = {}
    for event in events:
        by_class.setdefault(event.label, []).append(event)
    return by_class


def event_f1(
    refs: Mapping[str, Sequence[Event]],
    preds: Mapping[str, Sequence[Event]],
    collar: float = 0.2,
    offset_ratio: float = 0.2,
) -> MetricsReport:
    """Onset/offset-collar F1 with one-to-one maximum matching per clip-class.

    A prediction matches a reference iff |onset delta| <= collar and
    |offset delta| <= max(collar, offset_ratio * reference duration).
    Counts pool over clips (micro); per-class tables pool each class alone.
    """
    if collar <= 0.0:
        raise ConfigError(f"collar must be > 0, got {collar}")
    counts: dict[str, list[int]] = {}
    for clip_id in sorted(set(refs) | set(preds)):
        ref_by_class = _split_by_class(refs.get(clip_id, ()))
        pred_by_class = _split_by_class(preds.get(clip_id, ()))
        for label in set(ref_by_class) | set(pred_by_class):
            r = ref_by_class.get(label, [])
            p = pred_by_class.get(label, [])
            tp = _max_matches(r, p, collar, offset_ratio)
            cell = counts.setdefault(label, [0, 0, 0])
            cell[0] += tp
            cell[1] += len(p) - tp
            cell[2] += len(r) - tp
    config = {"collar": collar, "offset_ratio": offset_ratio}
    return _build_report("event", config, counts)


# --------------------------------------------------------------------------
# Segment-based F1
# --------------------------------------------------------------------------


def _active_segments(events: Sequence[Event], segment_seconds: float, n_segments: int) -> set[int]:
    """Indices of tiles an event of the list overlaps with positive measure."""
    active: set[int] = set()
    for event in events:
        for k in range(n_segments):
            lo = k * segment_seconds
            hi = lo + segment_seconds
            if min(event.offset, hi) - max(event.onset, lo) > 0.0:
                active.add(k)
    return active


def segment_f1(
    refs: Mapping[str, Sequence[Event]],
    preds: Mapping[str, Sequence[Event]],
    segment_seconds: float = 1.0,
    clip_seconds: float = 10.0,
) -> MetricsReport:
    """Fixed-tile F1: a (segment, class) cell is active iff any event overlaps it."""
    if segment_seconds <= 0.0:
        raise ConfigError(f"segment_seconds must be > 0, got {segment_seconds}")
    n_segments = int(math.ceil(clip_seconds / segment_seconds - 1e-9))
    counts: dict[str, list[int]] = {}
    for clip_id in sorted(set(refs) | set(preds)):
        ref_by_class = _split_by_class(refs.get(clip_id, ()))
        pred_by_class = _split_by_class(preds.get(clip_id, ()))
        for label in set(ref_by_class) | set(pred_by_class):
            ref_active = _active_segments(ref_by_class.get(label, []), segment_seconds, n_segments)
            pred_active = _active_segments(pred_by_class.get(label, []), segment_seconds, n_segments)
            cell = counts.setdefault(label, [0, 0, 0])
            cell[0] += len(ref_active & pred_active)
            cell[1] += len(pred_active - ref_active)
            cell[2] += len(ref_active - pred_active)
    config = {"segment_seconds": segment_seconds, "clip_seconds": clip_seconds}
    return _build_report("segment", config, counts)


# --------------------------------------------------------------------------
# Run-level evaluation
# --------------------------------------------------------------------------


def _load_prediction(path: Path, vocab: Vocabulary, clip_seconds: float) -> list[Event]:
    """Events from one prediction file; any malformation degrades to empty."""
    if not path.exists():
        logger.warning("missing prediction file %s; scoring as empty", path)
        return []
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        logger.warning("unreadable prediction file %s (%s); scoring as empty", path, exc)
        return []
    try:
        if "events" in payload:
            events = [
                Event(str(e["label"]), float(e["onset"]), float(e["offset"]))
                for e in payload["events"]
            ]
            return sorted(events, key=_EVENT_SORT_KEY)
        if "text" in payload:
            return parse_sequence(str(payload["text"]), vocab, clip_seconds).events
        logger.warning("prediction file %s has neither 'events' nor 'text'; scoring as empty", path)
        return []
    except (KeyError, TypeError, ValueError) as exc:
        logger.warning("malformed prediction file %s (%s); scoring as empty", path, exc)
        return []


def evaluate_run(
    manifest,
    split: str,
    pred_dir,
    cfg: MetricsConfig | None = None,
    out_path=None,
) -> tuple[MetricsReport, MetricsReport, dict]:
    """Score one split of a dataset against per-clip prediction files.

    Missing or malformed prediction files count as empty predictions (and are
    logged), keeping evaluation total. Returns the event- and segment-based
    reports plus the combined dictionary; when ``out_path`` is given the
    dictionary is also written there as JSON (stable key order).
    """
    if cfg is None:
        cfg = MetricsConfig()
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    clip_seconds = float(manifest["clip_seconds"])
    vocab = Vocabulary(manifest["classes"], clip_seconds=clip_seconds)
    entries = [c for c in manifest["clips"] if c["split"] == split]
    if not entries:
        known = sorted({c["split"] for c in manifest["clips"]})
        raise InputError(f"split {split!r} has no clips; manifest has splits {known}")

    pred_dir = Path(pred_dir)
    refs = {entry["id"]: manifest_events(entry) for entry in entries}
    preds = {
        entry["id"]: _load_prediction(pred_dir / f"{entry['id']}.json", vocab, clip_seconds)
        for entry in entries
    }

    event_report = event_f1(refs, preds, collar=cfg.collar, offset_ratio=cfg.offset_ratio)
    segment_report = segment_f1(
        refs, preds, segment_seconds=cfg.segment_seconds, clip_seconds=clip_seconds
    )
    combined = {
        "split": split,
        "n_clips": len(entries),
        "config_hash": manifest.get("config_hash", ""),
        "event": event_report.to_dict(),
        "segment": segment_report.to_dict(),
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as f:
            json.dump(combined, f, indent=2, sort_keys=True)
            f.write("\n")
    return event_report, segment_report, combined


def format_report_table(event_report: MetricsReport, segment_report: MetricsReport) -> str:
    """Aligned per-class / micro / macro table over both scoring modes."""
    names = sorted(set(event_report.per_class) | set(segment_report.per_class))
    width = max([len(n) for n in names + ["macro-F1"]], default=8)
    header = (
        f"{'class':<{width}}  {'ev-P':>6} {'ev-R':>6} {'ev-F1':>6}  "
        f"{'seg-P':>6} {'seg-R':>6} {'seg-F1':>6}"
    )
    lines = [header, "-" * len(header)]
    empty = ClassScore.from_counts(0, 0, 0)

    def row(name: str, ev: ClassScore, seg: ClassScore) -> str:
        return (
            f"{name:<{width}}  {ev.precision:>6.3f} {ev.recall:>6.3f} {ev.f1:>6.3f}  "
            f"{seg.precision:>6.3f} {seg.recall:>6.3f} {seg.f1:>6.3f}"
        )

    for name in names:
        lines.append(
            row(name, event_report.per_class.get(name, empty), segment_report.per_class.get(name, empty))
        )
    lines.append("-" * len(header))
    lines.append(row("micro", event_report.micro, segment_report.micro))
    lines.append(
        f"{'macro-F1':<{width}}  {'':>6} {'':>6} {event_report.macro_f1:>6.3f}  "
        f"{'':>6} {'':>6} {segment_report.macro_f1:>6.3f}"
    )
    return "\n".join(lines)
