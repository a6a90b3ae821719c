"""Inference-time sequence generation.

Strategies: greedy argmax, length-normalized beam search, and nucleus
(top-p) sampling, each optionally constrained by a finite-state acceptor
over the caption template so that every emitted sequence parses into a
valid event list.

All strategies consume a *step function* ``step_fn(ids) -> logits`` that
maps the token prefix (a list of ids, starting with BOS) to the logits of
the next token, shape (vocab_size,). Model-facing wrappers build that
closure around a frozen model in eval mode, encoding the audio once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encoders import AudioEmbedding
from .errors import ConfigError, ContractError, InputError
from .tensor import Tensor
from .vocab import TOKENS_PER_EVENT, TokenSequence, Vocabulary

StepFn = Callable[[list[int]], np.ndarray]

GREEDY = "greedy"
BEAM = "beam"
NUCLEUS = "nucleus"
STRATEGIES = (GREEDY, BEAM, NUCLEUS)


@dataclass
class DecodeConfig:
    strategy: str = GREEDY
    beam_width: int = 4
    nucleus_p: float = 0.9
    max_len: int = 64
    constrained: bool = True
    length_alpha: float = 0.7
    seed: int = 0

    def __post_init__(self):
        self.strategy = str(self.strategy).lower()
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must leave room for BOS and EOS, got {self.max_len}")
        if self.length_alpha < 0.0:
            raise ConfigError(f"length_alpha must be >= 0, got {self.length_alpha}")


# --------------------------------------------------------------------------
# Template acceptor
# --------------------------------------------------------------------------

# Phase names say which token kind the decoder must produce next.
START = "START"            # first position: class token or EOS (empty scene)
CLASS = "CLASS"            # after SEP: a class token must follow
HEARD = "HEARD"            # the literal "heard"
BETWEEN = "BETWEEN"        # the literal "between"
ONSET = "ONSET"            # onset time token (strictly below the grid top)
AND = "AND"                # the literal "and"
OFFSET = "OFFSET"          # offset time token, strictly later than the onset
SECONDS = "SECONDS"        # the literal "seconds"
AFTER_EVENT = "AFTER_EVENT"  # SEP to add an event (budget allowing) or EOS
DONE = "DONE"              # EOS consumed; nothing may follow


@dataclass(frozen=True)
class AutomatonState:
    """Immutable acceptor position: phase, pending onset, tokens used so far.

    ``length`` counts every token emitted so far including BOS, so the slot
    budget for further tokens is ``max_len - length``. ``allowed`` is the
    exact id set the next token must come from.
    """

    phase: str
    onset_tenths: int | None
    length: int
    allowed: tuple[int, ...] = field(repr=False)

    @property
    def allowed_array(self) -> np.ndarray:
        return np.asarray(self.allowed, dtype=np.int64)


class TemplateAutomaton:
    """Finite-state acceptor for ``<class> heard between X and Y seconds`` captions.

    The chain START -> HEARD -> BETWEEN -> ONSET -> AND -> OFFSET -> SECONDS
    emits one event; AFTER_EVENT loops back through SEP/CLASS or exits on EOS.
    Closure guarantees:
      * every state allows at least one token;
      * onsets exclude the top of the time grid so a strictly later offset
        always exists;
      * growing the caption (SEP, or a class from START) is only allowed when
        enough slots remain before ``max_len`` to finish the event AND close
        with EOS, so a constrained decode always reaches EOS in budget and
        can never strand a partial event.
    """

    def __init__(self, vocab: Vocabulary, max_len: int = 64):
        if max_len < 2:
            raise ConfigError(f"max_len must leave room for BOS and EOS, got {max_len}")
        self.vocab = vocab
        self.max_len = int(max_len)
        self._class_ids = tuple(sorted(vocab.class_ids.values()))
        base = vocab.time_id_base
        top = vocab.n_time_tokens - 1  # id offset of the last grid point
        if top < 1:
            raise ConfigError("time grid needs at least two points for onset < offset")
        self._onset_ids = tuple(range(base, base + top))  # excludes the top point
        self._time_base = base
        self._time_top = top

    # -- state construction -------------------------------------------------

    def initial_state(self) -> AutomatonState:
        return self._make(START, None, 1)  # BOS already occupies one slot

    def _make(self, phase: str, onset_tenths: int | None, length: int) -> AutomatonState:
        allowed = self._allowed(phase, onset_tenths, length)
        if not allowed:
            raise ContractError(f"acceptor state {phase} at length {length} allows no token")
        return AutomatonState(phase=phase, onset_tenths=onset_tenths, length=length, allowed=allowed)

    def _allowed(self, phase: str, onset_tenths: int | None, length: int) -> tuple[int, ...]:
        v = self.vocab
        remaining = self.max_len - length
        if phase == START:
            ids: tuple[int, ...] = (v.eos_id,)
            if remaining >= TOKENS_PER_EVENT + 1:  # event body plus EOS
                ids = ids + self._class_ids
            return tuple(sorted(ids))
        if phase == CLASS:
            return self._class_ids
        if phase == HEARD:
            return (v.heard_id,)
        if phase == BETWEEN:
            return (v.between_id,)
        if phase == ONSET:
            return self._onset_ids
        if phase == AND:
            return (v.and_id,)
        if phase == OFFSET:
            first = self._time_base + onset_tenths + 1
            return tuple(range(first, self._time_base + self._time_top + 1))
        if phase == SECONDS:
            return (v.seconds_id,)
        if phase == AFTER_EVENT:
            ids = (v.eos_id,)
            if remaining >= TOKENS_PER_EVENT + 2:  # SEP, a full event, EOS
                ids = ids + (v.sep_id,)
            return tuple(sorted(ids))
        if phase == DONE:
            return ()
        raise ContractError(f"unknown acceptor phase {phase!r}")

    # -- transitions ---------------------------------------------------------

    def advance(self, state: AutomatonState, token_id: int) -> AutomatonState:
        token_id = int(token_id)
        if token_id not in state.allowed:
            raise InputError(
                f"token id {token_id} not allowed in phase {state.phase} "
                f"(allowed: {sorted(state.allowed)})"
            )
        v = self.vocab
        length = state.length + 1
        if token_id == v.eos_id:
            return AutomatonState(phase=DONE, onset_tenths=None, length=length, allowed=())
        if state.phase in (START, CLASS):
            return self._make(HEARD, None, length)
        if state.phase == HEARD:
            return self._make(BETWEEN, None, length)
        if state.phase == BETWEEN:
            return self._make(ONSET, None, length)
        if state.phase == ONSET:
            return self._make(AND, token_id - self._time_base, length)
        if state.phase == AND:
            return self._make(OFFSET, state.onset_tenths, length)
        if state.phase == OFFSET:
            return self._make(SECONDS, None, length)
        if state.phase == SECONDS:
            return self._make(AFTER_EVENT, None, length)
        if state.phase == AFTER_EVENT:  # token was SEP
            return self._make(CLASS, None, length)
        raise ContractError(f"no transition out of phase {state.phase!r}")

    def accepts(self, ids: Sequence[int]) -> bool:
        """True iff ids is BOS <body> EOS and the body follows the template."""
        ids = [int(i) for i in ids]
        if len(ids) < 2 or ids[0] != self.vocab.bos_id:
            return False
        state = self.initial_state()
        for token in ids[1:]:
            if state.phase == DONE:
                return False  # tokens after EOS
            if token not in state.allowed:
                return False
            state = self.advance(state, token)
        return state.phase == DONE


def constrain_logits(logits: np.ndarray, state: AutomatonState) -> np.ndarray:
    """Copy of ``logits`` with every id outside the state's allowed set at -inf."""
    if not state.allowed:
        raise ContractError(f"phase {state.phase} allows no token; cannot constrain")
    out = np.full_like(logits, -np.inf)
    idx = state.allowed_array
    out[idx] = logits[idx]
    return out


# --------------------------------------------------------------------------
# Shared step plumbing
# --------------------------------------------------------------------------


def _log_probs(logits: np.ndarray) -> np.ndarray:
    """Stable log-softmax that tolerates -inf entries (they stay -inf)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise InputError(f"step logits must be rank 1, got shape {logits.shape}")
    top = np.max(logits)
    if not np.isfinite(top):
        raise ContractError("step logits have no finite entry")
    shifted = logits - top
    with np.errstate(divide="ignore"):  # exp(-inf) = 0 -> log handled via mask
        probs = np.exp(shifted)
        log_z = math.log(np.sum(probs))
    return shifted - log_z


def _masked_log_probs(logits: np.ndarray, state: AutomatonState | None, pad_id: int) -> np.ndarray:
    """Next-token log-probs; grammar-masked when a state is given.

    Even unconstrained decoding never emits PAD: PAD is a batching artifact,
    not a caption token, so its logit is floored unconditionally.
    """
    logits = np.asarray(logits, dtype=np.float64).copy()
    if state is not None:
        logits = constrain_logits(logits, state)
    else:
        logits[pad_id] = -np.inf
    return _log_probs(logits)


# --------------------------------------------------------------------------
# Strategies over a step function
# --------------------------------------------------------------------------


def greedy_step_decode(
    step_fn: StepFn,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    automaton: TemplateAutomaton | None = None,
) -> TokenSequence:
    """Argmax each step (lowest id wins ties); stop at EOS or max_len."""
    if automaton is None and cfg.constrained:
        automaton = TemplateAutomaton(vocab, cfg.max_len)
    ids = [vocab.bos_id]
    state = automaton.initial_state() if automaton is not None else None
    while len(ids) < cfg.max_len:
        logp = _masked_log_probs(step_fn(ids), state, vocab.pad_id)
        token = int(np.argmax(logp))  # first max = lowest id on ties
        ids.append(token)
        if token == vocab.eos_id:
            break
        if state is not None:
            state = automaton.advance(state, token)
    return TokenSequence(ids)


@dataclass(frozen=True)
class _Hypothesis:
    ids: tuple[int, ...]
    log_prob: float
    state: AutomatonState | None

    def score(self, alpha: float) -> float:
        return self.log_prob / (len(self.ids) ** alpha)


def beam_step_decode(
    step_fn: StepFn,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    automaton: TemplateAutomaton | None = None,
) -> TokenSequence:
    """Length-normalized beam search.

    Book-keeping, all deterministic:
      * candidates are ranked by summed log-prob, ties broken by parent beam
        order then token id;
      * an EOS candidate ranked inside the top ``beam_width`` is set aside as
        finished (a width-1 beam therefore finishes exactly when greedy
        would); EOS candidates ranked below that are dropped;
      * live beams carry raw summed log-prob; the returned hypothesis
        maximizes log_prob / len^alpha over the finished pool, falling back
        to the best live beam when nothing finished by max_len;
      * the search stops early once ``beam_width`` hypotheses finished, no
        live beam remains, or no live beam can beat the best finished score
        even with a free ride to max_len.
    """
    if automaton is None and cfg.constrained:
        automaton = TemplateAutomaton(vocab, cfg.max_len)
    width = cfg.beam_width
    alpha = cfg.length_alpha
    init_state = automaton.initial_state() if automaton is not None else None
    live: list[_Hypothesis] = [_Hypothesis((vocab.bos_id,), 0.0, init_state)]
    finished: list[_Hypothesis] = []

    while live and len(live[0].ids) < cfg.max_len and len(finished) < width:
        candidates: list[tuple[float, int, int, _Hypothesis]] = []
        for b_idx, hyp in enumerate(live):
            logp = _masked_log_probs(step_fn(list(hyp.ids)), hyp.state, vocab.pad_id)
            token_ids = (
                hyp.state.allowed_array if hyp.state is not None else np.flatnonzero(np.isfinite(logp))
            )
            for token in token_ids:
                token = int(token)
                candidates.append((hyp.log_prob + logp[token], b_idx, token, hyp))
        # Stable rank: best log-prob first, then parent order, then token id.
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live: list[_Hypothesis] = []
        for rank, (total, _b_idx, token, hyp) in enumerate(candidates):
            if token == vocab.eos_id:
                if rank < width:
                    finished.append(_Hypothesis(hyp.ids + (token,), total, None))
                continue
            if len(next_live) < width:
                state = automaton.advance(hyp.state, token) if hyp.state is not None else None
                next_live.append(_Hypothesis(hyp.ids + (token,), total, state))
        live = next_live
        if finished and live:
            # log_prob only falls as tokens append, and len^alpha peaks at
            # max_len, so log_prob / max_len^alpha bounds any future score.
            best_done = max(f.score(alpha) for f in finished)
            horizon = cfg.max_len ** alpha
            if all(h.log_prob / horizon <= best_done for h in live):
                break  # no live beam can catch the finished pool

    pool = finished if finished else live
    if not pool:
        raise ContractError("beam search lost every hypothesis")
    best = max(enumerate(pool), key=lambda item: (item[1].score(alpha), -item[0]))[1]
    return TokenSequence(list(best.ids))


def nucleus_step_decode(
    step_fn: StepFn,
    vocab: Vocabulary,
    cfg: DecodeConfig,
    automaton: TemplateAutomaton | None = None,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    """Top-p sampling: smallest high-probability prefix, renormalized.

    Per step the probabilities are sorted descending (ties keep the lowest
    id first), the shortest prefix whose cumulative mass reaches ``p`` is
    kept, renormalized, and sampled from with the seeded generator.
    """
    if automaton is None and cfg.constrained:
        automaton = TemplateAutomaton(vocab, cfg.max_len)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    ids = [vocab.bos_id]
    state = automaton.initial_state() if automaton is not None else None
    while len(ids) < cfg.max_len:
        logp = _masked_log_probs(step_fn(ids), state, vocab.pad_id)
        probs = np.exp(logp)
        order = np.argsort(-probs, kind="stable")  # stable: low id first on ties
        sorted_probs = probs[order]
        cum = np.cumsum(sorted_probs)
        cutoff = min(cfg.nucleus_p, float(cum[-1]))  # guard float shortfall at p=1
        keep = int(np.searchsorted(cum, cutoff)) + 1
        kept = sorted_probs[:keep]
        kept = kept / np.sum(kept)
        draw = rng.random()
        pick = int(np.searchsorted(np.cumsum(kept), draw, side="right"))
        pick = min(pick, keep - 1)  # draw==1.0 edge
        token = int(order[pick])
        ids.append(token)
        if token == vocab.eos_id:
            break
        if state is not None:
            state = automaton.advance(state, token)
    return TokenSequence(ids)


# --------------------------------------------------------------------------
# Model-facing wrappers
# --------------------------------------------------------------------------


def model_step_fn(model, audio: AudioEmbedding) -> StepFn:
    """Next-token logits from a frozen model, audio encoded once up front."""

    def step(ids: list[int]) -> np.ndarray:
        logits = model.decode_logits(np.asarray(ids, dtype=np.int64), audio)
        data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        return data[-1]

    return step


def _prepare(model, audio) -> tuple[StepFn, AudioEmbedding]:
    model.eval()
    if not isinstance(audio, AudioEmbedding):
        audio = model.encode_audio(np.asarray(audio, dtype=np.float64))
    return model_step_fn(model, audio), audio


def greedy_decode(model, audio, cfg: DecodeConfig) -> TokenSequence:
    """Greedy caption for one clip; ``audio`` is mel features or an AudioEmbedding."""
    step, _ = _prepare(model, audio)
    return greedy_step_decode(step, model.vocab, cfg)


def beam_decode(model, audio, cfg: DecodeConfig) -> TokenSequence:
    step, _ = _prepare(model, audio)
    return beam_step_decode(step, model.vocab, cfg)


def nucleus_decode(model, audio, cfg: DecodeConfig) -> TokenSequence:
    step, _ = _prepare(model, audio)
    return nucleus_step_decode(step, model.vocab, cfg)


def decode(model, audio, cfg: DecodeConfig) -> TokenSequence:
    """Dispatch on cfg.strategy; the single entry point used by CLI and trainer."""
    if cfg.strategy == GREEDY:
        return greedy_decode(model, audio, cfg)
    if cfg.strategy == BEAM:
        return beam_decode(model, audio, cfg)
    if cfg.strategy == NUCLEUS:
        return nucleus_decode(model, audio, cfg)
    raise ConfigError(f"unknown strategy {cfg.strategy!r}")
