"""Inference-time search.

Greedy decoding, beam search, restricted beam search (per-step
probability penalty on tokens that would repeat an n-gram already in
the hypothesis), and a hard no-repeat variant that forbids such tokens
outright.  Search runs against a small step-model interface so both the
neural decoder and hand-specified tables plug in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from . import corpus as cp
from . import decoder as dec
from .autodiff import no_grad
from .errors import ConfigError

MODES = ("greedy", "beam", "rbs", "hard_norepeat")


class StepModel(Protocol):
    """Minimal interface search needs from a generator."""

    bos_id: int
    eos_id: int

    def initial_state(self) -> Any: ...

    def step(self, state: Any, token: int) -> tuple[np.ndarray, Any]:
        """Consume one token; return (distribution over next token, state)."""
        ...


@dataclass(frozen=True)
class SearchConfig:
    """Search mode and its knobs."""

    mode: str = "beam"
    beam_size: int = 5
    max_len: int = 40
    ngram_order: int = 1
    eta: float = 0.5
    length_normalize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be at least 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be at least 1")
        if self.ngram_order < 1:
            raise ConfigError("ngram_order must be at least 1")
        if self.eta < 0:
            raise ConfigError("eta must be nonnegative")


@dataclass
class Hypothesis:
    """One (possibly unfinished) decoded sequence.

    log_prob accumulates the raw log probability of the chosen tokens;
    score accumulates log of the penalty-adjusted probabilities, so the
    two coincide outside rbs/hard_norepeat modes.  ngram_counts tracks
    n-gram occurrences within tokens for the configured order.
    """

    tokens: tuple[int, ...]
    log_prob: float
    score: float
    state: Any
    next_probs: np.ndarray | None = field(repr=False, default=None)
    ngram_counts: dict[tuple[int, ...], int] = field(default_factory=dict)
    finished: bool = False
    warning: bool = False

    def ranking_score(self, length_normalize: bool) -> float:
        if length_normalize and self.tokens:
            return self.score / len(self.tokens)
        return self.score

    def text_tokens(self, eos_id: int) -> tuple[int, ...]:
        """Tokens without the terminating EOS."""
        if self.tokens and self.tokens[-1] == eos_id:
            return self.tokens[:-1]
        return self.tokens


def rbs_adjust(p: float, count: int, eta: float) -> float:
    """Penalized probability: unchanged when the n-gram is new, else
    reduced by count · eta and floored at zero."""
    if count == 0:
        return p
    return max(p - count * eta, 0.0)


def count_ngrams(tokens: tuple[int, ...], order: int) -> dict:
    """Occurrence counts of every n-gram of the given order in tokens."""
    counts: dict[tuple[int, ...], int] = {}
    for i in range(len(tokens) - order + 1):
        gram = tokens[i:i + order]
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def _pending_gram(tokens: tuple[int, ...], token: int,
                  order: int) -> tuple[int, ...] | None:
    """The n-gram that emitting ``token`` would complete, if any."""
    if len(tokens) < order - 1:
        return None
    if order == 1:
        return (token,)
    return tokens[-(order - 1):] + (token,)


def _adjusted_probs(hyp: Hypothesis, probs: np.ndarray,
                    config: SearchConfig) -> np.ndarray:
    """Apply the mode's per-token repetition penalty to a distribution."""
    if config.mode not in ("rbs", "hard_norepeat"):
        return probs
    adjusted = probs.astype(np.float64, copy=True)
    order = config.ngram_order
    if len(hyp.tokens) < order - 1:
        return adjusted
    prefix = hyp.tokens[-(order - 1):] if order > 1 else ()
    for gram, count in hyp.ngram_counts.items():
        if gram[:-1] != prefix:
            continue
        w = gram[-1]
        if config.mode == "hard_norepeat":
            adjusted[w] = 0.0
        else:
            adjusted[w] = rbs_adjust(float(adjusted[w]), count, config.eta)
    return adjusted


def _extend(hyp: Hypothesis, token: int, log_prob: float, score: float,
            model: StepModel, config: SearchConfig,
            need_next: bool = True) -> Hypothesis:
    """Materialize one chosen candidate, advancing the step model.

    The lookahead distribution is skipped for hypotheses that will
    never be extended (EOS, or the final position).
    """
    tokens = hyp.tokens + (token,)
    counts = dict(hyp.ngram_counts)
    gram = _pending_gram(hyp.tokens, token, config.ngram_order)
    if gram is not None:
        counts[gram] = counts.get(gram, 0) + 1
    finished = token == model.eos_id
    next_probs, state = ((None, hyp.state) if finished or not need_next
                         else model.step(hyp.state, token))
    return Hypothesis(tokens, log_prob, score, state, next_probs,
                      counts, finished=finished)


def _root(model: StepModel) -> Hypothesis:
    probs, state = model.step(model.initial_state(), model.bos_id)
    return Hypothesis((), 0.0, 0.0, state, probs)


def greedy_decode(model: StepModel, config: SearchConfig) -> Hypothesis:
    """Repeatedly take the most probable token (ties: lower id)."""
    hyp = _root(model)
    for position in range(config.max_len):
        probs = hyp.next_probs
        token = int(np.argmax(probs))
        p = float(probs[token])
        if p <= 0.0:
            break
        step_log = float(np.log(np.float64(p)))
        hyp = _extend(hyp, token, hyp.log_prob + step_log,
                      hyp.score + step_log, model, config,
                      need_next=position < config.max_len - 1)
        if hyp.finished:
            return hyp
    hyp.warning = True
    return hyp


def _beam(model: StepModel, config: SearchConfig) -> list[Hypothesis]:
    live = [_root(model)]
    finished: list[Hypothesis] = []
    for position in range(config.max_len):
        if not live:
            break
        need_next = position < config.max_len - 1
        candidates = []
        for hyp_idx, hyp in enumerate(live):
            raw = np.asarray(hyp.next_probs, dtype=np.float64)
            adjusted = _adjusted_probs(hyp, raw, config)
            with np.errstate(divide="ignore"):
                raw_logs = np.log(raw)
                adj_logs = np.log(adjusted)
            for w in np.nonzero(adjusted > 0.0)[0]:
                candidates.append(
                    (hyp.score + float(adj_logs[w]), int(w), hyp_idx,
                     hyp.log_prob + float(raw_logs[w])))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, w, hyp_idx, log_prob in candidates[:config.beam_size]:
            new_hyp = _extend(live[hyp_idx], w, log_prob, score, model,
                              config, need_next=need_next)
            if new_hyp.finished:
                finished.append(new_hyp)
            else:
                next_live.append(new_hyp)
        live = next_live
        if len(finished) >= config.beam_size:
            break
    if len(finished) < config.beam_size:
        for hyp in live:
            hyp.warning = True
        finished.extend(live)
    finished.sort(key=lambda h: (-h.ranking_score(config.length_normalize),
                                 h.tokens))
    return finished[:config.beam_size]


def search(model: StepModel, config: SearchConfig) -> list[Hypothesis]:
    """Run the configured search; hypotheses come back best first.

    Unfinished hypotheses (no EOS within max_len) carry warning=True.
    """
    if config.mode == "greedy":
        return [greedy_decode(model, config)]
    return _beam(model, config)


class TableStepModel:
    """Step model backed by hand-specified distributions.

    ``table`` maps an emitted-token prefix (tuple) to a probability
    vector over the next token; prefixes not present fall back to
    ``default``.  The model state is the emitted prefix itself.
    """

    def __init__(self, table: dict[tuple[int, ...], np.ndarray],
                 default: np.ndarray | None = None,
                 bos_id: int = -1, eos_id: int = -2):
        self.table = {k: np.asarray(v, dtype=np.float64)
                      for k, v in table.items()}
        self.default = (None if default is None
                        else np.asarray(default, dtype=np.float64))
        self.bos_id = bos_id
        self.eos_id = eos_id

    def initial_state(self) -> tuple[int, ...]:
        return ()

    def step(self, state, token):
        prefix = state if token == self.bos_id else state + (token,)
        probs = self.table.get(prefix, self.default)
        if probs is None:
            raise KeyError(f"no distribution for prefix {prefix}")
        return probs, prefix


class NeuralStepModel:
    """Step-model view of a trained comment model for one article.

    Wraps the decoder in inference mode (no gradient graph); the search
    state is the decoder's recurrent state.
    """

    bos_id = cp.BOS_ID
    eos_id = cp.EOS_ID

    def __init__(self, model, encoded, emotion_id: int | None):
        self.model = model
        self.encoded = encoded
        self.emotion_ids = (None if emotion_id is None
                            else np.asarray([emotion_id]))
        if model.config.fusion != "none" and self.emotion_ids is None:
            raise ConfigError("this model requires a requested emotion")

    def initial_state(self) -> dec.DecoderState:
        return dec.init_decoder_state(self.encoded.article_state,
                                      self.model.decoder_params)

    def step(self, state, token):
        with no_grad():
            out, new_state = dec.decode_step(
                np.asarray([token]), state, self.encoded, self.emotion_ids,
                self.model.embedding, self.model.decoder_params,
                self.model.config.decode_config)
        return out.final_dist.data[0].astype(np.float64), new_state


def generate(model, example: cp.Example, emotion_id: int | None,
             config: SearchConfig) -> list[Hypothesis]:
    """Decode comments for one encoded example with the requested emotion."""
    with no_grad():
        encoded = _encode_single(model, example)
    return search(NeuralStepModel(model, encoded, emotion_id), config)


def _encode_single(model, example: cp.Example):
    from .encoder import encode_article

    return encode_article([list(s) for s in example.article],
                          model.embedding, model.encoder_params)
