"""Decoder step: emotion fusion, attention, and the copy mechanism.

Each step fuses the previous word embedding with a trainable emotion
embedding (plain sum or gated), advances a stacked LSTM, and converts
the hidden state into a word distribution — either through sentence
attention alone, or through a two-level copy mechanism whose word
attention is modulated by sentence attention, mixed with the generator
distribution by a learned soft switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LSTMParams, Rng, Tensor
from .encoder import EncodedArticle, init_lstm_layer
from .errors import ConfigError, DataError, DimensionError

FUSION_MODES = ("none", "simple", "dynamic")
COPY_MODES = ("off", "hierarchical")

# Fusion gate biases start positive so both gates open near 1: the gated
# decoder input begins as the plain word+emotion sum and training only has
# to learn where to close the gates, instead of first recovering signal
# that a near-0.5 gate would attenuate.
OPEN_GATE_BIAS = 2.0

_NEG_INF = -1e9


@dataclass(frozen=True)
class DecodeConfig:
    """Selects the fusion variant and the copy variant for decoding."""

    fusion: str = "dynamic"
    copy: str = "hierarchical"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(
                f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.copy not in COPY_MODES:
            raise ConfigError(
                f"copy must be one of {COPY_MODES}, got {self.copy!r}")


@dataclass
class DecoderParams:
    """All trainable decoder tensors; attention fields depend on the config.

    The plain-attention path and the copy path own separate attention
    and context parameters, so ablations differ only in mechanism, not
    in shared weights.
    """

    lstm_layers: list[LSTMParams]
    w_out: Tensor
    emotion_table: Tensor | None = None
    w_gate_emotion: Tensor | None = None
    b_gate_emotion: Tensor | None = None
    w_gate_word: Tensor | None = None
    b_gate_word: Tensor | None = None
    w_attn_sent: Tensor | None = None
    w_attn_context: Tensor | None = None
    b_attn_context: Tensor | None = None
    w_copy_sent: Tensor | None = None
    w_copy_word: Tensor | None = None
    w_copy_context: Tensor | None = None
    b_copy_context: Tensor | None = None
    w_switch_attn: Tensor | None = None
    w_switch_state: Tensor | None = None
    w_switch_word: Tensor | None = None
    b_switch: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.lstm_layers):
            out.update(layer.named(f"decoder.lstm.{i}"))
        for name, value in vars(self).items():
            if name != "lstm_layers" and value is not None:
                out[f"decoder.{name}"] = value
        return out

    @property
    def hidden_dim(self) -> int:
        return self.lstm_layers[-1].hidden_dim


def init_decoder_params(rng: Rng, d_emb: int, d_h: int, vocab_size: int,
                        n_labels: int, config: DecodeConfig,
                        n_layers: int = 1) -> DecoderParams:
    """Create decoder parameters for the given configuration."""
    if n_layers < 1:
        raise ConfigError("decoder needs at least one LSTM layer")
    p = DecoderParams(
        lstm_layers=[init_lstm_layer(rng, d_emb if i == 0 else d_h, d_h)
                     for i in range(n_layers)],
        w_out=ad.init_param(rng, (d_h, vocab_size)),
    )
    if config.fusion != "none":
        p.emotion_table = ad.init_param(rng, (n_labels, d_emb))
    if config.fusion == "dynamic":
        p.w_gate_emotion = ad.init_param(rng, (d_emb + d_h, d_emb))
        p.b_gate_emotion = ad.init_param(rng, (d_emb,))
        p.b_gate_emotion.data += OPEN_GATE_BIAS
        p.w_gate_word = ad.init_param(rng, (d_emb + d_h, d_emb))
        p.b_gate_word = ad.init_param(rng, (d_emb,))
        p.b_gate_word.data += OPEN_GATE_BIAS
    if config.copy == "off":
        p.w_attn_sent = ad.init_param(rng, (d_h, d_h))
        p.w_attn_context = ad.init_param(rng, (2 * d_h, d_h))
        p.b_attn_context = ad.init_param(rng, (d_h,))
    else:
        p.w_copy_sent = ad.init_param(rng, (d_h, d_h))
        p.w_copy_word = ad.init_param(rng, (d_h, d_h))
        p.w_copy_context = ad.init_param(rng, (2 * d_h, d_h))
        p.b_copy_context = ad.init_param(rng, (d_h,))
        p.w_switch_attn = ad.init_param(rng, (d_h, 1))
        p.w_switch_state = ad.init_param(rng, (d_h, 1))
        p.w_switch_word = ad.init_param(rng, (d_emb, 1))
        p.b_switch = ad.init_param(rng, (1,))
    return p


@dataclass
class DecoderState:
    """Per-layer LSTM hidden/cell tensors plus the step counter."""

    hs: list[Tensor]
    cs: list[Tensor]
    step: int = 0

    @property
    def top(self) -> Tensor:
        return self.hs[-1]


def init_decoder_state(article_state: Tensor,
                       params: DecoderParams) -> DecoderState:
    """Start decoding: hidden = encoded article state, cell = zeros."""
    zeros = Tensor(np.zeros_like(article_state.data))
    n = len(params.lstm_layers)
    return DecoderState([article_state] * n, [zeros] * n, step=0)


@dataclass
class StepOutput:
    """One decoding step's distributions and diagnostics.

    final_dist: (B, V) word distribution
    beta:       (B, S) sentence attention
    gamma:      (B, S, T) word-level copy attention (None with copy off)
    p_gen:      (B, 1) generate-vs-copy switch (None with copy off)
    attn:       (B, d_h) attention vector feeding the output projection
    vocab_dist: (B, V) generator-only distribution (equals final_dist
                with copy off)
    """

    final_dist: Tensor
    beta: Tensor
    attn: Tensor
    gamma: Tensor | None = None
    p_gen: Tensor | None = None
    vocab_dist: Tensor | None = None


def fuse_simple(v_emotion: Tensor, e_prev: Tensor) -> Tensor:
    """Elementwise sum of emotion embedding and previous word embedding."""
    if v_emotion.shape != e_prev.shape:
        raise DimensionError(
            f"fuse_simple shapes differ: {v_emotion.shape} vs {e_prev.shape}")
    return ad.add(v_emotion, e_prev)


def fuse_dynamic(v_emotion: Tensor, e_prev: Tensor, s_prev: Tensor,
                 params: DecoderParams,
                 gate_override: float | None = None) -> Tensor:
    """Gated fusion: each embedding is scaled by its own learned gate.

    Both gates read [emotion embedding; previous decoder state].
    ``gate_override`` forces every gate unit to a constant (test hook);
    1.0 reduces to the plain sum, 0.0 zeroes the input.
    """
    if v_emotion.shape != e_prev.shape:
        raise DimensionError(
            f"fuse_dynamic shapes differ: {v_emotion.shape} vs {e_prev.shape}")
    if params.w_gate_emotion is None:
        raise ConfigError("decoder was built without dynamic-fusion gates")
    if gate_override is not None:
        gate = Tensor(np.full(v_emotion.shape, gate_override,
                              dtype=v_emotion.data.dtype))
        z_emotion = z_word = gate
    else:
        joint = ad.concat([v_emotion, s_prev], axis=1)
        z_emotion = ad.sigmoid(
            ad.add(ad.matmul(joint, params.w_gate_emotion),
                   params.b_gate_emotion))
        z_word = ad.sigmoid(
            ad.add(ad.matmul(joint, params.w_gate_word), params.b_gate_word))
    return ad.add(ad.mul(v_emotion, z_emotion), ad.mul(e_prev, z_word))


def _masked_softmax(scores: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Softmax that sends masked positions to (numerically) zero weight."""
    offset = Tensor(((1.0 - mask) * _NEG_INF).astype(scores.data.dtype))
    return ad.softmax(ad.add(scores, offset), axis=axis)


def _bilinear_scores(s_t: Tensor, states: Tensor, w: Tensor) -> Tensor:
    """Scores s_tᵀ W state for every state on the trailing axes.

    s_t: (B, d); states: (B, ..., d); returns (B, ...).
    """
    q = ad.matmul(s_t, w)
    expand = (states.shape[0],) + (1,) * (len(states.shape) - 2) + (q.shape[1],)
    return ad.tsum(ad.mul(states, ad.reshape(q, expand)),
                   axis=len(states.shape) - 1)


def attend_sentences(s_t: Tensor, sentence_states: Tensor,
                     sentence_mask: np.ndarray,
                     params: DecoderParams) -> tuple[Tensor, Tensor]:
    """Plain sentence-level attention.

    Returns (attention vector a_t (B, d_h), weights (B, S)).
    """
    if np.any(sentence_mask.sum(axis=1) == 0):
        raise DataError("attention needs at least one unmasked sentence")
    scores = _bilinear_scores(s_t, sentence_states, params.w_attn_sent)
    weights = _masked_softmax(scores, sentence_mask, axis=1)
    b, s = weights.shape
    context = ad.tsum(
        ad.mul(sentence_states, ad.reshape(weights, (b, s, 1))), axis=1)
    attn = ad.tanh(ad.add(
        ad.matmul(ad.concat([context, s_t], axis=1), params.w_attn_context),
        params.b_attn_context))
    return attn, weights


def copy_distribution(s_t: Tensor, encoded: EncodedArticle, e_prev: Tensor,
                      params: DecoderParams,
                      p_gen_override: float | None = None) -> StepOutput:
    """Two-level copy mechanism producing the final word distribution.

    Sentence attention picks informative sentences; word attention
    (normalized within each sentence) is scaled by it, so the combined
    copy weights sum to one.  A soft switch mixes the generator
    distribution with copy mass scattered onto article token ids.
    ``p_gen_override`` forces the switch to a constant (test hook).
    """
    if np.any(encoded.sentence_mask.sum(axis=1) == 0):
        raise DataError("copy attention needs at least one unmasked sentence")
    b, s, t, _ = encoded.word_states.shape

    sent_scores = _bilinear_scores(s_t, encoded.sentence_states,
                                   params.w_copy_sent)
    beta = _masked_softmax(sent_scores, encoded.sentence_mask, axis=1)

    word_scores = _bilinear_scores(s_t, encoded.word_states,
                                   params.w_copy_word)
    alpha = _masked_softmax(word_scores, encoded.article_mask, axis=2)
    gamma = ad.mul(ad.reshape(beta, (b, s, 1)), alpha)

    context = ad.tsum(
        ad.mul(encoded.word_states, ad.reshape(gamma, (b, s, t, 1))),
        axis=(1, 2))
    attn = ad.tanh(ad.add(
        ad.matmul(ad.concat([context, s_t], axis=1), params.w_copy_context),
        params.b_copy_context))
    vocab_dist = ad.softmax(ad.matmul(attn, params.w_out), axis=1)

    if p_gen_override is not None:
        p_gen = Tensor(np.full((b, 1), p_gen_override,
                               dtype=vocab_dist.data.dtype))
    else:
        switch_logit = ad.add(
            ad.add(ad.matmul(attn, params.w_switch_attn),
                   ad.matmul(s_t, params.w_switch_state)),
            ad.add(ad.matmul(e_prev, params.w_switch_word), params.b_switch))
        p_gen = ad.sigmoid(switch_logit)

    copy_weights = ad.mul(gamma, ad.reshape(ad.add(ad.mul(p_gen, -1.0), 1.0),
                                            (b, 1, 1)))
    final = ad.scatter_add(
        ad.mul(vocab_dist, p_gen),
        encoded.article_ids.reshape(b, s * t),
        ad.reshape(copy_weights, (b, s * t)))
    return StepOutput(final, beta, attn, gamma=gamma, p_gen=p_gen,
                      vocab_dist=vocab_dist)


def decode_step(prev_ids: np.ndarray, state: DecoderState,
                encoded: EncodedArticle, emotion_ids: np.ndarray | None,
                embedding: Tensor, params: DecoderParams,
                config: DecodeConfig, dropout_rate: float = 0.0,
                rng: Rng | None = None,
                training: bool = False) -> tuple[StepOutput, DecoderState]:
    """Run one full decoding step for a batch.

    prev_ids: (B,) previous token ids; emotion_ids: (B,) label indices
    (required unless fusion is "none").
    """
    if config.copy == "off" and params.w_attn_sent is None:
        raise ConfigError("decoder parameters lack the plain-attention path")
    if config.copy == "hierarchical" and params.w_copy_sent is None:
        raise ConfigError("decoder parameters lack the copy path")
    e_prev = ad.embedding_lookup(embedding, np.asarray(prev_ids))

    if config.fusion == "none":
        fused = e_prev
    else:
        if emotion_ids is None:
            raise ConfigError(
                f"fusion={config.fusion!r} requires emotion labels")
        if params.emotion_table is None:
            raise ConfigError("decoder parameters lack an emotion table")
        v_emotion = ad.embedding_lookup(params.emotion_table,
                                        np.asarray(emotion_ids))
        if config.fusion == "simple":
            fused = fuse_simple(v_emotion, e_prev)
        else:
            fused = fuse_dynamic(v_emotion, e_prev, state.top, params)

    x = fused
    hs, cs = [], []
    for i, layer in enumerate(params.lstm_layers):
        if training and dropout_rate > 0.0:
            x = ad.dropout(x, dropout_rate, rng, training)
        h, c = ad.lstm_cell(x, state.hs[i], state.cs[i], layer)
        hs.append(h)
        cs.append(c)
        x = h
    new_state = DecoderState(hs, cs, step=state.step + 1)
    s_t = new_state.top

    if config.copy == "off":
        attn, weights = attend_sentences(s_t, encoded.sentence_states,
                                         encoded.sentence_mask, params)
        vocab_dist = ad.softmax(ad.matmul(attn, params.w_out), axis=1)
        output = StepOutput(vocab_dist, weights, attn, vocab_dist=vocab_dist)
    else:
        output = copy_distribution(s_t, encoded, e_prev, params)
    return output, new_state
