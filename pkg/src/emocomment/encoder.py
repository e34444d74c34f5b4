"""Hierarchical article encoder.

A word-level LSTM turns each sentence into a sequence of hidden states
whose last valid state embeds the sentence; a sentence-level LSTM then
runs over the sentence embeddings, and its last valid state embeds the
whole article.  Word states are kept for attention and copying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LSTMParams, Rng, Tensor
from .errors import ConfigError, DataError


@dataclass
class EncoderParams:
    """Stacked LSTM parameters for both hierarchy levels."""

    word_layers: list[LSTMParams]
    sentence_layers: list[LSTMParams]

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.word_layers):
            out.update(layer.named(f"encoder.word.{i}"))
        for i, layer in enumerate(self.sentence_layers):
            out.update(layer.named(f"encoder.sentence.{i}"))
        return out

    @property
    def hidden_dim(self) -> int:
        return self.word_layers[-1].hidden_dim


def init_lstm_layer(rng: Rng, d_in: int, d_h: int) -> LSTMParams:
    return LSTMParams(
        ad.init_param(rng, (d_in, 4 * d_h)),
        ad.init_param(rng, (d_h, 4 * d_h)),
        ad.init_param(rng, (4 * d_h,)),
    )


def init_encoder_params(rng: Rng, d_emb: int, d_h: int,
                        n_layers: int = 1) -> EncoderParams:
    """Create encoder parameters; both hierarchy levels get n_layers."""
    if n_layers < 1:
        raise ConfigError("encoder needs at least one LSTM layer")
    word = [init_lstm_layer(rng, d_emb if i == 0 else d_h, d_h)
            for i in range(n_layers)]
    sentence = [init_lstm_layer(rng, d_h, d_h) for i in range(n_layers)]
    return EncoderParams(word, sentence)


@dataclass
class EncodedArticle:
    """Encoder outputs for a batch of articles.

    word_states:     (B, S, T, d_h) hidden state per article token
    sentence_states: (B, S, d_h)    hidden state per sentence
    article_state:   (B, d_h)       last valid sentence state
    article_ids:     (B, S, T) int  token ids, for the copy mechanism
    article_mask:    (B, S, T)      1.0 at real tokens
    sentence_mask:   (B, S)         1.0 at real sentences
    """

    word_states: Tensor
    sentence_states: Tensor
    article_state: Tensor
    article_ids: np.ndarray
    article_mask: np.ndarray
    sentence_mask: np.ndarray


def run_lstm(inputs: Tensor, mask: np.ndarray,
             layers: list[LSTMParams]) -> tuple[Tensor, Tensor]:
    """Run stacked LSTMs over a (B, T, d) sequence with a (B, T) mask.

    Masked positions keep the previous state, so the final state always
    equals the state at the last real position (zero for all-pad rows).
    Returns (states (B, T, d_h), final_state (B, d_h)).
    """
    b, t_len, _ = inputs.shape
    dtype = inputs.data.dtype
    seq = inputs
    final_h = None
    for layer in layers:
        d_h = layer.hidden_dim
        h = Tensor(np.zeros((b, d_h), dtype=dtype))
        c = Tensor(np.zeros((b, d_h), dtype=dtype))
        states = []
        for t in range(t_len):
            x_t = seq[:, t, :]
            h_new, c_new = ad.lstm_cell(x_t, h, c, layer)
            m = Tensor(mask[:, t:t + 1].astype(dtype))
            keep = Tensor(1.0 - mask[:, t:t + 1].astype(dtype))
            h = ad.add(ad.mul(h_new, m), ad.mul(h, keep))
            c = ad.add(ad.mul(c_new, m), ad.mul(c, keep))
            states.append(h)
        seq = ad.stack(states, axis=1)
        final_h = h
    return seq, final_h


def encode_articles(article_ids: np.ndarray, article_mask: np.ndarray,
                    sentence_mask: np.ndarray, embedding: Tensor,
                    params: EncoderParams) -> EncodedArticle:
    """Encode a batch of articles given as (B, S, T) token ids."""
    if article_ids.ndim != 3:
        raise DataError(
            f"article_ids must be (batch, sentences, tokens), got shape "
            f"{article_ids.shape}")
    b, s, t = article_ids.shape
    if s < 1 or t < 1:
        raise DataError("article must have at least one sentence with one token")

    flat_ids = article_ids.reshape(b * s, t)
    flat_mask = article_mask.reshape(b * s, t)
    embedded = ad.embedding_lookup(embedding, flat_ids)
    word_states_flat, sentence_emb_flat = run_lstm(
        embedded, flat_mask, params.word_layers)

    d_h = params.hidden_dim
    word_states = ad.reshape(word_states_flat, (b, s, t, d_h))
    sentence_embs = ad.reshape(sentence_emb_flat, (b, s, d_h))
    sentence_states, article_state = run_lstm(
        sentence_embs, sentence_mask, params.sentence_layers)

    return EncodedArticle(word_states, sentence_states, article_state,
                          article_ids, article_mask, sentence_mask)


def encode_article(article: list[list[int]], embedding: Tensor,
                   params: EncoderParams) -> EncodedArticle:
    """Encode a single unpadded article (list of sentences of token ids)."""
    if not article:
        raise DataError("article is empty")
    if any(len(s) == 0 for s in article):
        raise DataError("article contains an empty sentence")
    s = len(article)
    t = max(len(sent) for sent in article)
    ids = np.zeros((1, s, t), dtype=np.int64)
    mask = np.zeros((1, s, t), dtype=np.float32)
    for j, sent in enumerate(article):
        ids[0, j, :len(sent)] = sent
        mask[0, j, :len(sent)] = 1.0
    sentence_mask = np.ones((1, s), dtype=np.float32)
    return encode_articles(ids, mask, sentence_mask, embedding, params)


def encode_sentence(tokens: list[int], embedding: Tensor,
                    params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Encode one sentence; returns (word_states (T, d_h), embedding (d_h,)).

    The sentence embedding is the word-level LSTM's last hidden state.
    """
    if not tokens:
        raise DataError("sentence is empty")
    ids = np.asarray([tokens], dtype=np.int64)
    mask = np.ones_like(ids, dtype=np.float32)
    embedded = ad.embedding_lookup(embedding, ids)
    states, final = run_lstm(embedded, mask, params.word_layers)
    return states[0], final[0]
