"""Shared helpers for building small models in tests."""

import numpy as np

from emocomment import autodiff as ad
from emocomment import decoder as dec
from emocomment import encoder as enc


def as_float64(*tensor_maps):
    """Convert every tensor's storage to float64, in place.

    Used before finite-difference checks, which need a noise floor far
    below the tolerance; the ops are dtype-generic.
    """
    for m in tensor_maps:
        for t in m.values():
            t.data = t.data.astype(np.float64)


def toy_parts(seed=0, d=8, vocab=12, n_labels=5, fusion="dynamic",
              copy="hierarchical", n_layers=1, dtype=np.float32):
    """Embedding, encoder params, decoder params, and config at toy dims."""
    rng = ad.Rng(seed)
    config = dec.DecodeConfig(fusion, copy)
    embedding = ad.init_param(rng.fork("emb"), (vocab, d), name="embedding")
    enc_params = enc.init_encoder_params(rng.fork("enc"), d, d, n_layers)
    dec_params = dec.init_decoder_params(rng.fork("dec"), d, d, vocab,
                                         n_labels, config, n_layers)
    if dtype == np.float64:
        as_float64({"embedding": embedding}, enc_params.named(),
                   dec_params.named())
    return embedding, enc_params, dec_params, config


def all_named(embedding, enc_params, dec_params):
    out = {"embedding": embedding}
    out.update(enc_params.named())
    out.update(dec_params.named())
    return out
