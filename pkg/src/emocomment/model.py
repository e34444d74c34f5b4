"""Full article-commenting model.

Owns the shared embedding, encoder and decoder parameters, and the
emotion-classifier head, and runs the teacher-forced training pass that
produces the combined loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from . import autodiff as ad
from . import corpus as cp
from . import decoder as dec
from . import encoder as enc
from . import losses
from .autodiff import Rng, Tensor
from .corpus import Batch
from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective settings; serialized into checkpoints."""

    vocab_size: int
    granularity: str = cp.FINE
    d_emb: int = 64
    d_h: int = 64
    n_layers: int = 1
    fusion: str = "dynamic"
    copy: str = "hierarchical"
    topk: int = losses.TOPK_DEFAULT
    emo_weight: float = losses.EMOTION_LOSS_WEIGHT
    dropout: float = 0.0

    def __post_init__(self):
        cp.labels_for(self.granularity)
        dec.DecodeConfig(self.fusion, self.copy)
        if self.vocab_size < len(cp.RESERVED_TOKENS) + 1:
            raise ConfigError(f"vocab_size {self.vocab_size} is too small")
        if min(self.d_emb, self.d_h, self.n_layers) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.topk < 1:
            raise ConfigError("topk must be at least 1")
        if self.emo_weight < 0:
            raise ConfigError("emo_weight must be nonnegative")

    @property
    def n_labels(self) -> int:
        return len(cp.labels_for(self.granularity))

    @property
    def decode_config(self) -> dec.DecodeConfig:
        return dec.DecodeConfig(self.fusion, self.copy)

    @property
    def effective_topk(self) -> int:
        return min(self.topk, self.vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class CommentModel:
    """Hierarchical encoder + emotion-fused copy decoder."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        init_rng = rng.fork("init")
        self.embedding = ad.init_param(
            init_rng.fork("embedding"), (config.vocab_size, config.d_emb),
            name="embedding")
        self.encoder_params = enc.init_encoder_params(
            init_rng.fork("encoder"), config.d_emb, config.d_h,
            config.n_layers)
        self.decoder_params = dec.init_decoder_params(
            init_rng.fork("decoder"), config.d_emb, config.d_h,
            config.vocab_size, config.n_labels, config.decode_config,
            config.n_layers)
        self.emotion_head = (
            ad.init_param(init_rng.fork("head"),
                          (config.d_emb, config.n_labels),
                          name="emotion_head")
            if config.emo_weight > 0 else None)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors keyed by stable names."""
        out = {"embedding": self.embedding}
        out.update(self.encoder_params.named())
        out.update(self.decoder_params.named())
        if self.emotion_head is not None:
            out["emotion_head"] = self.emotion_head
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def encode(self, batch: Batch) -> enc.EncodedArticle:
        return enc.encode_articles(batch.article_ids, batch.article_mask,
                                   batch.sentence_mask, self.embedding,
                                   self.encoder_params)

    def loss(self, batch: Batch, rng: Rng | None = None,
             training: bool = True) -> losses.LossReport:
        """Teacher-forced pass over a batch, returning the combined loss."""
        config = self.config
        encoded = self.encode(batch)
        state = dec.init_decoder_state(encoded.article_state,
                                       self.decoder_params)
        emotion_ids = None if config.fusion == "none" else batch.emotions
        n_steps = batch.comment_ids.shape[1] - 1
        step_dists = []
        for t in range(n_steps):
            out, state = dec.decode_step(
                batch.comment_ids[:, t], state, encoded, emotion_ids,
                self.embedding, self.decoder_params, config.decode_config,
                dropout_rate=config.dropout, rng=rng, training=training)
            step_dists.append(out.final_dist)

        targets = batch.comment_ids[:, 1:]
        target_mask = batch.comment_mask[:, 1:]
        mle = losses.mle_loss(step_dists, targets, target_mask)
        emo = None
        if self.emotion_head is not None and config.emo_weight > 0:
            emo = losses.emotion_loss(step_dists, self.embedding,
                                      self.emotion_head, batch.emotions,
                                      config.effective_topk,
                                      step_mask=target_mask)
        return losses.total_loss(mle, emo, config.emo_weight,
                                 int(target_mask.sum()))
