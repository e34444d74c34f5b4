"""Teacher-forced training loop, binary checkpoints, and telemetry.

Training wires the encoder, decoder, combined loss, gradient clipping,
and Adam together; runs are deterministic given the seed.  Checkpoints
are single binary files holding the config, all named parameter tensors,
optimizer moments, and a vocabulary hash.
"""

from __future__ import annotations

import json
import math
import os
import queue
import struct
import tempfile
import threading
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import Adam, AdamState, Rng, clip_grad_norm
from .corpus import Example, Vocab, collate
from .errors import CheckpointError, ConfigError, TrainingError
from .model import CommentModel, ModelConfig

GRAD_CLIP_NORM = 5.0
CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1

# Full experiment scale; the desk defaults below train in minutes on one
# CPU core instead.
FULL_SCALE = {"d_h": 512, "d_emb": 512, "dropout": 0.3, "batch_size": 64}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings wrapped around the architecture config."""

    model: ModelConfig
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["model"] = ModelConfig.from_dict(data["model"])
        return cls(**data)


def apply_full_scale(config: TrainConfig) -> TrainConfig:
    """Swap in the full-size dims: d_h=512, d_emb=512, dropout 0.3, batch 64."""
    model = replace(config.model,
                    d_h=FULL_SCALE["d_h"], d_emb=FULL_SCALE["d_emb"],
                    dropout=FULL_SCALE["dropout"])
    return replace(config, model=model, batch_size=FULL_SCALE["batch_size"])


@dataclass
class EpochReport:
    """Token-weighted mean losses over one epoch."""

    epoch: int
    mle: float
    emo: float
    total: float
    n_tokens: int


@dataclass
class TrainResult:
    model: CommentModel
    optimizer: Adam
    epoch_reports: list[EpochReport]
    step: int


def _prepared_batches(chunks: list[list[Example]]):
    """Collate chunks on a worker thread, handing off immutable batches."""
    handoff: queue.Queue = queue.Queue(maxsize=2)
    sentinel = object()

    def worker():
        try:
            for chunk in chunks:
                handoff.put(collate(chunk))
        except Exception as exc:  # surfaced on the consuming side
            handoff.put(exc)
            return
        handoff.put(sentinel)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = handoff.get()
        if item is sentinel:
            break
        if isinstance(item, Exception):
            raise item
        yield item
    thread.join()


def train(examples: list[Example], config: TrainConfig,
          log_path: str | None = None, on_epoch=None) -> TrainResult:
    """Run the full teacher-forced training loop.

    Per batch: encode, decode with teacher forcing, combine the losses,
    backpropagate, clip the global gradient norm at 5.0, and take one
    Adam step.  A non-finite loss or gradient aborts with a diagnostic
    naming the epoch, batch, and step.  Optionally appends one JSON line
    per step ({epoch, step, mle, emo, total}) to log_path and calls
    on_epoch(EpochReport) after each epoch.
    """
    if not examples:
        raise TrainingError("training corpus is empty")
    root = Rng(config.seed)
    model = CommentModel(config.model, root)
    params = model.parameters()
    optimizer = Adam(params, lr=config.lr, beta1=config.beta1,
                     beta2=config.beta2, eps=config.eps)
    dropout_rng = root.fork("dropout")

    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    reports: list[EpochReport] = []
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = root.fork(f"shuffle.{epoch}").shuffled(examples)
            chunks = [order[i:i + config.batch_size]
                      for i in range(0, len(order), config.batch_size)]
            sums = {"mle": 0.0, "emo": 0.0, "total": 0.0}
            epoch_tokens = 0
            for batch_index, batch in enumerate(_prepared_batches(chunks)):
                where = (f"epoch {epoch}, batch {batch_index}, step {step}")
                optimizer.zero_grad()
                try:
                    report = model.loss(batch, rng=dropout_rng,
                                        training=True)
                except TrainingError as exc:
                    raise TrainingError(f"aborting at {where}: {exc}")
                report.total_tensor.backward()
                clip_grad_norm(params, GRAD_CLIP_NORM)
                try:
                    optimizer.step()
                except TrainingError as exc:
                    raise TrainingError(f"aborting at {where}: {exc}")
                step += 1
                for key in sums:
                    sums[key] += getattr(report, key) * report.token_count
                epoch_tokens += report.token_count
                if log_file is not None:
                    log_file.write(json.dumps(
                        {"epoch": epoch, "step": step, "mle": report.mle,
                         "emo": report.emo, "total": report.total}) + "\n")
            epoch_report = EpochReport(
                epoch=epoch,
                mle=sums["mle"] / epoch_tokens,
                emo=sums["emo"] / epoch_tokens,
                total=sums["total"] / epoch_tokens,
                n_tokens=epoch_tokens)
            reports.append(epoch_report)
            if on_epoch is not None:
                on_epoch(epoch_report)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, optimizer, reports, step)


# ------------------------------------------------------------- checkpoints
#
# Layout: magic "EMCK" | u32 version | u32 header length | header JSON
# (UTF-8: train_config, vocab_hash, step, adam_step) | u32 tensor count |
# per tensor: u32 name length, name UTF-8, u32 rank, u32 dims...,
# row-major little-endian float32 payload.  All integers little-endian.

_U32 = struct.Struct("<I")


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
    parts.extend(_U32.pack(dim) for dim in array.shape)
    parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def checkpoint_bytes(model: CommentModel, train_config: TrainConfig,
                     vocab_hash: str, step: int = 0,
                     optimizer: Adam | None = None) -> bytes:
    """Serialize a model (and optionally Adam moments) to checkpoint bytes."""
    header = {
        "train_config": train_config.to_dict(),
        "vocab_hash": vocab_hash,
        "step": step,
        "adam_step": optimizer.state.step if optimizer is not None else None,
    }
    header_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = [
        (name, tensor.data) for name, tensor in model.parameters().items()]
    if optimizer is not None:
        for name in model.parameters():
            tensors.append((f"adam.m.{name}", optimizer.state.m[name]))
            tensors.append((f"adam.v.{name}", optimizer.state.v[name]))
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION),
             _U32.pack(len(header_blob)), header_blob,
             _U32.pack(len(tensors))]
    parts.extend(_pack_tensor(name, array) for name, array in tensors)
    return b"".join(parts)


def save_checkpoint(path: str, model: CommentModel,
                    train_config: TrainConfig, vocab_hash: str,
                    step: int = 0, optimizer: Adam | None = None) -> None:
    """Atomically write a checkpoint (temp file in place, then rename)."""
    blob = checkpoint_bytes(model, train_config, vocab_hash, step, optimizer)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


@dataclass
class LoadedCheckpoint:
    """A deserialized checkpoint ready for generation or inspection."""

    model: CommentModel
    train_config: TrainConfig
    vocab_hash: str
    step: int
    adam: AdamState | None

    def require_vocab(self, vocab: Vocab) -> None:
        """Reject vocabularies other than the one the model was trained on."""
        actual = vocab.content_hash()
        if actual != self.vocab_hash:
            raise CheckpointError(
                f"vocabulary hash {actual} does not match the checkpoint's "
                f"{self.vocab_hash}; the model was trained on a different "
                "vocabulary")


def load_checkpoint(path: str) -> LoadedCheckpoint:
    """Read and validate a checkpoint file written by save_checkpoint."""
    with open(path, "rb") as handle:
        reader = _Reader(handle.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        train_config = TrainConfig.from_dict(header["train_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = math.prod(shape)
        payload = reader.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)

    model = CommentModel(train_config.model, Rng(0))
    params = model.parameters()
    expected = set(params)
    stored = {name for name in tensors if not name.startswith("adam.")}
    if stored != expected:
        raise CheckpointError(
            f"checkpoint tensors do not match the model: missing "
            f"{sorted(expected - stored)}, unexpected "
            f"{sorted(stored - expected)}")
    for name, tensor in params.items():
        loaded = tensors[name]
        if loaded.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {loaded.shape}, expected "
                f"{tensor.data.shape}")
        tensor.data = loaded.astype(np.float32, copy=True)

    adam = None
    if header.get("adam_step") is not None:
        adam = AdamState(step=header["adam_step"])
        for name in params:
            adam.m[name] = tensors[f"adam.m.{name}"].astype(
                np.float32, copy=True)
            adam.v[name] = tensors[f"adam.v.{name}"].astype(
                np.float32, copy=True)
    return LoadedCheckpoint(model, train_config, header["vocab_hash"],
                            header["step"], adam)


def analytic_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter total for a configuration."""

    def lstm(d_in: int, d_h: int) -> int:
        return d_in * 4 * d_h + d_h * 4 * d_h + 4 * d_h

    d_e, d_h, v = config.d_emb, config.d_h, config.vocab_size
    total = v * d_e                            # shared embedding
    for i in range(config.n_layers):           # word + sentence + decoder
        total += lstm(d_e if i == 0 else d_h, d_h)   # word level
        total += lstm(d_h, d_h)                      # sentence level
        total += lstm(d_e if i == 0 else d_h, d_h)   # decoder
    total += d_h * v                           # output projection
    if config.fusion != "none":
        total += config.n_labels * d_e
    if config.fusion == "dynamic":
        total += 2 * ((d_e + d_h) * d_e + d_e)
    if config.copy == "off":
        total += d_h * d_h + 2 * d_h * d_h + d_h
    else:
        total += 2 * d_h * d_h + 2 * d_h * d_h + d_h
        total += d_h + d_h + d_e + 1
    if config.emo_weight > 0:
        total += d_e * config.n_labels
    return total
