"""Finite-difference verification of every differentiable component.

Each named check builds a small float64 graph — one per array operation,
plus the LSTM cell, the fusion gates, the full copy path, and the
combined training loss — and compares analytic gradients against central
differences.  Shared by the gradcheck command and the test suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from .autodiff import LSTMParams, Rng, Tensor, grad_check, lstm_cell
from .corpus import FINE, build_vocab, collate, encode_corpus, synth_corpus
from .model import CommentModel, ModelConfig

TOLERANCE = 1e-3


@dataclass
class CheckResult:
    """Outcome of one finite-difference check."""

    name: str
    max_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_err < TOLERANCE


def _param(rng: Rng, shape, low=-0.9, high=0.9) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape, dtype=np.float64),
                  requires_grad=True)


def _probe(rng: Rng, shape) -> Tensor:
    """Fixed positive weights turning an array output into a scalar."""
    return Tensor(rng.uniform(0.5, 1.5, size=shape, dtype=np.float64))


def _float64(named: dict) -> dict:
    for tensor in named.values():
        tensor.data = tensor.data.astype(np.float64)
    return named


def _op_checks(rng: Rng):
    """(name, params, scalar_fn) triples covering the operation catalogue."""
    a = _param(rng.fork("a"), (3, 4))
    b = _param(rng.fork("b"), (3, 4))
    w = _param(rng.fork("w"), (4, 5))
    pos = _param(rng.fork("pos"), (3, 4), low=0.5, high=2.0)
    scores = _param(rng.fork("scores"), (3, 5))
    table = _param(rng.fork("table"), (6, 4))
    base = _param(rng.fork("base"), (2, 7))
    values = _param(rng.fork("values"), (2, 3))
    p34 = _probe(rng.fork("p34"), (3, 4))
    p35 = _probe(rng.fork("p35"), (3, 5))
    p4 = _probe(rng.fork("p4"), (4,))
    p234 = _probe(rng.fork("p234"), (2, 3, 4))
    p64 = _probe(rng.fork("p64"), (6, 4))
    p27 = _probe(rng.fork("p27"), (2, 7))
    p43 = _probe(rng.fork("p43"), (4, 3))
    ids23 = np.array([[0, 2, 5], [1, 1, 3]])
    tgt = np.array([1, 4, 0])
    last = np.array([[2], [0], [4]])
    sc_ids = np.array([[1, 4, 1], [0, 6, 2]])

    def spend(x, probe):
        return ad.tsum(ad.mul(x, probe))

    return [
        ("op.add", {"a": a, "b": b}, lambda: spend(ad.add(a, b), p34)),
        ("op.sub", {"a": a, "b": b}, lambda: spend(ad.sub(a, b), p34)),
        ("op.mul", {"a": a, "b": b}, lambda: spend(ad.mul(a, b), p34)),
        ("op.neg", {"a": a}, lambda: spend(ad.neg(a), p34)),
        ("op.exp", {"a": a}, lambda: spend(ad.exp(a), p34)),
        ("op.log", {"pos": pos}, lambda: spend(ad.log(pos), p34)),
        ("op.sigmoid", {"a": a}, lambda: spend(ad.sigmoid(a), p34)),
        ("op.tanh", {"a": a}, lambda: spend(ad.tanh(a), p34)),
        ("op.matmul", {"a": a, "w": w},
         lambda: spend(ad.matmul(a, w), p35)),
        ("op.reshape", {"a": a},
         lambda: spend(ad.reshape(a, (2, 6)), _probe(Rng(11), (2, 6)))),
        ("op.transpose", {"a": a},
         lambda: spend(ad.transpose(a, (1, 0)), p43)),
        ("op.getitem", {"a": a}, lambda: spend(ad.getitem(a, 1), p4)),
        ("op.concat", {"a": a, "b": b},
         lambda: spend(ad.concat([a, b], axis=1), _probe(Rng(12), (3, 8)))),
        ("op.stack", {"a": a, "b": b},
         lambda: spend(ad.stack([a, b], axis=0), p234)),
        ("op.tsum", {"a": a}, lambda: spend(ad.tsum(a, axis=0), p4)),
        ("op.tmean", {"a": a},
         lambda: spend(ad.tmean(a, axis=1), _probe(Rng(13), (3,)))),
        ("op.softmax", {"scores": scores},
         lambda: spend(ad.softmax(scores), p35)),
        ("op.cross_entropy", {"scores": scores},
         lambda: ad.tmean(ad.cross_entropy(ad.softmax(scores), tgt))),
        ("op.embedding_lookup", {"table": table},
         lambda: spend(ad.embedding_lookup(table, ids23), p234)),
        ("op.gather_last", {"scores": scores},
         lambda: ad.tsum(ad.gather_last(ad.softmax(scores), last))),
        ("op.scatter_add", {"base": base, "values": values},
         lambda: spend(ad.scatter_add(base, sc_ids, values), p27)),
        ("op.dropout", {"a": a},
         lambda: spend(ad.dropout(a, 0.3, Rng(99), True), p34)),
    ]


def _lstm_check(rng: Rng):
    d_in, d_h, batch = 5, 8, 3
    params = LSTMParams(
        w_input=_param(rng.fork("wi"), (d_in, 4 * d_h)),
        w_hidden=_param(rng.fork("wh"), (d_h, 4 * d_h)),
        bias=_param(rng.fork("b"), (4 * d_h,)),
    )
    x = _param(rng.fork("x"), (batch, d_in))
    h = _param(rng.fork("h"), (batch, d_h))
    c = _param(rng.fork("c"), (batch, d_h))
    probe_h = _probe(rng.fork("ph"), (batch, d_h))
    probe_c = _probe(rng.fork("pc"), (batch, d_h))
    named = {"x": x, "h": h, "c": c}
    named.update(params.named("lstm"))

    def fn():
        h_new, c_new = lstm_cell(x, h, c, params)
        return ad.add(ad.tsum(ad.mul(h_new, probe_h)),
                      ad.tsum(ad.mul(c_new, probe_c)))

    return "lstm_cell", named, fn


def _fusion_check(rng: Rng):
    d = 8
    config = dec.DecodeConfig(fusion="dynamic", copy="off")
    params = dec.init_decoder_params(rng.fork("dec"), d, d, 12, 5, config)
    _float64(params.named())
    v = _param(rng.fork("v"), (2, d))
    e_prev = _param(rng.fork("e"), (2, d))
    s_prev = _param(rng.fork("s"), (2, d))
    probe = _probe(rng.fork("p"), (2, d))
    named = {"v": v, "e_prev": e_prev, "s_prev": s_prev,
             "w_ge": params.w_gate_emotion, "b_ge": params.b_gate_emotion,
             "w_gw": params.w_gate_word, "b_gw": params.b_gate_word}

    def fn():
        return ad.tsum(ad.mul(dec.fuse_dynamic(v, e_prev, s_prev, params),
                              probe))

    return "fusion_dynamic", named, fn


def _toy_batch(seed: int):
    records = synth_corpus(Rng(seed), 2, FINE)
    vocab = build_vocab(records)
    return collate(encode_corpus(records, vocab)), vocab


def _copy_check(rng: Rng):
    """One full decode step through the sentence/word/switch mixture."""
    batch, vocab = _toy_batch(31)
    config = ModelConfig(vocab_size=len(vocab), d_emb=8, d_h=8,
                         fusion="dynamic", copy="hierarchical", topk=5)
    model = CommentModel(config, rng.fork("model"))
    named = _float64(model.parameters())
    targets = batch.comment_ids[:, 1]

    def fn():
        encoded = model.encode(batch)
        state = dec.init_decoder_state(encoded.article_state,
                                       model.decoder_params)
        out, _ = dec.decode_step(
            batch.comment_ids[:, 0], state, encoded, batch.emotions,
            model.embedding, model.decoder_params, config.decode_config)
        return ad.tmean(ad.cross_entropy(out.final_dist, targets))

    return "copy_path", named, fn


def _loss_check(rng: Rng):
    batch, vocab = _toy_batch(32)
    config = ModelConfig(vocab_size=len(vocab), d_emb=8, d_h=8,
                         fusion="dynamic", copy="hierarchical", topk=5,
                         emo_weight=0.01)
    model = CommentModel(config, rng.fork("model"))
    named = _float64(model.parameters())

    def fn():
        return model.loss(batch, training=False).total_tensor

    return "combined_loss", named, fn


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Run every check; each entry reports its worst relative error."""
    rng = Rng(seed)
    triples = _op_checks(rng.fork("ops"))
    triples.append(_lstm_check(rng.fork("lstm")))
    triples.append(_fusion_check(rng.fork("fusion")))
    triples.append(_copy_check(rng.fork("copy")))
    triples.append(_loss_check(rng.fork("loss")))
    results = []
    for name, params, fn in triples:
        start = time.perf_counter()
        err = grad_check(fn, params)
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<22} max rel err {r.max_err:.3e}"
                     f"  ({r.seconds:.2f}s)")
    worst = max(results, key=lambda r: r.max_err)
    lines.append(f"worst: {worst.name} at {worst.max_err:.3e} "
                 f"(tolerance {TOLERANCE:.0e})")
    return "\n".join(lines)
