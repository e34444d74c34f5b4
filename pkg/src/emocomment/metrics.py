"""Evaluation metrics.

Corpus diversity (distinct-n), within-comment repetition rate, corpus
BLEU with add-one smoothed precisions, LCS-based ROUGE-L F-score, and
emotion accuracy measured by a built-in multinomial naive-Bayes tagger.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError

ROUGE_BETA = 1.2


def _tokens(text) -> list:
    """Accept either a pre-tokenized sequence or a whitespace-joined string."""
    if isinstance(text, str):
        return text.split()
    return list(text)


def _ngrams(tokens: list, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n_counts(texts, n: int) -> tuple[int, int]:
    """(unique n-grams, total n-grams) across the whole corpus."""
    if n < 1:
        raise UsageError("n must be at least 1")
    seen = set()
    total = 0
    for text in texts:
        grams = _ngrams(_tokens(text), n)
        total += len(grams)
        seen.update(grams)
    return len(seen), total


def distinct_n(texts, n: int, per_text: bool = False) -> float:
    """Unique n-grams divided by total n-grams over the corpus.

    With per_text=True the ratio is computed per text and averaged
    (texts without n-grams are skipped).  Returns 0.0 when the corpus
    has no n-grams at all.
    """
    if per_text:
        ratios = []
        for text in texts:
            unique, total = distinct_n_counts([text], n)
            if total > 0:
                ratios.append(unique / total)
        return float(np.mean(ratios)) if ratios else 0.0
    unique, total = distinct_n_counts(texts, n)
    return unique / total if total > 0 else 0.0


def repetitive_ngram_rate(text, n: int) -> float:
    """Fraction of n-gram positions repeating an earlier n-gram of the
    same text; 0.0 for texts shorter than n."""
    if n < 1:
        raise UsageError("n must be at least 1")
    grams = _ngrams(_tokens(text), n)
    if not grams:
        return 0.0
    seen = set()
    repeats = 0
    for gram in grams:
        if gram in seen:
            repeats += 1
        seen.add(gram)
    return repeats / len(grams)


def corpus_repetition_rate(texts, n: int) -> float:
    """Mean repetition rate over texts long enough to hold an n-gram."""
    rates = [repetitive_ngram_rate(t, n) for t in texts
             if len(_tokens(t)) >= n]
    return float(np.mean(rates)) if rates else 0.0


def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU.

    Modified n-gram precisions are pooled over the corpus; orders 2..max_n
    use add-one smoothing ((matches+1)/(total+1)), order 1 is unsmoothed.
    Brevity penalty exp(1 - r/c) applies when the candidate corpus is
    shorter than the reference corpus.  Single reference per candidate.
    """
    if len(candidates) != len(references):
        raise UsageError(
            f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise UsageError("bleu needs at least one pair")
    cand_len = 0
    ref_len = 0
    matches = [0] * max_n
    totals = [0] * max_n
    for cand, ref in zip(candidates, references):
        cand_tokens = _tokens(cand)
        ref_tokens = _tokens(ref)
        cand_len += len(cand_tokens)
        ref_len += len(ref_tokens)
        for i in range(max_n):
            cand_grams = Counter(_ngrams(cand_tokens, i + 1))
            ref_grams = Counter(_ngrams(ref_tokens, i + 1))
            totals[i] += sum(cand_grams.values())
            matches[i] += sum(min(count, ref_grams[gram])
                              for gram, count in cand_grams.items())
    if cand_len == 0:
        return 0.0
    log_precisions = []
    for i in range(max_n):
        if i == 0:
            if matches[0] == 0:
                return 0.0
            precision = matches[0] / totals[0]
        else:
            precision = (matches[i] + 1) / (totals[i] + 1)
        log_precisions.append(math.log(precision))
    brevity = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return brevity * math.exp(sum(log_precisions) / max_n)


def _lcs_length(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(prev[j] + 1 if x == y
                           else max(prev[j + 1], current[j]))
        prev = current
    return prev[-1]


def rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    """Mean LCS F-score: F = (1+β²)RP / (R + β²P) with R=LCS/|ref|,
    P=LCS/|cand|; pairs where either side is empty score 0."""
    if len(candidates) != len(references):
        raise UsageError(
            f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise UsageError("rouge_l needs at least one pair")
    scores = []
    beta_sq = beta * beta
    for cand, ref in zip(candidates, references):
        cand_tokens = _tokens(cand)
        ref_tokens = _tokens(ref)
        lcs = _lcs_length(cand_tokens, ref_tokens)
        if lcs == 0 or not cand_tokens or not ref_tokens:
            scores.append(0.0)
            continue
        recall = lcs / len(ref_tokens)
        precision = lcs / len(cand_tokens)
        scores.append((1 + beta_sq) * recall * precision
                      / (recall + beta_sq * precision))
    return float(np.mean(scores))


class EmotionTagger:
    """Multinomial naive Bayes over comment tokens.

    Add-one smoothing over the training vocabulary plus one shared
    unknown-token bucket; prediction is the argmax of log prior plus
    token log likelihoods, ties to the lower label index.
    """

    def __init__(self, token_ids: dict, log_likelihood: np.ndarray,
                 log_prior: np.ndarray):
        self.token_ids = token_ids
        self.log_likelihood = log_likelihood
        self.log_prior = log_prior

    @property
    def n_labels(self) -> int:
        return self.log_prior.shape[0]

    def scores(self, comment) -> np.ndarray:
        total = self.log_prior.copy()
        unknown = len(self.token_ids)
        for token in _tokens(comment):
            total = total + self.log_likelihood[
                :, self.token_ids.get(token, unknown)]
        return total

    def tag(self, comment) -> int:
        return int(np.argmax(self.scores(comment)))


def train_tagger(comments, labels, n_labels: int) -> EmotionTagger:
    """Fit the naive-Bayes tagger; every label needs at least one example."""
    labels = list(labels)
    if len(comments) != len(labels):
        raise UsageError(f"{len(comments)} comments vs {len(labels)} labels")
    present = set(labels)
    missing = [l for l in range(n_labels) if l not in present]
    if missing:
        raise DataError(f"no training examples for labels {missing}")
    token_ids: dict = {}
    for comment in comments:
        for token in _tokens(comment):
            token_ids.setdefault(token, len(token_ids))
    v = len(token_ids) + 1
    counts = np.zeros((n_labels, v), dtype=np.float64)
    class_counts = np.zeros(n_labels, dtype=np.float64)
    for comment, label in zip(comments, labels):
        class_counts[label] += 1
        for token in _tokens(comment):
            counts[label, token_ids[token]] += 1
    log_likelihood = np.log((counts + 1.0)
                            / (counts.sum(axis=1, keepdims=True) + v))
    log_prior = np.log(class_counts / class_counts.sum())
    return EmotionTagger(token_ids, log_likelihood, log_prior)


@dataclass
class EmotionAccuracy:
    """Agreement between requested and tagged emotions."""

    overall: float
    per_label: dict[int, float]
    counts: dict[int, int]

    @property
    def macro(self) -> float:
        if not self.per_label:
            return 0.0
        return float(np.mean(list(self.per_label.values())))


def emotion_accuracy(tagger: EmotionTagger, generated,
                     requested_labels) -> EmotionAccuracy:
    """Fraction of generated comments tagged as their requested emotion."""
    requested = list(requested_labels)
    generated = list(generated)
    if len(generated) != len(requested):
        raise UsageError(
            f"{len(generated)} comments vs {len(requested)} requested labels")
    if not generated:
        raise UsageError("emotion_accuracy needs at least one pair")
    hits: dict[int, int] = {}
    counts: dict[int, int] = {}
    correct = 0
    for comment, label in zip(generated, requested):
        counts[label] = counts.get(label, 0) + 1
        if tagger.tag(comment) == label:
            hits[label] = hits.get(label, 0) + 1
            correct += 1
    per_label = {label: hits.get(label, 0) / count
                 for label, count in sorted(counts.items())}
    return EmotionAccuracy(correct / len(generated), per_label, counts)


@dataclass
class MetricReport:
    """All evaluation numbers for one generated corpus."""

    bleu: float
    rouge_l: float
    d1: float
    d2: float
    d3: float
    rep: dict[int, float]
    emotion_acc: float
    emotion_acc_per_label: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    _KEY_ORDER = ("bleu", "rouge_l", "d1", "d2", "d3", "rep",
                  "emotion_acc", "emotion_acc_per_label", "counts", "notes")

    def to_json(self) -> str:
        data = {key: getattr(self, key) for key in self._KEY_ORDER}
        data["rep"] = {str(n): v for n, v in self.rep.items()}
        return json.dumps(data, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        data["rep"] = {int(n): v for n, v in data["rep"].items()}
        return cls(**data)

    def to_table(self) -> str:
        rows = [
            ("Generation Quality", "BLEU", self.bleu),
            ("", "ROUGE-L", self.rouge_l),
            ("Diversity", "D1", self.d1),
            ("", "D2", self.d2),
            ("", "D3", self.d3),
        ]
        for n in sorted(self.rep):
            rows.append(("", f"Rep-{n}", self.rep[n]))
        rows.append(("Emotion Acc.", "overall", self.emotion_acc))
        for name, value in self.emotion_acc_per_label.items():
            rows.append(("", name, value))
        lines = []
        for group, name, value in rows:
            lines.append(f"{group:<20} {name:<10} {value:8.4f}")
        return "\n".join(lines)


def build_report(generated, references, requested_labels,
                 tagger: EmotionTagger, label_names) -> MetricReport:
    """Compute the full metric set for generated comments."""
    acc = emotion_accuracy(tagger, generated, requested_labels)
    notes = []
    distinct = {}
    for n in (1, 2, 3):
        unique, total = distinct_n_counts(generated, n)
        if total == 0:
            notes.append(f"distinct_{n}_undefined")
            distinct[n] = 0.0
        else:
            distinct[n] = unique / total
    rep = {n: corpus_repetition_rate(generated, n) for n in (1, 2, 3, 4)}
    per_label = {label_names[label]: value
                 for label, value in acc.per_label.items()}
    counts = {
        "n_comments": len(list(generated)),
        "n_tokens": sum(len(_tokens(t)) for t in generated),
    }
    return MetricReport(
        bleu=bleu(generated, references),
        rouge_l=rouge_l(generated, references),
        d1=distinct[1], d2=distinct[2], d3=distinct[3],
        rep=rep,
        emotion_acc=acc.overall,
        emotion_acc_per_label=per_label,
        counts=counts,
        notes=notes,
    )
