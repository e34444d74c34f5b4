"""Character-level corpus handling.

Vocabulary construction, line-delimited JSON corpus files, article
truncation and batching, and a deterministic synthetic generator that
produces emotionally labelled article/comment pairs for desk-scale
experiments.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .errors import CorpusFormatError, DataError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)

MAX_SENTENCES = 30
MAX_SENTENCE_TOKENS = 80
DEFAULT_VOCAB_SIZE = 5000

COARSE = "coarse"
FINE = "fine"
COARSE_LABELS = ("Positive", "Negative")
FINE_LABELS = ("Anger", "Disgust", "Like", "Happiness", "Sadness")


def labels_for(granularity: str) -> tuple[str, ...]:
    """Return the ordered label names for an emotion granularity."""
    if granularity == COARSE:
        return COARSE_LABELS
    if granularity == FINE:
        return FINE_LABELS
    raise DataError(f"unknown emotion granularity: {granularity!r}")


@dataclass(frozen=True)
class EmotionCategory:
    """An emotion label at a given granularity (coarse or fine)."""

    granularity: str
    label: int

    def __post_init__(self):
        names = labels_for(self.granularity)
        if not 0 <= self.label < len(names):
            raise DataError(
                f"label index {self.label} out of range for "
                f"{self.granularity} emotions"
            )

    @property
    def name(self) -> str:
        return labels_for(self.granularity)[self.label]

    @classmethod
    def from_name(cls, name: str) -> "EmotionCategory":
        """Resolve a label name to its category; names are globally unique."""
        for granularity in (COARSE, FINE):
            names = labels_for(granularity)
            if name in names:
                return cls(granularity, names.index(name))
        raise DataError(f"unknown emotion label: {name!r}")


@dataclass(frozen=True)
class CorpusRecord:
    """One article/comment pair as text, before vocabulary encoding."""

    article: tuple[str, ...]
    comment: str
    emotion: EmotionCategory


@dataclass(frozen=True)
class Example:
    """One encoded training example: token ids plus the emotion label."""

    article: tuple[tuple[int, ...], ...]
    comment: tuple[int, ...]
    emotion: EmotionCategory


def tokenize_char(text: str) -> list[str]:
    """Split text into single-character tokens.

    Any run of whitespace collapses to one space token.
    """
    tokens: list[str] = []
    for ch in text:
        if ch.isspace():
            if not tokens or tokens[-1] != " ":
                tokens.append(" ")
        else:
            tokens.append(ch)
    return tokens


def detokenize(tokens: list[str]) -> str:
    """Join character tokens back into a string."""
    return "".join(tokens)


class Vocab:
    """Token/id bijection with fixed reserved ids for PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: list[str], max_size: int = DEFAULT_VOCAB_SIZE):
        if max_size < len(RESERVED_TOKENS):
            raise DataError(f"max_size must be at least {len(RESERVED_TOKENS)}")
        kept = tokens[: max_size - len(RESERVED_TOKENS)]
        self._id_to_token = list(RESERVED_TOKENS) + kept
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("duplicate tokens in vocabulary")
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self._id_to_token)

    def encode(self, token: str) -> int:
        """Map a token to its id; out-of-vocabulary tokens map to UNK."""
        return self._token_to_id.get(token, UNK_ID)

    def decode(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def encode_all(self, tokens: list[str]) -> list[int]:
        return [self.encode(t) for t in tokens]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self._id_to_token[len(RESERVED_TOKENS):]

    def save(self, path) -> None:
        """Write one non-reserved token per line (line n holds id n+4)."""
        with open(path, "w", encoding="utf-8") as f:
            for token in self.tokens:
                f.write(token + "\n")

    @classmethod
    def load(cls, path, max_size: int = DEFAULT_VOCAB_SIZE) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        return cls(tokens, max_size=max_size)

    def content_hash(self) -> str:
        """Stable hex digest of the full token list, for checkpoint checks."""
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        for token in self._id_to_token:
            h.update(token.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


def build_vocab(records: list[CorpusRecord],
                max_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Count tokens over articles and comments jointly and rank them.

    Tokens are ordered by descending frequency, ties broken
    lexicographically, and truncated to fit ``max_size`` including the
    four reserved ids.
    """
    if not records:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for record in records:
        for sentence in record.article:
            for token in tokenize_char(sentence):
                counts[token] = counts.get(token, 0) + 1
        for token in tokenize_char(record.comment):
            counts[token] = counts.get(token, 0) + 1
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ranked, max_size=max_size)


def _truncate_article(sentences: list[str]) -> tuple[str, ...]:
    """Apply the sentence-count and sentence-length caps to an article."""
    if len(sentences) > MAX_SENTENCES:
        logger.info("truncating article from %d to %d sentences",
                    len(sentences), MAX_SENTENCES)
        sentences = sentences[:MAX_SENTENCES]
    out = []
    for sentence in sentences:
        tokens = tokenize_char(sentence)
        if len(tokens) > MAX_SENTENCE_TOKENS:
            logger.info("truncating sentence from %d to %d tokens",
                        len(tokens), MAX_SENTENCE_TOKENS)
            tokens = tokens[:MAX_SENTENCE_TOKENS]
        out.append(detokenize(tokens))
    kept = tuple(s for s in out if tokenize_char(s))
    if not kept:
        raise DataError("article has no nonempty sentence")
    return kept


def make_record(article: list[str], comment: str,
                emotion: EmotionCategory) -> CorpusRecord:
    """Build a record with truncation caps applied."""
    return CorpusRecord(_truncate_article(list(article)), comment, emotion)


def save_corpus(records: list[CorpusRecord], path) -> None:
    """Write records as line-delimited JSON (one object per line)."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            obj = {
                "article": list(record.article),
                "comment": record.comment,
                "emotion": record.emotion.name,
            }
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_corpus(path) -> list[CorpusRecord]:
    """Read a line-delimited JSON corpus, applying truncation caps.

    Raises a parse error naming the 1-based line number for malformed
    lines, and a data error for unknown emotion labels.
    """
    records: list[CorpusRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(obj, dict):
                raise CorpusFormatError(line_no, "record is not an object")
            for key in ("article", "comment", "emotion"):
                if key not in obj:
                    raise CorpusFormatError(line_no, f"missing field {key!r}")
            article = obj["article"]
            if (not isinstance(article, list)
                    or not all(isinstance(s, str) for s in article)):
                raise CorpusFormatError(
                    line_no, "field 'article' must be a list of strings")
            if not isinstance(obj["comment"], str):
                raise CorpusFormatError(line_no, "field 'comment' must be a string")
            if not isinstance(obj["emotion"], str):
                raise CorpusFormatError(line_no, "field 'emotion' must be a string")
            emotion = EmotionCategory.from_name(obj["emotion"])
            try:
                records.append(make_record(article, obj["comment"], emotion))
            except DataError as e:
                raise CorpusFormatError(line_no, str(e)) from e
    return records


def encode_record(record: CorpusRecord, vocab: Vocab) -> Example:
    """Encode a record's text into token ids.

    Article sentences are plain id sequences; the comment is wrapped in
    BOS/EOS markers.
    """
    article = tuple(
        tuple(vocab.encode_all(tokenize_char(sentence)))
        for sentence in record.article
    )
    comment = (BOS_ID, *vocab.encode_all(tokenize_char(record.comment)), EOS_ID)
    return Example(article, comment, record.emotion)


def encode_corpus(records: list[CorpusRecord], vocab: Vocab) -> list[Example]:
    return [encode_record(r, vocab) for r in records]


# --------------------------------------------------------------------------
# Synthetic corpus
#
# The synthetic language partitions lowercase ASCII letters so that each
# emotion owns a disjoint letter pool, shared only with a neutral pool
# {a, e, i, o, t, n} used by entities and filler words.  Every lexicon
# word spells its emotion unambiguously at the character level, and every
# entity contains the letter 'n', which appears in no lexicon word — so a
# comment that names its article's topic entity always shares at least
# one non-lexicon character with the article.

FINE_LEXICONS: dict[str, tuple[str, ...]] = {
    "Anger": ("krag", "gork", "grit"),
    "Disgust": ("yucca", "cuyo", "ucci"),
    "Like": ("love", "dove", "ideal"),
    "Happiness": ("hope", "happi", "jobi"),
    "Sadness": ("mist", "moss", "zam"),
}

COARSE_LEXICONS: dict[str, tuple[str, ...]] = {
    "Positive": FINE_LEXICONS["Like"] + FINE_LEXICONS["Happiness"],
    "Negative": (FINE_LEXICONS["Anger"] + FINE_LEXICONS["Disgust"]
                 + FINE_LEXICONS["Sadness"]),
}


def lexicons_for(granularity: str) -> dict[str, tuple[str, ...]]:
    """Per-label word lists used by the synthetic generator."""
    return COARSE_LEXICONS if granularity == COARSE else FINE_LEXICONS


ENTITIES = (
    "anton", "tonia", "etna", "nino", "tina", "neto", "onni", "tean",
    "enia", "nato", "anne", "eton", "inta", "otton", "nena", "tonet",
)

_FILLERS = ("at", "ote", "tia", "eta", "otti", "aie")


def synth_corpus(rng: Rng, n_examples: int,
                 granularity: str) -> list[CorpusRecord]:
    """Generate a deterministic labelled corpus of article/comment pairs.

    Each article opens with a topic entity; the paired comment names the
    topic, carries exactly one word from the gold emotion's lexicon, and
    pads the rest with neutral filler — so most comment positions demand
    no emotion and the emotion word's slot varies, which makes per-step
    control of the emotion signal part of what a model must learn.
    Gold labels rotate round-robin so every label appears equally often.
    """
    if n_examples < 1:
        raise DataError("n_examples must be at least 1")
    names = labels_for(granularity)
    lexicons = lexicons_for(granularity)
    records = []
    for i in range(n_examples):
        label = i % len(names)
        emotion = EmotionCategory(granularity, label)
        words = lexicons[names[label]]

        topic = ENTITIES[int(rng.integers(0, len(ENTITIES)))]
        n_sentences = int(rng.integers(2, 5))
        sentences = []
        for s in range(n_sentences):
            other = ENTITIES[int(rng.integers(0, len(ENTITIES)))]
            filler = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
            if s == 0:
                sentences.append(f"{topic} {filler} {other}")
            else:
                filler2 = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
                sentences.append(f"{other} {filler} {filler2}")

        word = words[int(rng.integers(0, len(words)))]
        f1 = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
        f2 = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
        f3 = _FILLERS[int(rng.integers(0, len(_FILLERS)))]
        shape = int(rng.integers(0, 4))
        if shape == 0:
            comment = f"{f1} {topic} {f2} {word}"
        elif shape == 1:
            comment = f"{topic} {f1} {word} {f2}"
        elif shape == 2:
            comment = f"{word} {f1} {topic} {f2}"
        else:
            comment = f"{f1} {topic} {f2} {word} {f3}"

        records.append(make_record(sentences, comment, emotion))
    return records


# --------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    """Padded id arrays for one training step.

    article_ids:   (B, S, T) int64, PAD-filled
    article_mask:  (B, S, T) float32, 1.0 at real tokens
    sentence_mask: (B, S)    float32, 1.0 at real sentences
    comment_ids:   (B, L)    int64 including BOS/EOS, PAD-filled
    comment_mask:  (B, L)    float32, 1.0 at real comment positions
    emotions:      (B,)      int64 label indices
    """

    article_ids: np.ndarray
    article_mask: np.ndarray
    sentence_mask: np.ndarray
    comment_ids: np.ndarray
    comment_mask: np.ndarray
    emotions: np.ndarray
    examples: list[Example] = field(repr=False, default_factory=list)

    @property
    def size(self) -> int:
        return self.article_ids.shape[0]


def collate(examples: list[Example]) -> Batch:
    """Pad a list of examples into one batch of rectangular arrays."""
    if not examples:
        raise DataError("cannot collate an empty batch")
    b = len(examples)
    s_max = max(len(e.article) for e in examples)
    t_max = max(len(s) for e in examples for s in e.article)
    l_max = max(len(e.comment) for e in examples)

    article_ids = np.full((b, s_max, t_max), PAD_ID, dtype=np.int64)
    article_mask = np.zeros((b, s_max, t_max), dtype=np.float32)
    sentence_mask = np.zeros((b, s_max), dtype=np.float32)
    comment_ids = np.full((b, l_max), PAD_ID, dtype=np.int64)
    comment_mask = np.zeros((b, l_max), dtype=np.float32)
    emotions = np.zeros(b, dtype=np.int64)

    for i, ex in enumerate(examples):
        for j, sentence in enumerate(ex.article):
            article_ids[i, j, :len(sentence)] = sentence
            article_mask[i, j, :len(sentence)] = 1.0
            sentence_mask[i, j] = 1.0
        comment_ids[i, :len(ex.comment)] = ex.comment
        comment_mask[i, :len(ex.comment)] = 1.0
        emotions[i] = ex.emotion.label
    return Batch(article_ids, article_mask, sentence_mask,
                 comment_ids, comment_mask, emotions, list(examples))


def make_batches(examples: list[Example], batch_size: int,
                 rng: Rng) -> list[Batch]:
    """Shuffle examples with the given rng and collate fixed-size batches."""
    if batch_size < 1:
        raise DataError("batch_size must be at least 1")
    shuffled = rng.shuffled(examples)
    return [
        collate(shuffled[i:i + batch_size])
        for i in range(0, len(shuffled), batch_size)
    ]
