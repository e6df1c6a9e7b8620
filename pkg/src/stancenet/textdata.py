"""Corpus handling: tokenised articles to fixed-shape encoded inputs.

Input articles are pre-tokenised lowercase text; bodies carry sentence
boundaries as a literal ``<sep>`` token. Encoding truncates to the first
``l`` sentences and first ``n`` words per sentence, pads the rest, and
keeps 0/1 masks so padding can never leak into attention or averages.

Also home to the synthetic corpus generators used by the demos and the
acceptance suite, and to fold construction for cross-validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SEP_TOKEN = "<sep>"

_RESERVED = {PAD_TOKEN, UNK_TOKEN, SEP_TOKEN}


class CorpusFormatError(ValueError):
    """A corpus file line that cannot be parsed; message carries the line number."""


class EncodeError(ValueError):
    """An article that cannot be encoded (e.g. empty body)."""


@dataclass
class RawArticle:
    title: str
    body: str
    label: int


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise CorpusFormatError(f"{path}: vocabulary must start with {PAD_TOKEN}, {UNK_TOKEN}")
        return Vocabulary({t: i for i, t in enumerate(tokens)}, tokens)


@dataclass
class EncodedArticle:
    """One article as fixed-shape index matrices plus masks."""

    sentences: np.ndarray      # [l, n] word ids, PAD-filled
    sentence_mask: np.ndarray  # [l] 0/1
    word_masks: np.ndarray     # [l, n] 0/1
    title: np.ndarray          # [n] word ids
    title_mask: np.ndarray     # [n] 0/1
    label: int


def split_sentences(body: str, separator: str = SEP_TOKEN) -> list[list[str]]:
    """Split a token string into sentences at the separator token, dropping empties."""
    sentences: list[list[str]] = []
    current: list[str] = []
    for token in body.split():
        if token == separator:
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(token)
    if current:
        sentences.append(current)
    return sentences


def _article_tokens(article: RawArticle) -> Iterable[str]:
    for sent in split_sentences(article.body):
        yield from sent
    for token in article.title.split():
        if token != SEP_TOKEN:
            yield token


def build_vocab(corpus: list[RawArticle]) -> Vocabulary:
    """Deterministic vocabulary: reserved ids 0/1, then corpus tokens in sorted order."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen = set()
    for article in corpus:
        seen.update(_article_tokens(article))
    seen -= _RESERVED
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + sorted(seen)
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def encode_article(article: RawArticle, vocab: Vocabulary, n: int, l: int) -> EncodedArticle:
    """Encode one article to [l, n] id matrices with keep-first truncation."""
    if n < 1 or l < 1:
        raise ValueError(f"sequence limits must be positive, got n={n}, l={l}")
    sentence_tokens = split_sentences(article.body)
    if not sentence_tokens:
        raise EncodeError(f"article {article.title!r} has no sentences after splitting")

    sentences = np.full((l, n), PAD_ID, dtype=np.int64)
    word_masks = np.zeros((l, n), dtype=np.float64)
    sentence_mask = np.zeros(l, dtype=np.float64)
    for j, tokens in enumerate(sentence_tokens[:l]):
        kept = tokens[:n]
        sentences[j, : len(kept)] = [vocab.lookup(t) for t in kept]
        word_masks[j, : len(kept)] = 1.0
        sentence_mask[j] = 1.0

    title = np.full(n, PAD_ID, dtype=np.int64)
    title_mask = np.zeros(n, dtype=np.float64)
    title_tokens = [t for t in article.title.split() if t != SEP_TOKEN][:n]
    title[: len(title_tokens)] = [vocab.lookup(t) for t in title_tokens]
    title_mask[: len(title_tokens)] = 1.0

    return EncodedArticle(sentences, sentence_mask, word_masks, title, title_mask, article.label)


def encode_corpus(corpus: list[RawArticle], vocab: Vocabulary, n: int, l: int) -> list[EncodedArticle]:
    return [encode_article(a, vocab, n, l) for a in corpus]


def make_folds(dataset_size: int, k: int, seed: int) -> list[list[int]]:
    """Shuffle [0, dataset_size) with the seed and slice into k near-equal folds."""
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    if k > dataset_size:
        raise ValueError(f"cannot make {k} folds from {dataset_size} items")
    order = np.random.default_rng(seed).permutation(dataset_size)
    base, extra = divmod(dataset_size, k)
    folds = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append([int(x) for x in order[pos : pos + size]])
        pos += size
    return folds


# --------------------------------------------------------------------------
# Article files (one JSON object per line)
# --------------------------------------------------------------------------

def load_corpus(path) -> tuple[list[RawArticle], int]:
    """Read a JSONL article file; returns the articles and the class count.

    The first line may be a ``classes=<C>`` header; otherwise C is inferred
    as max(label)+1. Every record must have exactly the keys title, body,
    label.
    """
    articles: list[RawArticle] = []
    declared: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line.startswith("classes="):
                try:
                    declared = int(line.split("=", 1)[1])
                except ValueError:
                    raise CorpusFormatError(f"{path}:{lineno}: bad classes header {line!r}")
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({err.msg})")
            if not isinstance(record, dict) or set(record) != {"title", "body", "label"}:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected exactly the keys title/body/label"
                )
            if not isinstance(record["label"], int) or record["label"] < 0:
                raise CorpusFormatError(f"{path}:{lineno}: label must be a non-negative integer")
            articles.append(RawArticle(str(record["title"]), str(record["body"]), record["label"]))
    if not articles:
        raise CorpusFormatError(f"{path}: no articles found")
    classes = declared if declared is not None else max(a.label for a in articles) + 1
    for i, a in enumerate(articles):
        if a.label >= classes:
            raise CorpusFormatError(f"{path}: article {i} has label {a.label} >= classes {classes}")
    return articles, classes


def save_corpus(path, articles: list[RawArticle], classes: Optional[int] = None):
    with open(path, "w", encoding="utf-8") as fh:
        if classes is not None:
            fh.write(f"classes={classes}\n")
        for a in articles:
            fh.write(json.dumps({"title": a.title, "body": a.body, "label": a.label}) + "\n")


def class_histogram(articles: list[RawArticle], classes: int) -> list[int]:
    counts = [0] * classes
    for a in articles:
        counts[a.label] += 1
    return counts


# --------------------------------------------------------------------------
# Encoded corpus files
# --------------------------------------------------------------------------

def save_encoded(path, encoded: list[EncodedArticle], classes: int):
    np.savez(
        path,
        sentences=np.stack([e.sentences for e in encoded]),
        sentence_masks=np.stack([e.sentence_mask for e in encoded]),
        word_masks=np.stack([e.word_masks for e in encoded]),
        titles=np.stack([e.title for e in encoded]),
        title_masks=np.stack([e.title_mask for e in encoded]),
        labels=np.array([e.label for e in encoded], dtype=np.int64),
        classes=np.array(classes, dtype=np.int64),
    )


def load_encoded(path) -> tuple[list[EncodedArticle], int]:
    with np.load(path) as data:
        encoded = [
            EncodedArticle(
                data["sentences"][i],
                data["sentence_masks"][i],
                data["word_masks"][i],
                data["titles"][i],
                data["title_masks"][i],
                int(data["labels"][i]),
            )
            for i in range(data["labels"].shape[0])
        ]
        return encoded, int(data["classes"])


# --------------------------------------------------------------------------
# Synthetic corpora
# --------------------------------------------------------------------------

def gen_synthetic(
    num_articles: int,
    classes: int,
    planted_tokens_per_class: int = 3,
    seed: int = 0,
) -> list[RawArticle]:
    """Separable toy corpus: each class owns marker tokens mixed into shared filler.

    Article i gets label i % classes (balanced within one article). Marker
    tokens follow the ``marker<c>w<i>`` convention and never appear under a
    different label, so a bag-of-words majority vote over markers recovers
    every label; titles always carry at least one marker.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    markers = [
        [f"marker{c}w{i}" for i in range(planted_tokens_per_class)] for c in range(classes)
    ]
    fillers = [f"filler{i}" for i in range(16)]

    articles = []
    for i in range(num_articles):
        label = i % classes
        own = markers[label]
        title_words = [str(rng.choice(own))] + list(rng.choice(fillers, size=2))
        sentence_count = int(rng.integers(2, 5))
        sentences = []
        for s in range(sentence_count):
            words = list(rng.choice(fillers, size=int(rng.integers(3, 7))))
            if s == 0 or rng.random() < 0.5:
                words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(own)))
            sentences.append(" ".join(words))
        articles.append(
            RawArticle(" ".join(title_words), f" {SEP_TOKEN} ".join(sentences), label)
        )
    return articles


def gen_knowledge_corpus(num_articles: int) -> tuple[list[RawArticle], dict[str, int]]:
    """Two-class corpus whose text is class-uninformative.

    Every article has the same filler skeleton; the only varying token is a
    per-article entity name (``entity<i>``) that appears in both title and
    body. Returns the articles and the entity-token -> label map, so the
    class signal can be planted in knowledge tables instead of text.
    """
    fillers = [f"filler{i}" for i in range(8)]
    articles = []
    entity_labels: dict[str, int] = {}
    for i in range(num_articles):
        label = i % 2
        entity = f"entity{i}"
        entity_labels[entity] = label
        # identical skeleton per article; the label never influences the text
        body = (
            f"{fillers[0]} {fillers[1]} {entity} {fillers[2]} "
            f"{SEP_TOKEN} {fillers[3]} {entity} {fillers[4]} {fillers[5]}"
        )
        title = f"{entity} {fillers[6]} {fillers[7]}"
        articles.append(RawArticle(title, body, label))
    return articles, entity_labels
