"""
Ingests documents and pretrained word vectors, builds the vocabulary, and
constructs level-specific inputs by prepending the parent category's
label text to the document tokens.
"""
import json
import logging
import os
import string
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .numeric import DTYPE, SeedStreams
from .schemas import CorpusRecord
from .taxonomy import Taxonomy, build_taxonomy, categories_at, check_path_shape, validate_path

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1
DEFAULT_MAX_LEN = 256


class EmbeddingDimensionError(ValueError):
    def __init__(self, line_number: int, found: int, expected: int):
        super().__init__(
            f"embedding line {line_number} has {found} values, expected {expected}"
        )
        self.line_number = line_number


def tokenize(text: str) -> List[str]:
    """
    Lowercase, split on whitespace, strip surrounding ASCII punctuation
    from each token and drop empty tokens.
    """
    tokens = (t.strip(string.punctuation) for t in text.lower().split())
    return [t for t in tokens if t]


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    tokens: Tuple[str, ...]
    path: Tuple[str, ...]
    split: Optional[str] = None

    @classmethod
    def from_text(
        cls,
        doc_id: str,
        text: str,
        path: Sequence[str] = (),
        split: Optional[str] = None,
    ) -> "Document":
        tokens = tuple(tokenize(text))
        if not tokens:
            raise ValueError(f"document {doc_id!r} has no tokens")
        return cls(doc_id=doc_id, text=text, tokens=tokens, path=tuple(path), split=split)


class Vocabulary:
    """
    Dense token index with PAD at 0 and UNK at 1.
    """

    def __init__(self, tokens: Iterable[str]):
        self.tokens: List[str] = [PAD, UNK]
        for token in tokens:
            if token not in (PAD, UNK):
                self.tokens.append(token)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_INDEX)


def build_vocabulary(
    corpus: Sequence[Document],
    tax: Taxonomy,
    min_count: int = 1,
) -> Vocabulary:
    """
    Every document token seen at least `min_count` times plus every token of
    every category label, in sorted order after PAD and UNK.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    counts = Counter(t for doc in corpus for t in doc.tokens)
    kept = {t for t, c in counts.items() if c >= min_count}
    for label in tax.labels.values():
        kept.update(tokenize(label))
    return Vocabulary(sorted(kept))


def save_vocabulary(path: str, vocab: Vocabulary) -> None:
    """
    Write one token per line; the line number is the token's index.
    """
    with open(path, "w", encoding="utf-8") as f:
        for token in vocab.tokens:
            f.write(token + "\n")


def load_vocabulary(path: str) -> Vocabulary:
    """
    Inverse of save_vocabulary. The first two lines must be the PAD and UNK
    tokens.
    """
    with open(path, "r", encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f]
    if tokens[:2] != [PAD, UNK]:
        raise ValueError(f"vocabulary file {path} must start with {PAD} and {UNK}")
    return Vocabulary(tokens[2:])


@dataclass(frozen=True)
class EmbeddingMatrix:
    """
    Frozen V x d word vectors aligned with a vocabulary. Rows for PAD and
    UNK are zero; the array is read-only.
    """
    vocabulary: Vocabulary
    vectors: np.ndarray
    coverage: float = 1.0
    frozen: bool = True

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.vocabulary):
            raise ValueError(
                f"{self.vectors.shape[0]} embedding rows for {len(self.vocabulary)} tokens"
            )
        if np.any(self.vectors[PAD_INDEX] != 0.0):
            raise ValueError("PAD embedding row must be zero")
        self.vectors.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def detect_embedding_dim(path: str) -> int:
    """
    Infer the vector dimension from the first non-empty line of a
    GloVe-format file.

    Raises:
        FileNotFoundError: if `path` does not exist.
        ValueError: if the file has no vectors.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Embedding file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if parts:
                return len(parts) - 1
    raise ValueError(f"embedding file {path} is empty")


def load_embeddings(path: str, vocab: Vocabulary, d: int) -> EmbeddingMatrix:
    """
    Read GloVe-format text vectors for the tokens of `vocab`.

    Tokens missing from the file keep the all-zero UNK row.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Embedding file not found: {path}")

    vectors = np.zeros((len(vocab), d), dtype=DTYPE)
    found = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) - 1 != d:
                raise EmbeddingDimensionError(line_number, len(parts) - 1, d)
            idx = vocab.index.get(parts[0])
            if idx is None or idx in (PAD_INDEX, UNK_INDEX):
                continue
            vectors[idx] = np.array(parts[1:], dtype=DTYPE)
            found += 1

    coverage = found / max(len(vocab) - 2, 1)
    logger.info(
        "Loaded embeddings",
        extra={"path": str(path), "dim": d, "vocab_size": len(vocab), "coverage": round(coverage, 4)},
    )
    return EmbeddingMatrix(vocabulary=vocab, vectors=vectors, coverage=coverage)


def write_embeddings(path: str, embeddings: EmbeddingMatrix) -> None:
    """
    Write every non-reserved row in GloVe text format with round-trip
    exact float formatting.
    """
    with open(path, "w", encoding="utf-8") as f:
        for token, row in zip(embeddings.vocabulary.tokens[2:], embeddings.vectors[2:]):
            f.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")


def compose_level_input(doc: Document, level: int, parent_label: str) -> List[str]:
    """
    Level 1 sees the bare document; deeper levels see the parent's label
    tokens followed by the document tokens, with no separator.
    """
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if level == 1:
        if parent_label:
            raise ValueError("level 1 has no parent label")
        return list(doc.tokens)
    label_tokens = tokenize(parent_label or "")
    if not label_tokens:
        raise ValueError(f"level {level} requires a non-empty parent label")
    return label_tokens + list(doc.tokens)


@dataclass(frozen=True)
class LevelBatch:
    level: int
    tokens: np.ndarray
    targets: Optional[np.ndarray]
    parent_labels: Tuple[str, ...]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.tokens != PAD_INDEX

    def take(self, indices: Sequence[int]) -> "LevelBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return LevelBatch(
            level=self.level,
            tokens=self.tokens[indices],
            targets=None if self.targets is None else self.targets[indices],
            parent_labels=tuple(self.parent_labels[i] for i in indices),
        )


def encode_batch(
    sequences: Sequence[Sequence[str]],
    vocab: Vocabulary,
    max_len: int,
    level: int,
    class_index: Mapping[str, int],
    targets: Optional[Sequence[str]] = None,
    parent_labels: Optional[Sequence[str]] = None,
) -> LevelBatch:
    """
    Map token sequences to a (batch, max_len) index matrix.

    Sequences are truncated from the end so the prepended parent label is
    kept; shorter sequences are right-padded with PAD.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")

    tokens = np.full((len(sequences), max_len), PAD_INDEX, dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids = [vocab.lookup(t) for t in seq[:max_len]]
        tokens[row, : len(ids)] = ids

    encoded_targets = None
    if targets is not None:
        missing = [t for t in targets if t not in class_index]
        if missing:
            raise ValueError(f"class labels not in level-{level} index: {sorted(set(missing))}")
        encoded_targets = np.array([class_index[t] for t in targets], dtype=np.int64)

    labels = tuple(parent_labels) if parent_labels is not None else ("",) * len(sequences)
    return LevelBatch(level=level, tokens=tokens, targets=encoded_targets, parent_labels=labels)


def read_corpus(path: str, tax: Optional[Taxonomy] = None) -> List[Document]:
    """
    Load JSON-lines corpus records. With a taxonomy, every path must be a
    full, edge-consistent root-to-leaf path.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Corpus file not found: {path}")

    docs: List[Document] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = CorpusRecord.model_validate_json(line)
            doc = Document.from_text(record.id, record.text, record.path, record.split)
            if tax is not None:
                check_path_shape(tax, doc.path)
                if not validate_path(tax, doc.path):
                    raise ValueError(f"document {doc.doc_id!r} has an edge-inconsistent path")
            docs.append(doc)

    logger.info("Loaded corpus", extra={"path": str(path), "documents": len(docs)})
    return docs


def write_corpus(path: str, docs: Iterable[Document]) -> None:
    """
    Write documents as JSON-lines corpus records, omitting an unset split.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            record = CorpusRecord(id=doc.doc_id, text=doc.text, path=list(doc.path), split=doc.split)
            f.write(json.dumps(record.model_dump(exclude_none=True), sort_keys=True) + "\n")


def split_documents(
    docs: Sequence[Document],
    val_fraction: float = 0.1,
    seed: int = 0,
) -> Tuple[List[Document], List[Document]]:
    """
    Train/validation split. Explicit `split` fields win; otherwise a seeded
    permutation holds out max(1, round(val_fraction * n)) documents.
    Documents marked `test` are excluded from both parts.
    """
    usable = [d for d in docs if d.split != "test"]
    if any(d.split == "val" for d in usable):
        return [d for d in usable if d.split != "val"], [d for d in usable if d.split == "val"]

    if len(usable) < 2:
        raise ValueError("need at least 2 documents to hold out a validation split")
    rng = SeedStreams(seed).stream("split")
    order = rng.permutation(len(usable))
    n_val = min(max(1, int(round(val_fraction * len(usable)))), len(usable) - 1)
    val_idx = set(order[:n_val].tolist())
    train = [d for i, d in enumerate(usable) if i not in val_idx]
    val = [d for i, d in enumerate(usable) if i in val_idx]
    return train, val


def generate_synthetic_corpus(
    branching: Sequence[int],
    docs_per_leaf: int,
    signal_tokens_per_class: int,
    noise_vocab: int,
    doc_len: int,
    seed: int,
    shared_child_signals: bool = False,
    dim: int = 16,
) -> Tuple[Taxonomy, List[Document], EmbeddingMatrix]:
    """
    Build a uniform tree and a corpus whose documents mix their path's
    signal tokens with noise tokens, plus seeded unit-variance embeddings.

    With `shared_child_signals`, categories below level 1 share signal
    tokens by child position across branches and level-1 signals are left
    out of the text, so a child is identifiable only together with its
    parent's label.
    """
    if not branching or any(b < 1 for b in branching):
        raise ValueError("branching must be a non-empty list of positive integers")
    if min(docs_per_leaf, signal_tokens_per_class, noise_vocab, doc_len, dim) < 1:
        raise ValueError("all counts must be >= 1")

    root = "root"
    labels: Dict[str, str] = {root: "label-root"}
    edges: List[Tuple[str, str]] = []
    position: Dict[str, int] = {}
    frontier = [root]
    for width in branching:
        next_frontier = []
        for parent in frontier:
            for i in range(width):
                child = f"c{i}" if parent == root else f"{parent}_{i}"
                edges.append((parent, child))
                labels[child] = f"label-{child}"
                position[child] = i
                next_frontier.append(child)
        frontier = next_frontier
    tax = build_taxonomy(edges, labels, root)
    levels = tax.level_count

    def signals(node: str) -> List[str]:
        level = tax.level_of[node]
        if shared_child_signals and level >= 2:
            stem = f"sig-l{level}-p{position[node]}"
        else:
            stem = f"sig-{node}"
        return [f"{stem}-{k}" for k in range(signal_tokens_per_class)]

    signal_levels = range(2, levels + 1) if shared_child_signals else range(1, levels + 1)
    per_level = max(1, doc_len // (2 * max(len(signal_levels), 1)))
    noise = [f"noise-{k}" for k in range(noise_vocab)]

    rng = SeedStreams(seed).stream("synth", "text")
    docs: List[Document] = []
    for leaf in categories_at(tax, levels):
        path = [leaf]
        while tax.level_of[path[0]] > 1:
            path.insert(0, tax.parent_of(path[0]))
        for _ in range(docs_per_leaf):
            tokens: List[str] = []
            for level in signal_levels:
                pool = signals(path[level - 1])
                tokens += [pool[i] for i in rng.integers(0, len(pool), size=per_level)]
            n_noise = max(doc_len - len(tokens), 0)
            tokens += [noise[i] for i in rng.integers(0, len(noise), size=n_noise)]
            tokens = [tokens[i] for i in rng.permutation(len(tokens))]
            docs.append(Document.from_text(f"doc-{len(docs):06d}", " ".join(tokens), path))

    vocab = build_vocabulary(docs, tax)
    emb_rng = SeedStreams(seed).stream("synth", "embeddings")
    vectors = emb_rng.standard_normal((len(vocab), dim))
    vectors[PAD_INDEX] = 0.0
    vectors[UNK_INDEX] = 0.0
    logger.info(
        "Generated synthetic corpus",
        extra={"levels": levels, "documents": len(docs), "vocab_size": len(vocab)},
    )
    return tax, docs, EmbeddingMatrix(vocabulary=vocab, vectors=vectors)
