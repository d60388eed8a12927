"""Corpus parsing, BIOES span conversion, embeddings, and batching.

The corpus container is two-column CoNLL: one ``<char>TAB<tag>`` line per
character, blank line between sentences, UTF-8 throughout.  A "character"
is one Unicode scalar value.  Extra columns are tolerated (the last column
is the tag), and ``#`` comment lines are skipped, so prediction output
with a third column re-parses with this same reader.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

BIOES_PREFIXES = ("B", "I", "E", "S")

_UNK_SEED = 70481  # fixed so the shared unk vector is identical across runs


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class IllegalTagSequence(CorpusError):
    def __init__(self, position: int, reason: str, sentence_index=None):
        self.position = position
        self.sentence_index = sentence_index
        where = f"sentence {sentence_index}, " if sentence_index is not None else ""
        super().__init__(f"{where}position {position}: {reason}")


class OverlappingSpans(CorpusError):
    def __init__(self, a, b):
        super().__init__(f"overlapping spans {a} and {b}")


class DimMismatch(CorpusError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"embedding dim {found}, expected {expected}")


class MalformedLine(CorpusError):
    def __init__(self, line: int, text: str):
        self.line = line
        super().__init__(f"line {line}: malformed embedding row {text!r}")


class Span(NamedTuple):
    start: int
    end: int  # exclusive
    label: str


class TagScheme:
    """BIOES tag alphabet over an ordered list of entity types.

    Tag ids are fixed as: O = 0, then B/I/E/S per type in order, so
    |tags| = 4 * |types| + 1 and the id<->tag mapping is a bijection.
    """

    def __init__(self, entity_types):
        self.entity_types = list(entity_types)
        if len(set(self.entity_types)) != len(self.entity_types):
            raise CorpusError("duplicate entity types")
        self.tags = ["O"]
        for etype in self.entity_types:
            self.tags.extend(f"{p}-{etype}" for p in BIOES_PREFIXES)
        self.tag_to_id = {t: i for i, t in enumerate(self.tags)}
        self.id_to_tag = dict(enumerate(self.tags))

    def __len__(self):
        return len(self.tags)

    def __eq__(self, other):
        return isinstance(other, TagScheme) and self.entity_types == other.entity_types

    @classmethod
    def from_sentences(cls, sentences) -> "TagScheme":
        types = sorted({s.label for sent in sentences for s in sent.gold_spans})
        return cls(types)


def spans_to_bioes(n: int, spans) -> list[str]:
    """Tags for non-overlapping spans: S for length 1, else B, I*, E."""
    tags = ["O"] * n
    occupied = [None] * n
    for span in sorted(spans):
        start, end, label = span
        if not (0 <= start < end <= n):
            raise CorpusError(f"span {span} out of bounds for length {n}")
        for i in range(start, end):
            if occupied[i] is not None:
                raise OverlappingSpans(occupied[i], span)
            occupied[i] = span
        if end - start == 1:
            tags[start] = f"S-{label}"
        else:
            tags[start] = f"B-{label}"
            for i in range(start + 1, end - 1):
                tags[i] = f"I-{label}"
            tags[end - 1] = f"E-{label}"
    return tags


def _split_tag(tag: str, position: int):
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in BIOES_PREFIXES:
        return tag[0], tag[2:]
    raise IllegalTagSequence(position, f"unrecognized tag {tag!r}")


def bioes_to_spans(tags) -> list[Span]:
    """Exact inverse of spans_to_bioes; raises on any BIOES grammar breach."""
    spans = []
    open_start = None
    open_label = None
    for i, tag in enumerate(tags):
        prefix, label = _split_tag(tag, i)
        if open_start is not None:
            if prefix == "I":
                if label != open_label:
                    raise IllegalTagSequence(i, f"I-{label} inside {open_label} entity")
            elif prefix == "E":
                if label != open_label:
                    raise IllegalTagSequence(i, f"E-{label} closing {open_label} entity")
                spans.append(Span(open_start, i + 1, label))
                open_start = open_label = None
            else:
                raise IllegalTagSequence(i, f"{tag} interrupts an open entity")
        else:
            if prefix == "O":
                continue
            if prefix == "S":
                spans.append(Span(i, i + 1, label))
            elif prefix == "B":
                open_start, open_label = i, label
            else:
                raise IllegalTagSequence(i, f"{tag} without a preceding B")
    if open_start is not None:
        raise IllegalTagSequence(len(tags) - 1, "entity still open at sequence end")
    return spans


def bio_to_bioes(tags) -> list[str]:
    """Convert BIO/IOB2 input tags to BIOES (output is always BIOES)."""
    out = []
    for i, tag in enumerate(tags):
        prefix, label = _split_tag(tag, i)
        if prefix == "O":
            out.append("O")
            continue
        nxt = tags[i + 1] if i + 1 < len(tags) else "O"
        nxt_prefix, nxt_label = _split_tag(nxt, i + 1) if nxt != "O" else ("O", None)
        continues = nxt_prefix == "I" and nxt_label == label
        if prefix == "B":
            out.append(f"B-{label}" if continues else f"S-{label}")
        elif prefix == "I":
            out.append(f"I-{label}" if continues else f"E-{label}")
        else:
            raise IllegalTagSequence(i, f"tag {tag!r} is not BIO")
    return out


@dataclass
class Sentence:
    chars: str
    gold_spans: list = field(default_factory=list)

    def __post_init__(self):
        self.gold_spans = [Span(*s) for s in self.gold_spans]
        # derive tags eagerly; this also validates bounds and overlaps
        self.gold_tags = spans_to_bioes(len(self.chars), self.gold_spans)

    @classmethod
    def from_tags(cls, chars: str, tags) -> "Sentence":
        return cls(chars, bioes_to_spans(tags))

    def __len__(self):
        return len(self.chars)


def parse_conll(path, scheme: TagScheme | None = None, tag_format: str = "bioes"):
    """Parse a CoNLL corpus into Sentences.

    Blocks are delimited by blank lines.  Each content line is
    ``<char>TAB<tag>`` (extra columns allowed; last column wins).  With
    ``tag_format="bio"`` the tags are converted to BIOES on the way in.
    """
    sentences = []
    chars, tags, first_line = [], [], 0

    def flush(end_line):
        if not chars:
            return
        seq = bio_to_bioes(tags) if tag_format == "bio" else list(tags)
        try:
            sent = Sentence.from_tags("".join(chars), seq)
        except IllegalTagSequence as exc:
            raise IllegalTagSequence(
                exc.position, exc.args[0], sentence_index=len(sentences)
            ) from exc
        if scheme is not None:
            for span in sent.gold_spans:
                if span.label not in scheme.entity_types:
                    raise ParseError(end_line, f"unknown entity type {span.label!r}")
        sentences.append(sent)
        chars.clear()
        tags.clear()

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2 or len(cols[0]) != 1:
                raise ParseError(lineno, f"expected '<char>TAB<tag>', got {line!r}")
            chars.append(cols[0])
            tags.append(cols[-1])
        flush(lineno + 1)
    return sentences


def write_conll(path, sentences, predictions=None) -> None:
    """Write sentences as CoNLL; with predictions, add a third tag column."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, sent in enumerate(sentences):
            pred_tags = predictions[k] if predictions is not None else None
            for i, ch in enumerate(sent.chars):
                if pred_tags is None:
                    fh.write(f"{ch}\t{sent.gold_tags[i]}\n")
                else:
                    fh.write(f"{ch}\t{sent.gold_tags[i]}\t{pred_tags[i]}\n")
            fh.write("\n")


class EmbeddingTable:
    """Character -> vector table that also fixes the model vocabulary.

    Ids are assigned as pad = 0, unk = 1, then tokens in table order.
    Characters absent from the table share the single unk id (and thus one
    trainable vector).  The pad vector is exactly zero and stays zero.
    """

    PAD_ID = 0
    UNK_ID = 1

    def __init__(self, dim: int):
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        self._ids: dict[str, int] = {}
        self.pad_vector = np.zeros(dim, dtype=np.float64)
        self.unk_vector = np.random.default_rng(_UNK_SEED).uniform(-0.1, 0.1, dim)

    def add(self, token: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimMismatch(vec.shape[-1] if vec.ndim else 0, self.dim)
        if token not in self._ids:
            self._ids[token] = 2 + len(self.vectors)
            self.vectors[token] = vec

    def lookup(self, token: str) -> np.ndarray:
        return self.vectors.get(token, self.unk_vector)

    def char_id(self, token: str) -> int:
        return self._ids.get(token, self.UNK_ID)

    @property
    def tokens(self) -> list[str]:
        return list(self.vectors)

    @property
    def vocab_size(self) -> int:
        return 2 + len(self.vectors)

    def init_matrix(self) -> np.ndarray:
        """Initial embedding matrix, rows ordered [pad, unk, tokens...]."""
        mat = np.empty((self.vocab_size, self.dim), dtype=np.float64)
        mat[self.PAD_ID] = self.pad_vector
        mat[self.UNK_ID] = self.unk_vector
        for tok, idx in self._ids.items():
            mat[idx] = self.vectors[tok]
        return mat

    @classmethod
    def random(cls, tokens, dim: int, seed: int) -> "EmbeddingTable":
        """Uniform(-0.1, 0.1) vectors for corpora without pretrained files."""
        rng = np.random.default_rng(seed)
        table = cls(dim)
        for tok in tokens:
            table.add(tok, rng.uniform(-0.1, 0.1, dim))
        return table


def load_embeddings(path, expected_dim: int) -> EmbeddingTable:
    """Read a text embedding file (optional ``count dim`` header line)."""
    table = EmbeddingTable(expected_dim)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 0
    if lines:
        head = lines[0].split()
        if len(head) == 2 and all(p.lstrip("-").isdigit() for p in head):
            if int(head[1]) != expected_dim:
                raise DimMismatch(int(head[1]), expected_dim)
            start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise MalformedLine(lineno, line)
        token = parts[0]
        if len(parts) - 1 != expected_dim:
            raise DimMismatch(len(parts) - 1, expected_dim)
        try:
            vec = np.array([float(p) for p in parts[1:]], dtype=np.float64)
        except ValueError:
            raise MalformedLine(lineno, line) from None
        table.add(token, vec)
    return table


@dataclass
class Batch:
    """Padded arrays for one minibatch; mask[i, j] = 1 iff j < lengths[i]."""

    char_ids: np.ndarray  # (B, L) int64, pad id in padded cells
    cand_pos: np.ndarray  # (B, L, 4) float, zero rows in padded cells
    tag_ids: np.ndarray  # (B, L) int64, -1 in padded cells
    mask: np.ndarray  # (B, L) float, 1 for real tokens
    lengths: np.ndarray  # (B,) int64

    def __len__(self):
        return self.char_ids.shape[0]


IGNORE_TAG_ID = -1


def encode_sentence(sent: Sentence, lexicon, scheme: TagScheme, table: EmbeddingTable):
    """Per-sentence (char_ids, cand_pos, tag_ids) without padding."""
    from . import lexicon as lexmod

    char_ids = np.array([table.char_id(c) for c in sent.chars], dtype=np.int64)
    cand = lexmod.candidate_positions(sent.chars, lexicon)
    tag_ids = np.array([scheme.tag_to_id[t] for t in sent.gold_tags], dtype=np.int64)
    return char_ids, cand, tag_ids


def make_batches(
    sentences,
    lexicon,
    scheme: TagScheme,
    table: EmbeddingTable,
    batch_size: int,
    shuffle_seed: int | None,
) -> list[Batch]:
    """Chunk the corpus into padded batches, shuffled by ``shuffle_seed``.

    Every sentence appears exactly once; ``shuffle_seed=None`` keeps corpus
    order.  Identical seeds give identical batch sequences.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(sentences))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    encoded = [encode_sentence(sentences[i], lexicon, scheme, table) for i in order]

    batches = []
    for b0 in range(0, len(encoded), batch_size):
        chunk = encoded[b0 : b0 + batch_size]
        bsz = len(chunk)
        max_len = max(c[0].shape[0] for c in chunk)
        char_ids = np.full((bsz, max_len), EmbeddingTable.PAD_ID, dtype=np.int64)
        cand_pos = np.zeros((bsz, max_len, 4), dtype=np.float64)
        tag_ids = np.full((bsz, max_len), IGNORE_TAG_ID, dtype=np.int64)
        mask = np.zeros((bsz, max_len), dtype=np.float64)
        lengths = np.zeros(bsz, dtype=np.int64)
        for i, (cids, cand, tids) in enumerate(chunk):
            n = cids.shape[0]
            char_ids[i, :n] = cids
            cand_pos[i, :n] = cand
            tag_ids[i, :n] = tids
            mask[i, :n] = 1.0
            lengths[i] = n
        batches.append(Batch(char_ids, cand_pos, tag_ids, mask, lengths))
    return batches


def split_validation(n_sentences: int, val_fraction: float, seed: int):
    """Deterministic sentence-level split; returns (train_idx, val_idx)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    order = np.arange(n_sentences)
    np.random.default_rng(seed).shuffle(order)
    n_val = max(1, int(round(n_sentences * val_fraction)))
    val = np.sort(order[:n_val])
    train = np.sort(order[n_val:])
    return train, val


def write_split_manifest(path, val_indices) -> None:
    """Record the validation sentence indices next to the corpus, for audit."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# validation sentence indices (0-based, corpus order)\n")
        for idx in val_indices:
            fh.write(f"{int(idx)}\n")
