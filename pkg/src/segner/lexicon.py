"""Word lexicon and candidate-segmentation scanning.

A sentence over Chinese characters usually admits many overlapping
segmentations.  Instead of committing to one, we enumerate every lexicon
word occurring as a substring (a "candidate word") and summarize, per
character, in which positions of a candidate word it can sit: Begin,
Inside, End, or Single.  That n x 4 binary matrix is the model's
segmentation input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_WORD_LEN = 4  # longer dictionary words are rare enough to reject outright

# column order of the candidacy matrix
COL_B, COL_I, COL_E, COL_S = 0, 1, 2, 3


class LexiconError(ValueError):
    pass


class WordTooLong(LexiconError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__(
            f"words longer than {MAX_WORD_LEN} characters: {', '.join(self.words)}"
        )


class EmptyWord(LexiconError):
    def __init__(self):
        super().__init__("empty word in lexicon input")


@dataclass(frozen=True)
class CandidateWord:
    """A lexicon word occurring at sentence[start:end] (end exclusive)."""

    start: int
    end: int
    surface: str


class _TrieNode:
    __slots__ = ("children", "is_word")

    def __init__(self):
        self.children = {}
        self.is_word = False


class Lexicon:
    """Immutable set of words (1..4 characters) with prefix-walk lookup.

    Duplicate insertions are merged silently.  After construction the
    structure is read-only, so concurrent scans are safe.
    """

    def __init__(self, words=()):
        self._root = _TrieNode()
        self._entries = set()
        too_long = []
        for w in words:
            if len(w) == 0:
                raise EmptyWord()
            if len(w) > MAX_WORD_LEN:
                too_long.append(w)
                continue
            self._insert(w)
        if too_long:
            raise WordTooLong(too_long)

    def _insert(self, word: str) -> None:
        node = self._root
        for ch in word:
            node = node.children.setdefault(ch, _TrieNode())
        node.is_word = True
        self._entries.add(word)

    def __contains__(self, word: str) -> bool:
        return word in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> frozenset:
        return frozenset(self._entries)

    @classmethod
    def from_file(cls, path) -> "Lexicon":
        """One word per line; blank lines and ``#`` comment lines ignored."""
        words = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                word = line.strip()
                if not word or word.startswith("#"):
                    continue
                words.append(word)
        return cls(words)


def build_lexicon(words) -> Lexicon:
    """Build a Lexicon from an iterable of words, rejecting len > 4."""
    return Lexicon(words)


def scan_candidates(sentence: str, lex: Lexicon) -> list[CandidateWord]:
    """All lexicon words occurring in the sentence, sorted by (start, end).

    The trie is walked from every start offset, so each window of length
    1..4 is tested in O(len) without materializing substrings that leave
    the trie early.
    """
    n = len(sentence)
    out = []
    for i in range(n):
        node = lex._root
        for j in range(i, min(i + MAX_WORD_LEN, n)):
            node = node.children.get(sentence[j])
            if node is None:
                break
            if node.is_word:
                out.append(CandidateWord(i, j + 1, sentence[i : j + 1]))
    return out  # enumeration order is already (start, end)-sorted


def candidate_positions(sentence: str, lex: Lexicon) -> np.ndarray:
    """n x 4 binary candidacy matrix, columns [B, I, E, S].

    B: some candidate of length >= 2 starts here.
    I: some candidate of length >= 3 strictly contains this character.
    E: some candidate of length >= 2 ends here.
    S: this single character is itself a lexicon entry.
    """
    n = len(sentence)
    rows = np.zeros((n, 4), dtype=np.float64)
    for cand in scan_candidates(sentence, lex):
        length = cand.end - cand.start
        if length == 1:
            rows[cand.start, COL_S] = 1.0
        else:
            rows[cand.start, COL_B] = 1.0
            rows[cand.end - 1, COL_E] = 1.0
            if length >= 3:
                rows[cand.start + 1 : cand.end - 1, COL_I] = 1.0
    return rows
