"""Synthetic lexicon-entity task for end-to-end verification.

Sentences are assembled from planted "entity words" (each planted
occurrence is a gold entity of one type), planted distractor words that
share characters with entity words, and filler characters.  The scan of
the combined lexicon therefore produces candidate words overlapping the
gold entities, so per-character identity alone cannot solve the task; a
generated sentence is only accepted if every occurrence of an entity word
in it is a planted one, which keeps the labeling function well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Sentence, Span
from .lexicon import Lexicon

ALPHABET = "安北城东风高国海河京江空林门南山水天西小阳月云竹石田白光春花"
ENTITY_LABEL = "ENT"

N_ENTITY_WORDS = 40
N_DISTRACTORS = 40
MIN_LEN, MAX_LEN = 10, 20


@dataclass
class SyntheticTask:
    train_sentences: list
    test_sentences: list
    lexicon: Lexicon
    entity_words: list
    distractor_words: list


def _sample_word(rng, chars, lengths=(2, 3)):
    length = int(rng.choice(lengths))
    return "".join(rng.choice(chars, size=length))


def _make_entity_words(rng, chars) -> list:
    words: list[str] = []
    while len(words) < N_ENTITY_WORDS:
        w = _sample_word(rng, chars)
        # substring-free set keeps "occurrence of an entity word" unambiguous
        if any(w in other or other in w for other in words):
            continue
        words.append(w)
    return words


def _make_distractors(rng, chars, entity_words) -> list:
    taken = set(entity_words)
    words: list[str] = []
    starts = [w[-1] for w in entity_words]
    ends = [w[0] for w in entity_words]
    while len(words) < N_DISTRACTORS:
        mode = len(words) % 3
        if mode == 0:  # can continue right after an entity word
            w = str(rng.choice(starts)) + _sample_word(rng, chars, lengths=(1, 2))
        elif mode == 1:  # can lead into an entity word
            w = _sample_word(rng, chars, lengths=(1, 2)) + str(rng.choice(ends))
        else:
            w = _sample_word(rng, chars)
        if w in taken or any(e in w for e in entity_words):
            continue
        taken.add(w)
        words.append(w)
    return words


def _gen_sentence(rng, entity_words, distractors, by_first) -> Sentence:
    alphabet = list(ALPHABET)
    for _ in range(1000):
        target = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        chars: list[str] = []
        spans: list[Span] = []
        while len(chars) < target:
            u = rng.random()
            if u < 0.30:
                w = entity_words[int(rng.integers(len(entity_words)))]
                spans.append(Span(len(chars), len(chars) + len(w), ENTITY_LABEL))
                chars.extend(w)
                # sometimes continue with a distractor that straddles the
                # entity's right boundary, so candidates overlap the gold span
                follow = by_first.get(w[-1])
                if follow and rng.random() < 0.5:
                    d = follow[int(rng.integers(len(follow)))]
                    chars.extend(d[1:])
            elif u < 0.55:
                chars.extend(distractors[int(rng.integers(len(distractors)))])
            else:
                chars.extend(rng.choice(alphabet, size=int(rng.integers(1, 3))))
        if not MIN_LEN <= len(chars) <= MAX_LEN:
            continue
        text = "".join(chars)
        planted = {}
        for sp in spans:
            planted.setdefault(text[sp.start : sp.end], set()).add(sp.start)
        ok = True
        for w in entity_words:
            found = {
                i for i in range(len(text) - len(w) + 1) if text[i : i + len(w)] == w
            }
            if found != planted.get(w, set()):
                ok = False
                break
        if ok:
            return Sentence(text, spans)
    raise RuntimeError("sentence generation failed to converge")


def generate(seed: int = 7, n_train_pool: int = 750, n_test: int = 150) -> SyntheticTask:
    """Build the task: 750 training-pool sentences (a 20% validation split
    leaves 600 for updates) and 150 test sentences."""
    rng = np.random.default_rng(seed)
    entity_chars = list(rng.choice(list(ALPHABET), size=15, replace=False))
    entity_words = _make_entity_words(rng, entity_chars)
    distractors = _make_distractors(rng, entity_chars, entity_words)
    by_first: dict[str, list] = {}
    for d in distractors:
        by_first.setdefault(d[0], []).append(d)

    sentences = [
        _gen_sentence(rng, entity_words, distractors, by_first)
        for _ in range(n_train_pool + n_test)
    ]
    lexicon = Lexicon(entity_words + distractors)
    return SyntheticTask(
        train_sentences=sentences[:n_train_pool],
        test_sentences=sentences[n_train_pool:],
        lexicon=lexicon,
        entity_words=entity_words,
        distractor_words=distractors,
    )
