"""Closed word-level vocabulary and token-sequence rendering.

Sequences follow one layout everywhere:

    [bos] [patch tokens] [sep] [instruction] [sep] [text] ([sep] [trace]) [eos]

where [trace] is `<think>` cot `</think>` `Answer:` final.  Images enter as
one patch token per cell in reading order; an absent image contributes no
patch tokens but keeps the separator structure intact.  Tokenization is
whitespace splitting over a closed inventory; any unknown word is an error,
never a silent UNK.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfVocabulary, SequenceTooLong

BOS = "[bos]"
EOS = "[eos]"
SEP = "[sep]"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_MARKER = "Answer:"

SPECIAL_WORDS = (BOS, EOS, SEP, THINK_OPEN, THINK_CLOSE, ANSWER_MARKER)

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow", "none")

NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen",
)
ORDINAL_WORDS = ("first", "second", "third", "fourth")

# every word any template, question, trace, or instruction may emit
TEMPLATE_WORDS = tuple(sorted(set(
    """
    the in reading order what is at how many cells are grid image most
    frequent identify answer question about find matching description locate
    cell described by query represent this category label holds its so a an
    scan finds then match pick counts lists target shows these reads mix of
    shapes colors across content requested attribute specific part expression
    selects properties single asks visible several colored and reasoning
    above color shape row listed
    """.split()
)))

MAX_GRID_SIDE = 4


def patch_word(shape: str, color: str) -> str:
    return f"[patch:{shape}:{color}]"


def position_word(row: int, col: int) -> str:
    return f"r{row}c{col}"


def canonicalize(text: str) -> str:
    """Lowercase, trim, collapse internal whitespace."""
    return " ".join(text.strip().lower().split())


def answer_capable_words(k: int = MAX_GRID_SIDE) -> tuple[str, ...]:
    """Words that can appear in canonical answers: the synonym-table domain."""
    positions = tuple(position_word(r, c) for r in range(k) for c in range(k))
    return COLORS + SHAPES + NUMBER_WORDS[: k * k + 1] + positions


@dataclass(frozen=True)
class Vocabulary:
    words: tuple
    word_to_id: dict
    k: int

    @property
    def size(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self.word_to_id[word]
        except KeyError:
            raise OutOfVocabulary(f"unknown word {word!r}") from None

    def encode(self, text: str) -> list[int]:
        return [self.id_of(w) for w in text.split()]

    def decode(self, ids) -> str:
        n = len(self.words)
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise OutOfVocabulary(f"token id {i} outside vocabulary of {n}")
            out.append(self.words[i])
        return " ".join(out)

    def patch_token_ids(self) -> list[int]:
        return [self.word_to_id[patch_word(s, c)] for s in SHAPES for c in COLORS]

    @property
    def bos_id(self) -> int:
        return self.word_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.word_to_id[EOS]

    @property
    def sep_id(self) -> int:
        return self.word_to_id[SEP]


def build_vocabulary(k: int = MAX_GRID_SIDE) -> Vocabulary:
    """Deterministic closed vocabulary for grids up to side k (k <= 4)."""
    if not 1 <= k <= MAX_GRID_SIDE:
        raise OutOfVocabulary(f"grid side {k} outside supported range 1..{MAX_GRID_SIDE}")
    words: list[str] = list(SPECIAL_WORDS)
    words += [patch_word(s, c) for s in SHAPES for c in COLORS]
    base = set(TEMPLATE_WORDS) | set(ORDINAL_WORDS) | set(answer_capable_words(k))
    words += sorted(base)
    # capitalized variants back the noisy-trace synonym table
    words += sorted({w.capitalize() for w in answer_capable_words(k)})
    return Vocabulary(words=tuple(words),
                      word_to_id={w: i for i, w in enumerate(words)}, k=k)


def render_tokens(vocab: Vocabulary, triplet, ecr=None, max_len: int | None = None) -> np.ndarray:
    """Token ids for a triplet, optionally followed by a reasoning trace."""
    ids, _ = render_with_boundary(vocab, triplet, ecr, max_len)
    return ids


def render_with_boundary(vocab: Vocabulary, triplet, ecr=None,
                         max_len: int | None = None) -> tuple[np.ndarray, int]:
    """(ids, trace_start): trace_start indexes the first trace token.

    Without a trace, trace_start is len(ids) - 1 (where one would begin,
    before [eos]); the SFT pipeline prompts with everything before it.
    """
    ids = [vocab.bos_id]
    if triplet.image is not None:
        for cell in triplet.image.cells:
            ids.append(vocab.id_of(patch_word(cell.shape, cell.color)))
    ids.append(vocab.sep_id)
    ids.extend(vocab.encode(triplet.instruction))
    ids.append(vocab.sep_id)
    ids.extend(vocab.encode(triplet.text))
    if ecr is not None:
        ids.append(vocab.sep_id)
        trace_start = len(ids)
        ids.append(vocab.id_of(THINK_OPEN))
        ids.extend(vocab.encode(ecr.cot))
        ids.append(vocab.id_of(THINK_CLOSE))
        ids.append(vocab.id_of(ANSWER_MARKER))
        ids.extend(vocab.encode(ecr.final))
    else:
        trace_start = len(ids)
    ids.append(vocab.eos_id)
    if max_len is not None and len(ids) > max_len:
        raise SequenceTooLong(f"rendered length {len(ids)} > max {max_len}")
    return np.asarray(ids, dtype=np.int64), trace_start


def grid_side_for(n_cells: int) -> int:
    k = int(math.isqrt(n_cells))
    if k * k != n_cells:
        raise OutOfVocabulary(f"{n_cells} patch tokens do not form a square grid")
    return k
