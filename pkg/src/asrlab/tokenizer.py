"""Subword tokenizer: 128-piece vocabulary trained with greedy pair merges
over the character alphabet, whitespace encoded as a visible marker piece.

The CTC blank is reserved id 0 and sits outside the 128 text pieces, so the
model output dimension is 129. Piece ids are dense 1..128.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .textnorm import DEFAULT_PROFILE, NormalizationProfile, normalize_text

MARKER = "▁"  # visible whitespace marker
VOCAB_SIZE = 128
BLANK_ID = 0


class VocabularyError(ValueError):
    pass


@dataclass
class Vocabulary:
    pieces: list[str]  # ids 1..len(pieces)
    piece_to_id: dict[str, int] = field(init=False)
    blank_id: int = BLANK_ID

    def __post_init__(self):
        if len(set(self.pieces)) != len(self.pieces):
            raise VocabularyError("duplicate pieces")
        self.piece_to_id = {p: i + 1 for i, p in enumerate(self.pieces)}

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def output_dim(self) -> int:
        """CTC output dimension: text pieces plus the blank."""
        return len(self.pieces) + 1

    def id_to_piece(self, idx: int) -> str:
        if not 1 <= idx <= len(self.pieces):
            raise VocabularyError(f"piece id {idx} out of range 1..{len(self.pieces)}")
        return self.pieces[idx - 1]


@dataclass
class TokenSequence:
    ids: list[int]
    source_text: str


def _word_counts(corpus: Iterable[str], profile: NormalizationProfile) -> Counter:
    counts: Counter = Counter()
    for line in corpus:
        for word in normalize_text(line, profile).split():
            counts[word] += 1
    return counts


def train_tokenizer(
    corpus: Iterable[str],
    target_size: int = VOCAB_SIZE,
    profile: NormalizationProfile = DEFAULT_PROFILE,
) -> Vocabulary:
    """Greedy pair-merge training from the character alphabet up to exactly
    ``target_size`` pieces; merge order is descending pair frequency with
    lexicographic tie-breaking, so retraining is deterministic."""
    words = _word_counts(corpus, profile)
    if not words:
        raise VocabularyError("corpus is empty after normalization")

    alphabet = sorted({c for w in words for c in w})
    if len(alphabet) + 1 > target_size:
        raise VocabularyError(
            f"alphabet of {len(alphabet) + 1} symbols exceeds target size "
            f"{target_size} by {len(alphabet) + 1 - target_size}"
        )

    pieces: list[str] = [MARKER] + alphabet
    symbolized: dict[tuple[str, ...], int] = {
        (MARKER,) + tuple(w): n for w, n in words.items()
    }

    existing = set(pieces)
    while len(pieces) < target_size:
        pair_counts: Counter = Counter()
        for symbols, n in symbolized.items():
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] += n
        if not pair_counts:
            raise VocabularyError(
                f"corpus exhausted at {len(pieces)} pieces; cannot reach {target_size}"
            )
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merged = best[0] + best[1]
        # two different splits can merge to the same string; apply the merge
        # but only record a new piece once
        if merged not in existing:
            pieces.append(merged)
            existing.add(merged)

        updated: dict[tuple[str, ...], int] = {}
        for symbols, n in symbolized.items():
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            updated[tuple(out)] = updated.get(tuple(out), 0) + n
        symbolized = updated

    return Vocabulary(pieces=pieces)


def encode(
    text: str,
    vocab: Vocabulary,
    profile: NormalizationProfile = DEFAULT_PROFILE,
) -> TokenSequence:
    """Normalize then segment with greedy longest-match, word by word."""
    normalized = normalize_text(text, profile)
    ids: list[int] = []
    max_len = max((len(p) for p in vocab.pieces), default=1)
    for word in normalized.split():
        s = MARKER + word
        i = 0
        while i < len(s):
            for length in range(min(max_len, len(s) - i), 0, -1):
                piece = s[i : i + length]
                if piece in vocab.piece_to_id:
                    ids.append(vocab.piece_to_id[piece])
                    i += length
                    break
            else:
                raise VocabularyError(f"character not in vocabulary: {s[i]!r}")
    return TokenSequence(ids=ids, source_text=normalized)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    text = "".join(vocab.id_to_piece(i) for i in ids)
    return text.replace(MARKER, " ").strip()


def save_vocab(path, vocab: Vocabulary) -> None:
    """One piece per line, UTF-8; line number equals the piece id."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#blank={vocab.blank_id}\n")
        for piece in vocab.pieces:
            fh.write(piece + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#blank="):
            raise VocabularyError(f"bad vocabulary header: {header!r}")
        pieces = [line.rstrip("\n") for line in fh]
    if pieces and pieces[-1] == "":
        pieces.pop()
    return Vocabulary(pieces=pieces)
