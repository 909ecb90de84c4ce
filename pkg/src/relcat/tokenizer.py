"""WordPiece vocabulary training and greedy longest-match tokenization."""
from __future__ import annotations

import heapq
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
PREFIX = "##"
MAX_WORD_CHARS = 64


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    continuation_prefix: str = PREFIX
    _ids: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")
        ids = {}
        for i, tok in enumerate(self.tokens):
            if tok in ids:
                raise ValueError(f"duplicate token {tok!r}")
            ids[tok] = i
        object.__setattr__(self, "_ids", ids)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids[token]

    @property
    def pad_id(self) -> int:
        return 0

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")))


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def normalize(text: str) -> list[str]:
    """Lowercase, split on whitespace, isolate punctuation characters as words."""
    words = []
    for chunk in text.lower().split():
        cur = []
        for ch in chunk:
            if _is_punctuation(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def _split_word(word: str) -> list[str]:
    return [word[0]] + [PREFIX + ch for ch in word[1:]]


def alphabet(corpus: Iterable[str]) -> list[str]:
    """Both the word-initial and the continuation piece of every character seen,
    so no seen character can ever fall back to [UNK]."""
    chars = set()
    for line in corpus:
        for word in normalize(line):
            chars.update(word)
    return sorted(chars) + sorted(PREFIX + ch for ch in chars)


def _merge_name(a: str, b: str) -> str:
    return a + b[len(PREFIX):]


def train_wordpiece(corpus: Sequence[str], vocab_size: int = 8192, min_frequency: int = 2) -> Vocab:
    """Learn a WordPiece vocabulary.

    Pairs are merged greedily by ``count(ab) / (count(a) * count(b))``; ties go
    to the more frequent pair, then lexicographic order, so training is
    deterministic. Pairs seen fewer than ``min_frequency`` times are never
    merged, so the result may be smaller than ``vocab_size``.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    word_counts = Counter(w for line in corpus for w in normalize(line))
    if not word_counts:
        raise ValueError("empty corpus")
    words = sorted(word_counts)
    counts = [word_counts[w] for w in words]
    splits = [_split_word(w) for w in words]
    alpha = alphabet(words)
    if vocab_size < len(SPECIALS) + len(alpha):
        raise ValueError(f"vocab_size {vocab_size} < 4 specials + {len(alpha)} alphabet pieces")

    vocab = list(SPECIALS) + alpha
    in_vocab = set(vocab)
    piece_count: Counter = Counter()
    pair_count: Counter = Counter()
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    piece_pairs: dict[str, set[tuple[str, str]]] = defaultdict(set)
    for wi, (s, c) in enumerate(zip(splits, counts)):
        for p in s:
            piece_count[p] += c
        for pair in zip(s, s[1:]):
            pair_count[pair] += c
            pair_words[pair].add(wi)
            piece_pairs[pair[0]].add(pair)
            piece_pairs[pair[1]].add(pair)

    def key(pair):
        pc = pair_count[pair]
        return (-pc / (piece_count[pair[0]] * piece_count[pair[1]]), -pc, pair)

    heap = [key(p) for p in pair_count]
    heapq.heapify(heap)

    while len(vocab) < vocab_size and heap:
        entry = heapq.heappop(heap)
        pair = entry[2]
        if pair_count.get(pair, 0) <= 0 or entry != key(pair):
            continue  # stale; a fresh entry was pushed when the score changed
        if pair_count[pair] < min_frequency:
            continue
        a, b = pair
        new = _merge_name(a, b)
        touched: set[tuple[str, str]] = set()
        for wi in sorted(pair_words.pop(pair, ())):
            s, c = splits[wi], counts[wi]
            for old in zip(s, s[1:]):
                pair_count[old] -= c
                touched.add(old)
            merged, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and s[i] == a and s[i + 1] == b:
                    merged.append(new)
                    piece_count[a] -= c
                    piece_count[b] -= c
                    piece_count[new] += c
                    i += 2
                else:
                    merged.append(s[i])
                    i += 1
            splits[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_count[p] += c
                pair_words[p].add(wi)
                piece_pairs[p[0]].add(p)
                piece_pairs[p[1]].add(p)
                touched.add(p)
        pair_count.pop(pair, None)
        if new not in in_vocab:
            vocab.append(new)
            in_vocab.add(new)
        # score changes: pairs whose own count moved, and pairs sharing a piece whose count moved
        touched |= piece_pairs[a] | piece_pairs[b] | piece_pairs[new]
        for p in touched:
            if pair_count.get(p, 0) > 0:
                heapq.heappush(heap, key(p))
            else:
                pair_count.pop(p, None)
    return Vocab(tuple(vocab))


def wordpiece(vocab: Vocab, word: str) -> list[str] | None:
    """Greedy longest-match-first split of one normalized word; None if impossible."""
    if len(word) > MAX_WORD_CHARS:
        return None
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end] if start == 0 else PREFIX + word[start:end]
            if sub in vocab:
                found = sub
                break
            end -= 1
        if found is None:
            return None
        pieces.append(found)
        start = end
    return pieces


def tokenize_pieces(vocab: Vocab, text: str) -> list[str]:
    out = []
    for word in normalize(text):
        pieces = wordpiece(vocab, word)
        out.extend(pieces if pieces is not None else [UNK])
    return out


def tokenize(vocab: Vocab, text: str) -> list[int]:
    return [vocab.id(CLS)] + [vocab.id(p) for p in tokenize_pieces(vocab, text)] + [vocab.id(SEP)]


def detokenize(vocab: Vocab, ids: Sequence[int]) -> list[str]:
    """Reassemble normalized words from ids; specials other than [UNK] are skipped."""
    words: list[str] = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok in (PAD, CLS, SEP):
            continue
        if tok.startswith(PREFIX) and words:
            words[-1] += tok[len(PREFIX):]
        else:
            words.append(tok)
    return words


def mean_tokens_per_line(vocab: Vocab, corpus: Sequence[str]) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    return sum(len(tokenize_pieces(vocab, line)) for line in corpus) / len(corpus)
