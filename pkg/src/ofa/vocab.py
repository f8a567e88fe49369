"""Unified vocabulary: byte-level BPE subwords, location bins and image codes in one id space.

Id layout, contiguous and in this order::

    [ specials | subwords | <loc_0> .. <loc_{B-1}> | <code_0> .. <code_{K-1}> ]
"""
from __future__ import annotations

import re
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

SPECIALS = ("<s>", "</s>", "<pad>", "<mask>")
BOS, EOS, PAD, MASK = range(4)

VOCAB_FILE = "vocab.txt"
MERGES_FILE = "merges.txt"

_WORD_RE = re.compile(r"'(?:s|t|re|ve|m|ll|d)| ?[^\W\d_]+| ?\d+| ?(?:[^\s\w]|_)+|\s+")
_MARKUP_RE = re.compile(r"\s*(<loc_(\d+)>|<code_(\d+)>|<mask>)\s*")
_HEADER_RE = re.compile(r"#ofa-vocab v1 subwords=(\d+) loc=(\d+) code=(\d+)$")


class VocabError(ValueError):
    pass


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable character table (GPT-2 convention)."""
    printable = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(
        range(ord("®"), ord("ÿ") + 1)
    )
    chars = printable[:]
    n = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(printable, chars)}


@lru_cache(maxsize=None)
def _unicode_to_bytes() -> dict[str, int]:
    return {c: b for b, c in bytes_to_unicode().items()}


def normalize(s: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return " ".join(s.split())


def _pretokenize(s: str) -> list[str]:
    table = bytes_to_unicode()
    return ["".join(table[b] for b in w.encode("utf-8")) for w in _WORD_RE.findall(s)]


class UnifiedVocab:
    """Read-only token table over subwords, location bins and image codes."""

    __slots__ = ("_subwords", "_merges", "_num_loc_bins", "_codebook_size", "_tok2id", "_ranks", "_cache")

    def __init__(
        self,
        subwords: Sequence[str],
        merges: Sequence[tuple[str, str]],
        num_loc_bins: int = 1000,
        codebook_size: int = 128,
    ):
        if num_loc_bins <= 0 or codebook_size <= 0:
            raise VocabError("num_loc_bins and codebook_size must be positive")
        base = [bytes_to_unicode()[b] for b in range(256)]
        if list(subwords[:256]) != base:
            raise VocabError("subword table must start with the 256 byte tokens")
        if len(set(subwords)) != len(subwords):
            raise VocabError("duplicate subword strings")
        object.__setattr__(self, "_subwords", tuple(subwords))
        object.__setattr__(self, "_merges", tuple((a, b) for a, b in merges))
        object.__setattr__(self, "_num_loc_bins", int(num_loc_bins))
        object.__setattr__(self, "_codebook_size", int(codebook_size))
        tok2id = {t: i + len(SPECIALS) for i, t in enumerate(self._subwords)}
        object.__setattr__(self, "_tok2id", tok2id)
        ranks = {}
        for r, (a, b) in enumerate(self._merges):
            if a not in tok2id or b not in tok2id or a + b not in tok2id:
                raise VocabError(f"merge {a!r} {b!r} references unknown subwords")
            ranks.setdefault((a, b), r)
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_cache", {})

    def __setattr__(self, name, value):
        raise AttributeError("UnifiedVocab is immutable")

    # layout -----------------------------------------------------------------
    @property
    def subwords(self) -> tuple[str, ...]:
        return self._subwords

    @property
    def merges(self) -> tuple[tuple[str, str], ...]:
        return self._merges

    @property
    def num_loc_bins(self) -> int:
        return self._num_loc_bins

    @property
    def codebook_size(self) -> int:
        return self._codebook_size

    @property
    def num_subwords(self) -> int:
        return len(self._subwords)

    @property
    def subword_start(self) -> int:
        return len(SPECIALS)

    @property
    def loc_start(self) -> int:
        return len(SPECIALS) + len(self._subwords)

    @property
    def code_start(self) -> int:
        return self.loc_start + self._num_loc_bins

    @property
    def size(self) -> int:
        return self.code_start + self._codebook_size

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, UnifiedVocab):
            return NotImplemented
        return (
            self._subwords == other._subwords
            and self._merges == other._merges
            and self._num_loc_bins == other._num_loc_bins
            and self._codebook_size == other._codebook_size
        )

    def __hash__(self) -> int:
        return hash((self._subwords, self._merges, self._num_loc_bins, self._codebook_size))

    def __repr__(self) -> str:
        return (
            f"UnifiedVocab(subwords={self.num_subwords}, loc={self._num_loc_bins}, "
            f"code={self._codebook_size}, size={self.size})"
        )

    # kinds ------------------------------------------------------------------
    def is_special(self, i: int) -> bool:
        return 0 <= i < len(SPECIALS)

    def is_subword(self, i: int) -> bool:
        return self.subword_start <= i < self.loc_start

    def is_loc(self, i: int) -> bool:
        return self.loc_start <= i < self.code_start

    def is_code(self, i: int) -> bool:
        return self.code_start <= i < self.size

    def kind(self, i: int) -> str:
        if self.is_special(i):
            return "special"
        if self.is_subword(i):
            return "subword"
        if self.is_loc(i):
            return "loc"
        if self.is_code(i):
            return "code"
        raise VocabError(f"id {i} outside vocabulary of size {self.size}")

    def loc_id(self, b: int) -> int:
        if not 0 <= b < self._num_loc_bins:
            raise VocabError(f"location bin {b} outside [0, {self._num_loc_bins})")
        return self.loc_start + b

    def loc_bin(self, i: int) -> int:
        if not self.is_loc(i):
            raise VocabError(f"id {i} is not a location token")
        return i - self.loc_start

    def code_id(self, k: int) -> int:
        if not 0 <= k < self._codebook_size:
            raise VocabError(f"code {k} outside [0, {self._codebook_size})")
        return self.code_start + k

    def code_index(self, i: int) -> int:
        if not self.is_code(i):
            raise VocabError(f"id {i} is not an image-code token")
        return i - self.code_start

    def token(self, i: int) -> str:
        kind = self.kind(i)
        if kind == "special":
            return SPECIALS[i]
        if kind == "subword":
            return self._subwords[i - self.subword_start]
        if kind == "loc":
            return f"<loc_{i - self.loc_start}>"
        return f"<code_{i - self.code_start}>"

    # text -------------------------------------------------------------------
    def _bpe(self, word: str) -> list[int]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        parts = list(word)
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            for k in range(len(parts) - 1):
                r = ranks.get((parts[k], parts[k + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, parts[k], parts[k + 1])
            if best is None:
                break
            _, a, b = best
            merged = []
            k = 0
            while k < len(parts):
                if k < len(parts) - 1 and parts[k] == a and parts[k + 1] == b:
                    merged.append(a + b)
                    k += 2
                else:
                    merged.append(parts[k])
                    k += 1
            parts = merged
        ids = [self._tok2id[p] for p in parts]
        if len(self._cache) < 100_000:
            self._cache[word] = ids
        return ids

    def encode(self, s: str) -> list[int]:
        ids: list[int] = []
        for w in _pretokenize(normalize(s)):
            ids.extend(self._bpe(w))
        return ids

    def encode_markup(self, s: str) -> list[int]:
        """Encode text with inline ``<loc_i>``, ``<code_i>`` and ``<mask>`` markers."""
        ids: list[int] = []
        pos = 0
        for m in _MARKUP_RE.finditer(s):
            ids.extend(self.encode(s[pos : m.start()]))
            if m.group(2) is not None:
                ids.append(self.loc_id(int(m.group(2))))
            elif m.group(3) is not None:
                ids.append(self.code_id(int(m.group(3))))
            else:
                ids.append(MASK)
            pos = m.end()
        ids.extend(self.encode(s[pos:]))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        back = _unicode_to_bytes()
        pieces: list[str] = []
        buf = bytearray()
        literal = False
        for i in ids:
            i = int(i)
            kind = self.kind(i)
            if kind == "special":
                continue
            if kind == "subword":
                buf.extend(back[c] for c in self._subwords[i - self.subword_start])
                continue
            literal = True
            pieces.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
            pieces.append(f" {self.token(i)} ")
        pieces.append(buf.decode("utf-8", errors="replace"))
        out = "".join(pieces)
        return normalize(out) if literal else out

    # persistence ------------------------------------------------------------
    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = [f"#ofa-vocab v1 subwords={self.num_subwords} loc={self._num_loc_bins} code={self._codebook_size}"]
        lines += [f"{self.token(i)}\t{i}" for i in range(self.size)]
        (d / VOCAB_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
        (d / MERGES_FILE).write_text("".join(f"{a} {b}\n" for a, b in self._merges), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "UnifiedVocab":
        d = Path(directory)
        lines = (d / VOCAB_FILE).read_text(encoding="utf-8").split("\n")
        m = _HEADER_RE.match(lines[0])
        if not m:
            raise VocabError(f"bad vocab header: {lines[0]!r}")
        n_sub, n_loc, n_code = map(int, m.groups())
        start = len(SPECIALS)
        subwords = [""] * n_sub
        for line in lines[1:]:
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            i = int(idx)
            if start <= i < start + n_sub:
                subwords[i - start] = tok
        merges = []
        for line in (d / MERGES_FILE).read_text(encoding="utf-8").splitlines():
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(subwords, merges, n_loc, n_code)


def build_vocab(
    corpus: str | Iterable[str],
    target_subwords: int = 512,
    num_loc_bins: int = 1000,
    codebook_size: int = 128,
) -> UnifiedVocab:
    """Learn byte-level BPE merges from ``corpus`` until ``target_subwords`` entries exist.

    Merge candidates are ranked by frequency; ties go to the lexicographically
    smallest pair so the result depends only on the inputs.
    """
    if target_subwords < 256:
        raise VocabError("target_subwords must be at least 256")
    if num_loc_bins <= 0 or codebook_size <= 0:
        raise VocabError("num_loc_bins and codebook_size must be positive")
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    words: Counter[tuple[str, ...]] = Counter()
    for t in texts:
        for w in _pretokenize(normalize(t)):
            words[tuple(w)] += 1
    if not words:
        raise VocabError("cannot build a vocabulary from an empty corpus")

    subwords = [bytes_to_unicode()[b] for b in range(256)]
    known = set(subwords)
    merges: list[tuple[str, str]] = []
    vocab_words = dict(words)
    while len(subwords) < target_subwords:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, c in vocab_words.items():
            for k in range(len(w) - 1):
                pairs[w[k], w[k + 1]] += c
        if not pairs:
            break
        pair = min(pairs, key=lambda p: (-pairs[p], p))
        a, b = pair
        merges.append(pair)
        if a + b not in known:
            known.add(a + b)
            subwords.append(a + b)
        new_words: dict[tuple[str, ...], int] = {}
        for w, c in vocab_words.items():
            if len(w) > 1 and a in w:
                out = []
                k = 0
                while k < len(w):
                    if k < len(w) - 1 and w[k] == a and w[k + 1] == b:
                        out.append(a + b)
                        k += 2
                    else:
                        out.append(w[k])
                        k += 1
                w = tuple(out)
            new_words[w] = new_words.get(w, 0) + c
        vocab_words = new_words
    return UnifiedVocab(subwords, merges, num_loc_bins, codebook_size)


def encode_text(v: UnifiedVocab, s: str) -> list[int]:
    return v.encode(s)


def decode_text(v: UnifiedVocab, ids: Iterable[int]) -> str:
    return v.decode(ids)
