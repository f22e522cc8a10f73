"""Byte-level BPE tokenizer (GPT-2 file format: vocab.json + merges.txt).

The pre-tokenizer reproduces the usual byte-level BPE splitting rules --
contractions, space-prefixed letter/digit/punctuation runs, whitespace runs
that leave their last space attached to the next word -- with a hand-rolled
scanner over Unicode categories, so there is no dependency beyond stdlib.

Special tokens are plain vocabulary entries with reserved surface forms;
``encode`` treats those surfaces atomically instead of byte-splitting them.
"""

from __future__ import annotations

import json
import os
import unicodedata
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

BOS_TOKEN = "<bos>"
MASK_TOKEN = "[MASK]"
URL_TOKEN = "[URL]"
PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

REQUIRED_SPECIALS = (BOS_TOKEN, MASK_TOKEN, URL_TOKEN, PAD_TOKEN, EOS_TOKEN)

_CONTRACTIONS = ("'s", "'t", "'re", "'ve", "'m", "'ll", "'d")


def bytes_to_unicode() -> Dict[int, str]:
    """Reversible byte -> printable-unicode-char map used by the BPE layer."""
    bs = (list(range(ord("!"), ord("~") + 1))
          + list(range(ord("\xa1"), ord("\xac") + 1))
          + list(range(ord("\xae"), ord("\xff") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


_BYTE_ENCODER = bytes_to_unicode()
_BYTE_DECODER = {c: b for b, c in _BYTE_ENCODER.items()}


def _is_letter(c: str) -> bool:
    return unicodedata.category(c).startswith("L")


def _is_digit(c: str) -> bool:
    return unicodedata.category(c).startswith("N")


def _is_other(c: str) -> bool:
    return not (c.isspace() or _is_letter(c) or _is_digit(c))


def _run(text: str, i: int, pred) -> int:
    n = len(text)
    while i < n and pred(text[i]):
        i += 1
    return i


def pre_tokenize(text: str) -> List[str]:
    """Split text into BPE work pieces; ``''.join(result) == text``."""
    pieces: List[str] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "'":
            for suf in _CONTRACTIONS:
                if text.startswith(suf, i):
                    pieces.append(suf)
                    i += len(suf)
                    break
            else:
                j = _run(text, i, _is_other)
                pieces.append(text[i:j])
                i = j
            continue
        if c == " " and i + 1 < n and not text[i + 1].isspace():
            c2 = text[i + 1]
            pred = _is_letter if _is_letter(c2) else _is_digit if _is_digit(c2) else _is_other
            j = _run(text, i + 1, pred)
            pieces.append(text[i:j])
            i = j
            continue
        if _is_letter(c) or _is_digit(c):
            j = _run(text, i, _is_letter if _is_letter(c) else _is_digit)
            pieces.append(text[i:j])
            i = j
            continue
        if not c.isspace():
            j = _run(text, i, _is_other)
            pieces.append(text[i:j])
            i = j
            continue
        j = _run(text, i, str.isspace)
        if j < n and j - i > 1:
            # whitespace run before a word keeps its last char for the word
            pieces.append(text[i:j - 1])
            i = j - 1
        else:
            pieces.append(text[i:j])
            i = j
    return pieces


def _get_pairs(word: Tuple[str, ...]) -> set:
    return set(zip(word, word[1:]))


class Tokenizer:
    """Vocabulary + merge ranks; id space is [0, vocab_size)."""

    def __init__(self, vocab: Dict[str, int], merges: Sequence[Tuple[str, str]]):
        for tok in REQUIRED_SPECIALS:
            if tok not in vocab:
                raise ValueError(f"vocabulary is missing required special token {tok!r}")
        ids = sorted(vocab.values())
        if ids != list(range(len(vocab))):
            raise ValueError("vocabulary ids must be dense in [0, |V|)")
        self.vocab = dict(vocab)
        self.id_to_token = {i: t for t, i in vocab.items()}
        self.merges = [tuple(m) for m in merges]
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self.bos_id = vocab[BOS_TOKEN]
        self.mask_id = vocab[MASK_TOKEN]
        self.url_id = vocab[URL_TOKEN]
        self.pad_id = vocab[PAD_TOKEN]
        self.eos_id = vocab[EOS_TOKEN]
        self.unk_id: Optional[int] = vocab.get(UNK_TOKEN)
        self._specials = {t for t in (BOS_TOKEN, MASK_TOKEN, URL_TOKEN, PAD_TOKEN, EOS_TOKEN, UNK_TOKEN) if t in vocab}
        self._special_ids = {vocab[t] for t in self._specials}
        # longest first so overlapping surfaces resolve deterministically
        self._special_order = sorted(self._specials, key=len, reverse=True)
        self._bpe_cache: Dict[str, Tuple[str, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    # -- core BPE ----------------------------------------------------------

    def _bpe(self, piece: str) -> Tuple[str, ...]:
        cached = self._bpe_cache.get(piece)
        if cached is not None:
            return cached
        word = tuple(piece)
        pairs = _get_pairs(word)
        while pairs:
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            first, second = best
            merged: List[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
            pairs = _get_pairs(word)
        self._bpe_cache[piece] = word
        return word

    def _encode_plain(self, text: str) -> List[int]:
        ids: List[int] = []
        for piece in pre_tokenize(text):
            mapped = "".join(_BYTE_ENCODER[b] for b in piece.encode("utf-8"))
            for sub in self._bpe(mapped):
                tid = self.vocab.get(sub)
                if tid is None:
                    if self.unk_id is None:
                        raise ValueError(f"token {sub!r} not in vocabulary and no {UNK_TOKEN} defined")
                    tid = self.unk_id
                ids.append(tid)
        return ids

    def _split_specials(self, text: str) -> List[Tuple[bool, str]]:
        parts: List[Tuple[bool, str]] = []
        i = 0
        while i < len(text):
            hit = None
            for surf in self._special_order:
                pos = text.find(surf, i)
                if pos != -1 and (hit is None or pos < hit[0]):
                    hit = (pos, surf)
            if hit is None:
                parts.append((False, text[i:]))
                break
            pos, surf = hit
            if pos > i:
                parts.append((False, text[i:pos]))
            parts.append((True, surf))
            i = pos + len(surf)
        return parts

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for is_special, chunk in self._split_specials(text):
            if is_special:
                ids.append(self.vocab[chunk])
            else:
                ids.extend(self._encode_plain(chunk))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: List[str] = []
        buf: List[str] = []

        def flush():
            if buf:
                raw = bytes(_BYTE_DECODER[c] for c in "".join(buf))
                out.append(raw.decode("utf-8", errors="replace"))
                buf.clear()

        for i in ids:
            if i in self._special_ids:
                flush()
                out.append(self.id_to_token[i])
            else:
                buf.append(self.id_to_token[i])
        flush()
        return "".join(out)

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "vocab.json"), "w", encoding="utf-8") as f:
            json.dump(self.vocab, f, ensure_ascii=False, indent=0, sort_keys=False)
        with open(os.path.join(directory, "merges.txt"), "w", encoding="utf-8") as f:
            f.write("#version: 0.2\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, directory: str) -> "Tokenizer":
        with open(os.path.join(directory, "vocab.json"), encoding="utf-8") as f:
            vocab = json.load(f)
        merges: List[Tuple[str, str]] = []
        with open(os.path.join(directory, "merges.txt"), encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line or line.startswith("#version"):
                    continue
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(vocab, merges)


def tokenize_utterance(tok: Tokenizer, text: str, max_tokens: int) -> List[int]:
    """bos followed by at most max_tokens - 1 content ids (tail truncated)."""
    if max_tokens < 2:
        raise ValueError(f"max_tokens must be >= 2, got {max_tokens}")
    return [tok.bos_id] + tok.encode(text)[:max_tokens - 1]


def truncate_ids(ids: Sequence[int], max_tokens: int) -> List[int]:
    return list(ids[:max_tokens])


def train_bpe(texts: Iterable[str], vocab_size: int, include_unk: bool = True) -> Tokenizer:
    """Learn a small BPE vocabulary from raw texts (for fixtures and demos).

    Specials come first, then every byte symbol observed in the corpus, then
    merged symbols by descending pair frequency (lexicographic tie-break).
    """
    word_freq: Dict[Tuple[str, ...], int] = {}
    alphabet = set()
    for text in texts:
        for piece in pre_tokenize(text):
            mapped = tuple(_BYTE_ENCODER[b] for b in piece.encode("utf-8"))
            alphabet.update(mapped)
            word_freq[mapped] = word_freq.get(mapped, 0) + 1

    specials = list(REQUIRED_SPECIALS) + ([UNK_TOKEN] if include_unk else [])
    tokens: List[str] = specials + sorted(alphabet)
    if len(tokens) > vocab_size:
        raise ValueError(f"vocab_size {vocab_size} cannot hold {len(tokens)} base symbols")

    merges: List[Tuple[str, str]] = []
    words = dict(word_freq)
    while len(tokens) < vocab_size:
        pair_freq: Dict[Tuple[str, str], int] = {}
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                pair_freq[pair] = pair_freq.get(pair, 0) + freq
        if not pair_freq:
            break
        # deterministic: highest count, then shortest merged text, then lexicographic
        best = min(pair_freq, key=lambda p: (-pair_freq[p], len(p[0] + p[1]), p))
        merges.append(best)
        tokens.append(best[0] + best[1])
        first, second = best
        rebuilt: Dict[Tuple[str, ...], int] = {}
        for word, freq in words.items():
            out: List[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    out.append(first + second)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            key = tuple(out)
            rebuilt[key] = rebuilt.get(key, 0) + freq
        words = rebuilt

    vocab = {tok: i for i, tok in enumerate(tokens)}
    return Tokenizer(vocab, merges)
