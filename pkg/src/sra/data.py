"""Byte-level BPE tokenization and contiguous-lane batch planning.

The tokenizer starts from the 256 single-byte tokens and greedily merges the
most frequent adjacent pair (ties break lexicographically on the pair's byte
strings) until the target vocab size is reached or no pair occurs twice.
Merges are stored in training order and applied in that same order when
encoding, so encode/decode round-trips exactly on arbitrary bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

BASE_ALPHABET = 256
# Dense pair-count tables are used while the vocab is small enough that an
# (n_vocab x n_vocab) bincount stays cheap; beyond that, np.unique.
_DENSE_COUNT_LIMIT = 8_000_000

VOCAB_FILE = "vocab.txt"
MERGES_FILE = "merges.txt"


def _byte_to_char_table() -> dict[int, str]:
    """Invertible byte -> printable-unicode map for writing tokens as text lines.

    Printable ASCII and most Latin-1 symbols map to themselves; the rest
    (controls, space, newline, ...) shift up past 0x100 so every token is a
    single line of visible characters.
    """
    keep = list(range(ord("!"), ord("~") + 1)) + \
        list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    table: dict[int, str] = {b: chr(b) for b in keep}
    offset = 0
    for b in range(BASE_ALPHABET):
        if b not in table:
            table[b] = chr(0x100 + offset)
            offset += 1
    return table


_BYTE_TO_CHAR = _byte_to_char_table()
_CHAR_TO_BYTE = {c: b for b, c in _BYTE_TO_CHAR.items()}


def _token_to_text(token: bytes) -> str:
    return "".join(_BYTE_TO_CHAR[b] for b in token)


def _text_to_token(text: str) -> bytes:
    try:
        return bytes(_CHAR_TO_BYTE[c] for c in text)
    except KeyError as exc:
        raise ValueError(f"invalid character in token file: {exc}") from None


def _merge_pair(seq: np.ndarray, left: int, right: int, new_id: int) -> np.ndarray:
    """Replace non-overlapping (left, right) adjacencies with new_id, left to right."""
    if seq.size < 2:
        return seq
    match = (seq[:-1] == left) & (seq[1:] == right)
    idx = np.flatnonzero(match)
    if idx.size == 0:
        return seq
    if left == right:
        # Runs like "aaaa" match at every offset; keep alternate positions so
        # merges don't overlap (greedy leftmost-first within each run).
        starts = np.flatnonzero(np.diff(idx, prepend=idx[0] - 2) != 1)
        run_lengths = np.diff(np.append(starts, idx.size))
        run_first = np.repeat(idx[starts], run_lengths)
        idx = idx[(idx - run_first) % 2 == 0]
    out = seq.copy()
    out[idx] = new_id
    keep = np.ones(seq.size, dtype=bool)
    keep[idx + 1] = False
    return out[keep]


class Tokenizer:
    """Byte-level BPE: 256 base byte tokens plus learned merges."""

    def __init__(self, vocab: list[bytes], merges: list[tuple[int, int]]):
        if len(vocab) < BASE_ALPHABET:
            raise ValueError("vocab must contain the 256 single-byte base tokens")
        for b in range(BASE_ALPHABET):
            if vocab[b] != bytes([b]):
                raise ValueError(f"vocab entry {b} must be the single byte {b:#04x}")
        if len(merges) != len(vocab) - BASE_ALPHABET:
            raise ValueError("each merge must correspond to one vocab entry past the base alphabet")
        for i, (left, right) in enumerate(merges):
            new_id = BASE_ALPHABET + i
            if not (0 <= left < new_id and 0 <= right < new_id):
                raise ValueError(f"merge {i} references tokens that don't exist yet")
            if vocab[new_id] != vocab[left] + vocab[right]:
                raise ValueError(f"vocab entry {new_id} does not match its merge pair")
        self.vocab = list(vocab)
        self.merges = list(merges)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str | bytes) -> np.ndarray:
        """Token ids (int64) for a string (utf-8) or raw byte sequence."""
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        seq = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        for new_id, (left, right) in enumerate(self.merges, start=BASE_ALPHABET):
            seq = _merge_pair(seq, left, right, new_id)
        return seq

    def decode(self, ids) -> bytes:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.vocab):
                raise ValueError(f"token id {i} outside vocab of size {len(self.vocab)}")
            out.append(self.vocab[i])
        return b"".join(out)

    def decode_text(self, ids) -> str:
        return self.decode(ids).decode("utf-8", errors="replace")

    def token_str(self, token_id: int) -> str:
        """Printable form of one token (for tables and traces)."""
        raw = self.decode([token_id]).decode("utf-8", errors="replace")
        return raw.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")

    def save(self, out_dir: str | Path) -> None:
        """Write vocab.txt (one token per line, id = line number) and merges.txt
        (one space-separated pair per line, in application order)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vocab_lines = [_token_to_text(tok) for tok in self.vocab]
        merge_lines = [f"{_token_to_text(self.vocab[l])} {_token_to_text(self.vocab[r])}"
                       for l, r in self.merges]
        (out / VOCAB_FILE).write_text("\n".join(vocab_lines) + "\n", encoding="utf-8")
        (out / MERGES_FILE).write_text(
            ("\n".join(merge_lines) + "\n") if merge_lines else "", encoding="utf-8")

    @classmethod
    def load(cls, in_dir: str | Path) -> "Tokenizer":
        src = Path(in_dir)
        vocab_path, merges_path = src / VOCAB_FILE, src / MERGES_FILE
        if not vocab_path.is_file() or not merges_path.is_file():
            raise FileNotFoundError(f"no {VOCAB_FILE}/{MERGES_FILE} in {src}")
        vocab = [_text_to_token(line) for line in
                 vocab_path.read_text(encoding="utf-8").splitlines() if line]
        first_id: dict[bytes, int] = {}
        for i, tok in enumerate(vocab):
            first_id.setdefault(tok, i)
        merges = []
        for lineno, line in enumerate(merges_path.read_text(encoding="utf-8").splitlines()):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"merges line {lineno + 1} is not a space-separated pair")
            left, right = (_text_to_token(p) for p in parts)
            if left not in first_id or right not in first_id:
                raise ValueError(f"merges line {lineno + 1} references an unknown token")
            merges.append((first_id[left], first_id[right]))
        return cls(vocab, merges)


def train_bpe(corpus: str | bytes, vocab_size: int) -> Tokenizer:
    """Learn a byte-level BPE tokenizer from a corpus.

    Deterministic: the most frequent pair merges first, exact count ties break
    lexicographically on (left bytes, right bytes), and merging stops at
    vocab_size or as soon as no adjacent pair occurs at least twice.
    """
    data = corpus.encode("utf-8") if isinstance(corpus, str) else bytes(corpus)
    if len(data) == 0:
        raise ValueError("corpus is empty")
    if vocab_size <= BASE_ALPHABET:
        raise ValueError(
            f"vocab_size must exceed the {BASE_ALPHABET}-byte base alphabet, got {vocab_size}")

    vocab = [bytes([i]) for i in range(BASE_ALPHABET)]
    merges: list[tuple[int, int]] = []
    seq = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    while len(vocab) < vocab_size and seq.size >= 2:
        n = len(vocab)
        pair_codes = seq[:-1] * n + seq[1:]
        if n * n <= _DENSE_COUNT_LIMIT:
            counts = np.bincount(pair_codes, minlength=n * n)
            best_count = int(counts.max())
            candidates = np.flatnonzero(counts == best_count)
        else:
            codes, code_counts = np.unique(pair_codes, return_counts=True)
            best_count = int(code_counts.max())
            candidates = codes[code_counts == best_count]
        if best_count < 2:
            break
        best = min((int(c) for c in candidates),
                   key=lambda c: (vocab[c // n], vocab[c % n]))
        left, right = divmod(best, n)
        seq = _merge_pair(seq, left, right, len(vocab))
        merges.append((left, right))
        vocab.append(vocab[left] + vocab[right])
    return Tokenizer(vocab, merges)


@dataclass
class Batch:
    inputs: np.ndarray   # (batch_size, seq_len) int64
    targets: np.ndarray  # (batch_size, seq_len) int64, shifted one position ahead


def num_batches(n_tokens: int, batch_size: int, seq_len: int) -> int:
    """How many full batches make_batches will yield for a stream of n_tokens."""
    lane_len = n_tokens // batch_size
    return max(0, (lane_len - 1) // seq_len)


def make_batches(ids, batch_size: int, seq_len: int, seed: int = 0) -> Iterator[Batch]:
    """Yield contiguous-lane next-token batches.

    The token stream splits into batch_size contiguous lanes of equal length;
    batch i covers window [i*seq_len, i*seq_len + seq_len] of every lane, with
    targets shifted one token ahead of inputs. Tail tokens that don't fill a
    final window are dropped. The reference order is the sequential stream
    order; ``seed`` is accepted for interface stability and does not affect it.
    """
    del seed
    ids = np.ascontiguousarray(np.asarray(ids, dtype=np.int64))
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    needed = batch_size * (seq_len + 1)
    if ids.size < needed:
        raise ValueError(f"need at least batch_size*(seq_len+1) = {needed} tokens, got {ids.size}")
    lane_len = ids.size // batch_size
    lanes = ids[: lane_len * batch_size].reshape(batch_size, lane_len)
    for i in range(num_batches(ids.size, batch_size, seq_len)):
        window = lanes[:, i * seq_len: i * seq_len + seq_len + 1]
        yield Batch(inputs=window[:, :-1].copy(), targets=window[:, 1:].copy())


def train_val_split(ids, val_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous split: the final val_fraction of the stream is held out."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ValueError(f"need at least 2 tokens to split, got {ids.size}")
    n_val = int(round(ids.size * val_fraction))
    n_val = min(max(n_val, 1), ids.size - 1)
    return ids[: ids.size - n_val], ids[ids.size - n_val:]
