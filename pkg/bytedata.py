"""
Byte-level text handling: UTF-8 byte tokenization, random probe sequences for
the leak test, toy copy/reverse corpora, parallel corpus loading and padded
batching.

Id layout: PAD=0, BOS=1, EOS=2, raw byte b -> b + 3 (ids 3..258).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS = 0, 1, 2
OFFSET = 3
VOCAB_SIZE = OFFSET + 256

# Probe ids occupy [3, 3 + probe_vocab): chance is exactly 1 / probe_vocab.
PROBE_ID_BASE = OFFSET
# Toy symbols start at '!' so toy corpora round-trip through text files.
TOY_BYTE_BASE = 0x21


@dataclass
class ProbeSpec:
    """
    Shape of one leak-probe sample.

    :param seq_len: number of target positions.
    :param probe_vocab: number of distinct random ids.
    :param delta: downsampling factor.
    :param pad_multiplier: BOS padding is pad_multiplier * delta.
    :param seed: seed of the sample stream.
    """
    seq_len: int = 12
    probe_vocab: int = 100
    delta: int = 2
    pad_multiplier: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")
        if self.pad_multiplier not in (1, 2):
            raise ValueError(f"pad_multiplier must be 1 or 2, got {self.pad_multiplier}")
        if self.seq_len % self.delta:
            raise ValueError(f"seq_len {self.seq_len} is not divisible by delta {self.delta}")
        if self.pad_multiplier * self.delta >= self.seq_len:
            raise ValueError(f"padding {self.pad_multiplier * self.delta} must be shorter than seq_len {self.seq_len}")
        if not 1 <= self.probe_vocab <= 256:
            raise ValueError(f"probe_vocab must be in [1, 256], got {self.probe_vocab}")

    @property
    def padding(self):
        return self.pad_multiplier * self.delta

    @property
    def input_len(self):
        return self.seq_len + self.padding

    @property
    def chance(self):
        return 1.0 / self.probe_vocab


@dataclass
class ParallelPair:
    src: list
    tgt: list


@dataclass
class Batch:
    """Right-padded id matrices with masks that are True exactly at PAD positions."""
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self):
        return self.src.shape[0]


def byte_encode(text, add_eos=False):
    """UTF-8 encode ``text`` into byte ids; ``bytes`` input must be valid UTF-8."""
    if isinstance(text, (bytes, bytearray)):
        try:
            raw = bytes(text)
            raw.decode("utf-8", errors="strict")
        except UnicodeDecodeError as e:
            raise ValueError(f"invalid UTF-8 input: {e}") from e
    else:
        try:
            raw = text.encode("utf-8", errors="strict")
        except UnicodeEncodeError as e:
            raise ValueError(f"text is not encodable as UTF-8: {e}") from e
    ids = [b + OFFSET for b in raw]
    if add_eos:
        ids.append(EOS)
    return ids


def byte_decode(ids):
    """Inverse of byte_encode; special ids are dropped, decoding stops at EOS."""
    raw = bytearray()
    for i in (ids.tolist() if hasattr(ids, "tolist") else ids):
        if i == EOS:
            break
        if OFFSET <= i < VOCAB_SIZE:
            raw.append(i - OFFSET)
    return raw.decode("utf-8", errors="replace")


def make_probe_batch(spec, batch_size, rng):
    """
    ``batch_size`` probe samples as (inputs, targets). Targets are
    (batch, seq_len); inputs are the whole target stream behind
    ``spec.padding`` BOS tokens, (batch, spec.input_len), so every target
    has a carrier position. Only the first seq_len / delta blocks predict.
    """
    targets = rng.integers(PROBE_ID_BASE, PROBE_ID_BASE + spec.probe_vocab,
                           size=(batch_size, spec.seq_len))
    bos = np.full((batch_size, spec.padding), BOS, dtype=targets.dtype)
    return np.concatenate([bos, targets], axis=1), targets


def make_probe_pair(spec):
    """One deterministic (input, target) probe pair for ``spec.seed``."""
    inputs, targets = make_probe_batch(spec, 1, np.random.default_rng(spec.seed))
    return inputs[0].tolist(), targets[0].tolist()


def toy_symbol_id(k):
    return OFFSET + TOY_BYTE_BASE + k


def gen_toy_pairs(task, count, len_range, vocab, seed):
    """
    Random copy or reverse pairs over ``vocab`` printable symbols, lengths
    uniform in ``len_range`` (inclusive). Both sides end with EOS.
    """
    if task not in ("copy", "reverse"):
        raise ValueError(f"unknown toy task {task!r}")
    low, high = len_range
    if not 1 <= low <= high:
        raise ValueError(f"bad length range {len_range}")
    if not 1 <= vocab <= 94:
        raise ValueError(f"toy vocab must be in [1, 94], got {vocab}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        length = int(rng.integers(low, high + 1))
        body = [toy_symbol_id(int(k)) for k in rng.integers(0, vocab, size=length)]
        tgt = list(body) if task == "copy" else body[::-1]
        pairs.append(ParallelPair(src=body + [EOS], tgt=tgt + [EOS]))
    return pairs


def read_lines(path):
    r"""
    Lines of a UTF-8 file split on "\n" only; a final "\r" (CRLF files) is
    dropped. Form feeds, U+2028 and other separators stay inside the line.
    """
    with open(path, encoding="utf-8", newline="") as f:
        lines = f.read().split("\n")
    if lines[-1] == "":
        lines.pop()
    return [line[:-1] if line.endswith("\r") else line for line in lines]


def load_parallel_corpus(src_path, tgt_path, max_src_chars=256):
    """
    Read two line-aligned UTF-8 files. Pairs whose source line is longer than
    ``max_src_chars`` characters are dropped; EOS is appended afterwards.
    """
    src_lines = read_lines(src_path)
    tgt_lines = read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line count mismatch: {src_path} has {len(src_lines)}, "
                         f"{tgt_path} has {len(tgt_lines)}")
    pairs = []
    for src, tgt in zip(src_lines, tgt_lines):
        if len(src) > max_src_chars:
            continue
        pairs.append(ParallelPair(src=byte_encode(src, add_eos=True), tgt=byte_encode(tgt, add_eos=True)))
    return pairs


def pad_to_multiple(seqs, delta):
    """Right-pad with PAD to the longest sequence, rounded up to a multiple of delta."""
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    longest = max((len(s) for s in seqs), default=0)
    width = max(-(-longest // delta) * delta, delta)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        out[row, :len(s)] = s
    return out, out == PAD


def batch_pad(pairs, batch_size, delta, tgt_delta=None):
    """
    Split ``pairs`` in order into batches of ``batch_size``; each side is
    padded to its batch maximum and then to a multiple of its factor
    (``delta`` for sources, ``tgt_delta`` or ``delta`` for targets).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    tgt_delta = tgt_delta or delta
    batches = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        src, src_mask = pad_to_multiple([p.src for p in chunk], delta)
        tgt, tgt_mask = pad_to_multiple([p.tgt for p in chunk], tgt_delta)
        batches.append(Batch(src, src_mask, tgt, tgt_mask))
    return batches
