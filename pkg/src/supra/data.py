"""Byte-level tokenizer, document ingestion and sequence packing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS, EOS, PAD = 256, 257, 258
VOCAB = 259
SPECIALS = (BOS, EOS, PAD)

BUNDLED_CORPUS = Path(__file__).parent / "corpus" / "tiny_corpus.txt"


class CorpusTooSmall(ValueError):
    pass


def encode(text: bytes | str) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def prompt_tokens(text: bytes | str) -> list[int]:
    """Prefix with EOS: in the packed stream every document starts right after one."""
    return [EOS] + encode(text)


def decode(tokens) -> bytes:
    return bytes(int(t) for t in tokens if int(t) < 256)


@dataclass
class PackedDataset:
    train: np.ndarray  # (n_train, max_seq) int64
    val: np.ndarray  # (n_val, max_seq)
    max_seq: int
    seed: int
    dropped: int  # tail tokens discarded

    @property
    def n_chunks(self) -> int:
        return len(self.train) + len(self.val)

    def batches(self, batch_size: int, seed: int):
        """Endless stream of (batch_size, max_seq) training chunks, reshuffled each epoch."""
        rng = np.random.default_rng(seed)
        n = len(self.train)
        while True:
            order = rng.permutation(n)
            for i in range(0, n - batch_size + 1, batch_size):
                yield self.train[order[i:i + batch_size]]
            if n < batch_size:
                yield self.train[rng.integers(0, n, batch_size)]


def pack(documents, max_seq: int, seed: int = 0, split: float = 0.9) -> PackedDataset:
    """EOS-join the documents, cut into max_seq chunks, shuffle by seed, split train/val.

    ``split`` is the training fraction.
    """
    stream: list[int] = []
    for doc in documents:
        stream.extend(encode(doc) if isinstance(doc, (bytes, str)) else [int(t) for t in doc])
        stream.append(EOS)
    n_chunks = len(stream) // max_seq
    if n_chunks < 1:
        raise CorpusTooSmall(f"{len(stream)} tokens cannot fill one chunk of {max_seq}")
    used = n_chunks * max_seq
    chunks = np.asarray(stream[:used], dtype=np.int64).reshape(n_chunks, max_seq)
    order = np.random.default_rng(seed).permutation(n_chunks)
    chunks = chunks[order]
    n_train = int(round(split * n_chunks))
    return PackedDataset(chunks[:n_train], chunks[n_train:], max_seq, seed, len(stream) - used)


def read_documents(path: str | Path) -> list[bytes]:
    """A file is split into documents on blank lines; a directory yields one document per file."""
    path = Path(path)
    if path.is_dir():
        return [p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()]
    raw = path.read_bytes().replace(b"\r\n", b"\n")
    return [d.strip(b"\n") for d in raw.split(b"\n\n") if d.strip()]


def load_corpus(path: str | Path | None = None, max_seq: int = 256, seed: int = 0, split: float = 0.9) -> PackedDataset:
    return pack(read_documents(path or BUNDLED_CORPUS), max_seq, seed, split)
