"""Persistent bit-packed index of answer codes.

File layout (all integers little-endian)::

    b"HASB"  u32 version  u32 D  u32 L  u64 count
    count x ( u32 id_len, id (UTF-8), u32 n_tokens, payload[ceil(D*L/8)] )

``n_tokens`` is the number of real (non-padding) tokens of the answer; the
attention mask at serve time is ``column < n_tokens``. Entries are sorted by
answer id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import TokenSequence
from .errors import FormatError, InputError
from .hashing import BinaryMatrix, payload_size
from .model import answer_codes

MAGIC = b"HASB"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")


@dataclass(frozen=True)
class StoreEntry:
    code: BinaryMatrix
    n_tokens: int


@dataclass
class CodeStore:
    D: int
    L: int
    entries: dict[str, StoreEntry] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = dict(sorted(self.entries.items()))
        for aid, e in self.entries.items():
            if (e.code.D, e.code.L) != (self.D, self.L):
                raise InputError(f"entry {aid!r} is {e.code.D}x{e.code.L}, store is {self.D}x{self.L}")
            if not 1 <= e.n_tokens <= self.L:
                raise InputError(f"entry {aid!r} has {e.n_tokens} tokens, expected 1..{self.L}")
        self._bits = None

    @property
    def count(self) -> int:
        return len(self.entries)

    @property
    def payload_bytes(self) -> int:
        return self.count * payload_size(self.D, self.L)

    @property
    def ids(self) -> list[str]:
        return list(self.entries)

    def __eq__(self, other):
        if not isinstance(other, CodeStore):
            return NotImplemented
        return (self.D, self.L, self.entries) == (other.D, other.L, other.entries)

    def masks(self, aids: Iterable[str] | None = None) -> np.ndarray:
        aids = self.ids if aids is None else list(aids)
        lengths = np.array([self.entries[a].n_tokens for a in aids], dtype=np.int64)
        return np.arange(self.L)[None, :] < lengths[:, None]

    def bits(self, aids: Iterable[str] | None = None) -> np.ndarray:
        """0/1 bits of the selected entries, ``(K, D, L)`` uint8, unpacked on demand."""
        aids = self.ids if aids is None else list(aids)
        size = payload_size(self.D, self.L)
        raw = np.frombuffer(b"".join(self.entries[a].code.payload for a in aids), dtype=np.uint8)
        raw = raw.reshape(len(aids), size)
        return np.unpackbits(raw, axis=1, count=self.D * self.L, bitorder="little").reshape(-1, self.D, self.L)


def build_index(
    params: dict,
    answers: Mapping[str, TokenSequence] | Iterable[tuple[str, TokenSequence]],
    beta: float,
    layers: int,
    batch_size: int = 256,
) -> CodeStore:
    """Encode, binarize and pack every answer.

    Raises:
        InputError: if an answer id occurs twice.
    """
    pairs = list(answers.items()) if isinstance(answers, Mapping) else list(answers)
    seen = set()
    for aid, _ in pairs:
        if aid in seen:
            raise InputError(f"duplicate answer id {aid!r}")
        seen.add(aid)
    pairs.sort(key=lambda p: p[0])
    L = params["emb.pos"].shape[0]
    D = params["att.wa"].shape[1]
    entries = {}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        ids = np.stack([s.ids for _, s in chunk])
        mask = np.stack([s.mask for _, s in chunk])
        if ids.shape[1] != L:
            raise InputError(f"answers are padded to {ids.shape[1]}, model expects L={L}")
        codes = answer_codes(params, ids, mask, layers, beta)
        for (aid, seq), code in zip(chunk, codes):
            entries[aid] = StoreEntry(code, int(seq.mask.sum()))
    return CodeStore(D, L, entries)


def dumps(store: CodeStore) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, store.D, store.L, store.count)]
    for aid, e in store.entries.items():
        raw = aid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", e.n_tokens))
        parts.append(e.code.payload)
    return b"".join(parts)


def loads(buf: bytes) -> CodeStore:
    if len(buf) < HEADER.size:
        raise FormatError(f"file is {len(buf)} bytes, shorter than the {HEADER.size}-byte header", len(buf))
    magic, version, D, L, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    size = payload_size(D, L)
    off = HEADER.size
    entries = {}
    for i in range(count):
        start = off
        if off + 4 > len(buf):
            raise FormatError(f"truncated in entry {i} id length", off)
        (id_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + id_len + 4 + size > len(buf):
            raise FormatError(f"truncated in entry {i} (starts at {start})", len(buf))
        try:
            aid = buf[off : off + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i} id is not UTF-8", off) from None
        off += id_len
        (n_tokens,) = struct.unpack_from("<I", buf, off)
        off += 4
        payload = bytes(buf[off : off + size])
        if aid in entries:
            raise FormatError(f"duplicate answer id {aid!r}", start)
        try:
            entries[aid] = StoreEntry(BinaryMatrix(D, L, payload), n_tokens)
        except FormatError as exc:
            raise FormatError(str(exc), off) from None
        if not 1 <= n_tokens <= L:
            raise FormatError(f"entry {i} has token count {n_tokens}", off - 4)
        off += size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {count} entries", off)
    return CodeStore(D, L, entries)


def save(store: CodeStore, path: str | Path) -> None:
    Path(path).write_bytes(dumps(store))


def load(path: str | Path) -> CodeStore:
    return loads(Path(path).read_bytes())


@dataclass(frozen=True)
class MemoryReport:
    D: int
    L: int
    count: int
    float_bytes: int
    binary_bytes: int

    @property
    def ratio(self) -> float:
        return self.float_bytes / self.binary_bytes if self.binary_bytes else float("nan")

    def rows(self) -> list[tuple[str, object]]:
        gib = 1024**3
        return [
            ("D", self.D),
            ("L", self.L),
            ("count", self.count),
            ("float_bytes", self.float_bytes),
            ("binary_bytes", self.binary_bytes),
            ("ratio", self.ratio),
            ("float_GiB", self.float_bytes / gib),
            ("binary_GiB", self.binary_bytes / gib),
        ]


def memory_report(D: int, L: int, count: int, baseline_bytes_per_element: int = 4) -> MemoryReport:
    """Bytes needed to keep ``count`` answer matrices as floats vs sign bits."""
    if D < 1 or L < 1 or count < 0:
        raise InputError("dimensions must be positive and count non-negative")
    return MemoryReport(D, L, count, count * D * L * baseline_bytes_per_element, count * payload_size(D, L))
