"""Bit-exact reading, writing and dtype conversion of tensor checkpoint files.

File layout: 8-byte little-endian header length N, then N bytes of UTF-8 JSON
mapping tensor names to ``{"dtype", "shape", "data_offsets"}`` (offsets relative
to the end of the header), then the raw data region. An optional
``"__metadata__"`` key carries string-to-string pairs. Vocabulary maps live in
a sidecar text file, one token per line, line number = embedding row.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, VocabError


class Dtype(str, Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return 4 if self is Dtype.F32 else 2


def _widen_f16(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f2").astype(np.float32)


def _widen_bf16(payload: bytes) -> np.ndarray:
    bits = np.frombuffer(payload, dtype="<u2").astype(np.uint32) << np.uint32(16)
    return bits.view(np.float32)


def _narrow_f16(values: np.ndarray) -> bytes:
    # numpy's cast is round-to-nearest-even and saturates to +-inf; it also
    # round-trips every F16 bit pattern (NaN payloads included).
    with np.errstate(over="ignore"):
        return values.astype("<f2").tobytes()


def _narrow_bf16(values: np.ndarray) -> bytes:
    bits = np.asarray(values, dtype="<f4").reshape(-1).view(np.uint32)
    rounded = ((bits + ((bits >> np.uint32(16)) & np.uint32(1)) + np.uint32(0x7FFF))
               >> np.uint32(16)).astype(np.uint16)
    nan = (bits & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    if nan.any():
        top = (bits[nan] >> np.uint32(16)).astype(np.uint16)
        # keep the sign and payload, but never let a NaN collapse to infinity
        rounded[nan] = np.where(top & np.uint16(0x007F), top, top | np.uint16(0x0040))
    return rounded.tobytes()


@dataclass(frozen=True)
class Tensor:
    """A named, typed, shaped block of little-endian numeric data."""

    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if any(d < 0 for d in self.shape):
            raise CheckpointFormatError(
                f"tensor '{self.name}': negative dimension in shape {list(self.shape)}"
            )
        expected = self.numel * self.dtype.itemsize
        if len(self.data) != expected:
            raise CheckpointFormatError(
                f"tensor '{self.name}': payload is {len(self.data)} bytes, "
                f"shape {list(self.shape)} with dtype {self.dtype.value} needs {expected}"
            )

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    def to_f32(self) -> np.ndarray:
        """Widen the payload to a float32 array of this tensor's shape.

        Widening is exact for every representable F16/BF16 value.
        """
        if self.dtype is Dtype.F32:
            values = np.frombuffer(self.data, dtype="<f4").copy()
        elif self.dtype is Dtype.F16:
            values = _widen_f16(self.data)
        else:
            values = _widen_bf16(self.data)
        return values.reshape(self.shape)

    @classmethod
    def from_f32(cls, name: str, values: np.ndarray, dtype: Dtype) -> "Tensor":
        """Pack a float32 array into a tensor, narrowing with round-to-nearest-even."""
        values = np.asarray(values, dtype="<f4")
        if dtype is Dtype.F32:
            data = values.tobytes()
        elif dtype is Dtype.F16:
            data = _narrow_f16(values)
        else:
            data = _narrow_bf16(values)
        return cls(name=name, dtype=dtype, shape=values.shape, data=data)


def cast_tensor(t: Tensor, target: Dtype) -> Tensor:
    """Convert a tensor's storage dtype, keeping name and shape.

    Narrowing rounds to nearest-even; values beyond the F16 range saturate to
    +-infinity. Widening is exact, so widen-then-narrow round trips bit-exactly.
    """
    if t.dtype is target:
        return t
    return Tensor.from_f32(t.name, t.to_f32(), target)


@dataclass
class Checkpoint:
    """An ordered map of tensors plus an optional vocabulary map."""

    tensors: dict[str, Tensor]
    vocab: dict[str, int] | None = None
    metadata: dict[str, str] = field(default_factory=dict)
    source_label: str = field(default="", compare=False)

    def tensor_names(self) -> list[str]:
        return list(self.tensors)


def _parse_header(blob: bytes) -> dict:
    def reject_duplicates(pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise CheckpointFormatError(f"duplicate tensor name '{key}' in header")
            seen[key] = value
        return seen

    try:
        header = json.loads(blob.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError("header JSON must be an object")
    return header


def _parse_entry(name: str, entry: object, data_size: int) -> tuple[Dtype, tuple[int, ...], int, int]:
    if not isinstance(entry, dict):
        raise CheckpointFormatError(f"tensor '{name}': header entry must be an object")
    missing = {"dtype", "shape", "data_offsets"} - entry.keys()
    if missing:
        raise CheckpointFormatError(f"tensor '{name}': header entry missing {sorted(missing)}")
    try:
        dtype = Dtype(entry["dtype"])
    except ValueError:
        raise CheckpointFormatError(
            f"tensor '{name}': unknown dtype {entry['dtype']!r}"
        ) from None
    shape = entry["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
        raise CheckpointFormatError(f"tensor '{name}': shape must be a list of non-negative integers")
    offsets = entry["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
    ):
        raise CheckpointFormatError(f"tensor '{name}': data_offsets must be a pair of integers")
    begin, end = offsets
    if begin < 0 or end < begin or end > data_size:
        raise CheckpointFormatError(
            f"tensor '{name}': out-of-bounds data offsets [{begin}, {end}) "
            f"for a {data_size}-byte data region"
        )
    expected = math.prod(shape) * dtype.itemsize
    if end - begin != expected:
        raise CheckpointFormatError(
            f"tensor '{name}': data span {end - begin} bytes, expected {expected} "
            f"for shape {shape} dtype {dtype.value}"
        )
    return dtype, tuple(shape), begin, end


def read_checkpoint(path: str | Path, vocab_path: str | Path | None = None) -> Checkpoint:
    """Load a checkpoint file, validating the header against the data region.

    If ``vocab_path`` is not given and ``<path>.vocab`` exists, the sidecar is
    loaded automatically.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointFormatError(f"{path}: file too short for an 8-byte header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise CheckpointFormatError(
            f"{path}: declared header length {header_len} exceeds file size {len(raw)}"
        )
    header = _parse_header(raw[8 : 8 + header_len])
    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError(f"{path}: __metadata__ must map strings to strings")

    data = raw[8 + header_len :]
    spans = []
    tensors: dict[str, Tensor] = {}
    for name, entry in header.items():
        dtype, shape, begin, end = _parse_entry(name, entry, len(data))
        spans.append((begin, end, name))
        tensors[name] = Tensor(name=name, dtype=dtype, shape=shape, data=data[begin:end])

    # tensors must tile the data region exactly: no overlaps, no gaps
    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise CheckpointFormatError(
                f"{path}: tensor '{name}' overlaps the previous tensor's data"
            )
        if begin > cursor:
            raise CheckpointFormatError(
                f"{path}: {begin - cursor} unaccounted bytes before tensor '{name}'"
            )
        cursor = end
    if cursor != len(data):
        raise CheckpointFormatError(
            f"{path}: {len(data) - cursor} trailing bytes not covered by any tensor"
        )

    vocab = None
    if vocab_path is None:
        candidate = default_vocab_path(path)
        if candidate.exists():
            vocab = read_vocab(candidate)
    else:
        vocab = read_vocab(vocab_path)
    return Checkpoint(tensors=tensors, vocab=vocab, metadata=dict(metadata), source_label=str(path))


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint with a canonical header.

    Header keys are sorted lexicographically and the data region packs tensor
    payloads in that same order with no gaps, so re-writing a loaded file
    reproduces it byte for byte.
    """
    path = Path(path)
    header: dict[str, object] = {}
    if ckpt.metadata:
        header["__metadata__"] = {k: ckpt.metadata[k] for k in sorted(ckpt.metadata)}
    offset = 0
    ordered = sorted(ckpt.tensors)
    for name in ordered:
        t = ckpt.tensors[name]
        if t.name != name:
            raise CheckpointFormatError(f"tensor keyed '{name}' carries name '{t.name}'")
        header[name] = {
            "dtype": t.dtype.value,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(t.data)],
        }
        offset += len(t.data)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for name in ordered:
            f.write(ckpt.tensors[name].data)


def default_vocab_path(ckpt_path: str | Path) -> Path:
    return Path(str(ckpt_path) + ".vocab")


def read_vocab(path: str | Path) -> dict[str, int]:
    """Load a vocabulary sidecar: one token per line, line number = row index."""
    text = Path(path).read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    vocab: dict[str, int] = {}
    if text == "":
        return vocab
    for row, token in enumerate(text.split("\n")):
        if token in vocab:
            raise VocabError(f"{path}: duplicate token {token!r} at line {row + 1}")
        vocab[token] = row
    return vocab


def write_vocab(vocab: dict[str, int], path: str | Path) -> None:
    """Write a vocabulary sidecar, ordering tokens by row index."""
    rows = sorted(vocab.items(), key=lambda item: item[1])
    indices = [idx for _, idx in rows]
    if indices != list(range(len(rows))):
        raise VocabError("vocabulary row indices must be exactly 0..n-1 with no duplicates")
    for token, _ in rows:
        if "\n" in token or "\r" in token:
            raise VocabError(f"token {token!r} contains a line break")
    with open(path, "w", encoding="utf-8") as f:
        for token, _ in rows:
            f.write(token)
            f.write("\n")
