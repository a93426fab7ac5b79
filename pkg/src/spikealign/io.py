"""Binary file formats, dataset manifests and small text formats.

All multi-byte integers are little-endian and all payload floats are
little-endian float32.

TensorFile::

    b"SCLT" | version u32 | rank u32 | rank x extent u32 | float32 payload

StoreFile::

    b"SCST" | version u32 | kind u8 | dim u32 | count u32
    | count x (id_len u16 | utf-8 id | dim x float32)

Checkpoint::

    b"SCCK" | version u32 | config_len u32 | utf-8 config text
    | count u32 | count x (name_len u16 | utf-8 name | TensorFile bytes)
    | sha256 of everything before it (32 bytes)
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import DataError, FormatError

TENSOR_MAGIC = b"SCLT"
STORE_MAGIC = b"SCST"
CKPT_MAGIC = b"SCCK"
VERSION = 1

KIND_TAGS = {"image_embedding": 0, "text_embedding": 1, "class_probabilities": 2}
KIND_NAMES = {v: k for k, v in KIND_TAGS.items()}

_F32 = np.dtype("<f4")


def _atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0, what: str = "file"):
        self.buf = buf
        self.pos = offset
        self.what = what

    def take(self, n: int, field_name: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated {field_name} at offset {self.pos}: "
                f"expected {n} bytes, found {len(self.buf) - self.pos}")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def u8(self, name: str) -> int:
        return self.take(1, name)[0]

    def u16(self, name: str) -> int:
        return struct.unpack("<H", self.take(2, name))[0]

    def u32(self, name: str) -> int:
        return struct.unpack("<I", self.take(4, name))[0]

    def magic(self, expected: bytes) -> None:
        start = self.pos
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r} at offset {start}, expected {expected!r}")

    def version(self) -> None:
        start = self.pos
        v = self.u32("version")
        if v != VERSION:
            raise FormatError(f"{self.what}: unsupported version {v} at offset {start}")

    def utf8(self, n: int, name: str) -> str:
        start = self.pos
        raw = self.take(n, name)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: invalid UTF-8 in {name} at offset {start}") from None


# -- TensorFile -----------------------------------------------------------------


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if any(n <= 0 for n in arr.shape):
        raise FormatError(f"tensor extents must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise FormatError("tensor contains non-finite values")
    head = TENSOR_MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_F32).tobytes()


def _decode_tensor(r: _Reader) -> np.ndarray:
    r.magic(TENSOR_MAGIC)
    r.version()
    rank = r.u32("rank")
    shape = []
    for i in range(rank):
        start = r.pos
        n = r.u32(f"extent {i}")
        if n == 0:
            raise FormatError(f"{r.what}: zero extent at offset {start}")
        shape.append(n)
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    payload = r.take(nbytes, "payload")
    return np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(shape)


def decode_tensor(buf: bytes, what: str = "tensor") -> np.ndarray:
    r = _Reader(buf, what=what)
    arr = _decode_tensor(r)
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return arr


def write_tensor(path: str | Path, arr) -> None:
    _atomic_write(path, encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(_read_bytes(path), what=str(path))


# -- StoreFile ------------------------------------------------------------------


@dataclass
class TeacherStore:
    """Id-keyed float vectors: teacher embeddings, word embeddings or class probabilities."""

    kind: str
    dim: int
    records: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise FormatError(f"unknown store kind {self.kind!r}")
        if self.dim <= 0:
            raise FormatError(f"store dim must be positive, got {self.dim}")
        for key, vec in list(self.records.items()):
            self.records[key] = self._check(key, vec)

    def _check(self, key: str, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.size != self.dim:
            raise FormatError(f"record {key!r} has length {vec.size}, store dim is {self.dim}")
        if not np.isfinite(vec).all():
            raise FormatError(f"record {key!r} has non-finite values")
        if self.kind == "class_probabilities":
            if np.any(vec < 0):
                raise FormatError(f"record {key!r}: negative probability")
            if abs(float(np.sum(vec, dtype=np.float64)) - 1.0) > 1e-5:
                raise FormatError(f"record {key!r}: probabilities sum to {vec.sum(dtype=np.float64)!r}")
        return vec

    def add(self, key: str, vec) -> None:
        if key in self.records:
            raise FormatError(f"duplicate store id {key!r}")
        self.records[key] = self._check(key, vec)

    def __contains__(self, key: str) -> bool:
        return key in self.records

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return list(self.records)

    def get(self, key: str) -> np.ndarray:
        try:
            return self.records[key]
        except KeyError:
            raise DataError(f"no {self.kind} record for id {key!r}") from None

    def matrix(self, keys) -> np.ndarray:
        return np.stack([self.get(k) for k in keys]) if len(keys) else np.zeros((0, self.dim), np.float32)


def encode_store(store: TeacherStore) -> bytes:
    parts = [STORE_MAGIC, struct.pack("<IBII", VERSION, KIND_TAGS[store.kind], store.dim, len(store.records))]
    for key, vec in store.records.items():
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"store id too long ({len(raw)} bytes)")
        parts.append(struct.pack("<H", len(raw)) + raw + np.ascontiguousarray(vec, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_store(buf: bytes, what: str = "store") -> TeacherStore:
    r = _Reader(buf, what=what)
    r.magic(STORE_MAGIC)
    r.version()
    tag_at = r.pos
    tag = r.u8("kind tag")
    if tag not in KIND_NAMES:
        raise FormatError(f"{what}: unknown kind tag {tag} at offset {tag_at}")
    dim = r.u32("dim")
    if dim == 0:
        raise FormatError(f"{what}: zero dim at offset {r.pos - 4}")
    count = r.u32("count")
    store = TeacherStore(KIND_NAMES[tag], dim)
    for i in range(count):
        start = r.pos
        key = r.utf8(r.u16(f"record {i} id length"), f"record {i} id")
        vec = np.frombuffer(r.take(4 * dim, f"record {i} vector"), dtype=_F32)
        try:
            store.add(key, vec)
        except FormatError as exc:
            raise FormatError(f"{what}: record at offset {start}: {exc}") from None
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes at offset {r.pos} "
                          f"(header count {count})")
    return store


def write_store(path: str | Path, store: TeacherStore) -> None:
    _atomic_write(path, encode_store(store))


def read_store(path: str | Path, kind: str | None = None) -> TeacherStore:
    store = decode_store(_read_bytes(path), what=str(path))
    if kind is not None and store.kind != kind:
        raise DataError(f"{path}: expected a {kind} store, found {store.kind}")
    return store


# -- Checkpoint ---------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_text: str = ""
    digest: str = ""


def encode_checkpoint(params: Mapping[str, np.ndarray], config_text: str) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + encode_tensor(arr))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(buf: bytes, what: str = "checkpoint") -> Checkpoint:
    if len(buf) < 32:
        raise FormatError(f"{what}: truncated at offset 0: expected at least 32 bytes, found {len(buf)}")
    body, digest = buf[:-32], buf[-32:]
    r = _Reader(body, what=what)
    r.magic(CKPT_MAGIC)
    r.version()
    config_text = r.utf8(r.u32("config length"), "config")
    count = r.u32("parameter count")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        start = r.pos
        name = r.utf8(r.u16(f"parameter {i} name length"), f"parameter {i} name")
        if name in params:
            raise FormatError(f"{what}: duplicate parameter {name!r} at offset {start}")
        params[name] = _decode_tensor(r)
    if r.pos != len(body):
        raise FormatError(f"{what}: {len(body) - r.pos} unexpected bytes at offset {r.pos}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{what}: content hash mismatch at offset {len(body)}")
    return Checkpoint(params, config_text, digest.hex())


def write_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], config_text: str) -> str:
    payload = encode_checkpoint(params, config_text)
    _atomic_write(path, payload)
    return payload[-32:].hex()


def read_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(_read_bytes(path), what=str(path))


# -- text formats -----------------------------------------------------------------


def _text_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise DataError(f"{path}: not valid UTF-8") from None
    return [line.rstrip("\r") for line in text.split("\n")]


def load_dataset(manifest: str | Path, num_classes: int | None = None) -> Iterator[tuple[str, np.ndarray, int]]:
    """Stream ``(id, image, class)`` in manifest order.

    Lines are ``id<TAB>tensorfile<TAB>class``; relative tensor paths resolve
    against the manifest's directory.
    """
    manifest = Path(manifest)
    base = manifest.parent
    for lineno, line in enumerate(_text_lines(manifest), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{manifest}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        item_id, rel, cls_text = fields
        try:
            cls = int(cls_text)
        except ValueError:
            raise DataError(f"{manifest}:{lineno}: class {cls_text!r} is not an integer") from None
        if cls < 0 or (num_classes is not None and cls >= num_classes):
            raise DataError(f"{manifest}:{lineno}: class {cls} out of range for {num_classes} classes")
        path = Path(rel)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise DataError(f"{manifest}:{lineno}: missing tensor file {path}")
        yield item_id, read_tensor(path), cls


def write_manifest(path: str | Path, rows) -> None:
    text = "".join(f"{i}\t{p}\t{c}\n" for i, p, c in rows)
    _atomic_write(path, text.encode("utf-8"))


def read_labels(path: str | Path) -> list[str]:
    labels = [line.strip() for line in _text_lines(path) if line.strip()]
    if len(set(labels)) != len(labels):
        raise DataError(f"{path}: duplicate labels")
    return labels


def read_templates(path: str | Path) -> list[str]:
    templates = [line.strip() for line in _text_lines(path) if line.strip()]
    for t in templates:
        if "{}" not in t:
            raise DataError(f"{path}: template {t!r} lacks a {{}} slot")
    return templates


def read_substitutes(path: str | Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(_text_lines(path), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected original<TAB>substitute")
        mapping[fields[0].strip()] = fields[1].strip()
    return mapping


def write_lines(path: str | Path, lines) -> None:
    _atomic_write(path, "".join(f"{line}\n" for line in lines).encode("utf-8"))
