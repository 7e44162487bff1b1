"""Bit-exact serialization: message framing, checkpoints, the feedback log.

Every frame is magic 0x46 0x51 ("FQ"), a version byte, a kind byte, a
32-bit little-endian payload length, then the payload. Parameter payloads
carry a flat float32 array; the manifest travels out of band (both ends
derive it from the shared model config, and HELLO carries its digest so a
mismatch is caught before any training happens).
"""

from __future__ import annotations

import enum
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CheckpointError, DataError, EncodeError, ProtocolError
from .model import Manifest, ModelConfig, ParamVector, manifest_for

log = logging.getLogger(__name__)

MAGIC = b"FQ"
VERSION = 1
HEADER_LEN = 8
MAX_PAYLOAD = 1 << 30  # 1 GiB

CKPT_MAGIC = b"FQASCKPT"
CKPT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def param_digest(params: ParamVector) -> str:
    """Hex digest of the raw little-endian float32 value bytes."""
    return f"{fnv1a64(params.values.astype('<f4').tobytes()):016x}"


def manifest_digest(manifest: Manifest) -> str:
    parts = []
    for name, shape in manifest:
        parts.append(name + ":" + ",".join(str(d) for d in shape))
    return f"{fnv1a64(';'.join(parts).encode('utf-8')):016x}"


class Kind(enum.IntEnum):
    HELLO = 1
    MODEL = 2
    UPDATE = 3
    DONE = 4
    ERROR = 5


class Message:
    """One protocol message. Field meaning depends on kind:

    HELLO   client_id, manifest_digest
    MODEL   round_id, values (the broadcast global parameters)
    UPDATE  round_id, client_id, n_examples, values
    DONE    nothing
    ERROR   code, text
    """

    __slots__ = ("kind", "client_id", "manifest_digest", "round_id",
                 "n_examples", "values", "code", "text")

    def __init__(self, kind: Kind, *, client_id: str = "", manifest_digest: str = "",
                 round_id: int = 0, n_examples: int = 0,
                 values: Optional[np.ndarray] = None, code: int = 0, text: str = ""):
        self.kind = Kind(kind)
        self.client_id = client_id
        self.manifest_digest = manifest_digest
        self.round_id = round_id
        self.n_examples = n_examples
        if values is not None:
            values = np.asarray(values, dtype=np.float32).reshape(-1)
            values = values.copy()
            values.setflags(write=False)
        self.values = values
        self.code = code
        self.text = text

    @classmethod
    def hello(cls, client_id: str, digest: str) -> "Message":
        return cls(Kind.HELLO, client_id=client_id, manifest_digest=digest)

    @classmethod
    def model(cls, round_id: int, values: np.ndarray) -> "Message":
        return cls(Kind.MODEL, round_id=round_id, values=values)

    @classmethod
    def update(cls, round_id: int, client_id: str, n_examples: int,
               values: np.ndarray) -> "Message":
        return cls(Kind.UPDATE, round_id=round_id, client_id=client_id,
                   n_examples=n_examples, values=values)

    @classmethod
    def done(cls) -> "Message":
        return cls(Kind.DONE)

    @classmethod
    def error(cls, code: int, text: str) -> "Message":
        return cls(Kind.ERROR, code=code, text=text)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        if (self.kind, self.client_id, self.manifest_digest, self.round_id,
                self.n_examples, self.code, self.text) != (
                other.kind, other.client_id, other.manifest_digest,
                other.round_id, other.n_examples, other.code, other.text):
            return False
        if (self.values is None) != (other.values is None):
            return False
        return self.values is None or np.array_equal(
            self.values, other.values, equal_nan=True
        )

    def __repr__(self) -> str:
        return f"Message({self.kind.name}, round={self.round_id}, client={self.client_id!r})"


def _str16(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise EncodeError(f"string field too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


def _param_payload(round_id: int, client_id: str, n_examples: int,
                   values: np.ndarray) -> bytes:
    if not 0 <= round_id <= 0xFFFFFFFF:
        raise EncodeError(f"round {round_id} does not fit in 32 bits")
    if not 0 <= n_examples <= 0xFFFFFFFFFFFFFFFF:
        raise EncodeError(f"n_examples {n_examples} does not fit in 64 bits")
    body = values.astype("<f4").tobytes()
    return (struct.pack("<I", round_id) + _str16(client_id)
            + struct.pack("<QQ", n_examples, values.size) + body)


def encode_message(msg: Message) -> bytes:
    if msg.kind in (Kind.MODEL, Kind.UPDATE):
        if msg.values is None:
            raise EncodeError(f"{msg.kind.name} message needs parameter values")
        payload = _param_payload(msg.round_id, msg.client_id if msg.kind is Kind.UPDATE else "",
                                 msg.n_examples if msg.kind is Kind.UPDATE else 0,
                                 msg.values)
    elif msg.kind is Kind.HELLO:
        payload = _str16(msg.client_id) + _str16(msg.manifest_digest)
    elif msg.kind is Kind.DONE:
        payload = b""
    elif msg.kind is Kind.ERROR:
        if not 0 <= msg.code <= 0xFFFFFFFF:
            raise EncodeError(f"error code {msg.code} does not fit in 32 bits")
        payload = struct.pack("<I", msg.code) + _str16(msg.text)
    else:  # pragma: no cover - Kind() in the constructor blocks this
        raise EncodeError(f"unknown kind {msg.kind}")
    if len(payload) > MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(payload)} bytes exceeds the 1 GiB cap")
    return MAGIC + bytes((VERSION, int(msg.kind))) + struct.pack("<I", len(payload)) + payload


class _Reader:
    """Cursor over one payload; refuses to read past its end."""

    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ProtocolError("payload shorter than its declared fields")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str16(self) -> str:
        n = self.u16()
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"string field is not valid UTF-8: {exc}") from exc

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError(
                f"payload has {len(self.buf) - self.pos} trailing byte(s)"
            )


def decode_frame(buf: Union[bytes, bytearray, memoryview]) -> Optional[tuple["Message", int]]:
    """Decode the first frame in buf.

    Returns (message, bytes consumed), or None when buf is a valid but
    incomplete prefix. Corruption raises ProtocolError. Never reads past
    the declared payload length.
    """
    view = memoryview(buf)
    # validate whatever prefix of the header is present, so garbage is
    # reported immediately rather than after "more bytes"
    for i in range(min(2, len(view))):
        if view[i] != MAGIC[i]:
            raise ProtocolError(f"bad magic byte at offset {i}: 0x{view[i]:02x}")
    if len(view) >= 3 and view[2] != VERSION:
        raise ProtocolError(f"unsupported protocol version {view[2]}")
    if len(view) >= 4 and view[3] not in Kind._value2member_map_:
        raise ProtocolError(f"unknown message kind 0x{view[3]:02x}")
    if len(view) < HEADER_LEN:
        return None
    kind = Kind(view[3])
    (length,) = struct.unpack("<I", view[4:8])
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {length} bytes exceeds the 1 GiB cap")
    if len(view) < HEADER_LEN + length:
        return None
    payload = view[HEADER_LEN:HEADER_LEN + length]
    reader = _Reader(payload)
    if kind in (Kind.MODEL, Kind.UPDATE):
        round_id = reader.u32()
        client_id = reader.str16()
        n_examples = reader.u64()
        count = reader.u64()
        if count > MAX_PAYLOAD // 4:
            raise ProtocolError(f"parameter count {count} is implausible")
        raw = reader.take(4 * count)
        reader.done()
        values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        msg = Message(kind, round_id=round_id, client_id=client_id,
                      n_examples=n_examples, values=values)
    elif kind is Kind.HELLO:
        client_id = reader.str16()
        digest = reader.str16()
        reader.done()
        msg = Message(kind, client_id=client_id, manifest_digest=digest)
    elif kind is Kind.DONE:
        reader.done()
        msg = Message(kind)
    else:  # ERROR
        code = reader.u32()
        text = reader.str16()
        reader.done()
        msg = Message(kind, code=code, text=text)
    return msg, HEADER_LEN + length


class FrameReader:
    """Reassembles messages from a byte stream fed in arbitrary chunks."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_message(self) -> Optional[Message]:
        result = decode_frame(self._buf)
        if result is None:
            return None
        msg, used = result
        del self._buf[:used]
        return msg

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def save_checkpoint(path, config: ModelConfig, params: ParamVector) -> None:
    """Write config + parameters; the write is atomic via rename."""
    expected = manifest_for(config)
    if params.manifest != expected:
        raise CheckpointError("parameters do not match the config's manifest")
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<H", CKPT_VERSION)
    config_json = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_json)) + config_json
    blob += struct.pack("<I", len(params.manifest))
    for name, shape in params.manifest:
        blob += _str16(name)
        blob += struct.pack("<B", len(shape))
        for dim in shape:
            blob += struct.pack("<I", dim)
    blob += struct.pack("<Q", params.values.size)
    blob += params.values.astype("<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelConfig, ParamVector]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    reader = _Reader(memoryview(blob))
    try:
        if bytes(reader.take(len(CKPT_MAGIC))) != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        if reader.u16() != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        config_json = bytes(reader.take(reader.u32()))
        try:
            config = ModelConfig.from_dict(json.loads(config_json.decode("utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed config block: {exc}") from exc
        manifest = []
        for _ in range(reader.u32()):
            name = reader.str16()
            rank = struct.unpack("<B", reader.take(1))[0]
            shape = tuple(reader.u32() for _ in range(rank))
            manifest.append((name, shape))
        count = reader.u64()
        raw = reader.take(4 * count)
        reader.done()
    except ProtocolError as exc:
        raise CheckpointError(f"{path}: truncated or corrupt: {exc}") from exc
    manifest = tuple(manifest)
    if manifest != manifest_for(config):
        raise CheckpointError(f"{path}: manifest does not match its config")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if values.size != count:
        raise CheckpointError(f"{path}: parameter count mismatch")
    return config, ParamVector(values, manifest)


@dataclass(frozen=True)
class FeedbackRecord:
    id: str
    timestamp: float
    question: str
    context_id: str
    pred_start: int
    pred_end: int
    pred_text: str
    correction: Optional[str] = None
    # full context text; None unless the writer opted into context logging
    context: Optional[str] = None

    def __post_init__(self):
        if self.pred_start > self.pred_end:
            raise DataError(
                f"pred_start {self.pred_start} exceeds pred_end {self.pred_end}"
            )

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "timestamp": self.timestamp,
            "question": self.question,
            "context_id": self.context_id,
            "pred_start": self.pred_start,
            "pred_end": self.pred_end,
            "pred_text": self.pred_text,
            "correction": self.correction,
        }
        if self.context is not None:
            out["context"] = self.context
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "FeedbackRecord":
        return cls(
            id=str(obj["id"]),
            timestamp=float(obj["timestamp"]),
            question=str(obj["question"]),
            context_id=str(obj["context_id"]),
            pred_start=int(obj["pred_start"]),
            pred_end=int(obj["pred_end"]),
            pred_text=str(obj["pred_text"]),
            correction=None if obj.get("correction") is None else str(obj["correction"]),
            context=None if obj.get("context") is None else str(obj["context"]),
        )


def append_feedback(path, rec: FeedbackRecord) -> None:
    """Durably append one record: the line is flushed and fsynced before return."""
    line = json.dumps(rec.to_dict(), sort_keys=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def list_feedback(path) -> list[FeedbackRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    bad = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(FeedbackRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError, DataError):
                bad += 1
    if bad:
        log.warning("skipped %d malformed feedback line(s) in %s", bad, path)
    return records
