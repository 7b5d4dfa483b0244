"""Versioned binary wire protocol between detection nodes and the trainer.

Frame layout (all little-endian):

    magic "MVST" | version u16 | type u8 | payload length u32 | payload | CRC32(payload)

Message payloads:

    UpdateRequest   node_id u32, mean_confidence f64
    LabeledBatch    count u32, window u32, dim u32, then per sample
                    {label u8, window*dim f64}
    WeightPackage   version u32, checkpoint length u32, checkpoint bytes,
                    CRC32(checkpoint)
    Ack             ref_version u32, status u8 (0 ok, 1 reject)

decode_frame returns None on a truncated prefix (callers may await more
bytes) and raises ProtocolError on structural damage. The two transports
(in-process pipe and TCP loopback) behave identically and share one test
suite; Ack{0} doubles as the handshake hello carrying the protocol version
in its frame header.
"""

from __future__ import annotations

import queue
import socket
import struct
import zlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ACK_OK",
    "ACK_REJECT",
    "Ack",
    "FrameReader",
    "InProcTransport",
    "LabeledBatch",
    "MAX_PAYLOAD",
    "PROTOCOL_VERSION",
    "ProtocolError",
    "Session",
    "TcpTransport",
    "UpdateRequest",
    "WeightPackage",
    "connect_tcp",
    "decode_frame",
    "encode",
    "in_proc_pair",
    "serve_tcp_once",
]

MAGIC = b"MVST"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

TYPE_UPDATE_REQUEST = 1
TYPE_LABELED_BATCH = 2
TYPE_WEIGHT_PACKAGE = 3
TYPE_ACK = 4

ACK_OK = 0
ACK_REJECT = 1

_HEAD = struct.Struct("<4sHBI")


class ProtocolError(Exception):
    """Structurally invalid frame or payload."""


@dataclass(frozen=True)
class UpdateRequest:
    node_id: int
    mean_confidence: float


@dataclass(frozen=True)
class LabeledBatch:
    """Feature-vector windows with labels; count may be zero."""

    labels: tuple
    features: np.ndarray  # (count, window, dim) float64

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError("features must be (count, window, dim)")
        if f.shape[0] != len(self.labels):
            raise ValueError("labels and features disagree on count")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))

    @property
    def count(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class WeightPackage:
    version: int
    checkpoint: bytes

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.checkpoint) & 0xFFFFFFFF


@dataclass(frozen=True)
class Ack:
    ref_version: int
    status: int = ACK_OK

    @property
    def ok(self) -> bool:
        return self.status == ACK_OK


def _payload_of(message) -> tuple[int, bytes]:
    if isinstance(message, UpdateRequest):
        return TYPE_UPDATE_REQUEST, struct.pack("<Id", message.node_id, message.mean_confidence)
    if isinstance(message, LabeledBatch):
        count = message.count
        window = message.features.shape[1] if count else 0
        dim = message.features.shape[2] if count else 0
        out = bytearray(struct.pack("<III", count, window, dim))
        for i in range(count):
            out += struct.pack("<B", message.labels[i])
            out += np.ascontiguousarray(message.features[i]).astype("<f8").tobytes()
        return TYPE_LABELED_BATCH, bytes(out)
    if isinstance(message, WeightPackage):
        return TYPE_WEIGHT_PACKAGE, (
            struct.pack("<II", message.version, len(message.checkpoint))
            + message.checkpoint
            + struct.pack("<I", message.checksum)
        )
    if isinstance(message, Ack):
        return TYPE_ACK, struct.pack("<IB", message.ref_version, message.status)
    raise ProtocolError(f"unknown message type {type(message).__name__}")


def encode(message, version: int = PROTOCOL_VERSION) -> bytes:
    """Serialize one message to a full frame."""
    mtype, payload = _payload_of(message)
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the 64 MiB cap")
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return _HEAD.pack(MAGIC, version, mtype, len(payload)) + payload + struct.pack("<I", crc)


def _decode_payload(mtype: int, payload: bytes):
    try:
        if mtype == TYPE_UPDATE_REQUEST:
            node_id, conf = struct.unpack("<Id", payload)
            return UpdateRequest(node_id, conf)
        if mtype == TYPE_LABELED_BATCH:
            count, window, dim = struct.unpack_from("<III", payload, 0)
            rec = 1 + window * dim * 8
            if len(payload) != 12 + count * rec:
                raise ProtocolError("labeled batch length mismatch")
            labels = []
            feats = np.empty((count, window, dim))
            for i in range(count):
                off = 12 + i * rec
                labels.append(payload[off])
                feats[i] = np.frombuffer(
                    payload, dtype="<f8", count=window * dim, offset=off + 1
                ).reshape(window, dim)
            return LabeledBatch(tuple(labels), feats)
        if mtype == TYPE_WEIGHT_PACKAGE:
            version, length = struct.unpack_from("<II", payload, 0)
            if len(payload) != 12 + length:
                raise ProtocolError("weight package length mismatch")
            ckpt = payload[8 : 8 + length]
            (crc,) = struct.unpack_from("<I", payload, 8 + length)
            if zlib.crc32(ckpt) & 0xFFFFFFFF != crc:
                raise ProtocolError("weight package checksum mismatch")
            return WeightPackage(version, ckpt)
        if mtype == TYPE_ACK:
            ref, status = struct.unpack("<IB", payload)
            return Ack(ref, status)
    except struct.error as exc:
        raise ProtocolError(f"malformed payload: {exc}") from exc
    raise ProtocolError(f"unknown frame type {mtype}")


def decode_frame(data: bytes, expect_version: int | None = None):
    """Decode one frame from the head of ``data``.

    Returns (message, frame_version, consumed_bytes), or None when the
    buffer holds only a prefix of a frame. Raises ProtocolError on bad
    magic, oversize length, CRC mismatch or malformed payload.
    """
    if len(data) < _HEAD.size:
        if data and not MAGIC.startswith(bytes(data[:4])):
            raise ProtocolError(f"bad frame magic {bytes(data[:4])!r}")
        return None
    magic, version, mtype, length = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds the 64 MiB cap")
    total = _HEAD.size + length + 4
    if len(data) < total:
        return None
    payload = bytes(data[_HEAD.size : _HEAD.size + length])
    (crc,) = struct.unpack_from("<I", data, _HEAD.size + length)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ProtocolError("frame CRC mismatch")
    if expect_version is not None and version != expect_version:
        raise ProtocolError(f"protocol version {version} != expected {expect_version}")
    return _decode_payload(mtype, payload), version, total


class FrameReader:
    """Incremental frame accumulator for a byte stream."""

    def __init__(self, expect_version: int | None = None):
        self._buf = bytearray()
        self._expect = expect_version

    def feed(self, data: bytes) -> list:
        self._buf += data
        out = []
        while True:
            got = decode_frame(self._buf, self._expect)
            if got is None:
                return out
            message, _version, used = got
            del self._buf[:used]
            out.append(message)


class InProcTransport:
    """One endpoint of an in-process byte pipe (queue-backed)."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise ProtocolError("transport closed")
        self._outbox.put(bytes(data))

    def recv_bytes(self, timeout: float | None = None) -> bytes:
        try:
            chunk = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no data within timeout") from None
        if chunk is None:
            raise ProtocolError("transport closed by peer")
        return chunk

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def in_proc_pair() -> tuple[InProcTransport, InProcTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcTransport(b_to_a, a_to_b), InProcTransport(a_to_b, b_to_a)


class TcpTransport:
    """Socket-backed transport with the same byte-chunk interface."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send_bytes(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ProtocolError(f"send failed: {exc}") from exc

    def recv_bytes(self, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        try:
            chunk = self._sock.recv(65536)
        except socket.timeout:
            raise TimeoutError("no data within timeout") from None
        except OSError as exc:
            raise ProtocolError(f"transport closed by peer: {exc}") from exc
        if not chunk:
            raise ProtocolError("transport closed by peer")
        return chunk

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def connect_tcp(host: str, port: int) -> TcpTransport:
    return TcpTransport(socket.create_connection((host, port)))


def serve_tcp_once(host: str = "127.0.0.1", port: int = 0):
    """Bind a listening socket; returns (bound_port, accept_fn)."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)

    def accept() -> TcpTransport:
        conn, _addr = srv.accept()
        srv.close()
        return TcpTransport(conn)

    return srv.getsockname()[1], accept


class Session:
    """Ordered message exchange over a transport.

    handshake() exchanges hello frames (Ack with ref_version 0) and refuses
    the connection when the peer speaks a different protocol version.
    """

    def __init__(self, transport, version: int = PROTOCOL_VERSION):
        self._transport = transport
        self.version = version
        self._buf = bytearray()
        self._pending: list = []
        self._handshaken = False

    def send(self, message) -> None:
        self._transport.send_bytes(encode(message, self.version))

    def recv(self, timeout: float | None = 5.0):
        while not self._pending:
            chunk = self._transport.recv_bytes(timeout=timeout)
            self._buf += chunk
            while True:
                got = decode_frame(self._buf, None)
                if got is None:
                    break
                message, version, used = got
                del self._buf[:used]
                if version != self.version:
                    raise ProtocolError(
                        f"connection refused: peer protocol version {version}, ours {self.version}"
                    )
                self._pending.append(message)
        return self._pending.pop(0)

    def handshake(self, initiate: bool, timeout: float | None = 5.0) -> None:
        """Exchange hello frames; refuse the peer on a version mismatch.

        The refusing side emits a reject hello in its own version (the peer
        surfaces the mismatch reason when it reads that frame) and raises.
        """
        try:
            if initiate:
                self.send(Ack(0, ACK_OK))
                reply = self.recv(timeout=timeout)
            else:
                reply = self.recv(timeout=timeout)
                self.send(Ack(0, ACK_OK))
        except ProtocolError:
            try:
                self._transport.send_bytes(encode(Ack(0, ACK_REJECT), self.version))
            except ProtocolError:
                pass
            raise
        if not (isinstance(reply, Ack) and reply.ref_version == 0):
            raise ProtocolError(f"unexpected handshake message {reply!r}")
        if reply.status != ACK_OK:
            raise ProtocolError("connection refused by peer")
        self._handshaken = True

    def close(self) -> None:
        self._transport.close()
