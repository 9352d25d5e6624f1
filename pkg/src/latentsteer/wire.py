"""Binary wire protocol for out-of-process backends.

Frames are little-endian:

    magic "LSB1" | opcode u8 | request id u64 | body length u32 | body

Opcodes: 0 metadata, 1 embed_text, 2 embed_image, 3 embed_image_vjp,
4 decode, 5 decode_vjp, 6 encode, 255 error.  Strings are a u32 length
plus UTF-8 bytes.  Tensors are a dtype byte (0 = float64, 1 = float32),
rank u32, one u32 per dim, then the raw IEEE-754 payload.  Float64 is
the engine's native payload so an in-process attachment and a loopback
attachment see bit-identical numbers; float32 exists for external model
processes that compute in single precision.

Each connection is lockstep request/response and must open with a
metadata exchange.
"""

from __future__ import annotations

import socket
import struct
import threading

import numpy as np

from .backend import Backend, BackendInfo
from .errors import BackendError, ContractError, ProtocolError
from .vq import Codebook

MAGIC = b"LSB1"
HEADER = struct.Struct("<4sBQI")

OP_METADATA = 0
OP_EMBED_TEXT = 1
OP_EMBED_IMAGE = 2
OP_EMBED_IMAGE_VJP = 3
OP_DECODE = 4
OP_DECODE_VJP = 5
OP_ENCODE = 6
OP_ERROR = 255

_VALID_OPS = {OP_METADATA, OP_EMBED_TEXT, OP_EMBED_IMAGE, OP_EMBED_IMAGE_VJP,
              OP_DECODE, OP_DECODE_VJP, OP_ENCODE, OP_ERROR}

ERR_PROTOCOL = 1
ERR_BACKEND = 2

_DTYPE_F64 = 0
_DTYPE_F32 = 1

MAX_BODY = 1 << 30
_MAX_RANK = 16


# ---------------------------------------------------------------------------
# primitive encoders / decoders

def encode_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def decode_string(buf: bytes, offset: int) -> tuple[str, int]:
    if offset + 4 > len(buf):
        raise ProtocolError("truncated string length", offset)
    (length,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset + length > len(buf):
        raise ProtocolError("truncated string payload", offset)
    try:
        return buf[offset:offset + length].decode("utf-8"), offset + length
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"invalid UTF-8: {exc}", offset) from exc


def encode_tensor(arr: np.ndarray, single: bool = False) -> bytes:
    # note: ascontiguousarray would promote 0-d to 1-d, asarray keeps rank
    arr = np.asarray(arr, dtype=np.float32 if single else np.float64, order="C")
    head = struct.pack("<BI", _DTYPE_F32 if single else _DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype("<f4" if single else "<f8").tobytes()


def decode_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if offset + 5 > len(buf):
        raise ProtocolError("truncated tensor header", offset)
    dtype_code, rank = struct.unpack_from("<BI", buf, offset)
    offset += 5
    if dtype_code not in (_DTYPE_F64, _DTYPE_F32):
        raise ProtocolError(f"unknown tensor dtype code {dtype_code}", offset - 5)
    if rank > _MAX_RANK:
        raise ProtocolError(f"tensor rank {rank} too large", offset - 4)
    if offset + 4 * rank > len(buf):
        raise ProtocolError("truncated tensor dims", offset)
    dims = struct.unpack_from(f"<{rank}I", buf, offset) if rank else ()
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    itemsize = 8 if dtype_code == _DTYPE_F64 else 4
    nbytes = count * itemsize
    if offset + nbytes > len(buf):
        raise ProtocolError("truncated tensor payload", offset)
    kind = "<f8" if dtype_code == _DTYPE_F64 else "<f4"
    flat = np.frombuffer(buf[offset:offset + nbytes], dtype=kind)
    arr = flat.reshape(dims).astype(np.float64)
    return arr, offset + nbytes


def encode_frame(opcode: int, request_id: int, body: bytes) -> bytes:
    if len(body) > MAX_BODY:
        raise ProtocolError(f"body of {len(body)} bytes exceeds limit")
    return HEADER.pack(MAGIC, opcode, request_id, len(body)) + body


def encode_info(info: BackendInfo) -> bytes:
    fixed = struct.pack("<7I", info.embed_dim, info.input_size, info.latent_h,
                        info.latent_w, info.latent_dim, info.image_h,
                        info.image_w)
    return (encode_string(info.name) + encode_string(info.version) + fixed +
            encode_tensor(info.codebook.vectors))


def decode_info(body: bytes) -> BackendInfo:
    name, off = decode_string(body, 0)
    version, off = decode_string(body, off)
    if off + 28 > len(body):
        raise ProtocolError("truncated metadata", off)
    d, r, h, w, nk, ih, iw = struct.unpack_from("<7I", body, off)
    vectors, off = decode_tensor(body, off + 28)
    if off != len(body):
        raise ProtocolError("trailing bytes after metadata", off)
    return BackendInfo(name=name, version=version, embed_dim=d, input_size=r,
                       latent_h=h, latent_w=w, latent_dim=nk, image_h=ih,
                       image_w=iw, codebook=Codebook(vectors))


# ---------------------------------------------------------------------------
# stream io

def _recv_exact(conn, count: int, at: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = conn.recv(remaining)
        if not chunk:
            raise ProtocolError("connection closed mid-frame", at + count - remaining)
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class FrameStream:
    """Lockstep frame reader/writer over a stream socket."""

    def __init__(self, conn):
        self.conn = conn
        self._consumed = 0

    def send(self, opcode: int, request_id: int, body: bytes) -> None:
        self.conn.sendall(encode_frame(opcode, request_id, body))

    def recv(self) -> tuple[int, int, bytes]:
        base = self._consumed
        head = _recv_exact(self.conn, HEADER.size, base)
        magic, opcode, request_id, length = HEADER.unpack(head)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}", base)
        if opcode not in _VALID_OPS:
            raise ProtocolError(f"unknown opcode {opcode}", base + 4)
        if length > MAX_BODY:
            raise ProtocolError(f"frame body of {length} bytes exceeds limit",
                                base + 13)
        body = _recv_exact(self.conn, length, base + HEADER.size)
        self._consumed = base + HEADER.size + length
        return opcode, request_id, body

    def recv_eof_ok(self):
        """Like recv, but a clean EOF before any byte returns None."""
        base = self._consumed
        first = self.conn.recv(1)
        if not first:
            return None
        head = first + _recv_exact(self.conn, HEADER.size - 1, base + 1)
        magic, opcode, request_id, length = HEADER.unpack(head)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}", base)
        if opcode not in _VALID_OPS:
            raise ProtocolError(f"unknown opcode {opcode}", base + 4)
        if length > MAX_BODY:
            raise ProtocolError(f"frame body of {length} bytes exceeds limit",
                                base + 13)
        body = _recv_exact(self.conn, length, base + HEADER.size)
        self._consumed = base + HEADER.size + length
        return opcode, request_id, body

    def close(self):
        try:
            self.conn.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# client

class WireBackend(Backend):
    """Backend proxy speaking the wire protocol over a stream socket."""

    def __init__(self, conn):
        self._stream = FrameStream(conn)
        self._next_id = 0
        self._info = None
        self._info = self._fetch_info()

    @classmethod
    def connect_unix(cls, path: str) -> "WireBackend":
        conn = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            conn.connect(path)
        except OSError as exc:
            raise BackendError(f"cannot connect to backend at {path}: {exc}")
        return cls(conn)

    def _call(self, opcode: int, body: bytes) -> bytes:
        request_id = self._next_id
        self._next_id += 1
        self._stream.send(opcode, request_id, body)
        got_op, got_id, resp = self._stream.recv()
        if got_id != request_id:
            raise ProtocolError(
                f"response id {got_id} does not match request {request_id}")
        if got_op == OP_ERROR:
            code, off = struct.unpack_from("<I", resp, 0)[0], 4
            message, _ = decode_string(resp, off)
            if code == ERR_PROTOCOL:
                raise ProtocolError(f"peer reported: {message}")
            raise BackendError(message)
        if got_op != opcode:
            raise ProtocolError(f"response opcode {got_op} for request {opcode}")
        return resp

    def _fetch_info(self) -> BackendInfo:
        return decode_info(self._call(OP_METADATA, b""))

    def info(self) -> BackendInfo:
        return self._info

    def embed_text(self, text: str) -> np.ndarray:
        body = self._call(OP_EMBED_TEXT, encode_string(text))
        vec, _ = decode_tensor(body, 0)
        return vec

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        body = self._call(OP_EMBED_IMAGE, encode_tensor(image))
        vec, _ = decode_tensor(body, 0)
        return vec

    def embed_image_vjp(self, image, grad_embedding) -> np.ndarray:
        payload = encode_tensor(image) + encode_tensor(grad_embedding)
        body = self._call(OP_EMBED_IMAGE_VJP, payload)
        grad, _ = decode_tensor(body, 0)
        return grad

    def decode(self, z: np.ndarray) -> np.ndarray:
        body = self._call(OP_DECODE, encode_tensor(z))
        img, _ = decode_tensor(body, 0)
        return img

    def decode_vjp(self, z, grad_image) -> np.ndarray:
        payload = encode_tensor(z) + encode_tensor(grad_image)
        body = self._call(OP_DECODE_VJP, payload)
        grad, _ = decode_tensor(body, 0)
        return grad

    def encode(self, image: np.ndarray) -> np.ndarray:
        body = self._call(OP_ENCODE, encode_tensor(image))
        z, _ = decode_tensor(body, 0)
        return z

    def close(self) -> None:
        self._stream.close()


# ---------------------------------------------------------------------------
# server

def _handle_request(backend: Backend, opcode: int, body: bytes) -> bytes:
    if opcode == OP_METADATA:
        return encode_info(backend.info())
    if opcode == OP_EMBED_TEXT:
        text, _ = decode_string(body, 0)
        return encode_tensor(backend.embed_text(text))
    if opcode == OP_EMBED_IMAGE:
        image, _ = decode_tensor(body, 0)
        return encode_tensor(backend.embed_image(image))
    if opcode == OP_EMBED_IMAGE_VJP:
        image, off = decode_tensor(body, 0)
        cot, _ = decode_tensor(body, off)
        return encode_tensor(backend.embed_image_vjp(image, cot))
    if opcode == OP_DECODE:
        z, _ = decode_tensor(body, 0)
        return encode_tensor(backend.decode(z))
    if opcode == OP_DECODE_VJP:
        z, off = decode_tensor(body, 0)
        cot, _ = decode_tensor(body, off)
        return encode_tensor(backend.decode_vjp(z, cot))
    if opcode == OP_ENCODE:
        image, _ = decode_tensor(body, 0)
        return encode_tensor(backend.encode(image))
    raise ProtocolError(f"unexpected opcode {opcode}")


def _error_body(code: int, message: str) -> bytes:
    return struct.pack("<I", code) + encode_string(message)


def serve_connection(backend: Backend, conn) -> None:
    """Serve one lockstep connection until EOF.

    The first request must be metadata.  Backend and contract failures
    are reported as error frames and the connection stays usable;
    protocol failures poison the stream, so an error frame is sent
    best-effort and the connection closes.
    """
    stream = FrameStream(conn)
    saw_metadata = False
    try:
        while True:
            got = stream.recv_eof_ok()
            if got is None:
                return
            opcode, request_id, body = got
            if not saw_metadata and opcode != OP_METADATA:
                stream.send(OP_ERROR, request_id, _error_body(
                    ERR_PROTOCOL, "first request must be metadata"))
                return
            try:
                response = _handle_request(backend, opcode, body)
            except ProtocolError as exc:
                stream.send(OP_ERROR, request_id,
                            _error_body(ERR_PROTOCOL, str(exc)))
                return
            except (BackendError, ContractError, ValueError) as exc:
                stream.send(OP_ERROR, request_id,
                            _error_body(ERR_BACKEND, str(exc)))
                continue
            if opcode == OP_METADATA:
                saw_metadata = True
            stream.send(opcode, request_id, response)
    except ProtocolError:
        pass  # peer is gone or stream is desynchronized; nothing to salvage
    except OSError:
        pass
    finally:
        stream.close()


def serve_unix(backend: Backend, path: str, ready: threading.Event | None = None,
               stop: threading.Event | None = None) -> None:
    """Accept loop on a unix socket; one thread per connection."""
    listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    listener.bind(path)
    listener.listen()
    listener.settimeout(0.2)
    if ready is not None:
        ready.set()
    try:
        while stop is None or not stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            worker = threading.Thread(target=serve_connection,
                                      args=(backend, conn), daemon=True)
            worker.start()
    finally:
        listener.close()


def loopback(backend: Backend) -> WireBackend:
    """Attach ``backend`` to a client through an in-process socket pair.

    The returned proxy exercises the full codec and transport; closing
    it shuts down the serving thread.
    """
    client_sock, server_sock = socket.socketpair()
    thread = threading.Thread(target=serve_connection,
                              args=(backend, server_sock), daemon=True)
    thread.start()
    return WireBackend(client_sock)
