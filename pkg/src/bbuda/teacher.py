"""Black-box access to a frozen source model.

A teacher is reachable only through :meth:`TeacherEndpoint.predict`, which
returns a :class:`ProbMap`, and :meth:`TeacherEndpoint.health`. Two backends
exist: :class:`InProcessTeacher` wraps a checkpoint loaded in this process,
:class:`RemoteTeacher` speaks the frame protocol to :func:`serve`.

Frame layout (little-endian)::

    u32 length      bytes that follow: 1 (type) + len(payload) + 4 (crc)
    u8  type        1 PREDICT, 2 PROBMAP, 3 ERROR, 4 HEALTH, 5 HEALTH_OK
    payload
    u32 crc32       over type byte + payload

    PREDICT   u16 C_in, u16 H, u16 W, C_in*H*W f32
    PROBMAP   u16 C_out, u16 H, u16 W, C_out*H*W f32
    ERROR     u16 code, UTF-8 message
    HEALTH    (empty)
    HEALTH_OK u16 protocol version, u16 num_classes
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import struct
import threading
import time
import zlib
from typing import Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint
from .probmap import ProbMap, ProbMapError
from .tensor import DTYPE, Tensor, softmax

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
PREDICT, PROBMAP, ERROR, HEALTH, HEALTH_OK = 1, 2, 3, 4, 5
MAX_SIDE = 4096
MAX_CHANNELS = 64
MAX_FRAME = 1 + 6 + MAX_CHANNELS * 4 * 1024 * 1024 + 4
WIRE_TOL = 1e-4
TIMEOUT_ENV = "BBUDA_TEACHER_TIMEOUT_MS"
DEFAULT_TIMEOUT_MS = 10_000

# ERROR frame codes
ERR_MALFORMED = 1
ERR_CHECKSUM = 2
ERR_BAD_INPUT = 3
ERR_INTERNAL = 4


class TeacherError(Exception):
    pass


class TeacherTimeoutError(TeacherError):
    pass


class TeacherConnectionError(TeacherError):
    pass


class MalformedResponseError(TeacherError):
    pass


class RemoteError(TeacherError):
    def __init__(self, code: int, message: str):
        super().__init__(f"teacher error {code}: {message}")
        self.code = code


class FrameChecksumError(ValueError):
    pass


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

def encode_frame(ftype: int, payload: bytes) -> bytes:
    body = bytes([ftype]) + payload
    return struct.pack("<I", len(body) + 4) + body + struct.pack("<I", zlib.crc32(body))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Tuple[int, bytes]:
    """Read one frame; raises FrameChecksumError on CRC mismatch.

    The whole frame is consumed even when the checksum fails, so the
    stream stays aligned.
    """
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if length < 5 or length > MAX_FRAME:
        raise ValueError(f"frame length {length} out of range")
    data = _recv_exact(sock, length)
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise FrameChecksumError("frame checksum mismatch")
    return body[0], body[1:]


def encode_array(arr: np.ndarray) -> bytes:
    c, h, w = arr.shape
    return struct.pack("<HHH", c, h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < 6:
        raise ValueError("array payload too short")
    c, h, w = struct.unpack_from("<HHH", payload)
    if len(payload) != 6 + 4 * c * h * w:
        raise ValueError(f"array payload length {len(payload)} does not match {c}x{h}x{w}")
    return np.frombuffer(payload, dtype="<f4", offset=6).reshape(c, h, w).astype(DTYPE)


def encode_error(code: int, message: str) -> bytes:
    return encode_frame(ERROR, struct.pack("<H", code) + message.encode("utf-8"))


def _check_image(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=DTYPE)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ValueError(f"predict takes a single image (1, C, H, W), got shape {arr.shape}")
    if arr.shape[2] > MAX_SIDE or arr.shape[3] > MAX_SIDE:
        raise ValueError(f"spatial size {arr.shape[2:]} exceeds protocol limit {MAX_SIDE}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return np.ascontiguousarray(arr, dtype=DTYPE)


# ---------------------------------------------------------------------------
# endpoints
# ---------------------------------------------------------------------------

class TeacherEndpoint:
    """Uniform black-box predictor interface."""

    def predict(self, image) -> ProbMap:
        raise NotImplementedError

    def health(self) -> dict:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessTeacher(TeacherEndpoint):
    """Frozen checkpoint evaluated in this process.

    The network is held in a name-mangled attribute and is never returned.
    """

    def __init__(self, checkpoint_path):
        net = load_checkpoint(checkpoint_path).build_net().eval()
        for p in net.parameters():
            p.requires_grad = False
        self.__net = net
        self.__num_classes = net.config.num_classes

    def predict(self, image) -> ProbMap:
        arr = _check_image(image)
        probs = softmax(self.__net.forward(arr)).data[0]
        return ProbMap(probs)

    def health(self) -> dict:
        return {"version": PROTOCOL_VERSION, "num_classes": self.__num_classes}


class RemoteTeacher(TeacherEndpoint):
    """Client for a served teacher; one persistent connection, serialised use."""

    def __init__(self, host: str, port: int, timeout_ms: Optional[int] = None, max_retries: int = 3):
        if timeout_ms is None:
            timeout_ms = int(os.environ.get(TIMEOUT_ENV, DEFAULT_TIMEOUT_MS))
        self.host, self.port = host, int(port)
        self.timeout_ms = int(timeout_ms)
        self.max_retries = int(max_retries)
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    @classmethod
    def from_address(cls, address: str, **kw) -> "RemoteTeacher":
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"expected HOST:PORT, got {address!r}")
        return cls(host, int(port), **kw)

    def _connect(self) -> socket.socket:
        if self._sock is None:
            s = socket.create_connection((self.host, self.port), timeout=self.timeout_ms / 1000)
            s.settimeout(self.timeout_ms / 1000)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = s
        return self._sock

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _roundtrip(self, frame: bytes) -> Tuple[int, bytes]:
        last: Optional[Exception] = None
        with self._lock:
            for attempt in range(self.max_retries + 1):
                try:
                    sock = self._connect()
                    sock.sendall(frame)
                    return read_frame(sock)
                except FrameChecksumError as exc:
                    self._drop()
                    raise MalformedResponseError(str(exc)) from None
                except socket.timeout as exc:
                    last = exc
                except (ConnectionError, OSError) as exc:
                    last = exc
                self._drop()
                if attempt < self.max_retries:
                    time.sleep(min(0.05 * 2 ** attempt, 1.0))
        if isinstance(last, socket.timeout):
            raise TeacherTimeoutError(
                f"no response from {self.host}:{self.port} after {self.max_retries + 1} attempts")
        raise TeacherConnectionError(f"cannot reach teacher at {self.host}:{self.port}: {last}")

    def _raise_error(self, payload: bytes):
        code = struct.unpack_from("<H", payload)[0] if len(payload) >= 2 else -1
        raise RemoteError(code, payload[2:].decode("utf-8", "replace"))

    def predict(self, image) -> ProbMap:
        arr = _check_image(image)
        ftype, payload = self._roundtrip(encode_frame(PREDICT, encode_array(arr[0])))
        if ftype == ERROR:
            self._raise_error(payload)
        if ftype != PROBMAP:
            raise MalformedResponseError(f"expected PROBMAP frame, got type {ftype}")
        try:
            values = decode_array(payload)
            pm = ProbMap(values, tol=WIRE_TOL)
        except (ValueError, ProbMapError) as exc:
            raise MalformedResponseError(str(exc)) from None
        if pm.shape[1:] != arr.shape[2:]:
            raise MalformedResponseError(f"response spatial size {pm.shape[1:]} != request {arr.shape[2:]}")
        return pm

    def health(self) -> dict:
        ftype, payload = self._roundtrip(encode_frame(HEALTH, b""))
        if ftype == ERROR:
            self._raise_error(payload)
        if ftype != HEALTH_OK or len(payload) != 4:
            raise MalformedResponseError(f"bad HEALTH_OK frame (type {ftype})")
        version, ncls = struct.unpack("<HH", payload)
        return {"version": version, "num_classes": ncls}

    def close(self) -> None:
        with self._lock:
            self._drop()


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        teacher: InProcessTeacher = self.server.teacher
        while True:
            try:
                ftype, payload = read_frame(sock)
            except FrameChecksumError:
                sock.sendall(encode_error(ERR_CHECKSUM, "frame checksum mismatch"))
                continue
            except ConnectionError:
                return
            except (ValueError, OSError) as exc:
                try:
                    sock.sendall(encode_error(ERR_MALFORMED, str(exc)))
                except OSError:
                    pass
                return
            sock.sendall(self._respond(teacher, ftype, payload))

    @staticmethod
    def _respond(teacher: "InProcessTeacher", ftype: int, payload: bytes) -> bytes:
        if ftype == HEALTH:
            h = teacher.health()
            return encode_frame(HEALTH_OK, struct.pack("<HH", h["version"], h["num_classes"]))
        if ftype != PREDICT:
            return encode_error(ERR_MALFORMED, f"unexpected frame type {ftype}")
        try:
            image = decode_array(payload)
            pm = teacher.predict(image[None])
        except ValueError as exc:
            return encode_error(ERR_BAD_INPUT, str(exc))
        except Exception as exc:  # noqa: BLE001 - report, keep serving
            log.exception("predict failed")
            return encode_error(ERR_INTERNAL, f"{type(exc).__name__}: {exc}")
        return encode_frame(PROBMAP, encode_array(pm.values))


class TeacherServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, checkpoint_path, address: Tuple[str, int]):
        self.teacher = InProcessTeacher(checkpoint_path)
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="teacher-server", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def parse_bind(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {address!r}")
    return host or "127.0.0.1", int(port)


def serve(checkpoint_path, bind_address: str) -> None:
    """Serve predictions forever on ``bind_address`` (``HOST:PORT``)."""
    server = TeacherServer(checkpoint_path, parse_bind(bind_address))
    log.info("teacher listening on %s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
