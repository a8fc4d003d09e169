"""Framed TCP study-push protocol, the stand-in for a real modality send.

Wire format (all integers little-endian):

    frame := u32 length | u8 type | payload[length - 1]

    types: 1=HELLO 2=DATA 3=COMMIT 4=ABORT 5=ACK 6=ERR

    HELLO  payload: u16 site_len | site | u16 user_len | user   (UTF-8)
    DATA   payload: one slice file (see dicomio)
    COMMIT payload: u32 expected slice count
    ABORT  payload: empty
    ACK    payload: StudyReceipt JSON (UTF-8)
    ERR    payload: u16 code | u16 msg_len | msg (UTF-8)

A session is HELLO, one or more DATA, then COMMIT. The server replies with
exactly one ACK or ERR per session. Any protocol violation or unparseable
slice aborts the whole session: nothing is registered (all-or-nothing).

Error codes: 1 protocol violation, 2 slice parse failure, 3 assembly failure,
4 client abort, 5 internal error.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading

from ..dicomio import assemble_volume, parse_slice
from ..errors import DicomError, HemoloopError, ProtocolViolation

FRAME_HELLO = 1
FRAME_DATA = 2
FRAME_COMMIT = 3
FRAME_ABORT = 4
FRAME_ACK = 5
FRAME_ERR = 6

ERR_PROTOCOL = 1
ERR_PARSE = 2
ERR_ASSEMBLY = 3
ERR_ABORTED = 4
ERR_INTERNAL = 5

MAX_FRAME = 256 * 1024 * 1024


def write_frame(sock: socket.socket, frame_type: int, payload: bytes = b""):
    sock.sendall(struct.pack("<IB", len(payload) + 1, frame_type) + payload)


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolViolation(f"bad frame length {length}")
    body = _read_exact(sock, length)
    if body is None:
        raise ProtocolViolation("connection closed mid-frame")
    return body[0], body[1:]


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def encode_hello(site: str, user: str) -> bytes:
    site_b = site.encode("utf-8")
    user_b = user.encode("utf-8")
    return (struct.pack("<H", len(site_b)) + site_b
            + struct.pack("<H", len(user_b)) + user_b)


def decode_hello(payload: bytes) -> tuple[str, str]:
    if len(payload) < 2:
        raise ProtocolViolation("short HELLO payload")
    (site_len,) = struct.unpack_from("<H", payload, 0)
    site_end = 2 + site_len
    if len(payload) < site_end + 2:
        raise ProtocolViolation("short HELLO payload")
    site = payload[2:site_end].decode("utf-8")
    (user_len,) = struct.unpack_from("<H", payload, site_end)
    user_end = site_end + 2 + user_len
    if len(payload) < user_end:
        raise ProtocolViolation("short HELLO payload")
    user = payload[site_end + 2:user_end].decode("utf-8")
    return site, user


def encode_err(code: int, message: str) -> bytes:
    msg = message.encode("utf-8")[:65535]
    return struct.pack("<HH", code, len(msg)) + msg


def decode_err(payload: bytes) -> tuple[int, str]:
    code, msg_len = struct.unpack_from("<HH", payload, 0)
    return code, payload[4:4 + msg_len].decode("utf-8", errors="replace")


class PushError(HemoloopError):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


class _PushHandler(socketserver.BaseRequestHandler):
    """One connection = one push session, driven as a strict state machine."""

    def handle(self):
        service = self.server.service
        state = "handshake"
        site = user = ""
        slices = []
        try:
            while True:
                frame = read_frame(self.request)
                if frame is None:
                    return  # client went away; nothing committed
                frame_type, payload = frame

                if frame_type == FRAME_ABORT:
                    write_frame(self.request, FRAME_ERR,
                                encode_err(ERR_ABORTED, "session aborted by client"))
                    return
                if frame_type == FRAME_HELLO:
                    if state != "handshake":
                        raise ProtocolViolation("HELLO after session start")
                    site, user = decode_hello(payload)
                    state = "receiving"
                elif frame_type == FRAME_DATA:
                    if state != "receiving":
                        raise ProtocolViolation("DATA before HELLO")
                    slices.append(parse_slice(payload))
                elif frame_type == FRAME_COMMIT:
                    if state != "receiving":
                        raise ProtocolViolation("COMMIT before HELLO")
                    if not slices:
                        raise ProtocolViolation("COMMIT with no slices")
                    (expected,) = struct.unpack("<I", payload)
                    if expected != len(slices):
                        raise ProtocolViolation(
                            f"COMMIT expected {expected} slices, got {len(slices)}"
                        )
                    volume = assemble_volume(slices)
                    receipt = service.commit_study(volume, len(slices), site, user)
                    write_frame(self.request, FRAME_ACK,
                                json.dumps(receipt, sort_keys=True).encode())
                    return
                else:
                    raise ProtocolViolation(f"unexpected frame type {frame_type}")
        except ProtocolViolation as exc:
            self._err(ERR_PROTOCOL, str(exc))
        except DicomError as exc:
            self._err(ERR_PARSE, str(exc))
        except HemoloopError as exc:
            self._err(ERR_ASSEMBLY, str(exc))
        except Exception as exc:  # noqa: BLE001 - session must answer something
            self._err(ERR_INTERNAL, f"{type(exc).__name__}: {exc}")

    def _err(self, code: int, message: str):
        try:
            write_frame(self.request, FRAME_ERR, encode_err(code, message))
            # Drain whatever the client is still sending so it can read the
            # error instead of dying on a broken pipe mid-upload.
            self.request.settimeout(2.0)
            while self.request.recv(65536):
                pass
        except OSError:
            pass


class PushServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, service):
        super().__init__(address, _PushHandler)
        self.service = service

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


# --- client side ----------------------------------------------------------------

def push_study(
    address: tuple[str, int],
    slice_files: list[bytes],
    site: str,
    user: str,
    timeout: float = 60.0,
) -> dict:
    """Push one study; returns the receipt or raises PushError."""
    with socket.create_connection(address, timeout=timeout) as sock:
        try:
            write_frame(sock, FRAME_HELLO, encode_hello(site, user))
            for blob in slice_files:
                write_frame(sock, FRAME_DATA, blob)
            write_frame(sock, FRAME_COMMIT, struct.pack("<I", len(slice_files)))
        except (BrokenPipeError, ConnectionResetError):
            pass  # server rejected mid-upload; its ERR frame is read below
        try:
            frame = read_frame(sock)
        except (ConnectionResetError, ProtocolViolation) as exc:
            raise PushError(ERR_INTERNAL, f"connection lost mid-reply: {exc}")
        if frame is None:
            raise PushError(ERR_INTERNAL, "server closed connection without reply")
        frame_type, payload = frame
        if frame_type == FRAME_ACK:
            return json.loads(payload.decode())
        if frame_type == FRAME_ERR:
            code, message = decode_err(payload)
            raise PushError(code, message)
        raise PushError(ERR_PROTOCOL, f"unexpected reply frame {frame_type}")
