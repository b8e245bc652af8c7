"""Wire protocol for the teleoperation service.

Messages are JSON objects carrying ``v`` (protocol version), ``type`` and
``seq``.  Two framings share one port, distinguished by the first bytes of
the connection:

* raw stream: ASCII decimal byte-length, newline, then the JSON payload
  (trivial to speak from any language, inspectable with netcat);
* WebSocket: a standard HTTP upgrade (first bytes ``GET ``), text frames
  carrying the same JSON payloads, for browser clients.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct

PROTOCOL_VERSION = 1
MAX_MESSAGE_BYTES = 1 << 20

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class ProtocolError(ValueError):
    """Framing violation: the connection cannot continue."""


class ConnectionClosed(Exception):
    pass


def encode_message(msg: dict) -> bytes:
    payload = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return f"{len(payload)}\n".encode("ascii") + payload


def make_message(msg_type: str, seq: int, **fields) -> dict:
    return {"v": PROTOCOL_VERSION, "type": msg_type, "seq": seq, **fields}


def parse_message(payload: bytes) -> dict:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"not valid JSON: {e}") from e
    if not isinstance(msg, dict) or "type" not in msg:
        raise ProtocolError("message must be an object with a 'type' field")
    return msg


class _SocketReader:
    """Buffered reader that can start from pre-read bytes."""

    def __init__(self, sock: socket.socket, initial: bytes = b""):
        self.sock = sock
        self.buffer = bytearray(initial)

    def _fill(self) -> None:
        chunk = self.sock.recv(65536)
        if not chunk:
            raise ConnectionClosed()
        self.buffer.extend(chunk)

    def read_until(self, sep: bytes, limit: int = 4096) -> bytes:
        while sep not in self.buffer:
            if len(self.buffer) > limit:
                raise ProtocolError("separator not found within limit")
            self._fill()
        idx = self.buffer.index(sep)
        out = bytes(self.buffer[:idx])
        del self.buffer[: idx + len(sep)]
        return out

    def read_exactly(self, n: int) -> bytes:
        while len(self.buffer) < n:
            self._fill()
        out = bytes(self.buffer[:n])
        del self.buffer[:n]
        return out


class RawTransport:
    """Length-prefixed JSON framing."""

    def __init__(self, sock: socket.socket, initial: bytes = b""):
        self.sock = sock
        self.reader = _SocketReader(sock, initial)

    def recv_message(self) -> dict:
        header = self.reader.read_until(b"\n", limit=32)
        try:
            length = int(header.decode("ascii").strip())
        except (UnicodeDecodeError, ValueError) as e:
            raise ProtocolError(f"bad length prefix {header!r}") from e
        if not 0 <= length <= MAX_MESSAGE_BYTES:
            raise ProtocolError(f"message length {length} out of range")
        return parse_message(self.reader.read_exactly(length))

    def send_message(self, msg: dict) -> None:
        self.sock.sendall(encode_message(msg))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def websocket_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


class WebSocketTransport:
    """Server side of RFC 6455, text frames only, no extensions."""

    def __init__(self, sock: socket.socket, initial: bytes = b""):
        self.sock = sock
        self.reader = _SocketReader(sock, initial)
        self._handshake()

    def _handshake(self) -> None:
        request = self.reader.read_until(b"\r\n\r\n", limit=16384)
        lines = request.decode("latin-1").split("\r\n")
        headers = {}
        for line in lines[1:]:
            if ":" in line:
                name, value = line.split(":", 1)
                headers[name.strip().lower()] = value.strip()
        key = headers.get("sec-websocket-key")
        if key is None or "websocket" not in headers.get("upgrade", "").lower():
            self.sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            raise ProtocolError("not a websocket upgrade request")
        response = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {websocket_accept_key(key)}\r\n\r\n"
        )
        self.sock.sendall(response.encode("ascii"))

    def _read_frame(self) -> tuple[int, bytes]:
        b0, b1 = self.reader.read_exactly(2)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", self.reader.read_exactly(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", self.reader.read_exactly(8))
        if length > MAX_MESSAGE_BYTES:
            raise ProtocolError(f"websocket frame too large: {length}")
        mask = self.reader.read_exactly(4) if masked else None
        payload = bytearray(self.reader.read_exactly(length))
        if mask:
            for i in range(len(payload)):
                payload[i] ^= mask[i % 4]
        return opcode, bytes(payload)

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        header = bytearray([0x80 | opcode])
        n = len(payload)
        if n < 126:
            header.append(n)
        elif n < (1 << 16):
            header.append(126)
            header.extend(struct.pack(">H", n))
        else:
            header.append(127)
            header.extend(struct.pack(">Q", n))
        self.sock.sendall(bytes(header) + payload)

    def recv_message(self) -> dict:
        while True:
            opcode, payload = self._read_frame()
            if opcode in (0x1, 0x2):
                return parse_message(payload)
            if opcode == 0x8:  # close
                try:
                    self._send_frame(0x8, payload[:2])
                except OSError:
                    pass
                raise ConnectionClosed()
            if opcode == 0x9:  # ping
                self._send_frame(0xA, payload)
            # pong (0xA) and continuations are ignored

    def send_message(self, msg: dict) -> None:
        payload = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self._send_frame(0x1, payload)

    def close(self) -> None:
        try:
            self._send_frame(0x8, struct.pack(">H", 1000))
        except OSError:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def open_transport(sock: socket.socket):
    """Sniff the first bytes: HTTP upgrade means WebSocket, else raw."""
    first = sock.recv(4, socket.MSG_PEEK)
    if first.startswith(b"GET"):
        return WebSocketTransport(sock)
    return RawTransport(sock)


class RawClient:
    """Minimal blocking client for the raw framing (tests, headless replay)."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.transport = RawTransport(self.sock)
        self.seq = 0

    def send(self, msg_type: str, **fields) -> None:
        self.transport.send_message(make_message(msg_type, self.seq, **fields))
        self.seq += 1

    def recv(self) -> dict:
        return self.transport.recv_message()

    def recv_type(self, msg_type: str, limit: int = 1000) -> dict:
        for _ in range(limit):
            msg = self.recv()
            if msg["type"] == msg_type:
                return msg
        raise ProtocolError(f"no {msg_type!r} message within {limit} messages")

    def close(self) -> None:
        self.transport.close()
