"""MQTT 3.1.1 publish-side subset.

Supported packets: CONNECT, CONNACK, PUBLISH (QoS 0/1), PUBACK, PINGREQ,
PINGRESP, DISCONNECT. Anything else closes the connection.
"""

from __future__ import annotations

import asyncio
import collections
import logging
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

log = logging.getLogger(__name__)


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


CONNACK_ACCEPTED = 0
CONNACK_BAD_PROTOCOL = 1
CONNACK_ID_REJECTED = 2
CONNACK_BAD_CREDENTIALS = 4

PINGREQ_BYTES = b"\xc0\x00"
PINGRESP_BYTES = b"\xd0\x00"
DISCONNECT_BYTES = b"\xe0\x00"


class MqttProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Connect:
    client_id: str
    keepalive: int = 60
    username: Optional[str] = None
    password: Optional[str] = None
    clean_session: bool = True
    protocol_name: str = "MQTT"
    protocol_level: int = 4


@dataclass(frozen=True)
class MqttPublish:
    topic: str
    payload: bytes
    qos: int = 0
    packet_id: Optional[int] = None
    dup: bool = False
    retain: bool = False


# -- primitives -------------------------------------------------------------


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= 268_435_455:
        raise MqttProtocolError("remaining length out of range")
    out = bytearray()
    while True:
        byte, n = n % 128, n // 128
        out.append(byte | (0x80 if n else 0))
        if not n:
            return bytes(out)


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("!H", len(raw)) + raw


def _bin(b: bytes) -> bytes:
    return struct.pack("!H", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MqttProtocolError("packet truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def binary(self) -> bytes:
        return self.take(self.u16())

    def string(self) -> str:
        try:
            return self.binary().decode("utf-8")
        except UnicodeDecodeError:
            raise MqttProtocolError("invalid UTF-8 string") from None

    def rest(self) -> bytes:
        out = self.data[self.pos:]
        self.pos = len(self.data)
        return out


def split_packet(buf: bytes | bytearray) -> Optional[tuple[int, int, bytes, int]]:
    """Return ``(type, flags, body, consumed)`` for the first full packet, or None."""
    if len(buf) < 2:
        return None
    first = buf[0]
    mult, length, i = 1, 0, 1
    while True:
        if i >= len(buf):
            return None
        byte = buf[i]
        length += (byte & 0x7F) * mult
        i += 1
        if not byte & 0x80:
            break
        mult *= 128
        if i > 4:
            raise MqttProtocolError("malformed remaining length")
    if len(buf) < i + length:
        return None
    return first >> 4, first & 0x0F, bytes(buf[i:i + length]), i + length


# -- encode -----------------------------------------------------------------


def encode_connect(c: Connect) -> bytes:
    flags = 0x02 if c.clean_session else 0
    payload = _str(c.client_id)
    if c.username is not None:
        flags |= 0x80
        payload += _str(c.username)
    if c.password is not None:
        flags |= 0x40
        payload += _bin(c.password.encode("utf-8"))
    body = _str(c.protocol_name) + bytes([c.protocol_level, flags]) + struct.pack("!H", c.keepalive) + payload
    return bytes([PacketType.CONNECT << 4]) + encode_remaining_length(len(body)) + body


def encode_connack(return_code: int, session_present: bool = False) -> bytes:
    return bytes([PacketType.CONNACK << 4, 2, 1 if session_present else 0, return_code])


def encode_publish(p: MqttPublish) -> bytes:
    if p.qos not in (0, 1, 2):
        raise MqttProtocolError("invalid QoS")
    flags = (0x08 if p.dup else 0) | (p.qos << 1) | (0x01 if p.retain else 0)
    body = _str(p.topic)
    if p.qos > 0:
        if not p.packet_id:
            raise MqttProtocolError("QoS > 0 needs a non-zero packet id")
        body += struct.pack("!H", p.packet_id)
    body += p.payload
    return bytes([(PacketType.PUBLISH << 4) | flags]) + encode_remaining_length(len(body)) + body


def encode_puback(packet_id: int) -> bytes:
    return bytes([PacketType.PUBACK << 4, 2]) + struct.pack("!H", packet_id)


# -- decode -----------------------------------------------------------------


def parse_connect(body: bytes) -> Connect:
    r = _Reader(body)
    name = r.string()
    level = r.u8()
    flags = r.u8()
    if flags & 0x01:
        raise MqttProtocolError("reserved connect flag set")
    keepalive = r.u16()
    client_id = r.string()
    if flags & 0x04:  # will topic + message: parsed and ignored
        r.string()
        r.binary()
    username = r.string() if flags & 0x80 else None
    password = r.binary().decode("utf-8", "replace") if flags & 0x40 else None
    return Connect(client_id, keepalive, username, password, bool(flags & 0x02), name, level)


def parse_publish(flags: int, body: bytes) -> MqttPublish:
    qos = (flags >> 1) & 0x03
    if qos == 3:
        raise MqttProtocolError("QoS 3 is invalid")
    r = _Reader(body)
    topic = r.string()
    packet_id = r.u16() if qos > 0 else None
    return MqttPublish(topic, r.rest(), qos, packet_id, bool(flags & 0x08), bool(flags & 0x01))


# -- server-side session ----------------------------------------------------


class MqttSession:
    """Byte-level state machine for one device connection.

    ``feed`` consumes received bytes and returns frames to send back. After a
    rejection ``closed`` is set and the transport should drop the connection.
    QoS 1 publishes refused because the queue is full are held, in order, and
    retried by ``retry_deferred``; their PUBACK goes out only once enqueued.
    """

    def __init__(self, gateway, source: str = "mqtt"):
        self.gateway = gateway
        self.source = source
        self.connect: Optional[Connect] = None
        self.closed = False
        self.close_reason: Optional[str] = None
        self._buf = bytearray()
        self._deferred: list[MqttPublish] = []
        self.acks = collections.deque(maxlen=1024)  # recent acks, for inspection

    @property
    def connected(self) -> bool:
        return self.connect is not None and not self.closed

    @property
    def keepalive(self) -> int:
        return self.connect.keepalive if self.connect else 0

    def _close(self, reason: str) -> None:
        self.closed = True
        self.close_reason = reason
        log.info("mqtt %s: closing connection: %s", self.source, reason)

    def feed(self, data: bytes) -> list[bytes]:
        out: list[bytes] = []
        if self.closed:
            return out
        self._buf.extend(data)
        while not self.closed:
            try:
                split = split_packet(self._buf)
            except MqttProtocolError as exc:
                self._close(str(exc))
                break
            if split is None:
                break
            ptype, flags, body, consumed = split
            del self._buf[:consumed]
            try:
                out.extend(self._dispatch(ptype, flags, body))
            except MqttProtocolError as exc:
                self._close(str(exc))
        return out

    def _dispatch(self, ptype: int, flags: int, body: bytes) -> list[bytes]:
        if self.connect is None:
            if ptype != PacketType.CONNECT:
                raise MqttProtocolError("first packet must be CONNECT")
            c = parse_connect(body)
            if c.protocol_name != "MQTT" or c.protocol_level != 4:
                self._close("unsupported protocol level")
                return [encode_connack(CONNACK_BAD_PROTOCOL)]
            if not c.client_id and not c.clean_session:
                self._close("empty client id requires clean session")
                return [encode_connack(CONNACK_ID_REJECTED)]
            self.connect = c
            return [encode_connack(CONNACK_ACCEPTED)]
        if ptype == PacketType.CONNECT:
            raise MqttProtocolError("second CONNECT")
        if ptype == PacketType.PUBLISH:
            return self._publish(parse_publish(flags, body))
        if ptype == PacketType.PINGREQ:
            return [PINGRESP_BYTES]
        if ptype == PacketType.DISCONNECT:
            self._close("client disconnect")
            return []
        raise MqttProtocolError(f"unsupported packet type {ptype}")

    def _publish(self, pub: MqttPublish) -> list[bytes]:
        if self._deferred:
            self._deferred.append(pub)
            return []
        return self._try(pub)

    def _try(self, pub: MqttPublish) -> list[bytes]:
        ack = self.gateway.handle_mqtt_publish(pub, self.source, self.connect.password)
        if ack.code == "DEFER":
            self._deferred.append(pub)
            return []
        self.acks.append(ack)
        if ack.code == "DISCONNECT":
            self._close(ack.reason)
            return []
        return [encode_puback(pub.packet_id)] if ack.code == "PUBACK" else []

    def retry_deferred(self) -> list[bytes]:
        out: list[bytes] = []
        while self._deferred and not self.closed:
            pub = self._deferred.pop(0)
            ack = self.gateway.handle_mqtt_publish(pub, self.source, self.connect.password)
            if ack.code == "DEFER":
                self._deferred.insert(0, pub)
                break
            self.acks.append(ack)
            if ack.code == "DISCONNECT":
                self._close(ack.reason)
                break
            if ack.code == "PUBACK":
                out.append(encode_puback(pub.packet_id))
        return out

    @property
    def deferred_count(self) -> int:
        return len(self._deferred)


# -- asyncio transport ------------------------------------------------------


async def _serve_connection(gateway, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                            retry_interval: float) -> None:
    peer = writer.get_extra_info("peername")
    session = MqttSession(gateway, f"mqtt:{peer[0]}:{peer[1]}" if peer else "mqtt")
    try:
        while not session.closed:
            timeout = retry_interval if session.deferred_count else (
                session.keepalive * 1.5 if session.keepalive else None
            )
            try:
                data = await asyncio.wait_for(reader.read(65536), timeout)
            except asyncio.TimeoutError:
                if session.deferred_count:
                    frames = session.retry_deferred()
                    writer.write(b"".join(frames))
                    await writer.drain()
                    continue
                break  # keepalive expired
            if not data:
                break
            frames = session.feed(data)
            if frames:
                writer.write(b"".join(frames))
                await writer.drain()
    except (ConnectionError, asyncio.IncompleteReadError):
        pass
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass


async def start_mqtt_server(gateway, host: str = "127.0.0.1", port: int = 1883,
                            retry_interval: float = 0.05) -> asyncio.AbstractServer:
    return await asyncio.start_server(
        lambda r, w: _serve_connection(gateway, r, w, retry_interval), host, port
    )


# -- blocking client (simulator / tests) -------------------------------------


class MqttClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._buf = bytearray()
        self._next_id = 1

    def _read_packet(self) -> tuple[int, int, bytes]:
        while True:
            split = split_packet(self._buf)
            if split is not None:
                ptype, flags, body, consumed = split
                del self._buf[:consumed]
                return ptype, flags, body
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("connection closed by broker")
            self._buf.extend(chunk)

    def connect(self, client_id: str, username: str | None = None, password: str | None = None,
                keepalive: int = 60) -> int:
        self.sock.sendall(encode_connect(Connect(client_id, keepalive, username, password)))
        ptype, _, body = self._read_packet()
        if ptype != PacketType.CONNACK:
            raise MqttProtocolError("expected CONNACK")
        return body[1]

    def publish(self, topic: str, payload: bytes, qos: int = 1) -> bool:
        """Send a PUBLISH; for QoS 1 wait for the matching PUBACK."""
        pid = None
        if qos > 0:
            pid = self._next_id
            self._next_id = self._next_id % 65535 + 1
        self.sock.sendall(encode_publish(MqttPublish(topic, payload, qos, pid)))
        if qos == 0:
            return True
        try:
            while True:
                ptype, _, body = self._read_packet()
                if ptype == PacketType.PUBACK and struct.unpack("!H", body)[0] == pid:
                    return True
        except (ConnectionError, socket.timeout, OSError):
            return False

    def ping(self) -> bool:
        self.sock.sendall(PINGREQ_BYTES)
        ptype, _, _ = self._read_packet()
        return ptype == PacketType.PINGRESP

    def disconnect(self) -> None:
        try:
            self.sock.sendall(DISCONNECT_BYTES)
        except OSError:
            pass
        self.sock.close()
