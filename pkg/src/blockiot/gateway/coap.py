"""CoAP (RFC 7252) subset: confirmable POST with piggybacked ACK.

No observe, no blockwise transfer. Non-confirmable requests and CoAP pings
are answered with RST.
"""

from __future__ import annotations

import asyncio
import logging
import random
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

log = logging.getLogger(__name__)


class CoapType(IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


def make_code(cls: int, detail: int) -> int:
    return (cls << 5) | detail


def code_str(code: int) -> str:
    return f"{code >> 5}.{code & 0x1F:02d}"


def parse_code(text: str) -> int:
    cls, detail = text.split(".")
    return make_code(int(cls), int(detail))


EMPTY = 0
GET, POST, PUT, DELETE = 1, 2, 3, 4

OPT_URI_PATH = 11
OPT_CONTENT_FORMAT = 12
OPT_URI_QUERY = 15
CONTENT_FORMAT_JSON = 50
CONTENT_FORMAT_TEXT = 0


class CoapFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CoapMessage:
    mtype: CoapType
    code: int
    message_id: int
    token: bytes = b""
    options: tuple[tuple[int, bytes], ...] = field(default_factory=tuple)
    payload: bytes = b""

    def _opt(self, number: int) -> list[str]:
        return [v.decode("utf-8", "replace") for n, v in self.options if n == number]

    @property
    def uri_path(self) -> list[str]:
        return self._opt(OPT_URI_PATH)

    @property
    def uri_query(self) -> list[str]:
        return self._opt(OPT_URI_QUERY)

    @property
    def is_request(self) -> bool:
        return 1 <= self.code <= 31


def request(method: int, path: str, payload: bytes = b"", message_id: int | None = None,
            token: bytes | None = None, query: list[str] | None = None,
            mtype: CoapType = CoapType.CON) -> CoapMessage:
    opts = [(OPT_URI_PATH, seg.encode("utf-8")) for seg in path.strip("/").split("/") if seg]
    if payload:
        opts.append((OPT_CONTENT_FORMAT, bytes([CONTENT_FORMAT_JSON])))
    opts += [(OPT_URI_QUERY, q.encode("utf-8")) for q in query or ()]
    return CoapMessage(
        mtype, method,
        random.randrange(0x10000) if message_id is None else message_id,
        random.randbytes(4) if token is None else token,
        tuple(opts), payload,
    )


def _ext(value: int) -> tuple[int, bytes]:
    if value < 13:
        return value, b""
    if value < 269:
        return 13, bytes([value - 13])
    if value < 65805:
        return 14, struct.pack("!H", value - 269)
    raise CoapFormatError("option delta/length too large")


def encode(msg: CoapMessage) -> bytes:
    if len(msg.token) > 8:
        raise CoapFormatError("token longer than 8 bytes")
    out = bytearray([0x40 | (int(msg.mtype) << 4) | len(msg.token), msg.code])
    out += struct.pack("!H", msg.message_id) + msg.token
    prev = 0
    for number, value in sorted(msg.options, key=lambda o: o[0]):
        dn, dx = _ext(number - prev)
        ln, lx = _ext(len(value))
        out.append((dn << 4) | ln)
        out += dx + lx + value
        prev = number
    if msg.payload:
        out += b"\xff" + msg.payload
    return bytes(out)


def decode(data: bytes) -> CoapMessage:
    if len(data) < 4:
        raise CoapFormatError("datagram shorter than the CoAP header")
    b0, code, mid = data[0], data[1], struct.unpack("!H", data[2:4])[0]
    if b0 >> 6 != 1:
        raise CoapFormatError("unsupported CoAP version")
    mtype = CoapType((b0 >> 4) & 0x03)
    tkl = b0 & 0x0F
    if tkl > 8:
        raise CoapFormatError("token length > 8")
    if len(data) < 4 + tkl:
        raise CoapFormatError("truncated token")
    token = data[4:4 + tkl]
    pos, number, options = 4 + tkl, 0, []
    payload = b""
    while pos < len(data):
        byte = data[pos]
        pos += 1
        if byte == 0xFF:
            payload = data[pos:]
            if not payload:
                raise CoapFormatError("payload marker without payload")
            break
        delta, length = byte >> 4, byte & 0x0F
        vals = []
        for nib in (delta, length):
            if nib == 13:
                if pos >= len(data):
                    raise CoapFormatError("truncated option")
                vals.append(data[pos] + 13)
                pos += 1
            elif nib == 14:
                if pos + 2 > len(data):
                    raise CoapFormatError("truncated option")
                vals.append(struct.unpack("!H", data[pos:pos + 2])[0] + 269)
                pos += 2
            elif nib == 15:
                raise CoapFormatError("reserved option nibble")
            else:
                vals.append(nib)
        number += vals[0]
        if pos + vals[1] > len(data):
            raise CoapFormatError("truncated option value")
        options.append((number, data[pos:pos + vals[1]]))
        pos += vals[1]
    if code == EMPTY and (tkl or options or payload):
        raise CoapFormatError("empty message with content")
    return CoapMessage(mtype, code, mid, token, tuple(options), payload)


class CoapEndpoint:
    """Datagram-in, datagram-out handler in front of the gateway."""

    def __init__(self, gateway):
        self.gateway = gateway

    def handle_datagram(self, data: bytes, source: str) -> Optional[bytes]:
        try:
            msg = decode(data)
        except CoapFormatError as exc:
            if len(data) >= 4 and data[0] >> 6 == 1:
                mid = struct.unpack("!H", data[2:4])[0]
                log.debug("coap %s: format error %s", source, exc)
                return encode(CoapMessage(CoapType.RST, EMPTY, mid))
            return None
        if msg.mtype in (CoapType.ACK, CoapType.RST):
            return None
        if msg.mtype is CoapType.NON or msg.code == EMPTY or not msg.is_request:
            return encode(CoapMessage(CoapType.RST, EMPTY, msg.message_id))
        ack = self.gateway.handle_coap_post(msg, source)
        reply_payload = b"" if ack.accepted else (ack.reason or "").encode("utf-8")[:512]
        opts = ((OPT_CONTENT_FORMAT, bytes([CONTENT_FORMAT_TEXT])),) if reply_payload else ()
        return encode(CoapMessage(CoapType.ACK, parse_code(str(ack.code)), msg.message_id,
                                  msg.token, opts, reply_payload))


class _CoapProtocol(asyncio.DatagramProtocol):
    def __init__(self, endpoint: CoapEndpoint):
        self.endpoint = endpoint
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        reply = self.endpoint.handle_datagram(data, f"coap:{addr[0]}:{addr[1]}")
        if reply is not None:
            self.transport.sendto(reply, addr)


async def start_coap_server(gateway, host: str = "127.0.0.1", port: int = 5683):
    loop = asyncio.get_running_loop()
    transport, _ = await loop.create_datagram_endpoint(
        lambda: _CoapProtocol(CoapEndpoint(gateway)), local_addr=(host, port)
    )
    return transport


class CoapClient:
    """Blocking confirmable-POST client with exponential retransmission."""

    def __init__(self, host: str, port: int, ack_timeout: float = 2.0, max_retransmit: int = 4):
        self.addr = (host, port)
        self.ack_timeout = ack_timeout
        self.max_retransmit = max_retransmit
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._mid = random.randrange(0x10000)

    def next_mid(self) -> int:
        self._mid = (self._mid + 1) % 0x10000
        return self._mid

    def send(self, msg: CoapMessage) -> Optional[CoapMessage]:
        data = encode(msg)
        timeout = self.ack_timeout * random.uniform(1.0, 1.5)
        for _ in range(self.max_retransmit + 1):
            self.sock.sendto(data, self.addr)
            self.sock.settimeout(timeout)
            try:
                while True:
                    reply = decode(self.sock.recv(2048))
                    if reply.message_id == msg.message_id:
                        return reply
            except socket.timeout:
                timeout *= 2
        return None

    def post(self, path: str, payload: bytes, query: list[str] | None = None) -> Optional[CoapMessage]:
        return self.send(request(POST, path, payload, self.next_mid(), query=query))

    def close(self) -> None:
        self.sock.close()
