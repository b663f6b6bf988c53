"""Message broker: binary frame codec, the hub and the instance-side client.

Frame layout (all integers big-endian)::

    u16 topic length | topic bytes | u32 sender | u64 sequence | u32 payload length | payload

The same framing carries validator-to-validator traffic in the reference
fabric, with the topic used as the message kind.

Topics starting with ``$`` are broker control messages: ``$sub`` (payload is
the topic to subscribe to) and ``$ack`` (hub to publisher, payload is the
acknowledged topic, sequence echoes the published one).
"""

from __future__ import annotations

import asyncio
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass
from typing import AsyncIterator, Optional

log = logging.getLogger(__name__)

_HEAD = struct.Struct(">H")
_MID = struct.Struct(">IQI")
HUB_SENDER = 0


class FrameError(ValueError):
    pass


class BrokerUnavailable(ConnectionError):
    pass


@dataclass(frozen=True)
class BrokerMessage:
    topic: str
    sender: int
    payload: bytes
    seq: int = 0

    def __post_init__(self):
        if not self.topic:
            raise ValueError("topic must be non-empty")


def encode_frame(topic: str, sender: int, seq: int, payload: bytes) -> bytes:
    t = topic.encode()
    if not t:
        raise FrameError("empty topic")
    return b"".join((_HEAD.pack(len(t)), t, _MID.pack(sender, seq, len(payload)), payload))


class FrameDecoder:
    """Incremental decoder: feed raw bytes, get complete messages back."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        buf = self._buf
        buf += data
        out = []
        pos = 0
        n = len(buf)
        while True:
            if n - pos < 2:
                break
            (tlen,) = _HEAD.unpack_from(buf, pos)
            head_end = pos + 2 + tlen + _MID.size
            if n < head_end:
                break
            sender, seq, plen = _MID.unpack_from(buf, pos + 2 + tlen)
            end = head_end + plen
            if n < end:
                break
            if tlen == 0:
                raise FrameError("empty topic in frame")
            topic = bytes(buf[pos + 2:pos + 2 + tlen]).decode()
            out.append(BrokerMessage(topic, sender, bytes(buf[head_end:end]), seq))
            pos = end
        if pos:
            del buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_frames(data: bytes) -> list:
    dec = FrameDecoder()
    msgs = dec.feed(data)
    if dec.pending:
        raise FrameError(f"{dec.pending} trailing bytes")
    return msgs


# hub ---------------------------------------------------------------------------


class BrokerHub:
    """Single broker hub with per-topic retained messages.

    Every published message is retained, so late subscribers receive the
    topic history before live traffic.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._server: Optional[asyncio.base_events.Server] = None
        self._retained: dict = defaultdict(list)
        self._subscribers: dict = defaultdict(set)
        self._seen: set = set()
        self._lock = asyncio.Lock()
        self._writers: set = set()
        self.delivered = 0

    async def start(self) -> "BrokerHub":
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    @property
    def address(self) -> tuple:
        return self.host, self.port

    def retained(self, topic: str) -> list:
        return [m for m in self._retained.get(topic, [])]

    async def stop(self) -> None:
        if self._server is None:
            return
        self._server.close()
        for w in list(self._writers):
            w.close()
        await self._server.wait_closed()
        self._server = None

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._writers.add(writer)
        dec = FrameDecoder()
        mine = set()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in dec.feed(data):
                    await self._on_message(msg, writer, mine)
        except (ConnectionError, FrameError) as exc:
            log.debug("broker connection dropped: %s", exc)
        finally:
            async with self._lock:
                for topic in mine:
                    self._subscribers[topic].discard(writer)
            self._writers.discard(writer)
            writer.close()

    async def _on_message(self, msg: BrokerMessage, writer, mine: set) -> None:
        async with self._lock:
            if msg.topic == "$sub":
                topic = msg.payload.decode()
                mine.add(topic)
                self._subscribers[topic].add(writer)
                for m in self._retained[topic]:
                    writer.write(encode_frame(m.topic, m.sender, m.seq, m.payload))
                return
            key = (msg.sender, msg.topic, msg.seq)
            if key not in self._seen:
                self._seen.add(key)
                self._retained[msg.topic].append(msg)
                frame = encode_frame(msg.topic, msg.sender, msg.seq, msg.payload)
                for sub in self._subscribers[msg.topic]:
                    sub.write(frame)
                    self.delivered += 1
            writer.write(encode_frame("$ack", HUB_SENDER, msg.seq, msg.topic.encode()))
        await writer.drain()


# client ------------------------------------------------------------------------


class BrokerClient:
    """Instance-side broker connection.

    Delivery is at-least-once on the wire; duplicates are dropped here by
    (sender, topic, sequence) so subscribers see each message once.
    """

    def __init__(self, host: str, port: int, sender: int, retries: int = 5,
                 ack_timeout: float = 2.0):
        self.host = host
        self.port = port
        self.sender = sender
        self.retries = retries
        self.ack_timeout = ack_timeout
        self._seq = 0
        self._reader = None
        self._writer = None
        self._recv_task = None
        self._queues: dict = defaultdict(list)
        self._history: dict = defaultdict(list)
        self._seen: set = set()
        self._acks: dict = {}
        self._topics: set = set()
        self._closed = False

    async def connect(self) -> "BrokerClient":
        last = None
        for attempt in range(self.retries):
            try:
                self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
                break
            except OSError as exc:
                last = exc
                await asyncio.sleep(0.1 * (2 ** attempt))
        else:
            raise BrokerUnavailable(f"cannot reach broker at {self.host}:{self.port}: {last}")
        self._recv_task = asyncio.ensure_future(self._recv_loop())
        for topic in self._topics:
            self._writer.write(encode_frame("$sub", self.sender, 0, topic.encode()))
        return self

    async def _recv_loop(self) -> None:
        dec = FrameDecoder()
        try:
            while True:
                data = await self._reader.read(65536)
                if not data:
                    break
                for msg in dec.feed(data):
                    if msg.topic == "$ack":
                        fut = self._acks.pop((msg.payload.decode(), msg.seq), None)
                        if fut is not None and not fut.done():
                            fut.set_result(True)
                        continue
                    key = (msg.sender, msg.topic, msg.seq)
                    if key in self._seen:
                        continue
                    self._seen.add(key)
                    self._history[msg.topic].append(msg)
                    for q in self._queues.get(msg.topic, ()):
                        q.put_nowait(msg)
        except (ConnectionError, asyncio.CancelledError):
            pass

    async def _reconnect(self) -> None:
        if self._recv_task is not None:
            self._recv_task.cancel()
        if self._writer is not None:
            self._writer.close()
        await self.connect()

    async def publish(self, topic: str, payload: bytes) -> int:
        """Publish and wait for the hub's acknowledgement; returns the sequence."""
        if topic.startswith("$"):
            raise ValueError("topics starting with '$' are reserved")
        self._seq += 1
        seq = self._seq
        frame = encode_frame(topic, self.sender, seq, payload)
        for attempt in range(self.retries):
            fut = asyncio.get_running_loop().create_future()
            self._acks[(topic, seq)] = fut
            try:
                self._writer.write(frame)
                await self._writer.drain()
                await asyncio.wait_for(fut, self.ack_timeout)
                return seq
            except (asyncio.TimeoutError, ConnectionError, AttributeError):
                self._acks.pop((topic, seq), None)
                log.warning("broker publish %s#%d attempt %d failed", topic, seq, attempt + 1)
                try:
                    await self._reconnect()
                except BrokerUnavailable:
                    continue
        raise BrokerUnavailable(f"publish to {topic!r} not acknowledged")

    def subscribe(self, topic: str) -> asyncio.Queue:
        """Queue receiving retained, then live, messages for ``topic``."""
        q: asyncio.Queue = asyncio.Queue()
        for msg in self._history.get(topic, ()):
            q.put_nowait(msg)
        self._queues[topic].append(q)
        if topic not in self._topics:
            self._topics.add(topic)
            if self._writer is None:
                raise BrokerUnavailable("not connected")
            self._writer.write(encode_frame("$sub", self.sender, 0, topic.encode()))
        return q

    async def stream(self, topic: str) -> AsyncIterator[BrokerMessage]:
        q = self.subscribe(topic)
        while True:
            yield await q.get()

    async def wait_for(self, topic: str, timeout: Optional[float] = None) -> BrokerMessage:
        q = self.subscribe(topic)
        return await asyncio.wait_for(q.get(), timeout)

    async def close(self) -> None:
        self._closed = True
        if self._recv_task is not None:
            self._recv_task.cancel()
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
