"""Client side of the reference fabric's wallet line protocol.

Requests on one connection are answered in order, so the client pipelines
them and matches replies against a FIFO of outstanding requests.
"""

from __future__ import annotations

import asyncio
from collections import deque
from typing import Callable, Optional

from ..model import Transaction


class WalletError(ConnectionError):
    pass


class WalletClient:
    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self.bytes_in = 0
        self.bytes_out = 0
        self._reader = None
        self._writer = None
        self._pending: deque = deque()
        self._task = None

    async def connect(self, timeout: float = 10.0) -> "WalletClient":
        deadline = asyncio.get_running_loop().time() + timeout
        delay = 0.05
        while True:
            try:
                self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
                break
            except OSError as exc:
                if asyncio.get_running_loop().time() > deadline:
                    raise WalletError(f"wallet {self.host}:{self.port} unreachable: {exc}") from None
                await asyncio.sleep(delay)
                delay = min(delay * 2, 0.5)
        self._task = asyncio.ensure_future(self._read_loop())
        return self

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._writer.is_closing()

    async def _read_loop(self) -> None:
        try:
            while True:
                line = await self._reader.readline()
                if not line:
                    break
                self.bytes_in += len(line)
                if not self._pending:
                    continue
                lines_left, collected, done = self._pending[0]
                collected.append(line.decode().rstrip("\n"))
                if len(collected) >= lines_left:
                    self._pending.popleft()
                    done(collected)
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            while self._pending:
                _, collected, done = self._pending.popleft()
                done(None)

    def _send(self, line: str, n_lines: int, done: Callable) -> None:
        if not self.connected:
            raise WalletError("not connected")
        data = (line + "\n").encode()
        self.bytes_out += len(data)
        self._pending.append((n_lines, [], done))
        self._writer.write(data)

    def submit_nowait(self, tx: Transaction, on_reply: Callable[[Optional[str]], None]) -> None:
        """Fire a SUBMIT; ``on_reply`` gets the reply line (None if the
        connection dropped first)."""
        self._send("SUBMIT " + tx.to_json(), 1, lambda lines: on_reply(lines[0] if lines else None))

    async def submit(self, tx: Transaction) -> str:
        fut = asyncio.get_running_loop().create_future()
        self.submit_nowait(tx, lambda r: fut.done() or fut.set_result(r))
        reply = await fut
        if reply is None:
            raise WalletError("connection closed")
        return reply

    async def status(self, tx_ids: list) -> dict:
        """tx_id -> reply fields, e.g. ``["CONFIRMED", "7", "3500", "3502"]``."""
        if not tx_ids:
            return {}
        fut = asyncio.get_running_loop().create_future()
        self._send("STATUS " + " ".join(tx_ids), len(tx_ids), lambda lines: fut.done() or fut.set_result(lines))
        lines = await fut
        if lines is None:
            raise WalletError("connection closed")
        out = {}
        for line in lines:
            parts = line.split()
            out[parts[1]] = parts[2:]
        return out

    async def ping(self) -> int:
        fut = asyncio.get_running_loop().create_future()
        self._send("PING", 1, lambda lines: fut.done() or fut.set_result(lines))
        lines = await fut
        if not lines:
            raise WalletError("connection closed")
        return int(lines[0].split()[1])

    async def drain(self) -> None:
        if self._writer is not None:
            await self._writer.drain()

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
        if self._task is not None:
            self._task.cancel()
