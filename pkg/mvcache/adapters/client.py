"""Client module - offload transports used by the frame driver.

LoopbackClient calls an in-process OffloadServer directly;
TcpOffloadClient talks to a remote one. Both raise TransportError on
connection trouble and ProtocolError (or ProtocolDesyncError) when the
server rejects a frame, which the frame driver turns into an edge
fallback.
"""

import asyncio
import logging
from abc import ABC, abstractmethod
from typing import Optional

from mvcache.adapters.server import OffloadServer
from mvcache.adapters.wire import (
    AckStatus,
    OffloadResult,
    ResultStatus,
    encode_hello,
    read_ack,
    read_result,
)
from mvcache.core.errors import (
    HandshakeRejectedError,
    ProtocolDesyncError,
    ProtocolError,
    TransportError,
)

logger = logging.getLogger(__name__)


def raise_for_result(result: OffloadResult) -> OffloadResult:
    """Turn an ERROR result into the matching exception."""
    if result.status == ResultStatus.OK:
        if result.output is None:
            raise ProtocolError(f"Frame {result.frame_id}: OK result without output")
        return result
    message = result.stats.get("error", "unknown error")
    if result.stats.get("kind") == "ProtocolDesyncError":
        raise ProtocolDesyncError(message)
    raise ProtocolError(f"Server rejected frame {result.frame_id}: {message}")


class OffloadClient(ABC):
    """Transport to a cloud endpoint."""

    def __init__(self, client_id: int, net_hash: int) -> None:
        self.client_id = client_id
        self.net_hash = net_hash
        self.connected = False

    @abstractmethod
    async def connect(self) -> Optional[int]:
        """Handshake.

        Returns:
            The server's last processed frame id for this client, or None

        Raises:
            HandshakeRejectedError: If the server rejects the net hash
            TransportError: On connection failure
        """

    @abstractmethod
    async def offload(self, data: bytes) -> OffloadResult:
        """Send one encoded offload frame and wait for its result.

        Raises:
            TransportError: On connection failure
            ProtocolError: On a rejected or malformed reply
        """

    async def close(self) -> None:
        self.connected = False


class LoopbackClient(OffloadClient):
    """In-process transport, byte-identical to the TCP path.

    Example:
        >>> client = LoopbackClient(server, client_id=1, net_hash=net.config_hash())
        >>> last = await client.connect()
    """

    def __init__(self, server: OffloadServer, client_id: int, net_hash: Optional[int] = None) -> None:
        super().__init__(client_id, server.net_hash if net_hash is None else net_hash)
        self.server = server

    async def connect(self) -> Optional[int]:
        status, last = self.server.hello(self.client_id, self.net_hash)
        if status != AckStatus.ACCEPTED:
            raise HandshakeRejectedError(f"Server rejected client {self.client_id}: {status.name}")
        self.connected = True
        return last

    async def offload(self, data: bytes) -> OffloadResult:
        if not self.connected:
            raise TransportError("Loopback client is not connected")
        return raise_for_result(await self.server.handle_offload(self.client_id, data))


class TcpOffloadClient(OffloadClient):
    """Framed TCP transport.

    Example:
        >>> client = TcpOffloadClient("127.0.0.1", 7070, client_id=1, net_hash=h)
        >>> await client.connect()
        >>> result = await client.offload(encode_offload(payload))
    """

    def __init__(
        self,
        host: str,
        port: int,
        client_id: int,
        net_hash: int,
        timeout: float = 30.0,
    ) -> None:
        super().__init__(client_id, net_hash)
        self.host = host
        self.port = port
        self.timeout = timeout
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None

    async def connect(self) -> Optional[int]:
        try:
            self._reader, self._writer = await asyncio.wait_for(
                asyncio.open_connection(self.host, self.port), timeout=self.timeout
            )
            self._writer.write(encode_hello(self.client_id, self.net_hash))
            await self._writer.drain()
            status, last = await asyncio.wait_for(read_ack(self._reader), timeout=self.timeout)
        except asyncio.TimeoutError:
            await self.close()
            raise TransportError(f"Handshake with {self.host}:{self.port} timed out")
        except (ConnectionError, OSError) as e:
            await self.close()
            raise TransportError(f"Cannot connect to {self.host}:{self.port}: {e}")
        if status != AckStatus.ACCEPTED:
            await self.close()
            raise HandshakeRejectedError(f"Server rejected client {self.client_id}: {status.name}")
        self.connected = True
        logger.info(f"Connected to {self.host}:{self.port} as client {self.client_id} (server last frame {last})")
        return last

    async def offload(self, data: bytes) -> OffloadResult:
        if not self.connected or self._writer is None or self._reader is None:
            raise TransportError("TCP client is not connected")
        try:
            self._writer.write(data)
            await self._writer.drain()
            result = await asyncio.wait_for(read_result(self._reader), timeout=self.timeout)
        except asyncio.TimeoutError:
            await self.close()
            raise TransportError(f"No result from {self.host}:{self.port} within {self.timeout}s")
        except (ConnectionError, OSError) as e:
            await self.close()
            raise TransportError(f"Connection to {self.host}:{self.port} lost: {e}")
        except TransportError:
            await self.close()
            raise
        return raise_for_result(result)

    async def close(self) -> None:
        self.connected = False
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
        self._reader = None
        self._writer = None
