"""Server module - asyncio TCP offload server.

One handler per connection. Sessions are keyed by the client id from
the hello message; work on a session is serialised by a
SessionLockManager and runs inside a CacheTransaction so that a failed
frame leaves the session's cache untouched.
"""

import asyncio
import functools
import logging
from typing import Dict, Optional, Tuple

from mvcache.adapters.wire import (
    AckStatus,
    OffloadResult,
    ResultStatus,
    decode_offload,
    encode_ack,
    encode_result,
    read_hello,
    read_offload_bytes,
)
from mvcache.core.cache_state import EndpointCache
from mvcache.core.errors import MVCacheError, TransportError
from mvcache.core.locks import SessionLockManager
from mvcache.core.network import NetworkSpec
from mvcache.core.reuse import ThresholdVector
from mvcache.core.settings import PipelineOptions
from mvcache.core.transaction import CacheTransaction
from mvcache.services.offload import OffloadSession, process_offload

logger = logging.getLogger(__name__)


class OffloadServer:
    """Cloud endpoint serving any number of clients.

    Example:
        >>> server = OffloadServer(net, thresholds)
        >>> host, port = await server.start("127.0.0.1", 0)
        >>> ...
        >>> await server.stop()
    """

    def __init__(
        self,
        net: NetworkSpec,
        thresholds: ThresholdVector,
        options: Optional[PipelineOptions] = None,
        lock_timeout: float = 30.0,
    ) -> None:
        """Initialize server.

        Args:
            net: Network shared with every client (checked by hash at hello)
            thresholds: Thresholds shared with every client
            options: Pipeline options shared with every client
            lock_timeout: Seconds to wait for a busy session
        """
        self.net = net
        self.thresholds = thresholds
        self.options = options or PipelineOptions()
        self.lock_timeout = lock_timeout
        self.net_hash = net.config_hash()
        self.sessions: Dict[int, OffloadSession] = {}
        self.lock_manager = SessionLockManager()
        self._server: Optional[asyncio.AbstractServer] = None

    def session(self, client_id: int) -> OffloadSession:
        """Get or create the session of client_id."""
        if client_id not in self.sessions:
            cache = EndpointCache.for_network(self.net, f"cloud[{client_id}]")
            self.sessions[client_id] = OffloadSession(client_id, cache)
        return self.sessions[client_id]

    def session_cache(self, client_id: int) -> Optional[EndpointCache]:
        session = self.sessions.get(client_id)
        return session.cache if session is not None else None

    def hello(self, client_id: int, net_hash: int) -> Tuple[AckStatus, Optional[int]]:
        """Answer a hello.

        Returns:
            (status, last frame id processed for client_id or None)
        """
        if net_hash != self.net_hash:
            logger.warning(
                f"Rejecting client {client_id}: net hash {net_hash:#018x} != {self.net_hash:#018x}"
            )
            return AckStatus.NET_MISMATCH, None
        return AckStatus.ACCEPTED, self.session(client_id).last_frame_id

    async def handle_offload(self, client_id: int, data: bytes) -> OffloadResult:
        """Process one encoded offload frame for client_id.

        Decode and processing errors are returned as ERROR results; the
        session's cache is rolled back.
        """
        session = self.session(client_id)
        async with self.lock_manager.lock_sessions([client_id], timeout=self.lock_timeout):
            transaction = CacheTransaction(session.cache)
            frame_id = 0
            try:
                payload = decode_offload(data)
                frame_id = payload.frame_id
                work = transaction.get_work_cache()
                loop = asyncio.get_running_loop()
                output, stats = await loop.run_in_executor(
                    None,
                    functools.partial(
                        process_offload, self.net, work, payload, self.thresholds, self.options
                    ),
                )
                transaction.commit()
            except MVCacheError as e:
                transaction.rollback()
                session.rejected += 1
                logger.warning(f"Client {client_id}: frame {frame_id} rejected: {type(e).__name__}: {e}")
                return OffloadResult(
                    frame_id, ResultStatus.ERROR, None, {"error": str(e), "kind": type(e).__name__}
                )
            except Exception as e:
                transaction.rollback()
                session.rejected += 1
                logger.error(f"Client {client_id}: frame {frame_id} failed", exc_info=True)
                return OffloadResult(
                    frame_id,
                    ResultStatus.ERROR,
                    None,
                    {"error": f"{type(e).__name__}: {e}", "kind": "InternalError"},
                )

        session.frames += 1
        session.last_stats = stats
        logger.debug(f"Client {client_id}: frame {frame_id} compute_ratio={stats.compute_ratio:.4f}")
        return OffloadResult(frame_id, ResultStatus.OK, output, stats.to_dict())

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        client_id = None
        try:
            client_id, net_hash = await read_hello(reader)
            status, last = self.hello(client_id, net_hash)
            writer.write(encode_ack(status, last))
            await writer.drain()
            if status != AckStatus.ACCEPTED:
                return
            logger.info(f"Client {client_id} connected from {peer} (last frame {last})")
            while True:
                if reader.at_eof():
                    break
                try:
                    data = await read_offload_bytes(reader)
                except TransportError:
                    break
                result = await self.handle_offload(client_id, data)
                writer.write(encode_result(result))
                await writer.drain()
        except MVCacheError as e:
            logger.warning(f"Connection from {peer} dropped: {type(e).__name__}: {e}")
        except (ConnectionError, OSError) as e:
            logger.warning(f"Connection from {peer} lost: {e}")
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            if client_id is not None:
                logger.info(f"Client {client_id} disconnected")

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> Tuple[str, int]:
        """Start listening.

        Returns:
            (host, port) actually bound
        """
        self._server = await asyncio.start_server(self._handle_connection, host, port)
        bound = self._server.sockets[0].getsockname()
        logger.info(f"Offload server listening on {bound[0]}:{bound[1]}")
        return bound[0], bound[1]

    async def serve_forever(self) -> None:
        if self._server is None:
            raise RuntimeError("Server not started")
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
            logger.info("Offload server stopped")
