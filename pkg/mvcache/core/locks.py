"""Locks module - per-session locking for the offload server.

Each client id owns one session; a reconnecting client must not race
its previous connection's handler on the same cache.
"""

import asyncio
import logging
from contextlib import asynccontextmanager
from typing import Dict, Iterable, List

logger = logging.getLogger(__name__)


class SessionLockManager:
    """Manager for per-session asyncio locks.

    Locks are acquired in sorted order to prevent deadlocks when a task
    needs several sessions at once (audits, snapshots).

    Example:
        >>> locks = SessionLockManager()
        >>> async with locks.lock_sessions([client_id]):
        ...     session.handle(payload)
    """

    def __init__(self) -> None:
        self._locks: Dict[int, asyncio.Lock] = {}
        self._main_lock = asyncio.Lock()

    async def acquire(self, session_ids: Iterable[int], timeout: float = 5.0) -> List[int]:
        """Acquire locks for sessions.

        Args:
            session_ids: Client ids to lock
            timeout: Seconds to wait for each lock

        Returns:
            Acquired ids in acquisition order

        Raises:
            TimeoutError: If a lock could not be acquired in time
        """
        ordered = sorted(set(session_ids))
        acquired: List[int] = []
        try:
            for session_id in ordered:
                async with self._main_lock:
                    lock = self._locks.setdefault(session_id, asyncio.Lock())
                try:
                    await asyncio.wait_for(lock.acquire(), timeout=timeout)
                except asyncio.TimeoutError:
                    raise TimeoutError(f"Failed to lock sessions {ordered} within {timeout}s")
                acquired.append(session_id)
            return acquired
        except BaseException:
            self.release(acquired)
            raise

    def release(self, session_ids: Iterable[int]) -> None:
        for session_id in session_ids:
            lock = self._locks.get(session_id)
            if lock is not None and lock.locked():
                lock.release()

    @asynccontextmanager
    async def lock_sessions(self, session_ids: Iterable[int], timeout: float = 5.0):
        """Hold the session locks for the duration of the block."""
        acquired = await self.acquire(session_ids, timeout)
        try:
            yield
        finally:
            self.release(acquired)

    def is_locked(self, session_id: int) -> bool:
        lock = self._locks.get(session_id)
        return lock is not None and lock.locked()

    def clear_unused_locks(self) -> int:
        """Drop locks nobody holds.

        Returns:
            Number of locks cleared
        """
        unused = [sid for sid, lock in self._locks.items() if not lock.locked()]
        for session_id in unused:
            del self._locks[session_id]
        if unused:
            logger.debug(f"Cleared {len(unused)} idle session locks")
        return len(unused)
