"""Transaction module - atomic updates of an endpoint cache.

A frame either updates every cache of an endpoint or none of them.
The server wraps each offloaded frame in a CacheTransaction so that a
frame that fails halfway (bad payload, desync) leaves the session's
cache exactly as it was before the frame.
"""

import logging
from enum import Enum
from typing import Optional

from mvcache.core.cache_state import EndpointCache

logger = logging.getLogger(__name__)


class TxState(str, Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ROLLED_BACK = "rolled back"


class CacheTransaction:
    """Work copy of an EndpointCache, published on commit.

    The live cache is never touched until commit(); rollback() only drops
    the copy.

    Example:
        >>> tx = CacheTransaction(session.cache)
        >>> work = tx.get_work_cache()
        >>> output, stats = sparse_forward(net, work, ...)
        >>> tx.commit()  # or tx.rollback()
    """

    def __init__(self, cache: EndpointCache) -> None:
        self._live = cache
        self._work: Optional[EndpointCache] = cache.copy()
        self.state = TxState.ACTIVE

    def _finalize(self, target: TxState) -> None:
        if self.state != TxState.ACTIVE:
            raise RuntimeError(f"Transaction already {self.state.value}")
        self.state = target

    def get_work_cache(self) -> EndpointCache:
        """The isolated copy to mutate.

        Raises:
            RuntimeError: Once the transaction is finalized
        """
        if self.state != TxState.ACTIVE or self._work is None:
            raise RuntimeError(f"Transaction already finalized ({self.state.value})")
        return self._work

    def commit(self) -> None:
        """Copy the work cache into the live cache.

        Raises:
            RuntimeError: If already committed or rolled back
        """
        self._finalize(TxState.COMMITTED)
        self._live.restore(self._work)
        self._work = None

    def rollback(self) -> None:
        """Drop the work cache.

        Raises:
            RuntimeError: If already committed or rolled back
        """
        self._finalize(TxState.ROLLED_BACK)
        logger.debug(f"Rolling back {self._live.name} cache update")
        self._work = None

    @property
    def is_committed(self) -> bool:
        return self.state == TxState.COMMITTED

    @property
    def is_rolled_back(self) -> bool:
        return self.state == TxState.ROLLED_BACK

    @property
    def is_active(self) -> bool:
        return self.state == TxState.ACTIVE

    def __enter__(self) -> EndpointCache:
        return self.get_work_cache()

    def __exit__(self, exc_type, exc, tb) -> bool:
        if self.is_active:
            if exc_type is None:
                self.commit()
            else:
                self.rollback()
        return False
