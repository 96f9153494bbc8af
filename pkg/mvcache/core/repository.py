"""Abstract repository for endpoint cache snapshots.

Snapshots let a separate process (or a later run) compare the client's
replica with the server's cache bit for bit.
"""

from abc import ABC, abstractmethod
from typing import List, Optional

from mvcache.core.cache_state import EndpointCache


class SnapshotRepository(ABC):
    """Abstract snapshot store.

    Concrete stores keep one snapshot per key (e.g. "replica-000042").
    """

    @abstractmethod
    def save(self, key: str, cache: EndpointCache) -> None:
        """Store a snapshot of cache under key, replacing any previous one."""

    @abstractmethod
    def load(self, key: str) -> Optional[EndpointCache]:
        """Load a snapshot.

        Returns:
            The restored cache, or None if key is unknown
        """

    @abstractmethod
    def delete(self, key: str) -> None:
        """Delete a snapshot (no-op when missing)."""

    @abstractmethod
    def exists(self, key: str) -> bool:
        """Check if a snapshot exists."""

    @abstractmethod
    def list_keys(self, prefix: str = "") -> List[str]:
        """List snapshot keys starting with prefix, sorted."""

    @abstractmethod
    def count(self) -> int:
        """Number of stored snapshots."""
