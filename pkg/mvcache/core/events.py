"""Events module - pub/sub for pipeline observers.

The frame driver, the offload server and the calibrator publish what
happened; the metrics recorder and logging subscribe without the
publishers knowing about them.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Deque, Dict, List, Optional

logger = logging.getLogger(__name__)

FRAME_PROCESSED = "frame_processed"
OFFLOAD_FALLBACK = "offload_fallback"
DESYNC_DETECTED = "desync_detected"
CALIBRATION_STAGE = "calibration_stage"

Handler = Callable[["Event"], None]


@dataclass
class Event:
    """Something observable that happened while processing a stream.

    Attributes:
        event_type: One of the *_PROCESSED / *_DETECTED / ... names above,
            or any custom string
        data: Payload; keys depend on the event type
        timestamp: Creation time (wall clock, never written to CSVs)

    Example:
        >>> event = Event(event_type="frame_processed", data={"frame_id": 3})
    """
    event_type: str
    data: Dict[str, Any] = field(default_factory=dict)
    timestamp: datetime = field(default_factory=datetime.now)


class FrameProcessedEvent(Event):
    """Fired by the frame driver after every frame.

    data carries frame_id, endpoint and the metrics row.

    Example:
        >>> event = FrameProcessedEvent(frame_id=4, endpoint="cloud", row={...})
    """

    def __init__(self, frame_id: int, endpoint: str, row: Dict[str, Any], **extra: Any) -> None:
        super().__init__(FRAME_PROCESSED, dict(frame_id=frame_id, endpoint=endpoint, row=row, **extra))


class OffloadFallbackEvent(Event):
    """A cloud frame failed in transport and ran on the edge."""

    def __init__(self, frame_id: int, reason: str, **extra: Any) -> None:
        super().__init__(OFFLOAD_FALLBACK, dict(frame_id=frame_id, reason=reason, **extra))


class DesyncDetectedEvent(Event):
    """Replica and server disagree on the last processed frame.

    server_last is None when the server has no session for the client.
    """

    def __init__(self, frame_id: int, client_last: int, server_last: Optional[int], **extra: Any) -> None:
        super().__init__(
            DESYNC_DETECTED,
            dict(frame_id=frame_id, client_last=client_last, server_last=server_last, **extra),
        )


class CalibrationStageEvent(Event):
    """Calibration settled one stage (tau0 or a profiled layer).

    Example:
        >>> event = CalibrationStageEvent(stage="tau0", chosen=0.01, drop=0.004, budget=0.02)
    """

    def __init__(self, stage: str, chosen: float, drop: float, budget: float, **extra: Any) -> None:
        super().__init__(
            CALIBRATION_STAGE,
            dict(stage=stage, chosen=chosen, drop=drop, budget=budget, **extra),
        )


class EventBus:
    """Synchronous publish/subscribe keyed by event type.

    Handlers run in subscription order on the publisher's thread. A
    handler that raises is logged and skipped. The newest max_history
    events are kept for inspection.

    Example:
        >>> bus = EventBus()
        >>> cancel = bus.subscribe(FRAME_PROCESSED, recorder.on_frame)
        >>> bus.publish(FrameProcessedEvent(0, "edge", row))
        >>> cancel()
    """

    def __init__(self, max_history: int = 100) -> None:
        self._handlers: Dict[str, List[Handler]] = {}
        self._history: Deque[Event] = deque(maxlen=max_history)

    def subscribe(self, event_type: str, handler: Handler) -> Callable[[], None]:
        """Register handler for event_type.

        Returns:
            A callable that removes this subscription
        """
        self._handlers.setdefault(event_type, []).append(handler)
        return lambda: self.unsubscribe(event_type, handler)

    def unsubscribe(self, event_type: str, handler: Handler) -> None:
        """Remove one registration of handler; unknown pairs are ignored."""
        handlers = self._handlers.get(event_type)
        if handlers and handler in handlers:
            handlers.remove(handler)

    def publish(self, event: Event) -> None:
        self._history.append(event)
        for handler in tuple(self._handlers.get(event.event_type, ())):
            try:
                handler(event)
            except Exception as e:
                logger.error(f"Handler for {event.event_type} failed: {type(e).__name__}: {e}")

    def clear_subscribers(self, event_type: Optional[str] = None) -> None:
        if event_type is None:
            self._handlers.clear()
        else:
            self._handlers.pop(event_type, None)

    def get_subscriber_count(self, event_type: str) -> int:
        return len(self._handlers.get(event_type, ()))

    def get_event_history(self, event_type: Optional[str] = None) -> List[Event]:
        """Retained events, oldest first, optionally of one type."""
        return [e for e in self._history if event_type is None or e.event_type == event_type]

    def clear_history(self) -> None:
        self._history.clear()


_bus: Optional[EventBus] = None


def get_event_bus() -> EventBus:
    """Process-wide bus used when no bus is injected."""
    global _bus
    if _bus is None:
        _bus = EventBus()
    return _bus


def reset_event_bus() -> None:
    """Drop the process-wide bus (tests reset it around every case)."""
    global _bus
    _bus = None
