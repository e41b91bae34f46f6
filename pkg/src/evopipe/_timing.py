import time

from evopipe.errors import EvaluationTimeout


class Deadline:
    """Cooperative wall-clock budget, checked at loop boundaries."""

    def __init__(self, seconds: float | None) -> None:
        self.seconds = seconds
        self._expires_at = None if seconds is None else time.monotonic() + seconds

    def expired(self) -> bool:
        return self._expires_at is not None and time.monotonic() >= self._expires_at

    def check(self) -> None:
        if self.expired():
            raise EvaluationTimeout(f"evaluation exceeded {self.seconds:g} s")
