"""Exception taxonomy shared across the package.

Protocol-facing errors carry enough context to be mapped onto HTTP status
codes by the API layer and back into exceptions on the client side.
"""

from __future__ import annotations


class CanarytreeError(Exception):
    """Base class for all package errors."""


# --- strategy parsing / validation -----------------------------------------

class StrategySyntaxError(CanarytreeError):
    """Input is not well-formed YAML."""


class ValidationError(CanarytreeError):
    """A strategy violates the schema; carries the offending field path."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class IllegalTransition(CanarytreeError):
    """A (status, event) pair outside the legal transition table."""

    def __init__(self, current: object, event: object) -> None:
        super().__init__(f"illegal transition: {current} on {event}")
        self.current = current
        self.event = event


# --- routing / telemetry ----------------------------------------------------

class UnknownVariant(CanarytreeError):
    """Explicit routing choice names neither configured variant."""


class SinkUnavailable(CanarytreeError):
    """Telemetry sink cannot be reached; the call itself must still succeed."""


# --- backend ------------------------------------------------------------------

class DeployFailed(CanarytreeError):
    """Platform rejected the artifact."""


class Unreachable(CanarytreeError):
    """Platform cannot be contacted."""


class Unavailable(CanarytreeError):
    """Endpoint exists but cannot serve right now (e.g. replacement window)."""


# --- planner ------------------------------------------------------------------

class InvalidLadder(CanarytreeError):
    """Rollout ladder is not strictly increasing or does not end at 100."""


class EmptyRegion(CanarytreeError):
    """Regional plan requested for a region with no member locations."""


# --- release manager protocol ---------------------------------------------

class UnknownNode(CanarytreeError):
    """Node id is not registered with this manager."""


class DuplicateNode(CanarytreeError):
    """A different node already registered under this id."""


class UnknownRelease(CanarytreeError):
    """Release id is not tracked by this manager."""


class WrongState(CanarytreeError):
    """Protocol call arrived in a state where it is not allowed."""


class OutOfOrderResult(CanarytreeError):
    """Result posted for a stage that is not the child's active one."""


class NotWaiting(CanarytreeError):
    """End signal sent for a stage that is not an active WaitForSignal stage."""


class InsufficientCapabilities(CanarytreeError):
    """Strategy requires regions/platforms the subtree does not provide."""

    def __init__(self, missing_regions: list[str]) -> None:
        super().__init__(f"missing regions: {', '.join(sorted(missing_regions)) or 'none'}")
        self.missing_regions = list(missing_regions)


# --- agent / harness ---------------------------------------------------------

class StageError(CanarytreeError):
    """Infrastructure fault during stage execution (distinct from Failure)."""


class ConfigError(CanarytreeError):
    """Node configuration file is invalid or incomplete."""


class RegistrationFailed(CanarytreeError):
    """Node could not register with its parent."""
