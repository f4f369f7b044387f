"""Exception hierarchy shared by every hieract module.

The CLI maps the three top-level families onto exit codes:
``DataError`` -> 2, ``ServiceError`` -> 3; anything else is a bug.
"""


class HieractError(Exception):
    """Base class for all library errors."""


class DataError(HieractError):
    """Invalid input data: malformed files, broken invariants, shape errors."""


class ServiceError(HieractError):
    """Failure talking to an external service (the LLM endpoint)."""


# -- hierarchy -------------------------------------------------------------


class HierarchyError(DataError):
    """A label hierarchy failed validation."""


class CycleDetected(HierarchyError):
    pass


class OrphanNode(HierarchyError):
    pass


class DuplicateName(HierarchyError):
    pass


class EmptyLevel(HierarchyError):
    pass


class DeadInternalNode(HierarchyError):
    """A node above the leaf level has no children."""


class DepthExceeded(HierarchyError):
    pass


class LeafHasNoChildren(HierarchyError):
    pass


# -- numeric ---------------------------------------------------------------


class ShapeMismatch(DataError):
    pass


class DomainError(DataError):
    pass


class EmptyPopulation(DataError):
    pass


class LengthMismatch(DataError):
    pass


class Divergence(DataError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


# -- selection -------------------------------------------------------------


class EmptyUnlabeledPool(DataError):
    pass


# -- taxonomy / LLM --------------------------------------------------------


class ParseFailure(DataError):
    pass


class ExhaustedIterations(DataError):
    def __init__(self, message: str, failures: list[str]):
        super().__init__(message)
        self.failures = failures


class Timeout(ServiceError):
    pass


class HttpStatus(ServiceError):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"HTTP status {code}")
        self.code = code


class RateLimited(HttpStatus):
    def __init__(self, message: str = "rate limited"):
        super().__init__(429, message)


class MalformedResponseBody(ServiceError):
    pass
