"""Exception hierarchy shared by all EVE modules.

Each family carries an ``exit_code`` so the CLI can map failures to
distinct process exit statuses.
"""


class EveError(Exception):
    exit_code = 1


# grid
class GridError(EveError):
    exit_code = 10


class CycleDetected(GridError):
    pass


class Disconnected(GridError):
    pass


class NonContiguousRegion(GridError):
    pass


class NoConvergence(GridError):
    pass


class VoltageCollapse(GridError):
    pass


class DimensionMismatch(EveError):
    exit_code = 11


class UnknownRegion(GridError):
    pass


# resources / market
class ResourceError(EveError):
    exit_code = 20


class InvalidParams(ResourceError):
    pass


class MarketError(EveError):
    exit_code = 30


class Infeasible(MarketError):
    pass


class SolverStall(MarketError):
    pass


class MissingAggregator(MarketError):
    pass


class NoPriorSolution(MarketError):
    pass


# verification / adversary
class VerificationError(EveError):
    exit_code = 40


class SingularSystem(VerificationError):
    pass


class EigenNoConvergence(VerificationError):
    pass


class GraphDisconnected(VerificationError):
    pass


class InsufficientRegions(VerificationError):
    pass


class AdversaryError(EveError):
    exit_code = 50


class UnknownSensor(AdversaryError):
    pass


class NotANeighbor(AdversaryError):
    pass


# ledger
class LedgerError(EveError):
    exit_code = 60


class AccessDenied(LedgerError):
    pass


class ChannelMismatch(LedgerError):
    pass


class NotFound(LedgerError):
    pass


class WindowClosed(LedgerError):
    pass


class ChainCorrupted(LedgerError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


# orchestration
class ScenarioError(EveError):
    exit_code = 70


class UnknownTemplate(ScenarioError):
    pass


class IoFailure(EveError):
    exit_code = 80
