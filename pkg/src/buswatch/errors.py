"""Exception types shared across buswatch modules."""


class BuswatchError(Exception):
    """Base class for all buswatch errors."""


# -- bus ----------------------------------------------------------------

class DuplicateTopic(BuswatchError):
    pass


class InvalidSchema(BuswatchError):
    pass


class UnknownTopic(BuswatchError):
    pass


class InvalidPayload(BuswatchError):
    pass


class TimeRegression(BuswatchError):
    pass


# -- scenario -----------------------------------------------------------

class InvalidScenario(BuswatchError):
    pass


class TopicCollision(BuswatchError):
    pass


class ScenarioNotRunning(BuswatchError):
    pass


# -- capture / trace ----------------------------------------------------

class SinkUnwritable(BuswatchError):
    pass


class UnknownFormat(BuswatchError):
    pass


class MalformedTrace(BuswatchError):
    pass


# -- features -----------------------------------------------------------

class WindowMismatch(BuswatchError):
    pass


class ZeroWindow(BuswatchError):
    pass


# -- envelope -----------------------------------------------------------

class DegenerateDim(BuswatchError):
    pass


class InsufficientData(BuswatchError):
    pass


# -- hierarchy ----------------------------------------------------------

class LengthMismatch(BuswatchError):
    pass


class InsufficientSamples(BuswatchError):
    pass


# -- placement ----------------------------------------------------------

class UnassignedTopic(BuswatchError):
    pass


# -- recovery -----------------------------------------------------------

class NodeUnhealthy(BuswatchError):
    pass


class NoSnapshot(BuswatchError):
    pass


class CycleGuardTripped(BuswatchError):
    pass


class ShadowCold(BuswatchError):
    pass


# -- alarms -------------------------------------------------------------

class UnknownAlarm(BuswatchError):
    pass


class AlreadyResolved(BuswatchError):
    pass


# -- cli / config -------------------------------------------------------

class MalformedInput(BuswatchError):
    pass
