"""Exception hierarchy shared by the toolchain and the environment."""


class ToolError(Exception):
    """A recoverable failure of one of the four tools.

    The environment turns these into ``ok=false`` tool responses carrying
    ``code``; they never end an episode on their own.
    """

    code = "ToolError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class UnknownMaterial(ToolError):
    code = "UnknownMaterial"


class InvalidParams(ToolError):
    code = "InvalidParams"


class DegenerateGeometry(ToolError):
    code = "DegenerateGeometry"


class NoFaceMatched(ToolError):
    code = "NoFaceMatched"


class SingularSystem(ToolError):
    code = "SingularSystem"


class NonConvergence(ToolError):
    code = "NonConvergence"


class EmptyField(ToolError):
    code = "EmptyField"


class BadArguments(ToolError):
    code = "BadArguments"


class InjectedFailure(ToolError):
    code = "InjectedFailure"


class EnvironmentStateError(Exception):
    """Raised for misuse of an episode handle."""


class BudgetExhausted(EnvironmentStateError):
    pass


class EpisodeClosed(EnvironmentStateError):
    pass


class ProtocolViolation(Exception):
    """The agent produced a message that is not a valid action."""


class MismatchedInputs(ValueError):
    pass


class NoProposal(ToolError):
    code = "NoProposal"


class MissingDependency(ToolError):
    code = "MissingDependency"
