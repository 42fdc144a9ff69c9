"""Exception types shared across the toolkit."""


class PtkbCirError(Exception):
    """Base class for all toolkit errors."""


class ParseError(PtkbCirError, ValueError):
    """Input document is malformed.

    ``location`` names the offending path (``$[0].turns[1].utterance``) or
    line (``line 12``).
    """

    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


class ValidationError(PtkbCirError, ValueError):
    """Input is well-formed but violates a data invariant."""


class GatewayError(PtkbCirError):
    """Chat or embedding endpoint failed after all retries."""

    def __init__(self, message: str, status: int | None = None):
        self.status = status
        super().__init__(message if status is None else f"{message} (status {status})")


class ParseFailure(PtkbCirError):
    """Model output could not be turned into the expected fields."""

    def __init__(self, message: str, text: str = ""):
        self.text = text
        super().__init__(message)


class Unassessed(PtkbCirError):
    """Turn has no relevance judgments; it is excluded, not failed."""

    def __init__(self, turn_id: str):
        self.turn_id = turn_id
        super().__init__(f"turn {turn_id} has no relevance judgments")


class ConfigError(PtkbCirError):
    pass


class MissingArtifactError(PtkbCirError):
    """An upstream artifact is absent; ``command`` names the step producing it."""

    def __init__(self, path: str, command: str):
        self.path = path
        self.command = command
        super().__init__(f"missing {path}; run `ptkbcir {command}` first")
