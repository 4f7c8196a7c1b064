"""
Exceptions raised across the toolkit.

Everything derives from VerigraphError so the CLI can catch one type and turn it
into an exit status.
"""


class VerigraphError(Exception):
    """Base class for every error raised by the toolkit."""


# graph-core
class GraphError(VerigraphError):
    pass


class MalformedGraph(GraphError):
    """Unbalanced brackets, empty input or a non-list structure."""


class ArityViolation(GraphError):
    """An inner list does not hold exactly three elements."""


class EmptyField(GraphError):
    """A triple field is empty after trimming or normalization."""


# data sets
class EmptyGraph(VerigraphError):
    pass


class EmptySeed(VerigraphError):
    pass


class EmptyCorpus(VerigraphError):
    pass


class EmptyDataset(VerigraphError):
    pass


class IdMismatch(VerigraphError):
    pass


class DatasetFormatError(VerigraphError):
    def __init__(self, path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ConfigError(VerigraphError):
    pass


# prompts
class MissingTriplesRequired(VerigraphError):
    pass


class MalformedDemoFile(VerigraphError):
    pass


# backends
class UnrecognizedPrompt(VerigraphError):
    pass


class UnparsableVerdict(VerigraphError):
    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"verifier output is neither 'Correct' nor triples: {raw[:120]!r}")


class SimilarityBackendFailure(VerigraphError):
    pass


class BackendError(VerigraphError):
    pass


class AuthError(BackendError):
    pass


class RateLimited(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class UnknownReference(BackendError):
    pass
