"""Exception types shared across the package."""


class LatentSteerError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentSteerError):
    """A run configuration failed validation.

    Carries a list of (field, message) pairs so callers can render
    per-field diagnostics.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.problems))


class ContractError(LatentSteerError):
    """An operation was called with arguments violating its contract."""


class DegenerateWeightsError(ContractError):
    """All guidance target weights are zero, the objective is undefined."""


class DivergedError(LatentSteerError):
    """A non-finite value appeared during optimization.

    ``stage`` names the pipeline stage whose output first went bad.
    """

    def __init__(self, stage, detail=""):
        self.stage = stage
        msg = f"non-finite value at stage '{stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class BackendError(LatentSteerError):
    """The attached model backend reported a failure."""


class ProtocolError(BackendError):
    """Malformed bytes on the backend wire.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class CheckpointError(LatentSteerError):
    """A checkpoint file is corrupt or belongs to a different run shape."""


class IllegalTransition(LatentSteerError):
    """A job control verb is not legal in the job's current phase."""

    def __init__(self, phase, verb):
        self.phase = phase
        self.verb = verb
        super().__init__(f"cannot {verb} a job in phase '{phase}'")
