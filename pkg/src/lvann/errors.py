"""Exception hierarchy.

Every error carries the process exit status the CLI should use, so library
callers and the command line agree on what kind of failure happened.
"""


class LVError(Exception):
    exit_code = 2
    code = "E_GENERIC"


class InputError(LVError, ValueError):
    """Bad user input: wrong dimensions, malformed files, bad values."""

    exit_code = 2
    code = "E_INPUT"


class DimensionMismatch(InputError):
    code = "E_DIM"


class MalformedHeader(InputError):
    code = "E_HEADER"


class VersionMismatch(InputError):
    code = "E_VERSION"


class MalformedRecord(InputError):
    code = "E_RECORD"

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class InfeasibleParameters(LVError):
    """A parameter combination that cannot be built (or not within caps)."""

    exit_code = 3
    code = "E_INFEASIBLE"

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class VerificationFailure(LVError):
    """Sampling could not produce a verified filter family."""

    exit_code = 3
    code = "E_VERIFY"

    def __init__(self, message, failing_pair=None):
        super().__init__(message)
        self.failing_pair = failing_pair


class DecodeOverflow(LVError):
    """A decoded filter set exceeded the configured size cap."""

    exit_code = 3
    code = "E_OVERFLOW"

    def __init__(self, message, point_id=None):
        super().__init__(message)
        self.point_id = point_id


class NotFound(LVError):
    """A search came up empty (splitting search or planted generation)."""

    exit_code = 3
    code = "E_NOTFOUND"


class ContractViolation(LVError):
    """A Las Vegas miss observed where the guarantee is unconditional."""

    exit_code = 1
    code = "E_CONTRACT"


class EstimationFailure(LVError):
    """Monte Carlo estimates are degenerate (zero counts or equal rates)."""

    exit_code = 3
    code = "E_ESTIMATE"
