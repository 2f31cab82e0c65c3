"""Exception types shared across the toolkit."""


class SnarekitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SnarekitError, ValueError):
    """Operand dimensions do not match the operation's contract."""


class ContractError(SnarekitError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss root)."""


class SingularMatrixError(SnarekitError, ArithmeticError):
    """A linear system is singular; the message names the rank deficiency."""


class RankDeficiencyError(SnarekitError, ValueError):
    """A constraint matrix fails the full-row-rank precondition."""


class GenerationError(SnarekitError, RuntimeError):
    """Instance generation could not certify feasibility within the retry budget."""


class RolloutError(SnarekitError, RuntimeError):
    """A trajectory rollout produced a nonfinite state; message names the step."""


class TrainingDivergedError(SnarekitError, RuntimeError):
    """Training aborted on a nonfinite loss; message names instance and epoch."""
