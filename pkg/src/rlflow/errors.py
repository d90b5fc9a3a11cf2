"""Exception hierarchy shared by every rlflow module."""


class RLFlowError(Exception):
    """Base class for all errors raised by rlflow."""


class InvalidArgument(RLFlowError, ValueError):
    pass


# -- workflow / scenario validation ---------------------------------------


class WorkflowError(RLFlowError):
    pass


class UnknownPolicy(WorkflowError):
    def __init__(self, role, policy=None):
        self.role = role
        self.policy = policy
        super().__init__(f"unknown-policy({role})" + (f": {policy!r} not declared" if policy else ""))


class DuplicateRole(WorkflowError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"duplicate-role({name})")


class ScenarioError(RLFlowError):
    pass


class ScenarioParseError(ScenarioError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        prefix = f"parse-error ({', '.join(where)})" if where else "parse-error"
        super().__init__(f"{prefix}: {message}")


class ScenarioValidationError(ScenarioError):
    def __init__(self, invariant, message):
        self.invariant = invariant
        super().__init__(f"validation-error {invariant}: {message}")


# -- dataflow layer -------------------------------------------------------


class DataflowError(RLFlowError):
    pass


class UnknownRaas(DataflowError, KeyError):
    def __str__(self):
        return f"unknown-raas({self.args[0]})"


class DuplicateRaas(DataflowError):
    pass


class UnknownTrainer(DataflowError, KeyError):
    def __str__(self):
        return f"unknown-trainer({self.args[0]})"


class UnregisteredWorkflow(DataflowError):
    pass


class EmptyWindow(DataflowError):
    pass


# -- weight transfer ------------------------------------------------------


class WeightError(RLFlowError):
    pass


class LengthMismatch(WeightError):
    pass


class VersionMismatch(WeightError):
    pass


class IndexOutOfRange(WeightError):
    pass


class NonMonotoneVersion(WeightError):
    pass


class CodecError(WeightError):
    pass


class BadMagic(CodecError):
    pass


class BadMode(CodecError):
    pass


class Truncated(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


class UnsortedIndices(CodecError):
    pass


# -- autoscaler -----------------------------------------------------------


class AutoscaleError(RLFlowError):
    pass


class InsufficientCapacity(AutoscaleError):
    pass


class ExecutorFailure(AutoscaleError):
    pass
