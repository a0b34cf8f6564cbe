"""Exception hierarchy. Every error raised on purpose derives from ExpBankError."""


class ExpBankError(Exception):
    pass


class ConfigError(ExpBankError, ValueError):
    pass


# ingestion / domain model
class MalformedRecord(ExpBankError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class InconsistentOutcome(ExpBankError, ValueError):
    pass


class DuplicateTrajectoryId(ExpBankError, ValueError):
    def __init__(self, trajectory_id: str):
        self.trajectory_id = trajectory_id
        super().__init__(f"duplicate trajectory id {trajectory_id!r}")


# viewpoints / embeddings
class UnknownViewpoint(ExpBankError, KeyError):
    def __str__(self) -> str:
        return f"unknown viewpoint {self.args[0]!r}"


class DimensionMismatch(ExpBankError, ValueError):
    pass


class ZeroNorm(ExpBankError, ArithmeticError):
    pass


class NonUnitNorm(ExpBankError, ValueError):
    pass


class EmbedderUnavailable(ExpBankError, RuntimeError):
    pass


# judging
class JudgementError(ExpBankError, ValueError):
    step: int | None = None


class UnparseableJudgement(JudgementError):
    pass


class OutOfRangeScore(JudgementError):
    def __init__(self, step: int, q_value: float):
        self.step = step
        self.q_value = q_value
        super().__init__(f"step {step}: q_value {q_value!r} outside [0, 10]")


class DuplicateStep(JudgementError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"step {step} judged more than once")


class StepOutOfRange(JudgementError):
    def __init__(self, step: int, length: int):
        self.step = step
        super().__init__(f"step {step} not in 0..{length - 1}")


class GroundTruthLeak(JudgementError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"step {step}: experience text mentions the ground truth")


class MissingScriptEntry(ExpBankError, KeyError):
    pass


class JudgeFailure(ExpBankError, RuntimeError):
    pass


# bank / index
class DuplicateId(ExpBankError, ValueError):
    pass


class MissingViewpointEmbedding(ExpBankError, ValueError):
    pass


# persistence
class VersionMismatch(ExpBankError, ValueError):
    pass


class ChecksumMismatch(ExpBankError, ValueError):
    pass


class CorruptRecord(ExpBankError, ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class IoFailure(ExpBankError, OSError):
    pass
