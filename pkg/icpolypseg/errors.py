from typing import Optional


class ContractViolation(ValueError):
    """A shape, channel, size or config contract was broken."""


class NonFiniteError(ArithmeticError):
    def __init__(self, message: str, *, stage: Optional[str] = None, batch_index: Optional[int] = None):
        super().__init__(message)
        self.stage = stage
        self.batch_index = batch_index


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    def __init__(self, message: str, mismatches: Optional[list] = None):
        super().__init__(message)
        self.mismatches = list(mismatches or [])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
