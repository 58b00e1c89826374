from typing import Optional


class GradualCamError(Exception):
    pass


class InvalidArgumentError(GradualCamError, ValueError):
    pass


class ShapeError(GradualCamError, ValueError):
    pass


class ValidationError(GradualCamError, ValueError):
    pass


class ParseError(GradualCamError, ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TrainingError(GradualCamError, RuntimeError):
    def __init__(self, message: str, epoch: Optional[int] = None) -> None:
        super().__init__(message)
        self.epoch = epoch


class EmptyCohortError(GradualCamError, RuntimeError):
    pass
