"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class SchemaMismatch(PipelineError):
    def __init__(self, column, detail="missing or unknown column"):
        self.column = column
        super().__init__(f"{column}: {detail}")


class ParseError(PipelineError):
    def __init__(self, row, column, content):
        self.row = row
        self.column = column
        self.content = content
        super().__init__(f"row {row}, column {column!r}: cannot parse {content!r}")


class DegenerateSleepRecord(PipelineError):
    """Raised when minutes asleep and minutes awake are both zero."""


class UnknownCategory(PipelineError):
    def __init__(self, feature, label):
        self.feature = feature
        self.label = label
        super().__init__(f"feature {feature!r} has no code for label {label!r}")


class EmptyJoin(PipelineError):
    pass


class EmptyResult(PipelineError):
    pass


class EmptyInput(PipelineError):
    pass


class InvalidFraction(PipelineError):
    pass


class InvalidConfig(PipelineError):
    pass


class ShapeError(PipelineError):
    pass


class UnknownArchitecture(PipelineError):
    pass


class DivergedError(PipelineError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")


class KTooLarge(PipelineError):
    pass


class LengthMismatch(PipelineError):
    pass
