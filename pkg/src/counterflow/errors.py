"""Exception types shared across the package.

PreconditionError subclasses signal bad inputs or missing prerequisites
(CLI exit code 2); everything else derived from CounterflowError is a
runtime failure (exit code 1).
"""


class CounterflowError(Exception):
    pass


class PreconditionError(CounterflowError):
    pass


class ParseError(PreconditionError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class EmptyCorpusError(PreconditionError):
    pass


class InsufficientOccurrencesError(PreconditionError):
    def __init__(self, word, count, required):
        self.word = word
        self.count = count
        self.required = required
        super().__init__(
            f"word {word!r} has {count} occurrence(s), {required} required"
        )


class DimensionMismatchError(PreconditionError):
    pass


class BackendError(CounterflowError):
    pass


class TrainingDivergenceError(CounterflowError):
    def __init__(self, epoch, detail="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


class NumericOverflowError(CounterflowError):
    def __init__(self, layer_index, direction="forward"):
        self.layer_index = layer_index
        super().__init__(
            f"non-finite values in {direction} pass at layer {layer_index}"
        )


class NotFittedError(PreconditionError):
    pass


class EstimationError(CounterflowError):
    pass


class UndefinedMetricError(PreconditionError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"metric undefined: empty conditioning cell {cell}")


class InsufficientCellError(PreconditionError):
    def __init__(self, cell, have, need):
        self.cell = cell
        super().__init__(
            f"cell {cell} has {have} instance(s), {need} required"
        )


class MissingArtifactError(PreconditionError):
    def __init__(self, stage, path):
        self.stage = stage
        super().__init__(
            f"missing artifact {path}; run the {stage!r} stage first"
        )


class ConfigMismatchError(PreconditionError):
    pass


class LockHeldError(PreconditionError):
    pass
