"""
Exception hierarchy shared by all modules.
Each family maps to one CLI exit code (see cli.py).
"""


class VolcastError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class ConfigError(VolcastError, ValueError):
    exit_code = 1


class DataError(VolcastError, ValueError):
    exit_code = 2


class NumericalError(VolcastError, ArithmeticError):
    exit_code = 3


class TrainingDivergedError(NumericalError):
    """Non-finite loss during training, with enough context to reproduce it."""

    def __init__(self, epoch, batch, parameter_norms, loss):
        self.epoch = epoch
        self.batch = batch
        self.parameter_norms = list(parameter_norms)
        self.loss = loss
        norms = ", ".join(f"{n:.4g}" for n in self.parameter_norms)
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}; "
            f"parameter norms per layer: [{norms}]"
        )

    def __reduce__(self):
        return type(self), (self.epoch, self.batch, self.parameter_norms, self.loss)


class ArimaFitError(NumericalError):
    def __init__(self, series_name, reason):
        self.series_name = series_name
        self.reason = reason
        super().__init__(f"ARIMA fit failed for {series_name}: {reason}")

    def __reduce__(self):
        return type(self), (self.series_name, self.reason)


class StageError(VolcastError):
    """A failure inside one experiment stage, tagged with the stage and stock."""

    def __init__(self, stage, ticker, cause):
        self.stage = stage
        self.ticker = ticker
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        where = f"stage '{stage}'" + (f" for {ticker}" if ticker else "")
        super().__init__(f"{where} failed: {cause}")

    def __reduce__(self):
        return type(self), (self.stage, self.ticker, self.cause)
