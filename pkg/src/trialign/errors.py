"""Shared exception types."""


class FormatError(ValueError):
    """A binary or JSON artifact does not match its documented layout."""


class ConfigError(ValueError):
    """A run configuration is malformed: unknown keys, bad values, missing files."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient.

    Carries the step index and the loss components observed when the run
    aborted, so the failure can be written out as a diagnostic record.
    """

    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = dict(components)
        super().__init__(f"non-finite value at step {step}: {self.components}")
