"""Exception hierarchy for the NRTR toolkit."""

from pathlib import Path


class NrtrError(Exception):
    """Base class for every error raised by the toolkit."""


class SwcParseError(NrtrError, ValueError):
    """A line of an SWC file could not be parsed."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SwcStructureError(NrtrError, ValueError):
    """An SWC forest violates its structural invariants."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class VolumeFormatError(NrtrError, OSError):
    """A volume container is missing, corrupt or inconsistent."""


class ShapeError(NrtrError, ValueError):
    """Tensor operands have incompatible shapes."""


class DimensionError(NrtrError, ValueError):
    """A matrix or set has the wrong size for the requested operation."""


class ConfigError(NrtrError, ValueError):
    """A configuration value violates its invariants."""


class ConfigMismatchError(ConfigError):
    """A checkpoint was written for a different model configuration."""


class CheckpointError(NrtrError, OSError):
    """A parameter store file is truncated or malformed."""


class GenerationError(NrtrError, ValueError):
    """A synthetic forest could not be generated from its spec."""


class EmptyDatasetError(NrtrError, ValueError):
    """No training sample survived filtering."""


class NonFiniteLossError(NrtrError, ArithmeticError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, batch_ids: list[int], dump_path: Path | None):
        where = f", diagnostics in {dump_path}" if dump_path else ""
        super().__init__(
            f"non-finite loss at step {step} for samples {batch_ids}{where}"
        )
        self.step = step
        self.batch_ids = batch_ids
        self.dump_path = dump_path


class InvalidCostError(NrtrError, ValueError):
    """A cost matrix holds NaN or infinite entries."""
