"""Exception types shared across the package."""


class KavanError(Exception):
    """Base class for all package errors."""


class DimensionError(KavanError, ValueError):
    """Operand shapes are incompatible."""


class NumericInputError(KavanError, ValueError):
    """An input contained NaN or infinite values."""


class ContractError(KavanError, ValueError):
    """A caller violated a documented precondition."""


class ConfigurationError(KavanError, ValueError):
    """A configuration is inconsistent or incomplete."""


class DegenerateTargetError(KavanError, ValueError):
    """A regression target has (near) zero variance."""


class NumericAbort(KavanError, RuntimeError):
    """Training produced a non-finite loss and was stopped."""

    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
