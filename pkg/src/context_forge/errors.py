"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition on arguments or configuration was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf values."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, step=None, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class GenerationError(RuntimeError):
    """A synthetic scene could not be generated under its constraints."""


class ModelError(RuntimeError):
    """Model weights are unusable (e.g. contain NaN)."""
