"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class LabelError(ValueError):
    """Target labels are outside the allowed set."""


class StateError(ValueError):
    """Optimizer or telemetry state does not match the parameters."""


class TelemetryError(StateError):
    pass


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs."""


class NonDeterministicError(RuntimeError):
    """A function expected to be deterministic returned different values."""


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite during training."""

    def __init__(self, epoch, batch, loss_tail):
        self.epoch = epoch
        self.batch = batch
        self.loss_tail = list(loss_tail)
        tail = ", ".join(f"{v:.6g}" for v in self.loss_tail)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; recent losses: [{tail}]"
        )
