class LoraTwinError(Exception):
    """Base class; ``str(err)`` is a single machine-parsable line."""

    kind = "error"

    def __str__(self):
        return f"{self.kind}: {super().__str__()}"


class ValidationError(LoraTwinError, ValueError):
    kind = "validation_error"

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ConfigError(LoraTwinError, ValueError):
    kind = "config_error"


class SimulationError(LoraTwinError, RuntimeError):
    kind = "simulation_error"

    def __init__(self, message: str, request_id: int | None = None):
        self.request_id = request_id
        super().__init__(message if request_id is None else f"{message} (request {request_id})")


class FittingError(LoraTwinError, ValueError):
    kind = "fitting_error"


class TrainingError(LoraTwinError, ValueError):
    kind = "training_error"
