class SparseCLError(Exception):
    """Base class for every error raised by sparsecl."""


class DimensionError(SparseCLError, ValueError):
    pass


class NumericError(SparseCLError, FloatingPointError):
    pass


class DegenerateEmbeddingError(NumericError):
    pass


class ScheduleExhaustedError(SparseCLError, ValueError):
    pass


class ArgumentError(SparseCLError, ValueError):
    pass


class EmptyBufferError(SparseCLError, LookupError):
    pass


class StateError(SparseCLError, RuntimeError):
    pass


class UndefinedMetricError(SparseCLError, ValueError):
    pass


class ParseError(SparseCLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(SparseCLError, ValueError):
    pass


class ConfigError(SparseCLError, ValueError):
    """Invalid configuration; ``key_path`` names the offending key."""

    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class TrainingError(SparseCLError, RuntimeError):
    """Training aborted; carries the (seed, task) context where it happened."""

    def __init__(self, message, seed=None, task=None):
        self.seed = seed
        self.task = task
        ctx = []
        if seed is not None:
            ctx.append(f"seed={seed}")
        if task is not None:
            ctx.append(f"task={task}")
        if ctx:
            message = f"[{', '.join(ctx)}] {message}"
        super().__init__(message)
