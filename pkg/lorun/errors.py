"""Exception hierarchy. Library code raises these; only the cli maps them to exit codes."""


class LorunError(Exception):
    pass


class ShapeError(LorunError, ValueError):
    """Dimension or shape mismatch."""


class ContractError(LorunError, ValueError):
    """A precondition of an operation was violated."""


class UnsupportedError(LorunError):
    pass


class ConfigError(LorunError):
    pass


class GramSolveError(LorunError):
    def __init__(self, msg, residual, iterations):
        super().__init__(f"{msg} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class FormatError(LorunError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} at byte offset {offset}")
        self.offset = offset


class CheckpointSchemaError(LorunError):
    def __init__(self, msg, expected_digest=None, found_digest=None, names=()):
        detail = msg
        if expected_digest or found_digest:
            detail += f" (expected digest {expected_digest}, found {found_digest})"
        if names:
            detail += ": " + ", ".join(names)
        super().__init__(detail)
        self.expected_digest = expected_digest
        self.found_digest = found_digest
        self.names = list(names)


class FrozenWeightDriftError(LorunError):
    def __init__(self, names):
        super().__init__("frozen tensors changed during fine-tuning: " + ", ".join(names))
        self.names = list(names)
