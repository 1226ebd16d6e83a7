class SimulError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(SimulError):
    def __init__(self, op_kind: str, shapes, reason: str = "shape mismatch"):
        self.op_kind = op_kind
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op_kind}: {reason} {self.shapes}")


class NonFiniteError(SimulError):
    pass


class ConfigError(SimulError):
    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"invalid config key '{key}': {reason}")


class VocabularyError(SimulError):
    def __init__(self, token_id: int, vocab_size: int):
        self.token_id = token_id
        self.vocab_size = vocab_size
        super().__init__(f"token id {token_id} outside vocabulary of size {vocab_size}")


class InfeasibleAlignmentError(SimulError):
    def __init__(self, input_length: int, required: int):
        self.input_length = input_length
        self.required = required
        super().__init__(
            f"{input_length} frames cannot align a target needing {required} frames"
        )


class CorpusFormatError(SimulError):
    def __init__(self, path, line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class IncompleteTraceError(SimulError):
    pass


class CheckpointError(SimulError):
    def __init__(self, reason: str, mismatched=()):
        self.mismatched = list(mismatched)
        detail = f" ({', '.join(self.mismatched)})" if self.mismatched else ""
        super().__init__(reason + detail)
