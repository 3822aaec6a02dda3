# errors.py
from typing import Optional


class AmpcError(Exception):
    """Base error. ``exit_code`` is what the CLI exits with when it escapes."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ContractViolation(AmpcError):
    pass


class SolverFailure(AmpcError):
    pass


class TrainingFailure(AmpcError):
    pass


class UnsupportedConfiguration(AmpcError):
    pass


class MissingArtifact(AmpcError):
    def __init__(self, path):
        super().__init__(f"Missing input artifact: {path}")
        self.path = path


class ProvenanceMismatch(AmpcError):
    pass
