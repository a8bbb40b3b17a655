"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument or state violated a documented precondition."""


class DomainError(ContractViolation):
    """A math op was evaluated outside its domain (log of nonpositive, etc.)."""


class DataFormatError(Exception):
    """A serialized artifact could not be parsed; message carries a byte offset."""


class SimulationDiverged(RuntimeError):
    """A simulation or training run produced non-finite state; the message
    carries the frame or iteration index."""
