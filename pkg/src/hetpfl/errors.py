"""Exception types shared across the package."""


class HetPFLError(Exception):
    """Base class for all package errors."""


class DimensionError(HetPFLError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HetPFLError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(HetPFLError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class SchemaError(HetPFLError, ValueError):
    """Input file or config does not match its declared schema."""


class ParseError(HetPFLError, ValueError):
    """A cell or field could not be parsed."""


class PartitionError(HetPFLError, RuntimeError):
    """Could not produce a split or partition satisfying the constraints."""


class ConfigError(HetPFLError, ValueError):
    """Experiment configuration is invalid."""


class ChecksumError(HetPFLError, ValueError):
    """A checkpoint failed its integrity check."""


class ProtocolError(HetPFLError, RuntimeError):
    """Federated protocol state is inconsistent (e.g. a missing client)."""
