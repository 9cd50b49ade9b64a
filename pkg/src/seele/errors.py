"""Exception hierarchy. User-facing input problems map to CLI exit code 2,
internal contract violations to exit code 3."""


class SeeleError(Exception):
    pass


class UserInputError(SeeleError):
    """Bad files, bad values, bad arguments: the caller's fault."""


class SchemaError(UserInputError):
    """A structural problem in an input file (missing property, wrong layout)."""


class DataError(UserInputError):
    """Structurally valid input carrying unusable values."""


class CorruptionError(UserInputError):
    """A compiled scene container that does not match its manifest."""


class InvalidArgumentError(UserInputError, ValueError):
    """An API call with out-of-contract arguments."""


class ContractViolationError(SeeleError):
    """An internal precondition broke; indicates a pipeline bug."""
