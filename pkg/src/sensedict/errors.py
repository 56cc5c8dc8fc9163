"""Exception types shared across the package.

Two families matter to callers: FormatError for malformed or corrupt
input bytes, and ContractError for operations invoked with invalid
arguments or degenerate data. The CLI maps the families to distinct
exit codes.
"""


class SenseDictError(Exception):
    """Base class for all package errors."""


class FormatError(SenseDictError):
    """Input bytes do not conform to a file format contract."""


class ContractError(SenseDictError):
    """An operation was invoked outside its numerical/argument contract."""


# --- file format errors ---

class BadMagic(FormatError):
    """Leading magic bytes do not identify the expected format."""


class UnsupportedVersion(FormatError):
    """Recognized format but unknown version or value-type code."""


class ZeroDim(FormatError):
    """Header declares a zero embedding dimension."""


class TruncatedRecord(FormatError):
    """Stream ended in the middle of a record."""


class TruncatedFile(FormatError):
    """File is shorter than its own structure requires."""


class NonFiniteValue(FormatError):
    """Payload contains NaN or infinity."""


class ChecksumMismatch(FormatError):
    """CRC-32 footer does not match file contents."""


# --- operation contract errors ---

class DimMismatch(ContractError):
    """Vector dimensionality disagrees with the expected dimension."""


class EmptyInput(ContractError):
    """Operation requires at least one input point/record."""


class ZeroVector(ContractError):
    """A zero-norm vector where a direction is required."""


class LabelOutOfRange(ContractError):
    """Class label index outside the valid range."""


class StreamMisaligned(ContractError):
    """Paired streams differ in length or token sequence."""


class EmptyTrainingSet(ContractError):
    """No usable training records after filtering."""


class LengthMismatch(ContractError):
    """Paired lists have different lengths."""


class DegenerateInput(ContractError):
    """Input admits no defined answer (e.g. constant list correlation)."""


class NotInDictionary(SenseDictError):
    """Token has no entry in the sense dictionary.

    A lookup signal rather than a failure: callers implement their own
    fallback (typically passing the contextual embedding through).
    """

    def __init__(self, token: int):
        super().__init__(f"token {token} not in dictionary")
        self.token = token
