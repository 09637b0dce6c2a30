"""Exception hierarchy shared by every tilecodec module."""


class TileCodecError(Exception):
    """Base class for all errors raised by tilecodec."""


class ShapeError(TileCodecError, ValueError):
    """An operand has the wrong shape for the requested operation."""


class ModelError(TileCodecError):
    """A model is missing, malformed or incompatible with the request."""


class DigestError(ModelError):
    """Serialized model bytes fail their integrity check."""


class StreamError(TileCodecError):
    """Base class for bitstream decoding failures."""


class BadMagicError(StreamError):
    pass


class UnsupportedVersionError(StreamError):
    pass


class TruncatedStreamError(StreamError):
    def __init__(self, expected: int, actual: int, what: str = "stream"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class PlanMismatchError(StreamError):
    """Tile plan and code payload disagree."""


class TrailingDataError(StreamError):
    pass


class ModelMismatchError(StreamError):
    """The stream was produced by a different model than the one supplied."""


class ImageFormatError(TileCodecError):
    """Image file is corrupt or malformed."""


class UnsupportedImageError(ImageFormatError):
    """Image file uses a valid but unsupported format variant."""
