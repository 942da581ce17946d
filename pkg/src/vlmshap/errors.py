"""Exception types shared across the package."""


class VlmShapError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(VlmShapError):
    """An input document does not match the expected schema."""


class MalformedEncoding(SchemaError):
    """A mask encoding cannot be decoded (bad runs, too few vertices, ...)."""


class DimensionMismatch(MalformedEncoding):
    """Shapes disagree: mask vs image dimensions, or embedding lengths."""


class EmptyObjectList(SchemaError):
    """A scene document declares no objects."""


class InvalidCoalition(VlmShapError):
    """A coalition references object ids outside the scene."""


class TooManyObjects(VlmShapError):
    """Exact enumeration was requested above the powerset threshold."""


class IncompleteTable(VlmShapError):
    """Exact Shapley computation requires all coalitions to be valued."""


class UncoveredObject(VlmShapError):
    """Sampled estimation needs every object both included and excluded."""


class TransportError(VlmShapError):
    """An endpoint stayed unreachable or kept failing after all retries."""


class AuthError(VlmShapError):
    """Authentication material is missing or was rejected by the endpoint."""


class RateLimited(VlmShapError):
    """The endpoint kept throttling requests past the retry budget."""


class ModelRefusal(VlmShapError):
    """The model returned an empty or filtered response."""


class ZeroVector(VlmShapError):
    """Cosine similarity is undefined for an all-zero embedding."""


class MismatchedResult(VlmShapError):
    """An attribution result does not fit the scene it is rendered over."""
