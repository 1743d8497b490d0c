"""Exception hierarchy shared by all modules."""


class XaiCanonError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(XaiCanonError, ValueError):
    """Tensor shapes do not conform."""


class ParameterError(XaiCanonError, ValueError):
    """Layer parameters are outside their valid domain."""


class DegenerateChannelError(ParameterError):
    """A BatchNorm channel has a (near) zero scale, so a rewrite is undefined."""

    def __init__(self, channel: int, value: float, node_id: str | None = None):
        self.channel = channel
        self.value = value
        self.node_id = node_id
        where = f" in node {node_id!r}" if node_id else ""
        super().__init__(f"degenerate BatchNorm channel {channel}{where}: |w_BN| = {abs(value):.3e}")


class GraphError(XaiCanonError):
    """Structural problem in a model graph."""

    def __init__(self, message: str, node_id: str | None = None):
        self.node_id = node_id
        super().__init__(message)


class ManifestParseError(GraphError):
    pass


class DanglingReferenceError(GraphError):
    pass


class BlobRangeError(GraphError):
    pass


class CycleError(GraphError):
    pass


class NodeShapeError(GraphError, DimensionError):
    """Shape mismatch while evaluating a particular node."""


class MetricError(XaiCanonError, ValueError):
    """A metric precondition does not hold."""


class EmptyMaskError(MetricError):
    pass


class ZeroMassError(MetricError):
    pass


class DatasetError(XaiCanonError):
    def __init__(self, message: str, sample_id: str | None = None):
        self.sample_id = sample_id
        super().__init__(message)
