class NdgradError(ValueError):
    """Base class for autodiff errors."""


class ShapeMismatchError(NdgradError):
    pass


class AxisError(NdgradError):
    pass


class NonScalarRootError(NdgradError):
    pass
