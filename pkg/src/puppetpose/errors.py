"""Exception hierarchy shared across the package."""


class PuppetError(Exception):
    """Base class for every error raised by puppetpose."""


class InvalidInputError(PuppetError, ValueError):
    pass


class DegenerateFrameError(PuppetError, ValueError):
    """A Gram-Schmidt frame collapsed (zero or face-parallel parent limb)."""


class DegenerateInputError(PuppetError, ValueError):
    pass


class BehindCameraError(PuppetError, ValueError):
    pass


class ConfigError(PuppetError, ValueError):
    pass


class TemplateError(PuppetError, ValueError):
    pass


class SchemaError(PuppetError, ValueError):
    pass


class DecodeError(PuppetError, ValueError):
    pass


class UnsupportedOpError(PuppetError, RuntimeError):
    """A non-differentiable primitive was reached while differentiating."""


class NumericError(PuppetError, FloatingPointError):
    pass


class FitFailureError(PuppetError, RuntimeError):
    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces or []
