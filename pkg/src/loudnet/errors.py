"""Exception types shared across the toolkit."""


class LoudnetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LoudnetError):
    """Invalid configuration, flags, or input paths."""


class FormatError(LoudnetError):
    """Malformed or truncated binary file (bad magic, version, or size)."""


class CalibrationError(LoudnetError):
    """Oracle calibration failed to converge or verify."""


class DivergenceError(LoudnetError):
    """Training loss became non-finite."""
