"""
Exception types shared by the simulator modules.
"""


class NeuroSimException(Exception):
    """Base exception for errors raised by the processing element simulator."""
    pass


class InvalidScale(NeuroSimException, ValueError):
    """Exception raised when a quantization scale is not strictly positive."""
    pass


class PlacementInfeasible(NeuroSimException):
    """Exception raised when a layer cannot be fitted into the per-PE SRAM budget."""
    pass


class DivergenceError(NeuroSimException):
    """Exception raised when the simulated arm leaves its configured angle bound."""
    pass


class ConfigError(NeuroSimException):
    """Exception raised for invalid settings files, config files or CLI values."""
    pass


class FormatError(NeuroSimException):
    """Exception raised when a weight or snapshot file is malformed."""
    pass
