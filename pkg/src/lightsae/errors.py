"""Exception hierarchy shared by every module.

CLI exit codes key off these classes: ``InputError`` subclasses map to 2,
``ConfigError`` subclasses map to 3.
"""


class LightSAEError(Exception):
    """Base class for all package errors."""


class InputError(LightSAEError):
    """Bad input data or environment (missing files, unparsable CSV)."""


class ConfigError(LightSAEError):
    """Invalid configuration or a request the chosen variant cannot serve."""


class DimensionError(ConfigError, ValueError):
    pass


class ContractError(ConfigError, ValueError):
    pass


class NonFiniteError(ContractError, FloatingPointError):
    pass


class VariantError(ConfigError):
    pass


class ParseError(InputError, ValueError):
    pass


class ProtocolError(ConfigError, ValueError):
    pass
