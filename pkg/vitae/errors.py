

class VitaeError(Exception):
    """
    Base of every error raised on purpose by the package.
    exit_code is what the command line returns when it escapes a command.
    """
    exit_code = 2


class ConfigurationError(VitaeError):
    pass


class DimensionError(VitaeError):
    pass


class UsageError(VitaeError):
    pass


class FormatError(VitaeError):
    pass


class DataError(VitaeError):
    pass


class ExportError(VitaeError):
    pass


class VerificationError(VitaeError):
    exit_code = 1


class DivergenceError(VitaeError):
    exit_code = 3
